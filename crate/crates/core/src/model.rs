//! Core vocabulary shared by every part of the simulator: time, identifiers,
//! requests, dispatch records, endpoints and the cost model.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes of the fixed dispatch record header: code pointer, data pointer and
/// a 16-bit argument length.
pub const RECORD_HEADER_BYTES: usize = 8 + 8 + 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("argument payload of {len} bytes is at or above the DMA threshold ({threshold} bytes)")]
    Oversize { len: usize, threshold: u32 },
    #[error("corrupt dispatch record: {0}")]
    Corrupt(String),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
}

/// Simulated time in integer nanoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, ns: u64) -> SimTime {
        SimTime(self.0 + ns)
    }
}

impl Sub for SimTime {
    type Output = u64;
    fn sub(self, other: SimTime) -> u64 {
        self.0 - other.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident, $inner:ty) => {
        $(#[$m])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(CoreId, u16);
id_type!(
    /// A NIC-homed cache line.
    LineId,
    u32
);
id_type!(EndpointId, u32);
id_type!(
    /// Service and its serving process are one-to-one in this model.
    ServiceId,
    u32
);
id_type!(RequestId, u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_addr: u32,
    pub src_port: u16,
    pub dst_addr: u32,
    pub dst_port: u16,
}

impl FlowKey {
    /// Flow hash used by the baseline NIC to pick a receive ring (FNV-1a).
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let bytes = self
            .src_addr
            .to_le_bytes()
            .into_iter()
            .chain(self.src_port.to_le_bytes())
            .chain(self.dst_addr.to_le_bytes())
            .chain(self.dst_port.to_le_bytes());
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpcRequest {
    pub request_id: RequestId,
    pub flow_key: FlowKey,
    pub service_id: ServiceId,
    pub method_id: u16,
    pub args_len: u32,
    pub arrival_time: SimTime,
    /// Handler execution time, drawn once by the workload so every NIC model
    /// sees the same work.
    pub handler_ns: u64,
}

/// The minimal unmarshalled unit the NIC writes into a core's cache.
///
/// Layout of the CONTROL line: `code_ptr` (8 B LE), `data_ptr` (8 B LE),
/// `args_len` (2 B LE), then up to `line_size - 18` inline argument bytes.
/// Remaining argument bytes spill into AUXILIARY lines, zero padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchRecord {
    pub code_ptr: u64,
    pub data_ptr: u64,
    pub args_len: u16,
    pub inline_args: Vec<u8>,
    pub overflow_args: Vec<u8>,
    pub aux_count: u32,
    pub line_size: u32,
}

/// Number of auxiliary lines a payload of `args_len` bytes needs.
pub fn aux_line_count(args_len: usize, line_size: usize) -> u32 {
    let inline = line_size - RECORD_HEADER_BYTES;
    args_len.saturating_sub(inline).div_ceil(line_size) as u32
}

pub fn encode_dispatch_record(
    code_ptr: u64,
    data_ptr: u64,
    args: &[u8],
    cost: &CostModel,
) -> Result<DispatchRecord, ModelError> {
    if args.len() >= cost.dma_threshold as usize {
        return Err(ModelError::Oversize {
            len: args.len(),
            threshold: cost.dma_threshold,
        });
    }
    let line = cost.line_size as usize;
    let inline_cap = line - RECORD_HEADER_BYTES;
    let split = args.len().min(inline_cap);
    Ok(DispatchRecord {
        code_ptr,
        data_ptr,
        args_len: args.len() as u16,
        inline_args: args[..split].to_vec(),
        overflow_args: args[split..].to_vec(),
        aux_count: aux_line_count(args.len(), line),
        line_size: cost.line_size,
    })
}

impl DispatchRecord {
    /// Serialises into one CONTROL line followed by `aux_count` AUXILIARY lines.
    pub fn to_lines(&self) -> Vec<Vec<u8>> {
        let line = self.line_size as usize;
        let mut control = Vec::with_capacity(line);
        control.extend_from_slice(&self.code_ptr.to_le_bytes());
        control.extend_from_slice(&self.data_ptr.to_le_bytes());
        control.extend_from_slice(&self.args_len.to_le_bytes());
        control.extend_from_slice(&self.inline_args);
        control.resize(line, 0);

        let mut lines = vec![control];
        for chunk in self.overflow_args.chunks(line) {
            let mut aux = chunk.to_vec();
            aux.resize(line, 0);
            lines.push(aux);
        }
        lines
    }

    pub fn args(&self) -> Vec<u8> {
        let mut v = self.inline_args.clone();
        v.extend_from_slice(&self.overflow_args);
        v
    }
}

/// Decoded contents of a dispatch record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedRecord {
    pub code_ptr: u64,
    pub data_ptr: u64,
    pub args: Vec<u8>,
}

pub fn decode_dispatch_record(
    lines: &[Vec<u8>],
    cost: &CostModel,
) -> Result<DecodedRecord, ModelError> {
    let line = cost.line_size as usize;
    let control = lines
        .first()
        .ok_or_else(|| ModelError::Corrupt("no control line".into()))?;
    if let Some(bad) = lines.iter().find(|l| l.len() != line) {
        return Err(ModelError::Corrupt(format!(
            "line of {} bytes, expected {line}",
            bad.len()
        )));
    }
    let code_ptr = u64::from_le_bytes(control[0..8].try_into().unwrap());
    let data_ptr = u64::from_le_bytes(control[8..16].try_into().unwrap());
    let args_len = u16::from_le_bytes(control[16..18].try_into().unwrap()) as usize;
    if args_len >= cost.dma_threshold as usize {
        return Err(ModelError::Corrupt(format!(
            "length field {args_len} at or above the DMA threshold"
        )));
    }
    let aux = aux_line_count(args_len, line) as usize;
    if lines.len() != 1 + aux {
        return Err(ModelError::Corrupt(format!(
            "length field {args_len} needs {aux} auxiliary lines, got {}",
            lines.len() - 1
        )));
    }
    let inline_cap = line - RECORD_HEADER_BYTES;
    let mut args = Vec::with_capacity(args_len);
    args.extend_from_slice(&control[RECORD_HEADER_BYTES..RECORD_HEADER_BYTES + args_len.min(inline_cap)]);
    let mut rest = args_len.saturating_sub(inline_cap);
    for aux_line in &lines[1..] {
        let take = rest.min(line);
        args.extend_from_slice(&aux_line[..take]);
        rest -= take;
    }
    Ok(DecodedRecord {
        code_ptr,
        data_ptr,
        args,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointMode {
    Kernel,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EndpointOwner {
    /// The kernel dispatcher thread pinned to a core.
    Dispatcher(CoreId),
    Process(ServiceId),
}

/// Static description of an endpoint: two CONTROL lines and a contiguous run
/// of AUXILIARY lines, all homed on the NIC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub id: EndpointId,
    pub owner: EndpointOwner,
    pub mode: EndpointMode,
    pub control_lines: [LineId; 2],
    pub aux_base: LineId,
    pub aux_count: u32,
}

impl Endpoint {
    pub fn aux_lines(&self) -> impl Iterator<Item = LineId> + '_ {
        (0..self.aux_count).map(|i| LineId(self.aux_base.0 + i))
    }

    pub fn service(&self) -> Option<ServiceId> {
        match self.owner {
            EndpointOwner::Process(s) => Some(s),
            EndpointOwner::Dispatcher(_) => None,
        }
    }
}

/// Externally visible mode of a core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoreMode {
    Idle,
    KernelLoop,
    UserLoop,
    StalledOnLoad(LineId),
    Executing(RequestId),
    ContextSwitching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HandlerDist {
    Constant { ns: u64 },
    Exponential { mean_ns: u64 },
    Uniform { min_ns: u64, max_ns: u64 },
}

impl Default for HandlerDist {
    fn default() -> Self {
        HandlerDist::Exponential { mean_ns: 1_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Service {
    pub id: ServiceId,
    pub handler: HandlerDist,
    pub endpoints: Vec<EndpointId>,
    pub hotness_weight: f64,
}

/// Latency parameters (nanoseconds) for every receive pipeline stage of both
/// NIC designs. Numbered fields follow the twelve receive steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub line_size: u32,
    pub core_freq_mhz: u64,
    /// Steps 1-3, 5-6 and 10-11 executed by the NIC pipeline.
    pub nic_pipeline: u64,
    pub coherent_line_roundtrip: u64,
    pub dma_write: u64,
    pub descriptor_fetch: u64,
    /// Step 4.
    pub interrupt_delivery: u64,
    /// Step 5.
    pub kernel_proto_processing: u64,
    /// Step 6.
    pub process_lookup: u64,
    /// Step 7.
    pub core_selection: u64,
    /// Step 8.
    pub schedule_cost: u64,
    /// Step 9.
    pub context_switch: u64,
    /// Step 10, fixed part.
    pub unmarshal_fixed: u64,
    /// Step 10, per argument byte, in picoseconds.
    pub unmarshal_per_byte_ps: u64,
    /// Step 11.
    pub fn_lookup: u64,
    /// Step 12.
    pub jump_cost: u64,
    pub try_again_timeout: u64,
    pub dma_threshold: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            line_size: 128,
            core_freq_mhz: 2_000,
            nic_pipeline: 500,
            coherent_line_roundtrip: 700,
            dma_write: 900,
            descriptor_fetch: 600,
            interrupt_delivery: 2_000,
            kernel_proto_processing: 1_200,
            process_lookup: 300,
            core_selection: 200,
            schedule_cost: 800,
            context_switch: 1_500,
            unmarshal_fixed: 300,
            unmarshal_per_byte_ps: 250,
            fn_lookup: 100,
            jump_cost: 5,
            try_again_timeout: 15_000_000,
            dma_threshold: 4_096,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidCostModel(m));
        if self.line_size < 32 || !self.line_size.is_power_of_two() {
            return bad(format!(
                "line_size {} must be a power of two >= 32",
                self.line_size
            ));
        }
        if self.core_freq_mhz == 0 {
            return bad("core_freq_mhz must be positive".into());
        }
        if self.try_again_timeout == 0 {
            return bad("try_again_timeout must be positive".into());
        }
        if self.dma_threshold == 0 || self.dma_threshold > u16::MAX as u32 + 1 {
            return bad(format!(
                "dma_threshold {} must be in 1..=65536 (16-bit length field)",
                self.dma_threshold
            ));
        }
        // A coherent line round trip must beat a DMA write plus descriptor
        // handoff, interrupt or not.
        if self.coherent_line_roundtrip >= self.dma_write + self.descriptor_fetch {
            return bad(format!(
                "coherent_line_roundtrip ({}) must be below dma_write + descriptor_fetch ({})",
                self.coherent_line_roundtrip,
                self.dma_write + self.descriptor_fetch
            ));
        }
        // The same holds for a whole 64 B message, which on short lines
        // spills into an auxiliary line.
        let coherent = self.line_delivery(64) + self.coherent_line_roundtrip;
        let dma = 2 * (self.dma_write + self.descriptor_fetch);
        if coherent >= dma {
            return bad(format!(
                "64 B coherent round trip ({coherent}) must be below the DMA round trip ({dma})"
            ));
        }
        if self.interrupt_delivery == 0 {
            return bad("interrupt_delivery must be positive".into());
        }
        Ok(())
    }

    pub fn cycles(&self, ns: u64) -> u64 {
        ns * self.core_freq_mhz / 1_000
    }

    pub fn unmarshal(&self, args_len: u32) -> u64 {
        self.unmarshal_fixed + args_len as u64 * self.unmarshal_per_byte_ps / 1_000
    }

    pub fn aux_lines(&self, args_len: u32) -> u32 {
        aux_line_count(args_len as usize, self.line_size as usize)
    }

    /// Latency to move one line into a core: one coherent round trip, plus
    /// one more if auxiliary lines follow (they stream back to back).
    pub fn line_delivery(&self, args_len: u32) -> u64 {
        if self.aux_lines(args_len) > 0 {
            2 * self.coherent_line_roundtrip
        } else {
            self.coherent_line_roundtrip
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference packer: place bytes one at a time, filling the control line
    /// first and opening a new auxiliary line whenever the current one is full.
    fn brute_force_aux(args_len: usize, line_size: usize) -> u32 {
        let mut lines = 1u32;
        let mut used = RECORD_HEADER_BYTES;
        for _ in 0..args_len {
            if used == line_size {
                lines += 1;
                used = 0;
            }
            used += 1;
        }
        lines - 1
    }

    #[test]
    fn aux_count_matches_brute_force_packer() {
        for line in [64usize, 128, 256] {
            for len in 0..=1024 {
                assert_eq!(
                    aux_line_count(len, line),
                    brute_force_aux(len, line),
                    "len {len} line {line}"
                );
            }
        }
    }

    #[test]
    fn inline_boundary_at_default_line_size() {
        let cost = CostModel::default();
        let r = encode_dispatch_record(1, 2, &[7u8; 110], &cost).unwrap();
        assert_eq!(r.aux_count, 0);
        assert_eq!(r.to_lines().len(), 1);
        let r = encode_dispatch_record(1, 2, &[7u8; 111], &cost).unwrap();
        assert_eq!(r.aux_count, 1);
        assert_eq!(r.to_lines().len(), 2);
        let r = encode_dispatch_record(1, 2, &[], &cost).unwrap();
        assert_eq!(r.aux_count, 0);
        assert_eq!(r.to_lines()[0].len(), 128);
    }

    #[test]
    fn empty_round_trip() {
        let cost = CostModel::default();
        let r = encode_dispatch_record(0xAAAA, 0xBBBB, b"", &cost).unwrap();
        let d = decode_dispatch_record(&r.to_lines(), &cost).unwrap();
        assert_eq!((d.code_ptr, d.data_ptr, d.args), (0xAAAA, 0xBBBB, vec![]));
    }

    #[test]
    fn oversize_rejected() {
        let cost = CostModel::default();
        let err = encode_dispatch_record(0, 0, &vec![0; 4096], &cost).unwrap_err();
        assert!(matches!(err, ModelError::Oversize { len: 4096, .. }));
        assert!(encode_dispatch_record(0, 0, &vec![0; 4095], &cost).is_ok());
    }

    #[test]
    fn truncated_aux_lines_are_corrupt() {
        let cost = CostModel::default();
        let r = encode_dispatch_record(1, 2, &[3u8; 400], &cost).unwrap();
        let mut lines = r.to_lines();
        lines.pop();
        assert!(matches!(
            decode_dispatch_record(&lines, &cost),
            Err(ModelError::Corrupt(_))
        ));
    }

    #[test]
    fn bad_length_field_is_corrupt() {
        let cost = CostModel::default();
        let mut lines = encode_dispatch_record(1, 2, &[3u8; 10], &cost)
            .unwrap()
            .to_lines();
        lines[0][16..18].copy_from_slice(&5000u16.to_le_bytes());
        assert!(matches!(
            decode_dispatch_record(&lines, &cost),
            Err(ModelError::Corrupt(_))
        ));
    }

    #[test]
    fn default_cost_model_is_valid() {
        CostModel::default().validate().unwrap();
    }

    #[test]
    fn ordering_violation_rejected() {
        let mut c = CostModel::default();
        c.coherent_line_roundtrip = c.dma_write + c.descriptor_fetch;
        assert!(c.validate().is_err());
        let mut c = CostModel::default();
        c.try_again_timeout = 0;
        assert!(c.validate().is_err());
    }
}
