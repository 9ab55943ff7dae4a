//! Deterministic request synthesis: open-loop Poisson or closed-loop clients,
//! Zipf service popularity and a small-message-dominated size mix.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{FlowKey, HandlerDist, RequestId, RpcRequest, ServiceId, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    OpenPoisson { rate_per_sec: f64 },
    ClosedLoop { clients: u32, think_ns: u64 },
}

/// Cumulative size quantile: a fraction `quantile` of requests carry at most
/// `max_bytes` of arguments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeBucket {
    pub quantile: f64,
    pub max_bytes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Set from the experiment seed rather than the workload table.
    #[serde(skip)]
    pub seed: u64,
    pub duration_ns: u64,
    pub arrival: ArrivalProcess,
    pub services: u32,
    pub zipf_exponent: f64,
    pub args_len: Vec<SizeBucket>,
    pub handler: HandlerDist,
    pub cores: u16,
    /// Stop after this many requests even if `duration_ns` has not elapsed.
    pub max_requests: Option<u64>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            seed: 1,
            duration_ns: 10_000_000,
            arrival: ArrivalProcess::OpenPoisson {
                rate_per_sec: 1_000_000.0,
            },
            services: 32,
            zipf_exponent: 1.2,
            args_len: vec![
                SizeBucket { quantile: 0.90, max_bytes: 128 },
                SizeBucket { quantile: 0.99, max_bytes: 1024 },
                SizeBucket { quantile: 1.0, max_bytes: 8192 },
            ],
            handler: HandlerDist::default(),
            cores: 48,
            max_requests: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid workload: {0}")]
pub struct WorkloadError(pub String);

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError(m.to_string()));
        if self.services == 0 {
            return bad("services must be positive");
        }
        if self.cores == 0 {
            return bad("cores must be positive");
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent must be finite and >= 0");
        }
        match self.arrival {
            ArrivalProcess::OpenPoisson { rate_per_sec } => {
                if !(rate_per_sec >= 0.0 && rate_per_sec.is_finite()) {
                    return bad("rate_per_sec must be finite and >= 0");
                }
            }
            ArrivalProcess::ClosedLoop { .. } => {}
        }
        if self.args_len.is_empty() {
            return bad("args_len needs at least one bucket");
        }
        let mut prev = (0.0, 0u32);
        for b in &self.args_len {
            if !(b.quantile > prev.0 && b.quantile <= 1.0) || b.max_bytes < prev.1 {
                return bad("args_len buckets must have increasing quantiles and sizes");
            }
            prev = (b.quantile, b.max_bytes);
        }
        if (prev.0 - 1.0).abs() > 1e-12 {
            return bad("last args_len quantile must be 1.0");
        }
        if let HandlerDist::Uniform { min_ns, max_ns } = self.handler {
            if min_ns > max_ns {
                return bad("handler min_ns exceeds max_ns");
            }
        }
        Ok(())
    }
}

/// Inverse-CDF sampler over ranks `0..n` with `P(k) ∝ 1/(k+1)^s`.
#[derive(Debug, Clone)]
pub struct ZipfTable {
    cdf: Vec<f64>,
}

impl ZipfTable {
    pub fn new(n: u32, s: f64) -> Self {
        let weights: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        ZipfTable { cdf }
    }

    pub fn pmf(&self, k: usize) -> f64 {
        self.cdf[k] - if k == 0 { 0.0 } else { self.cdf[k - 1] }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let k = self.cdf.partition_point(|&c| c <= u);
        k.min(self.cdf.len() - 1) as u32
    }
}

fn sample_args<R: Rng>(buckets: &[SizeBucket], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut lo = 0u32;
    for b in buckets {
        if u < b.quantile {
            return rng.random_range(lo..=b.max_bytes);
        }
        lo = b.max_bytes + 1;
    }
    buckets.last().map(|b| b.max_bytes).unwrap_or(0)
}

pub fn sample_handler<R: Rng>(dist: &HandlerDist, rng: &mut R) -> u64 {
    match *dist {
        HandlerDist::Constant { ns } => ns,
        HandlerDist::Exponential { mean_ns } => {
            if mean_ns == 0 {
                0
            } else {
                Exp::new(1.0 / mean_ns as f64).unwrap().sample(rng).round() as u64
            }
        }
        HandlerDist::Uniform { min_ns, max_ns } => rng.random_range(min_ns..=max_ns),
    }
}

struct Sampler {
    zipf: ZipfTable,
    buckets: Vec<SizeBucket>,
    handler: HandlerDist,
}

impl Sampler {
    fn new(spec: &WorkloadSpec) -> Self {
        Sampler {
            zipf: ZipfTable::new(spec.services, spec.zipf_exponent),
            buckets: spec.args_len.clone(),
            handler: spec.handler.clone(),
        }
    }

    fn request<R: Rng>(&self, rng: &mut R, id: u64, client: u32, at: SimTime) -> RpcRequest {
        let service = self.zipf.sample(rng);
        let args_len = sample_args(&self.buckets, rng);
        let handler_ns = sample_handler(&self.handler, rng);
        let src_port = rng.random_range(1024..=u16::MAX);
        RpcRequest {
            request_id: RequestId(id),
            flow_key: FlowKey {
                src_addr: 0x0a00_0000 | client,
                src_port,
                dst_addr: 0x0a00_00ff,
                dst_port: service as u16,
            },
            service_id: ServiceId(service),
            method_id: rng.random_range(0..4),
            args_len,
            arrival_time: at,
            handler_ns,
        }
    }
}

/// Generates the open-loop request stream, sorted by arrival time. Closed-loop
/// specs produce an empty stream here; use [`RequestSource`] instead.
pub fn generate(spec: &WorkloadSpec) -> Vec<RpcRequest> {
    let ArrivalProcess::OpenPoisson { rate_per_sec } = spec.arrival else {
        return Vec::new();
    };
    if rate_per_sec <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sampler = Sampler::new(spec);
    let gap = Exp::new(rate_per_sec / 1e9).unwrap();
    let limit = spec.max_requests.unwrap_or(u64::MAX);
    let mut t = 0.0f64;
    let mut out = Vec::new();
    while (out.len() as u64) < limit {
        t += gap.sample(&mut rng);
        let at = t.floor() as u64;
        if at >= spec.duration_ns {
            break;
        }
        let client = rng.random_range(0..1024);
        let id = out.len() as u64;
        out.push(sampler.request(&mut rng, id, client, SimTime(at)));
    }
    out
}

/// Closed-loop clients: each keeps one request outstanding and thinks for an
/// exponentially distributed time after every response.
pub struct ClosedLoop {
    sampler: Sampler,
    clients: Vec<ChaCha8Rng>,
    think: Option<Exp<f64>>,
    duration: u64,
    limit: u64,
    issued: u64,
    owner: BTreeMap<RequestId, u32>,
}

impl ClosedLoop {
    pub fn new(spec: &WorkloadSpec, clients: u32, think_ns: u64) -> Self {
        let clients = (0..clients)
            .map(|c| ChaCha8Rng::seed_from_u64(spec.seed ^ ((c as u64 + 1) << 32)))
            .collect();
        ClosedLoop {
            sampler: Sampler::new(spec),
            clients,
            think: (think_ns > 0).then(|| Exp::new(1.0 / think_ns as f64).unwrap()),
            duration: spec.duration_ns,
            limit: spec.max_requests.unwrap_or(u64::MAX),
            issued: 0,
            owner: BTreeMap::new(),
        }
    }

    fn issue(&mut self, client: u32, now: SimTime) -> Option<RpcRequest> {
        let rng = &mut self.clients[client as usize];
        let think = self.think.map(|e| e.sample(rng).round() as u64).unwrap_or(0);
        let at = now + think;
        if at.0 >= self.duration || self.issued >= self.limit {
            return None;
        }
        let req = self.sampler.request(rng, self.issued, client, at);
        self.issued += 1;
        self.owner.insert(req.request_id, client);
        Some(req)
    }
}

/// Where a simulator pulls requests from.
pub enum RequestSource {
    Open(VecDeque<RpcRequest>),
    Closed(ClosedLoop),
}

impl RequestSource {
    pub fn from_spec(spec: &WorkloadSpec) -> Self {
        match spec.arrival {
            ArrivalProcess::OpenPoisson { .. } => RequestSource::Open(generate(spec).into()),
            ArrivalProcess::ClosedLoop { clients, think_ns } => {
                RequestSource::Closed(ClosedLoop::new(spec, clients, think_ns))
            }
        }
    }

    pub fn initial(&mut self) -> Vec<RpcRequest> {
        match self {
            RequestSource::Open(q) => q.drain(..).collect(),
            RequestSource::Closed(cl) => (0..cl.clients.len() as u32)
                .filter_map(|c| cl.issue(c, SimTime::ZERO))
                .collect(),
        }
    }

    /// Called when a request finishes (response sent or dropped).
    pub fn on_complete(&mut self, id: RequestId, now: SimTime) -> Option<RpcRequest> {
        match self {
            RequestSource::Open(_) => None,
            RequestSource::Closed(cl) => {
                let client = cl.owner.remove(&id)?;
                cl.issue(client, now)
            }
        }
    }
}

/// SHA-256 over the canonical field encoding of a request stream.
pub fn stream_hash(requests: &[RpcRequest]) -> String {
    let mut h = Sha256::new();
    for r in requests {
        h.update(r.request_id.0.to_le_bytes());
        h.update(r.arrival_time.0.to_le_bytes());
        h.update(r.service_id.0.to_le_bytes());
        h.update(r.method_id.to_le_bytes());
        h.update(r.args_len.to_le_bytes());
        h.update(r.handler_ns.to_le_bytes());
        h.update(r.flow_key.src_addr.to_le_bytes());
        h.update(r.flow_key.src_port.to_le_bytes());
        h.update(r.flow_key.dst_addr.to_le_bytes());
        h.update(r.flow_key.dst_port.to_le_bytes());
    }
    hex::encode(h.finalize())
}

const STREAM_HEADER: &str =
    "request_id\tarrival_ns\tservice\tmethod\targs_len\thandler_ns\tsrc_addr\tsrc_port\tdst_addr\tdst_port";

pub fn write_stream<W: Write>(mut w: W, requests: &[RpcRequest]) -> std::io::Result<()> {
    writeln!(w, "{STREAM_HEADER}")?;
    for r in requests {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.request_id,
            r.arrival_time,
            r.service_id,
            r.method_id,
            r.args_len,
            r.handler_ns,
            r.flow_key.src_addr,
            r.flow_key.src_port,
            r.flow_key.dst_addr,
            r.flow_key.dst_port
        )?;
    }
    Ok(())
}

pub fn read_stream<R: BufRead>(r: R) -> Result<Vec<RpcRequest>, WorkloadError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| WorkloadError(e.to_string()))?;
        if n == 0 {
            if line != STREAM_HEADER {
                return Err(WorkloadError("unexpected request stream header".into()));
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let err = || WorkloadError(format!("line {}: malformed request record", n + 1));
        if f.len() != 10 {
            return Err(err());
        }
        let p = |i: usize| f[i].parse::<u64>().map_err(|_| err());
        out.push(RpcRequest {
            request_id: RequestId(p(0)?),
            arrival_time: SimTime(p(1)?),
            service_id: ServiceId(p(2)? as u32),
            method_id: p(3)? as u16,
            args_len: p(4)? as u32,
            handler_ns: p(5)?,
            flow_key: FlowKey {
                src_addr: p(6)? as u32,
                src_port: p(7)? as u16,
                dst_addr: p(8)? as u32,
                dst_port: p(9)? as u16,
            },
        });
    }
    Ok(out)
}
