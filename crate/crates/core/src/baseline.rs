//! The conventional descriptor-ring NIC: DMA the payload, post a descriptor,
//! then either interrupt a core or let a pinned core poll, and run the whole
//! software receive path on the CPU.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::datapath::Path;
use crate::metrics::{RequestLedger, RunTotals, Stage};
use crate::model::{CoreId, CostModel, RequestId, RpcRequest, ServiceId, SimTime};
use crate::sim::{SimError, SimParams};
use crate::trace::TraceEvent;
use crate::workload::RequestSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineVariant {
    /// Interrupt per packet, full kernel receive path.
    Interrupt,
    /// Pinned core busy-polls the ring; kernel steps are skipped.
    Bypass,
}

impl BaselineVariant {
    pub fn path(self) -> Path {
        match self {
            BaselineVariant::Interrupt => Path::BaselineInterrupt,
            BaselineVariant::Bypass => Path::BaselineBypass,
        }
    }
}

/// Off-CPU receive costs before software sees the packet.
pub fn rx_prefix(cost: &CostModel) -> Vec<(Stage, u64)> {
    vec![
        (Stage::NicPipeline, cost.nic_pipeline),
        (Stage::DmaWrite, cost.dma_write),
        (Stage::DescriptorFetch, cost.descriptor_fetch),
    ]
}

/// Software receive path up to and including the jump into the handler.
pub fn software_rx(cost: &CostModel, args_len: u32, variant: BaselineVariant, context_switch: bool) -> Vec<(Stage, u64)> {
    let mut v = Vec::with_capacity(9);
    if variant == BaselineVariant::Interrupt {
        v.push((Stage::Interrupt, cost.interrupt_delivery));
        v.push((Stage::KernelProto, cost.kernel_proto_processing));
        v.push((Stage::ProcessLookup, cost.process_lookup));
        v.push((Stage::CoreSelection, cost.core_selection));
        v.push((Stage::Schedule, cost.schedule_cost));
        if context_switch {
            v.push((Stage::ContextSwitch, cost.context_switch));
        }
    }
    v.push((Stage::Unmarshal, cost.unmarshal(args_len)));
    v.push((Stage::FnLookup, cost.fn_lookup));
    v.push((Stage::Jump, cost.jump_cost));
    v
}

/// Response path: descriptor post plus DMA read of the payload.
pub fn transmit_cost(cost: &CostModel) -> u64 {
    cost.dma_write + cost.descriptor_fetch
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub request: RequestId,
    pub len: u32,
    /// Time the descriptor's ready flag becomes visible to software.
    pub ready_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorRing {
    slots: VecDeque<Descriptor>,
    pub depth: u32,
    pub target: CoreId,
    pub drops: u64,
    head: u64,
    tail: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("descriptor ring full")]
pub struct RingFull;

impl DescriptorRing {
    pub fn new(depth: u32, target: CoreId) -> Self {
        DescriptorRing {
            slots: VecDeque::with_capacity(depth as usize),
            depth,
            target,
            drops: 0,
            head: 0,
            tail: 0,
        }
    }

    pub fn len(&self) -> usize {
        (self.tail - self.head) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.head == self.tail
    }

    pub fn push(&mut self, d: Descriptor) -> Result<(), RingFull> {
        if self.len() >= self.depth as usize {
            self.drops += 1;
            return Err(RingFull);
        }
        self.slots.push_back(d);
        self.tail += 1;
        Ok(())
    }

    pub fn pop(&mut self) -> Option<Descriptor> {
        let d = self.slots.pop_front()?;
        self.head += 1;
        Some(d)
    }

    pub fn peek(&self) -> Option<&Descriptor> {
        self.slots.front()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Arrive(RequestId),
    Start(CoreId),
    Finish(CoreId, RequestId),
    Wire(RequestId),
}

struct CoreSlot {
    ring: DescriptorRing,
    busy: bool,
    last_service: Option<ServiceId>,
    busy_ns: u64,
}

pub struct BaselineOutput {
    pub ledgers: Vec<RequestLedger>,
    pub totals: RunTotals,
    pub trace: Vec<TraceEvent>,
    pub ring_drops: u64,
}

pub struct BaselineSim {
    cost: CostModel,
    variant: BaselineVariant,
    params: SimParams,
    cores: Vec<CoreSlot>,
    queue: BinaryHeap<Reverse<(SimTime, u64, Event)>>,
    seq: u64,
    now: SimTime,
    source: RequestSource,
    requests: Vec<RpcRequest>,
    ledgers: Vec<RequestLedger>,
    pending_arrivals: u64,
    finished: u64,
    trace: Vec<TraceEvent>,
}

impl BaselineSim {
    pub fn new(
        cost: CostModel,
        variant: BaselineVariant,
        params: SimParams,
        cores: u16,
        source: RequestSource,
    ) -> Result<Self, SimError> {
        cost.validate().map_err(|e| SimError::Setup(e.to_string()))?;
        if cores == 0 || params.ring_depth == 0 {
            return Err(SimError::Setup("cores and ring_depth must be positive".into()));
        }
        let cores = (0..cores)
            .map(|c| CoreSlot {
                ring: DescriptorRing::new(params.ring_depth, CoreId(c)),
                busy: false,
                last_service: None,
                busy_ns: 0,
            })
            .collect();
        Ok(BaselineSim {
            cost,
            variant,
            params,
            cores,
            queue: BinaryHeap::new(),
            seq: 0,
            now: SimTime::ZERO,
            source,
            requests: Vec::new(),
            ledgers: Vec::new(),
            pending_arrivals: 0,
            finished: 0,
            trace: Vec::new(),
        })
    }

    fn schedule(&mut self, t: SimTime, e: Event) {
        self.seq += 1;
        self.queue.push(Reverse((t, self.seq, e)));
    }

    fn emit(&mut self, kind: &str, core: Option<CoreId>, request: Option<RequestId>) {
        if self.params.trace {
            self.trace.push(TraceEvent {
                time: self.now,
                kind: kind.to_string(),
                core,
                line: None,
                request,
            });
        }
    }

    fn enqueue_arrival(&mut self, req: RpcRequest) -> Result<(), SimError> {
        if req.request_id.index() != self.requests.len() {
            return Err(SimError::Setup(format!(
                "request ids must be dense and ordered; got {}",
                req.request_id
            )));
        }
        let at = SimTime(req.arrival_time.0.max(self.now.0));
        let id = req.request_id;
        self.requests.push(req);
        self.pending_arrivals += 1;
        self.schedule(at, Event::Arrive(id));
        Ok(())
    }

    fn follow_up(&mut self, id: RequestId) -> Result<(), SimError> {
        self.finished += 1;
        if let Some(next) = self.source.on_complete(id, self.now) {
            self.enqueue_arrival(next)?;
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.pending_arrivals == 0 && self.ledgers.len() as u64 == self.finished
    }

    fn handle(&mut self, e: Event) -> Result<(), SimError> {
        let now = self.now;
        match e {
            Event::Arrive(id) => {
                self.pending_arrivals -= 1;
                let req = &self.requests[id.index()];
                let (service, len, at, hash) = (req.service_id, req.args_len, req.arrival_time, req.flow_key.hash());
                let core = CoreId((hash % self.cores.len() as u64) as u16);
                let mut l = RequestLedger::new(id, service, self.variant.path(), at);
                let prefix = rx_prefix(&self.cost);
                let ready = now + prefix.iter().map(|s| s.1).sum::<u64>();
                l.entries.extend(prefix);
                self.ledgers.push(l);
                self.emit("arrive", Some(core), Some(id));
                let slot = &mut self.cores[core.index()];
                let pushed = slot.ring.push(Descriptor {
                    request: id,
                    len,
                    ready_at: ready,
                });
                if pushed.is_err() {
                    self.ledgers[id.index()].dropped = true;
                    self.emit("ring_drop", Some(core), Some(id));
                    return self.follow_up(id);
                }
                if !slot.busy {
                    slot.busy = true;
                    self.schedule(ready, Event::Start(core));
                }
            }
            Event::Start(core) => {
                let slot = &mut self.cores[core.index()];
                let d = slot.ring.pop().expect("start scheduled on an empty ring");
                let req = &self.requests[d.request.index()];
                let ctx = slot.last_service != Some(req.service_id);
                let sw = software_rx(&self.cost, d.len, self.variant, ctx);
                let sw_ns: u64 = sw.iter().map(|s| s.1).sum();
                let handler = req.handler_ns;
                slot.busy_ns += sw_ns + handler;
                slot.last_service = Some(req.service_id);
                let l = &mut self.ledgers[d.request.index()];
                l.charge(Stage::Queueing, now - d.ready_at);
                l.entries.extend(sw);
                l.charge(Stage::Handler, handler);
                l.t_handler_start = Some(now + sw_ns);
                let kind = match self.variant {
                    BaselineVariant::Interrupt => "interrupt",
                    BaselineVariant::Bypass => "poll",
                };
                self.emit(kind, Some(core), Some(d.request));
                self.schedule(now + sw_ns + handler, Event::Finish(core, d.request));
            }
            Event::Finish(core, id) => {
                self.emit("complete", Some(core), Some(id));
                let tx = transmit_cost(&self.cost);
                self.ledgers[id.index()].charge(Stage::Transmit, tx);
                self.schedule(now + tx, Event::Wire(id));
                let slot = &mut self.cores[core.index()];
                match slot.ring.peek() {
                    Some(d) => {
                        let at = SimTime(d.ready_at.0.max(now.0));
                        self.schedule(at, Event::Start(core));
                    }
                    None => {
                        slot.busy = false;
                        slot.last_service = None;
                    }
                }
            }
            Event::Wire(id) => {
                self.ledgers[id.index()].t_response_on_wire = Some(now);
                self.emit("transmit", None, Some(id));
                self.follow_up(id)?;
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<BaselineOutput, SimError> {
        for req in self.source.initial() {
            self.enqueue_arrival(req)?;
        }
        let horizon = self.params.horizon_ns.map(SimTime);
        loop {
            if self.done() {
                break;
            }
            let Some(Reverse((t, _, e))) = self.queue.pop() else { break };
            if let Some(h) = horizon.filter(|h| t > *h) {
                self.now = h;
                break;
            }
            self.now = t;
            self.handle(e)?;
        }
        let end = self.now;
        let spin = match self.variant {
            BaselineVariant::Bypass => {
                let ns: u64 = self.cores.iter().map(|c| end.0.saturating_sub(c.busy_ns)).sum();
                vec![(Path::BaselineBypass, self.cost.cycles(ns))]
            }
            BaselineVariant::Interrupt => Vec::new(),
        };
        let completed = self.ledgers.iter().filter(|l| l.completed()).count() as u64;
        let dropped = self.ledgers.iter().filter(|l| l.dropped).count() as u64;
        let injected = self.ledgers.len() as u64;
        Ok(BaselineOutput {
            totals: RunTotals {
                injected,
                in_flight: injected - completed - dropped,
                try_again: 0,
                scheduler_cycles: 0,
                spin,
                end_time: end,
            },
            ring_drops: self.cores.iter().map(|c| c.ring.drops).sum(),
            ledgers: self.ledgers,
            trace: self.trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FlowKey;

    fn req(id: u64, at: u64, args_len: u32) -> RpcRequest {
        RpcRequest {
            request_id: RequestId(id),
            flow_key: FlowKey {
                src_addr: 1,
                src_port: 5,
                dst_addr: 2,
                dst_port: 0,
            },
            service_id: ServiceId(0),
            method_id: 0,
            args_len,
            arrival_time: SimTime(at),
            handler_ns: 250,
        }
    }

    fn run(variant: BaselineVariant, reqs: Vec<RpcRequest>, depth: u32) -> BaselineOutput {
        let params = SimParams {
            ring_depth: depth,
            ..Default::default()
        };
        BaselineSim::new(CostModel::default(), variant, params, 1, RequestSource::Open(reqs.into()))
            .unwrap()
            .run()
            .unwrap()
    }

    #[test]
    fn interrupt_latency_closed_form() {
        let c = CostModel::default();
        let out = run(BaselineVariant::Interrupt, vec![req(0, 0, 64)], 256);
        let software = c.interrupt_delivery
            + c.kernel_proto_processing
            + c.process_lookup
            + c.core_selection
            + c.schedule_cost
            + c.context_switch
            + c.unmarshal(64)
            + c.fn_lookup
            + c.jump_cost;
        let expect = c.nic_pipeline + c.dma_write + c.descriptor_fetch + software + 250 + transmit_cost(&c);
        assert_eq!(out.ledgers[0].end_system_latency(), Some(expect));
    }

    #[test]
    fn bypass_omits_interrupt_and_kernel_steps() {
        let c = CostModel::default();
        let out = run(BaselineVariant::Bypass, vec![req(0, 0, 64)], 256);
        let expect = c.nic_pipeline
            + c.dma_write
            + c.descriptor_fetch
            + c.unmarshal(64)
            + c.fn_lookup
            + c.jump_cost
            + 250
            + transmit_cost(&c);
        assert_eq!(out.ledgers[0].end_system_latency(), Some(expect));
        assert_eq!(out.ledgers[0].stage_ns(Stage::Interrupt), 0);
        assert!(out.totals.spin[0].1 > 0);
    }

    #[test]
    fn full_ring_drops_and_conserves() {
        let reqs: Vec<_> = (0..10).map(|i| req(i, 0, 8)).collect();
        let out = run(BaselineVariant::Interrupt, reqs, 4);
        assert_eq!(out.ring_drops, 6);
        let dropped = out.ledgers.iter().filter(|l| l.dropped).count() as u64;
        let done = out.ledgers.iter().filter(|l| l.completed()).count() as u64;
        assert_eq!(dropped + done, 10);
    }

    #[test]
    fn back_to_back_same_service_skips_context_switch() {
        let out = run(BaselineVariant::Interrupt, vec![req(0, 0, 8), req(1, 0, 8)], 256);
        assert!(out.ledgers[0].stage_ns(Stage::ContextSwitch) > 0);
        assert_eq!(out.ledgers[1].stage_ns(Stage::ContextSwitch), 0);
    }

    #[test]
    fn ring_indices() {
        let mut r = DescriptorRing::new(2, CoreId(0));
        let d = Descriptor {
            request: RequestId(0),
            len: 1,
            ready_at: SimTime(0),
        };
        r.push(d).unwrap();
        r.push(d).unwrap();
        assert_eq!(r.push(d), Err(RingFull));
        assert_eq!(r.len(), 2);
        r.pop();
        assert_eq!(r.len(), 1);
        assert_eq!(r.drops, 1);
    }
}
