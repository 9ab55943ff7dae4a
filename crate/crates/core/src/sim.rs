//! Discrete-event driver for the coherent NIC. Every state change goes through
//! [`machine::apply`]; this module only decides *when* actions happen and
//! books their costs.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{rx_prefix, software_rx, transmit_cost, BaselineVariant};
use crate::datapath::{suggest_rebalance, Decision, Path, RebalancePolicy, ServiceCounters, ServiceLoadStats};
use crate::machine::{apply, Action, AfterComplete, AfterTryAgain, DeliveryKind, Effect, MachineState, Topology, Violation};
use crate::metrics::{RequestLedger, RunTotals, Stage};
use crate::model::{CoreId, CostModel, LineId, RequestId, RpcRequest, ServiceId, SimTime};
use crate::scheduler::{select_victim, Activity, CoreContext, SchedulerConfig};
use crate::trace::TraceEvent;
use crate::workload::RequestSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// AUXILIARY lines per endpoint; 32 covers any payload below 4 KiB at
    /// 128 B lines.
    pub aux_per_endpoint: u32,
    /// Stop at this time instead of when all work has drained.
    pub horizon_ns: Option<u64>,
    pub trace: bool,
    /// Descriptor ring depth of the baseline NIC.
    pub ring_depth: u32,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            aux_per_endpoint: 32,
            horizon_ns: None,
            trace: false,
            ring_depth: 256,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("at t={time} ns, {action}: {violation}")]
    Violation {
        time: SimTime,
        action: &'static str,
        violation: Violation,
    },
    #[error("bad setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone)]
enum Event {
    Arrive(RequestId),
    TryAgain { line: LineId, gen: u64 },
    Complete(CoreId),
    Fetch(LineId),
    Mirror(CoreId),
    DmaDone(RequestId),
    Rebalance,
    Schedule,
    Inject(Action),
    PreemptStalledUser { pick: u64 },
}

struct Scheduled {
    time: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, o: &Self) -> Ordering {
        (o.time, o.seq).cmp(&(self.time, self.seq))
    }
}

/// Everything a finished run hands to reporting.
pub struct SimOutput {
    pub ledgers: Vec<RequestLedger>,
    pub totals: RunTotals,
    pub trace: Vec<TraceEvent>,
    pub services: Vec<ServiceCounters>,
    pub state: MachineState,
    pub rebalances: u64,
    pub rebalances_ignored: u64,
    pub injections_skipped: u64,
}

/// Result of driving the simulator from a script instead of its own queue.
#[derive(Debug)]
pub struct ReplayOutcome {
    /// State after each scripted action, starting with the initial state.
    pub states: Vec<MachineState>,
    pub violation: Option<(usize, Violation)>,
    pub trace: Vec<TraceEvent>,
}

pub struct Simulator {
    cost: CostModel,
    sched: SchedulerConfig,
    policy: RebalancePolicy,
    params: SimParams,
    topo: Topology,
    state: MachineState,
    now: SimTime,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    source: RequestSource,
    requests: Vec<RpcRequest>,
    ledgers: Vec<RequestLedger>,
    stats: ServiceLoadStats,
    line_gen: Vec<u64>,
    mirror_scheduled: Vec<bool>,
    last_fulfilled: Vec<SimTime>,
    dirty_lines: BTreeSet<LineId>,
    kernel_dirty: bool,
    pending_arrivals: u64,
    pending_injections: u64,
    finished: u64,
    try_again: u64,
    scheduler_cycles: u64,
    rebalances: u64,
    rebalances_ignored: u64,
    injections_skipped: u64,
    trace: Vec<TraceEvent>,
}

impl Simulator {
    /// Builds the topology from the workload shape: one dispatcher endpoint
    /// per core and `instances_per_service` user endpoints per service.
    pub fn new(
        cost: CostModel,
        sched: SchedulerConfig,
        policy: RebalancePolicy,
        params: SimParams,
        cores: u16,
        services: u32,
        source: RequestSource,
    ) -> Result<Self, SimError> {
        if services > u16::MAX as u32 + 1 {
            return Err(SimError::Setup(format!("{services} services exceed the port space")));
        }
        let instances = vec![sched.instances_per_service; services as usize];
        let mut topo = Topology::new(cores, &instances, params.aux_per_endpoint, cost.dma_threshold);
        topo.scale_out = sched.scale_out;
        Self::with_topology(cost, sched, policy, params, topo, source)
    }

    pub fn with_topology(
        cost: CostModel,
        sched: SchedulerConfig,
        policy: RebalancePolicy,
        params: SimParams,
        topo: Topology,
        source: RequestSource,
    ) -> Result<Self, SimError> {
        cost.validate().map_err(|e| SimError::Setup(e.to_string()))?;
        if topo.cores == 0 {
            return Err(SimError::Setup("at least one core is required".into()));
        }
        let mut state = MachineState::new(&topo);
        let cores = topo.cores as usize;
        let prewarm = (sched.prewarm_services as usize).min(cores).min(topo.services.len());
        for c in 0..prewarm {
            state
                .prewarm(&topo, CoreId(c as u16), ServiceId(c as u32))
                .map_err(|v| SimError::Setup(v.to_string()))?;
        }
        Ok(Simulator {
            line_gen: vec![0; state.lines.len()],
            mirror_scheduled: vec![false; cores],
            last_fulfilled: vec![SimTime::ZERO; cores],
            stats: ServiceLoadStats::new(topo.services.len()),
            cost,
            sched,
            policy,
            params,
            topo,
            state,
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            seq: 0,
            source,
            requests: Vec::new(),
            ledgers: Vec::new(),
            dirty_lines: BTreeSet::new(),
            kernel_dirty: false,
            pending_arrivals: 0,
            pending_injections: 0,
            finished: 0,
            try_again: 0,
            scheduler_cycles: 0,
            rebalances: 0,
            rebalances_ignored: 0,
            injections_skipped: 0,
            trace: Vec::new(),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    /// Schedules an IPI (or RETIRE/REINSTATE) from outside the NIC.
    pub fn inject(&mut self, at: SimTime, action: Action) {
        self.pending_injections += 1;
        self.schedule(at, Event::Inject(action));
    }

    /// Schedules an IPI to a core chosen among those stalled in a user loop
    /// when the injection fires (`pick` modulo their number). With no such
    /// core it retries one line round trip later while traffic remains.
    pub fn inject_preempt_stalled(&mut self, at: SimTime, pick: u64) {
        self.pending_injections += 1;
        self.schedule(at, Event::PreemptStalledUser { pick });
    }

    fn schedule(&mut self, time: SimTime, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
    }

    fn outstanding(&self) -> u64 {
        self.ledgers.len() as u64 - self.finished
    }

    fn traffic_done(&self) -> bool {
        self.pending_arrivals == 0 && self.outstanding() == 0
    }

    fn done(&self) -> bool {
        self.traffic_done()
            && self.pending_injections == 0
            && !self.state.cores.iter().any(|c| c.pending_ipi)
    }

    fn keep_ticking(&self, next: SimTime) -> bool {
        match self.params.horizon_ns {
            Some(h) => next.0 <= h,
            None => !self.done(),
        }
    }

    fn register(&mut self, req: RpcRequest) -> Result<(), SimError> {
        if req.request_id.index() != self.requests.len() {
            return Err(SimError::Setup(format!(
                "request ids must be dense and ordered; got {} after {}",
                req.request_id,
                self.requests.len()
            )));
        }
        self.requests.push(req);
        Ok(())
    }

    fn enqueue_arrival(&mut self, req: RpcRequest) -> Result<(), SimError> {
        let at = SimTime(req.arrival_time.0.max(self.now.0)) + self.cost.nic_pipeline;
        let id = req.request_id;
        self.register(req)?;
        self.pending_arrivals += 1;
        self.schedule(at, Event::Arrive(id));
        Ok(())
    }

    fn arm(&mut self, line: LineId) {
        self.line_gen[line.index()] += 1;
        let gen = self.line_gen[line.index()];
        self.schedule(self.now + self.cost.try_again_timeout, Event::TryAgain { line, gen });
    }

    fn act(&mut self, action: Action) -> Result<(), SimError> {
        if self.params.trace {
            self.trace.push(TraceEvent::from_action(self.now, &action, &self.state));
        }
        let fx = apply(&self.topo, &mut self.state, &action).map_err(|violation| SimError::Violation {
            time: self.now,
            action: action.kind(),
            violation,
        })?;
        if self.params.trace {
            for e in &fx {
                self.trace.push(TraceEvent::from_effect(self.now, e));
            }
        }
        for e in fx {
            self.react(e)?;
        }
        Ok(())
    }

    fn ledger(&mut self, id: RequestId) -> &mut RequestLedger {
        &mut self.ledgers[id.index()]
    }

    fn follow_up(&mut self, id: RequestId) -> Result<(), SimError> {
        self.finished += 1;
        if let Some(next) = self.source.on_complete(id, self.now) {
            self.enqueue_arrival(next)?;
        }
        Ok(())
    }

    fn react(&mut self, effect: Effect) -> Result<(), SimError> {
        let now = self.now;
        match effect {
            Effect::Decided { request, decision } => {
                let service = self.ledgers[request.index()].service;
                self.ledger(request).path = decision.path();
                self.stats.record_decision(service, decision, now);
                match decision {
                    Decision::Fastpath(ep) | Decision::EndpointQueued(ep) => {
                        let lines = self.topo.endpoints[ep.index()].control_lines;
                        self.dirty_lines.extend(lines);
                    }
                    Decision::KernelDispatch(_) | Decision::KernelQueue => self.kernel_dirty = true,
                    Decision::Dma => self.start_dma(request),
                    Decision::Drop => {}
                }
            }
            Effect::Dropped { request, .. } => {
                let l = self.ledger(request);
                l.dropped = true;
                if matches!(l.path, Path::KernelDispatch | Path::Queued) {
                    let s = l.service;
                    self.stats.record_dispatch(s);
                }
                self.follow_up(request)?;
            }
            Effect::Delivered { core, request, kind, .. } => {
                let req = &self.requests[request.index()];
                let (args, handler, ready) = (req.args_len, req.handler_ns, req.arrival_time + self.cost.nic_pipeline);
                let service = self.ledgers[request.index()].service;
                self.stats.record_dispatch(service);
                self.last_fulfilled[core.index()] = now;
                let c = self.cost.clone();
                let mut steps = vec![
                    (Stage::Queueing, now.saturating_sub(ready)),
                    (Stage::LineTransfer, c.line_delivery(args)),
                ];
                if let DeliveryKind::KernelDispatch { .. } = kind {
                    steps.push((Stage::ContextSwitch, c.context_switch));
                    steps.push((Stage::Unmarshal, c.unmarshal(args)));
                    steps.push((Stage::FnLookup, c.fn_lookup));
                }
                steps.push((Stage::Jump, c.jump_cost));
                let start = now + steps[1..].iter().map(|s| s.1).sum::<u64>();
                let l = self.ledger(request);
                l.entries.extend(steps);
                l.charge(Stage::Handler, handler);
                l.t_handler_start = Some(start);
                self.schedule(start + handler, Event::Complete(core));
            }
            Effect::Requeued { .. } | Effect::EndpointDrained { .. } => self.kernel_dirty = true,
            Effect::ResponseWritten { line, request, .. } => {
                let rt = self.cost.coherent_line_roundtrip;
                self.ledger(request).charge(Stage::Transmit, rt);
                self.schedule(now + rt, Event::Fetch(line));
            }
            Effect::Transmitted { line, request } => {
                self.ledger(request).t_response_on_wire = Some(now);
                let service = self.ledgers[request.index()].service;
                self.stats.record_served(service);
                if let Some(l) = line {
                    self.dirty_lines.insert(self.topo.sibling(l));
                }
                self.follow_up(request)?;
            }
            Effect::Stalled { line, .. } => {
                self.arm(line);
                self.dirty_lines.insert(line);
            }
            Effect::ContextChanged { core, .. } => {
                if !self.mirror_scheduled[core.index()] {
                    self.mirror_scheduled[core.index()] = true;
                    self.schedule(now + self.cost.coherent_line_roundtrip, Event::Mirror(core));
                }
            }
            Effect::TryAgainDelivered { .. } => self.try_again += 1,
            Effect::IpiLatched { core } => {
                if let Activity::Stalled(line) = self.state.cores[core.index()].activity {
                    let gen = self.line_gen[line.index()];
                    self.schedule(now + self.cost.coherent_line_roundtrip, Event::TryAgain { line, gen });
                }
            }
            Effect::KernelEntry { .. }
            | Effect::Yielded { .. }
            | Effect::Retired { .. }
            | Effect::Reinstated { .. }
            | Effect::MirrorApplied { .. } => {}
        }
        Ok(())
    }

    fn start_dma(&mut self, request: RequestId) {
        let req = &self.requests[request.index()];
        let (args, handler) = (req.args_len, req.handler_ns);
        let c = &self.cost;
        let mut steps: Vec<(Stage, u64)> = rx_prefix(c)
            .into_iter()
            .filter(|s| s.0 != Stage::NicPipeline)
            .collect();
        steps.extend(software_rx(c, args, BaselineVariant::Interrupt, true));
        let start = self.now + steps.iter().map(|s| s.1).sum::<u64>();
        let tx = transmit_cost(c);
        let l = self.ledger(request);
        l.entries.extend(steps);
        l.charge(Stage::Handler, handler);
        l.charge(Stage::Transmit, tx);
        l.t_handler_start = Some(start);
        self.schedule(start + handler + tx, Event::DmaDone(request));
    }

    /// Answers every pending load the NIC can answer, lowest line first. A
    /// core with a latched IPI is left for its TRY_AGAIN.
    fn pump(&mut self) -> Result<(), SimError> {
        loop {
            if std::mem::take(&mut self.kernel_dirty) {
                for c in 0..self.topo.cores {
                    let ep = self.topo.kernel_endpoint(CoreId(c));
                    self.dirty_lines.extend(self.topo.endpoints[ep.index()].control_lines);
                }
            }
            let Some(line) = self.dirty_lines.pop_first() else {
                return Ok(());
            };
            let ipi = self.state.lines[line.index()]
                .pending
                .is_some_and(|c| self.state.cores[c.index()].pending_ipi);
            if !ipi && self.state.can_deliver(&self.topo, line) {
                self.act(Action::Deliver(line))?;
            }
        }
    }

    fn try_again_hint(&self, line: LineId) -> AfterTryAgain {
        match self.state.lines[line.index()].pending {
            Some(core) if self.should_yield(core) => AfterTryAgain::Yield,
            _ => AfterTryAgain::Reload,
        }
    }

    /// A user loop hands its core back to the kernel when kernel work waits,
    /// no dispatcher is free and its own endpoint has nothing queued.
    fn should_yield(&self, core: CoreId) -> bool {
        let cs = &self.state.cores[core.index()];
        let CoreContext::User(ep) = cs.context else {
            return false;
        };
        let dispatcher_free = self
            .state
            .cores
            .iter()
            .any(|c| c.context == CoreContext::Kernel && matches!(c.activity, Activity::Stalled(_)));
        !cs.pending_ipi
            && !self.state.kernel_queue.is_empty()
            && !dispatcher_free
            && self.state.endpoints[ep.index()].queue.is_empty()
    }

    fn rebalance(&mut self) -> Result<(), SimError> {
        let mut cores = vec![0u32; self.topo.services.len()];
        for ctx in &self.state.mirror {
            if let CoreContext::User(ep) = ctx {
                if let Some(s) = self.topo.service_of_endpoint(*ep) {
                    cores[s.index()] += 1;
                }
            }
        }
        let free = self
            .state
            .cores
            .iter()
            .filter(|c| c.context == CoreContext::Kernel && matches!(c.activity, Activity::Stalled(_)))
            .count() as u32;
        let loads = self.stats.snapshot(self.now, self.policy.window, &cores);
        let Some(req) = suggest_rebalance(&self.policy, &loads, free) else {
            return Ok(());
        };
        match select_victim(&self.topo, &self.state, req.donor, &self.last_fulfilled) {
            Some(victim) => {
                self.rebalances += 1;
                if self.params.trace {
                    let mut ev = TraceEvent::from_action(self.now, &Action::Preempt(victim), &self.state);
                    ev.kind = "rebalance".into();
                    self.trace.push(ev);
                }
                self.act(Action::Preempt(victim))
            }
            None => {
                self.rebalances_ignored += 1;
                Ok(())
            }
        }
    }

    fn arrive(&mut self, id: RequestId) -> Result<(), SimError> {
        self.pending_arrivals -= 1;
        let req = self.requests[id.index()].clone();
        let mut l = RequestLedger::new(id, req.service_id, Path::Queued, req.arrival_time);
        l.charge(Stage::NicPipeline, self.cost.nic_pipeline);
        self.ledgers.push(l);
        self.act(Action::Arrive(req))
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Arrive(id) => self.arrive(id)?,
            Event::TryAgain { line, gen } => {
                let ls = &self.state.lines[line.index()];
                if self.line_gen[line.index()] == gen && ls.pending.is_some() {
                    let then = self.try_again_hint(line);
                    self.act(Action::TryAgain { line, then })?;
                }
            }
            Event::Complete(core) => {
                let then = if self.should_yield(core) {
                    AfterComplete::Yield
                } else {
                    AfterComplete::Continue
                };
                self.act(Action::Complete { core, then })?
            }
            Event::Fetch(line) => self.act(Action::FetchExclusive(line))?,
            Event::Mirror(core) => {
                self.mirror_scheduled[core.index()] = false;
                self.act(Action::MirrorSync(core))?;
            }
            Event::DmaDone(id) => self.act(Action::DmaDone(id))?,
            Event::Rebalance => {
                self.rebalance()?;
                let next = self.now + self.policy.window;
                if self.keep_ticking(next) {
                    self.schedule(next, Event::Rebalance);
                }
            }
            Event::Schedule => {
                let in_kernel = self
                    .state
                    .cores
                    .iter()
                    .filter(|c| c.context == CoreContext::Kernel)
                    .count() as u64;
                self.scheduler_cycles += in_kernel * self.cost.cycles(self.cost.schedule_cost);
                let next = self.now + self.sched.schedule_period;
                if self.keep_ticking(next) {
                    self.schedule(next, Event::Schedule);
                }
            }
            Event::Inject(action) => {
                self.pending_injections -= 1;
                let cs = match &action {
                    Action::Preempt(c) | Action::Retire(c) | Action::Reinstate(c) => {
                        self.state.cores.get(c.index()).copied()
                    }
                    _ => None,
                };
                let applicable = match (&action, cs) {
                    (Action::Preempt(_), Some(_)) => true,
                    (Action::Retire(_), Some(cs)) => {
                        cs.context == CoreContext::Kernel && matches!(cs.activity, Activity::Stalled(_))
                    }
                    (Action::Reinstate(_), Some(cs)) => cs.context == CoreContext::Retired,
                    _ => false,
                };
                if applicable {
                    self.act(action)?;
                } else {
                    self.injections_skipped += 1;
                }
            }
            Event::PreemptStalledUser { pick } => {
                let candidates: Vec<CoreId> = self
                    .state
                    .cores
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| {
                        matches!(c.context, CoreContext::User(_))
                            && matches!(c.activity, Activity::Stalled(_))
                            && !c.pending_ipi
                    })
                    .map(|(i, _)| CoreId(i as u16))
                    .collect();
                if let Some(&core) = candidates.get((pick % candidates.len().max(1) as u64) as usize) {
                    self.pending_injections -= 1;
                    self.act(Action::Preempt(core))?;
                } else if self.traffic_done() {
                    self.pending_injections -= 1;
                    self.injections_skipped += 1;
                } else {
                    let at = self.now + self.cost.coherent_line_roundtrip;
                    self.schedule(at, Event::PreemptStalledUser { pick });
                }
            }
        }
        self.pump()
    }

    pub fn run(mut self) -> Result<SimOutput, SimError> {
        for (i, ls) in self.state.lines.clone().iter().enumerate() {
            if ls.pending.is_some() {
                self.arm(LineId(i as u32));
            }
        }
        for req in self.source.initial() {
            self.enqueue_arrival(req)?;
        }
        if self.policy.enabled && self.policy.window > 0 {
            self.schedule(SimTime(self.policy.window), Event::Rebalance);
        }
        if self.sched.schedule_period > 0 {
            self.schedule(SimTime(self.sched.schedule_period), Event::Schedule);
        }
        let horizon = self.params.horizon_ns.map(SimTime);
        loop {
            if horizon.is_none() && self.done() {
                break;
            }
            let Some(next) = self.queue.pop() else { break };
            if horizon.is_some_and(|h| next.time > h) {
                self.now = horizon.unwrap();
                break;
            }
            self.now = next.time;
            self.handle(next.event)?;
        }
        Ok(self.finish())
    }

    fn finish(self) -> SimOutput {
        let totals = RunTotals {
            injected: self.ledgers.len() as u64,
            in_flight: self.state.in_flight() as u64,
            try_again: self.try_again,
            scheduler_cycles: self.scheduler_cycles,
            spin: Vec::new(),
            end_time: self.now,
        };
        SimOutput {
            ledgers: self.ledgers,
            totals,
            trace: self.trace,
            services: self.stats.counters.clone(),
            state: self.state,
            rebalances: self.rebalances,
            rebalances_ignored: self.rebalances_ignored,
            injections_skipped: self.injections_skipped,
        }
    }

    /// Drives the simulator's own handlers from a script of timed actions
    /// instead of its event queue. Arrivals must carry dense, ordered ids.
    pub fn replay(mut self, script: &[(SimTime, Action)]) -> Result<ReplayOutcome, SimError> {
        self.params.trace = true;
        let mut states = vec![self.state.clone()];
        for (i, (t, action)) in script.iter().enumerate() {
            self.now = *t;
            let result = match action {
                Action::Arrive(req) => {
                    self.register(req.clone())?;
                    self.pending_arrivals += 1;
                    self.arrive(req.request_id)
                }
                other => self.act(other.clone()),
            };
            match result {
                Ok(()) => states.push(self.state.clone()),
                Err(SimError::Violation { violation, .. }) => {
                    return Ok(ReplayOutcome {
                        states,
                        violation: Some((i, violation)),
                        trace: self.trace,
                    })
                }
                Err(e) => return Err(e),
            }
        }
        Ok(ReplayOutcome {
            states,
            violation: None,
            trace: self.trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FlowKey;
    use std::collections::VecDeque;

    fn req(id: u64, service: u32, at: u64, args_len: u32, handler_ns: u64) -> RpcRequest {
        RpcRequest {
            request_id: RequestId(id),
            flow_key: FlowKey {
                src_addr: 1,
                src_port: 4000,
                dst_addr: 2,
                dst_port: service as u16,
            },
            service_id: ServiceId(service),
            method_id: 0,
            args_len,
            arrival_time: SimTime(at),
            handler_ns,
        }
    }

    fn sim(cores: u16, services: u32, prewarm: u32, reqs: Vec<RpcRequest>) -> Simulator {
        let sched = SchedulerConfig {
            prewarm_services: prewarm,
            ..Default::default()
        };
        Simulator::new(
            CostModel::default(),
            sched,
            RebalancePolicy::default(),
            SimParams {
                trace: true,
                ..Default::default()
            },
            cores,
            services,
            RequestSource::Open(VecDeque::from(reqs)),
        )
        .unwrap()
    }

    #[test]
    fn empty_run_ends_at_zero() {
        let out = sim(2, 2, 0, vec![]).run().unwrap();
        assert!(out.ledgers.is_empty());
        assert_eq!(out.totals.end_time, SimTime::ZERO);
    }

    #[test]
    fn fastpath_dispatch_overhead_closed_form() {
        let c = CostModel::default();
        let out = sim(1, 1, 1, vec![req(0, 0, 0, 64, 1000)]).run().unwrap();
        let l = &out.ledgers[0];
        assert_eq!(l.path, Path::Fastpath);
        assert_eq!(
            l.dispatch_overhead(),
            Some(c.nic_pipeline + c.coherent_line_roundtrip + c.jump_cost)
        );
        assert_eq!(
            l.end_system_latency(),
            Some(c.nic_pipeline + 2 * c.coherent_line_roundtrip + c.jump_cost + 1000)
        );
    }

    #[test]
    fn cold_service_then_fastpath() {
        let c = CostModel::default();
        let out = sim(1, 1, 0, vec![req(0, 0, 0, 64, 100), req(1, 0, 50_000, 64, 100)])
            .run()
            .unwrap();
        assert_eq!(out.ledgers[0].path, Path::KernelDispatch);
        assert_eq!(out.ledgers[0].stage_ns(Stage::ContextSwitch), c.context_switch);
        assert_eq!(out.ledgers[1].path, Path::Fastpath);
        assert_eq!(out.ledgers[1].stage_ns(Stage::ContextSwitch), 0);
    }

    #[test]
    fn large_payload_takes_dma() {
        let out = sim(1, 1, 1, vec![req(0, 0, 0, 4096, 10), req(1, 0, 100_000, 4095, 10)])
            .run()
            .unwrap();
        assert_eq!(out.ledgers[0].path, Path::Dma);
        assert_eq!(out.ledgers[1].path, Path::Fastpath);
        assert!(out.ledgers.iter().all(|l| l.completed()));
    }

    #[test]
    fn idle_core_counts_try_agains() {
        let mut s = sim(1, 1, 0, vec![]);
        s.params.horizon_ns = Some(100_000_000);
        let out = s.run().unwrap();
        assert_eq!(out.totals.try_again, 6);
    }

    #[test]
    fn unknown_port_dropped() {
        let mut r = req(0, 0, 0, 8, 0);
        r.flow_key.dst_port = 999;
        let out = sim(1, 1, 0, vec![r]).run().unwrap();
        assert!(out.ledgers[0].dropped);
        assert_eq!(out.totals.in_flight, 0);
    }

    #[test]
    fn preempting_stalled_user_core_enters_kernel() {
        let mut s = sim(1, 1, 1, vec![]);
        s.inject(SimTime(1_000), Action::Preempt(CoreId(0)));
        let out = s.run().unwrap();
        let kinds: Vec<&str> = out.trace.iter().map(|e| e.kind.as_str()).collect();
        let ipi = kinds.iter().position(|k| *k == "ipi").unwrap();
        let ta = kinds.iter().position(|k| *k == "try_again").unwrap();
        let ke = kinds.iter().position(|k| *k == "kernel_entry").unwrap();
        assert!(ipi < ta && ta < ke);
        assert_eq!(out.state.cores[0].context, CoreContext::Kernel);
    }

    #[test]
    fn busy_service_backlog_is_served() {
        let reqs: Vec<_> = (0..50).map(|i| req(i, (i % 3) as u32, i * 100, 32, 2_000)).collect();
        let out = sim(2, 3, 0, reqs).run().unwrap();
        assert!(out.ledgers.iter().all(|l| l.completed()));
        assert_eq!(out.totals.in_flight, 0);
    }

    #[test]
    fn queued_request_starts_after_previous_completes() {
        let c = CostModel::default();
        let out = sim(1, 1, 1, vec![req(0, 0, 0, 64, 1_000), req(1, 0, 1, 64, 1_000)]).run().unwrap();
        let first_done = c.nic_pipeline + c.coherent_line_roundtrip + c.jump_cost + 1_000;
        // The response is fetched from the sibling line before the next fill.
        let delivered = first_done + c.coherent_line_roundtrip;
        let second = &out.ledgers[1];
        assert_eq!(
            second.t_handler_start,
            Some(SimTime(delivered + c.coherent_line_roundtrip + c.jump_cost))
        );
        assert_eq!(second.stage_ns(Stage::Queueing), delivered - (1 + c.nic_pipeline));
    }

    #[test]
    fn completing_core_yields_to_waiting_kernel_work() {
        let c = CostModel::default();
        let out = sim(1, 2, 1, vec![req(0, 0, 0, 64, 1_000), req(1, 1, 100, 64, 1_000)]).run().unwrap();
        assert_eq!(out.ledgers[1].path, Path::Queued);
        assert!(out.ledgers.iter().all(|l| l.completed()));
        let done = c.nic_pipeline + c.coherent_line_roundtrip + c.jump_cost + 1_000;
        assert!(out.trace.iter().any(|e| e.kind == "complete_yield" && e.time == SimTime(done)));
        assert_eq!(out.totals.try_again, 0);
    }
}
