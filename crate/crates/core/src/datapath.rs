//! The NIC itself: demultiplexing, the dispatch decision against its mirror of
//! kernel scheduling state, per-service load statistics and the rebalance
//! policy.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::machine::{DropReason, Effect, MachineState, RequestSlot, RequestStatus, Topology, Violation};
use crate::model::{CoreId, EndpointId, FlowKey, RpcRequest, ServiceId, SimTime};
use crate::scheduler::{Activity, CoreContext, RebalanceRequest};

/// Flow to service mapping installed by the OS. Flows are keyed by
/// destination port.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DemuxTable {
    by_port: BTreeMap<u16, ServiceId>,
}

impl DemuxTable {
    /// Service `s` listens on port `s`.
    pub fn from_services(services: impl IntoIterator<Item = ServiceId>) -> Self {
        let by_port = services.into_iter().map(|s| (s.0 as u16, s)).collect();
        DemuxTable { by_port }
    }

    pub fn install(&mut self, port: u16, service: ServiceId) {
        self.by_port.insert(port, service);
    }

    pub fn remove(&mut self, port: u16) {
        self.by_port.remove(&port);
    }

    pub fn lookup(&self, flow: &FlowKey) -> Option<ServiceId> {
        self.by_port.get(&flow.dst_port).copied()
    }
}

/// Where the NIC sends an arriving request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// A core is stalled on this endpoint's user CONTROL line.
    Fastpath(EndpointId),
    /// The service's user loop is busy; the record waits on the endpoint and
    /// is handed over by the line protocol on the next load.
    EndpointQueued(EndpointId),
    /// A kernel dispatcher is stalled and will take the record.
    KernelDispatch(CoreId),
    /// No stalled core; wait in the kernel queue.
    KernelQueue,
    /// Payload too large for the line protocol.
    Dma,
    Drop,
}

impl Decision {
    /// Ledger path class.
    pub fn path(self) -> Path {
        match self {
            Decision::Fastpath(_) | Decision::EndpointQueued(_) => Path::Fastpath,
            Decision::KernelDispatch(_) => Path::KernelDispatch,
            Decision::KernelQueue => Path::Queued,
            Decision::Dma => Path::Dma,
            Decision::Drop => Path::Dropped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Path {
    Fastpath,
    KernelDispatch,
    Queued,
    Dma,
    BaselineInterrupt,
    BaselineBypass,
    Dropped,
}

impl Path {
    pub fn as_str(self) -> &'static str {
        match self {
            Path::Fastpath => "fastpath",
            Path::KernelDispatch => "kernel_dispatch",
            Path::Queued => "queued",
            Path::Dma => "dma",
            Path::BaselineInterrupt => "baseline-interrupt",
            Path::BaselineBypass => "baseline-bypass",
            Path::Dropped => "dropped",
        }
    }
}

impl MachineState {
    /// Dispatch decision for a request of `service`, without side effects.
    pub fn decide(&self, topo: &Topology, service: ServiceId) -> Decision {
        let eps: &[EndpointId] = topo
            .service(service)
            .map(|s| s.endpoints.as_slice())
            .unwrap_or(&[]);
        let stalled_on = |ep: EndpointId| {
            topo.endpoints[ep.index()]
                .control_lines
                .iter()
                .any(|l| self.lines[l.index()].pending.is_some())
        };
        if let Some(&ep) = eps
            .iter()
            .find(|&&ep| stalled_on(ep) && self.endpoints[ep.index()].queue.is_empty())
        {
            return Decision::Fastpath(ep);
        }
        let idle_dispatchers: Vec<CoreId> = self
            .cores
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.context == CoreContext::Kernel && matches!(c.activity, Activity::Stalled(_))
            })
            .map(|(i, _)| CoreId(i as u16))
            .collect();
        if idle_dispatchers.len() > self.kernel_queue.len() {
            return Decision::KernelDispatch(idle_dispatchers[self.kernel_queue.len()]);
        }
        let live = eps
            .iter()
            .filter(|&&ep| self.endpoint_live(ep) || stalled_on(ep))
            .min_by_key(|&&ep| (self.endpoints[ep.index()].queue.len(), ep.0));
        if let Some(&ep) = live {
            return Decision::EndpointQueued(ep);
        }
        Decision::KernelQueue
    }

    /// Whether the NIC's mirror shows a core looping on this endpoint.
    pub fn endpoint_live(&self, ep: EndpointId) -> bool {
        self.mirror.contains(&CoreContext::User(ep))
    }

    pub(crate) fn arrive(
        &mut self,
        topo: &Topology,
        req: &RpcRequest,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        let idx = req.request_id.index();
        if self.requests.len() <= idx {
            self.requests.resize(idx + 1, None);
        }
        if self.requests[idx].is_some() {
            return Err(Violation::protocol(format!(
                "request {} arrived twice",
                req.request_id
            )));
        }
        let Some(service) = topo.demux.lookup(&req.flow_key) else {
            self.requests[idx] = Some(RequestSlot {
                service: req.service_id,
                status: RequestStatus::Dropped,
            });
            fx.push(Effect::Decided {
                request: req.request_id,
                decision: Decision::Drop,
            });
            fx.push(Effect::Dropped {
                request: req.request_id,
                reason: DropReason::UnknownFlow,
            });
            return Ok(());
        };
        let mut slot = RequestSlot {
            service,
            status: RequestStatus::InFlight,
        };
        let decision = if req.args_len >= topo.dma_threshold {
            slot.status = RequestStatus::Dma;
            Decision::Dma
        } else {
            self.decide(topo, service)
        };
        self.requests[idx] = Some(slot);
        match decision {
            Decision::Fastpath(ep) | Decision::EndpointQueued(ep) => {
                self.endpoints[ep.index()].queue.push_back(req.request_id)
            }
            Decision::KernelDispatch(_) | Decision::KernelQueue => {
                self.kernel_queue.push_back(req.request_id)
            }
            Decision::Dma | Decision::Drop => {}
        }
        fx.push(Effect::Decided {
            request: req.request_id,
            decision,
        });
        Ok(())
    }

    /// Applies the latest pending scheduling update for `core` to the mirror,
    /// then hands back to the kernel queue any records parked on endpoints
    /// that no core is looping on.
    pub(crate) fn mirror_sync(&mut self, topo: &Topology, core: CoreId, fx: &mut Vec<Effect>) {
        let Some(ctx) = self.mirror_pending[core.index()].take() else {
            return;
        };
        self.mirror[core.index()] = ctx;
        fx.push(Effect::MirrorApplied { core, context: ctx });
        for ep in topo.cores as u32..topo.endpoints.len() as u32 {
            let ep = EndpointId(ep);
            if self.endpoints[ep.index()].queue.is_empty() || self.endpoint_live(ep) {
                continue;
            }
            let loaded = topo.endpoints[ep.index()]
                .control_lines
                .iter()
                .any(|l| self.lines[l.index()].pending.is_some());
            if loaded {
                continue;
            }
            let moved = std::mem::take(&mut self.endpoints[ep.index()].queue);
            let n = moved.len() as u32;
            self.kernel_queue.extend(moved);
            fx.push(Effect::EndpointDrained {
                endpoint: ep,
                moved: n,
            });
        }
    }
}

/// Watermark rebalance policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RebalancePolicy {
    pub enabled: bool,
    pub hi_watermark: u64,
    pub lo_watermark: u64,
    /// Sliding statistics window and evaluation period, ns.
    pub window: u64,
}

impl Default for RebalancePolicy {
    fn default() -> Self {
        RebalancePolicy {
            enabled: true,
            hi_watermark: 16,
            lo_watermark: 0,
            window: 100_000,
        }
    }
}

/// One service's load as seen by the NIC at an evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceLoad {
    pub service: ServiceId,
    pub depth: u64,
    pub window_arrivals: u64,
    /// Cores the mirror shows in this service's user loop.
    pub cores: u32,
}

/// Suggests moving one core toward the most backlogged service.
///
/// A service is needy when its depth exceeds the high watermark, or when it
/// has queued work, holds no core and no dispatcher is free. A donor holds at
/// least one core, has depth at or below the low watermark, and is either idle
/// over the window or holds more than one core; the donor with the fewest
/// arrivals per held core is chosen. Ties go to the lowest service id.
pub fn suggest_rebalance(
    policy: &RebalancePolicy,
    loads: &[ServiceLoad],
    free_dispatchers: u32,
) -> Option<RebalanceRequest> {
    let needy = loads
        .iter()
        .filter(|l| {
            l.depth > policy.hi_watermark
                || (l.cores == 0 && l.depth > policy.lo_watermark && free_dispatchers == 0)
        })
        .min_by_key(|l| (std::cmp::Reverse(l.depth), l.service))?;
    let donor = loads
        .iter()
        .filter(|l| {
            l.service != needy.service
                && l.cores >= 1
                && l.depth <= policy.lo_watermark
                && (l.window_arrivals == 0 || l.cores >= 2)
        })
        .min_by(|a, b| {
            (a.window_arrivals * b.cores as u64)
                .cmp(&(b.window_arrivals * a.cores as u64))
                .then(a.service.cmp(&b.service))
        })?;
    Some(RebalanceRequest {
        service: needy.service,
        delta_cores: 1,
        donor: donor.service,
    })
}

/// Per-service counters and sliding-window arrival statistics.
#[derive(Debug, Clone, Default)]
pub struct ServiceLoadStats {
    pub counters: Vec<ServiceCounters>,
    window_arrivals: Vec<VecDeque<SimTime>>,
    depth: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServiceCounters {
    pub arrivals: u64,
    pub fastpath: u64,
    pub kernel_dispatch: u64,
    pub queued: u64,
    pub dma_path: u64,
    pub dropped: u64,
    pub served: u64,
}

impl ServiceLoadStats {
    pub fn new(services: usize) -> Self {
        ServiceLoadStats {
            counters: vec![ServiceCounters::default(); services],
            window_arrivals: vec![VecDeque::new(); services],
            depth: vec![0; services],
        }
    }

    fn ensure(&mut self, s: ServiceId) {
        if self.counters.len() <= s.index() {
            self.counters.resize(s.index() + 1, ServiceCounters::default());
            self.window_arrivals.resize(s.index() + 1, VecDeque::new());
            self.depth.resize(s.index() + 1, 0);
        }
    }

    pub fn record_decision(&mut self, s: ServiceId, decision: Decision, now: SimTime) {
        self.ensure(s);
        let c = &mut self.counters[s.index()];
        c.arrivals += 1;
        match decision.path() {
            Path::Fastpath => c.fastpath += 1,
            Path::KernelDispatch => c.kernel_dispatch += 1,
            Path::Queued => c.queued += 1,
            Path::Dma => c.dma_path += 1,
            Path::Dropped => c.dropped += 1,
            Path::BaselineInterrupt | Path::BaselineBypass => {}
        }
        if matches!(decision, Decision::Drop | Decision::Dma) {
            return;
        }
        self.window_arrivals[s.index()].push_back(now);
        self.depth[s.index()] += 1;
    }

    /// A queued record reached a core.
    pub fn record_dispatch(&mut self, s: ServiceId) {
        self.ensure(s);
        self.depth[s.index()] = self.depth[s.index()].saturating_sub(1);
    }

    /// A dispatched record was pushed back to the kernel queue.
    pub fn record_requeue(&mut self, s: ServiceId) {
        self.ensure(s);
        self.depth[s.index()] += 1;
    }

    pub fn record_served(&mut self, s: ServiceId) {
        self.ensure(s);
        self.counters[s.index()].served += 1;
    }

    pub fn depth(&self, s: ServiceId) -> u64 {
        self.depth.get(s.index()).copied().unwrap_or(0)
    }

    /// Snapshot for the rebalance policy; `cores[s]` is the number of cores
    /// the mirror shows for service `s`.
    pub fn snapshot(&mut self, now: SimTime, window: u64, cores: &[u32]) -> Vec<ServiceLoad> {
        let cutoff = SimTime(now.0.saturating_sub(window));
        (0..self.counters.len())
            .map(|i| {
                let w = &mut self.window_arrivals[i];
                while w.front().is_some_and(|&t| t < cutoff) {
                    w.pop_front();
                }
                ServiceLoad {
                    service: ServiceId(i as u32),
                    depth: self.depth[i],
                    window_arrivals: w.len() as u64,
                    cores: cores.get(i).copied().unwrap_or(0),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{apply, Action};
    use crate::model::RequestId;

    fn load(s: u32, depth: u64, arrivals: u64, cores: u32) -> ServiceLoad {
        ServiceLoad {
            service: ServiceId(s),
            depth,
            window_arrivals: arrivals,
            cores,
        }
    }

    #[test]
    fn no_rebalance_when_queues_empty() {
        let p = RebalancePolicy::default();
        let loads = [load(0, 0, 10, 1), load(1, 0, 0, 2)];
        assert_eq!(suggest_rebalance(&p, &loads, 0), None);
    }

    #[test]
    fn shifts_core_from_idle_service_to_backlogged_one() {
        let p = RebalancePolicy::default();
        let loads = [load(0, 100, 120, 1), load(1, 0, 0, 2)];
        assert_eq!(
            suggest_rebalance(&p, &loads, 0),
            Some(RebalanceRequest {
                service: ServiceId(0),
                delta_cores: 1,
                donor: ServiceId(1)
            })
        );
    }

    #[test]
    fn nothing_to_shift_when_everyone_is_busy() {
        let p = RebalancePolicy::default();
        let loads = [load(0, 40, 50, 2), load(1, 30, 50, 2), load(2, 20, 40, 1)];
        assert_eq!(suggest_rebalance(&p, &loads, 0), None);
    }

    #[test]
    fn starved_service_is_needy_below_high_watermark() {
        let p = RebalancePolicy::default();
        let loads = [load(0, 2, 2, 0), load(1, 0, 0, 1)];
        assert_eq!(suggest_rebalance(&p, &loads, 0).map(|r| r.donor), Some(ServiceId(1)));
        // a free dispatcher will pick the work up; no need to steal a core
        assert_eq!(suggest_rebalance(&p, &loads, 1), None);
    }

    fn req(id: u64, port: u16, args_len: u32) -> RpcRequest {
        RpcRequest {
            request_id: RequestId(id),
            flow_key: FlowKey { src_addr: 1, src_port: 2, dst_addr: 3, dst_port: port },
            service_id: ServiceId(port as u32),
            method_id: 0,
            args_len,
            arrival_time: SimTime(0),
            handler_ns: 0,
        }
    }

    #[test]
    fn arrival_decisions() {
        let topo = Topology::new(4, &[1, 1], 0, 4096);
        let mut st = MachineState::new(&topo);
        st.prewarm(&topo, CoreId(3), ServiceId(0)).unwrap();
        let decided = |fx: Vec<Effect>| match fx[0] {
            Effect::Decided { decision, .. } => decision,
            ref e => panic!("{e:?}"),
        };
        let fx = apply(&topo, &mut st, &Action::Arrive(req(0, 0, 64))).unwrap();
        assert!(matches!(decided(fx), Decision::Fastpath(_)));
        let fx = apply(&topo, &mut st, &Action::Arrive(req(1, 1, 64))).unwrap();
        assert_eq!(decided(fx), Decision::KernelDispatch(CoreId(0)));
        let fx = apply(&topo, &mut st, &Action::Arrive(req(2, 1, 4096))).unwrap();
        assert_eq!(decided(fx), Decision::Dma);
        let fx = apply(&topo, &mut st, &Action::Arrive(req(3, 1, 4095))).unwrap();
        assert_eq!(decided(fx), Decision::KernelDispatch(CoreId(1)));
        let fx = apply(&topo, &mut st, &Action::Arrive(req(4, 77, 10))).unwrap();
        assert_eq!(decided(fx), Decision::Drop);
        assert_eq!(st.request(RequestId(4)).unwrap().status, RequestStatus::Dropped);
    }

    #[test]
    fn busy_user_loop_queues_on_endpoint() {
        let topo = Topology::new(1, &[1, 1], 0, 4096);
        let mut st = MachineState::new(&topo);
        st.prewarm(&topo, CoreId(0), ServiceId(0)).unwrap();
        apply(&topo, &mut st, &Action::Arrive(req(0, 0, 8))).unwrap();
        let fx = apply(&topo, &mut st, &Action::Arrive(req(1, 0, 8))).unwrap();
        assert!(matches!(fx[0], Effect::Decided { decision: Decision::EndpointQueued(_), .. }));
        let fx = apply(&topo, &mut st, &Action::Arrive(req(2, 1, 8))).unwrap();
        assert!(matches!(fx[0], Effect::Decided { decision: Decision::KernelQueue, .. }));
    }

    #[test]
    fn stale_endpoint_queue_moves_to_kernel_on_mirror_sync() {
        use crate::machine::AfterTryAgain;
        use crate::model::LineId;
        let topo = Topology::new(1, &[1], 0, 4096);
        let mut st = MachineState::new(&topo);
        st.prewarm(&topo, CoreId(0), ServiceId(0)).unwrap();
        apply(&topo, &mut st, &Action::Arrive(req(0, 0, 8))).unwrap();
        // the core gives up the user loop before the NIC hands the record over
        apply(&topo, &mut st, &Action::TryAgain { line: LineId(2), then: AfterTryAgain::Yield }).unwrap();
        assert_eq!(st.endpoints[1].queue.len(), 1);
        let fx = apply(&topo, &mut st, &Action::MirrorSync(CoreId(0))).unwrap();
        assert!(fx.contains(&Effect::EndpointDrained { endpoint: EndpointId(1), moved: 1 }));
        assert_eq!(st.kernel_queue.len(), 1);
        assert!(st.can_deliver(&topo, LineId(0)));
    }
}
