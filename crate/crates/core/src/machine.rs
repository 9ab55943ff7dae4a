//! The discrete transition system shared by the event-driven simulator and the
//! model checker.
//!
//! A [`MachineState`] holds every piece of protocol and scheduling state with no
//! notion of time. Both drivers advance it exclusively through [`apply`]: the
//! simulator picks actions from a time-ordered queue, the checker enumerates
//! every enabled action. Timing lives entirely in the drivers.

use std::collections::VecDeque;
use std::fmt;

use crate::datapath::{Decision, DemuxTable};
use crate::model::{
    CoreId, Endpoint, EndpointId, EndpointMode, EndpointOwner, LineId, RequestId, RpcRequest,
    ServiceId,
};
use crate::protocol::{EndpointState, Holder, LineContent, LineState};
use crate::scheduler::{Activity, CoreContext, CoreState};

/// Deliberately broken protocol variants, used to show the checker catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// The NIC answers a load on one CONTROL line before pulling the response
    /// out of its sibling.
    FulfillBeforeFetch,
}

#[derive(Debug, Clone)]
pub struct ServiceDesc {
    pub id: ServiceId,
    pub endpoints: Vec<EndpointId>,
}

/// Static layout: cores, endpoints and their lines, services and the demux
/// table installed by the OS.
///
/// Endpoint `c` for `c < cores` is the kernel dispatcher endpoint of core `c`.
/// Control lines of endpoint `e` are `2e` and `2e + 1`.
#[derive(Debug, Clone)]
pub struct Topology {
    pub cores: u16,
    pub endpoints: Vec<Endpoint>,
    pub services: Vec<ServiceDesc>,
    pub demux: DemuxTable,
    pub dma_threshold: u32,
    pub scale_out: bool,
    pub mutation: Option<Mutation>,
}

impl Topology {
    /// Builds a topology with one dispatcher endpoint per core and
    /// `instances[s]` user endpoints for service `s`. Every endpoint owns
    /// `aux_per_endpoint` auxiliary lines.
    pub fn new(cores: u16, instances: &[u32], aux_per_endpoint: u32, dma_threshold: u32) -> Self {
        let user_eps: u32 = instances.iter().sum();
        let total_eps = cores as u32 + user_eps;
        let mut aux_next = 2 * total_eps;
        let mut endpoints = Vec::with_capacity(total_eps as usize);
        let mut push = |owner, mode| {
            let id = EndpointId(endpoints.len() as u32);
            endpoints.push(Endpoint {
                id,
                owner,
                mode,
                control_lines: [LineId(2 * id.0), LineId(2 * id.0 + 1)],
                aux_base: LineId(aux_next),
                aux_count: aux_per_endpoint,
            });
            aux_next += aux_per_endpoint;
            id
        };
        for c in 0..cores {
            push(EndpointOwner::Dispatcher(CoreId(c)), EndpointMode::Kernel);
        }
        let mut services = Vec::with_capacity(instances.len());
        for (s, &n) in instances.iter().enumerate() {
            let sid = ServiceId(s as u32);
            let eps = (0..n)
                .map(|_| push(EndpointOwner::Process(sid), EndpointMode::User))
                .collect();
            services.push(ServiceDesc { id: sid, endpoints: eps });
        }
        let demux = DemuxTable::from_services(services.iter().map(|s| s.id));
        Topology {
            cores,
            endpoints,
            services,
            demux,
            dma_threshold,
            scale_out: true,
            mutation: None,
        }
    }

    pub fn control_line_count(&self) -> usize {
        2 * self.endpoints.len()
    }

    pub fn kernel_endpoint(&self, core: CoreId) -> EndpointId {
        EndpointId(core.0 as u32)
    }

    pub fn is_kernel_endpoint(&self, ep: EndpointId) -> bool {
        ep.0 < self.cores as u32
    }

    pub fn endpoint_of_line(&self, line: LineId) -> EndpointId {
        EndpointId(line.0 / 2)
    }

    pub fn sibling(&self, line: LineId) -> LineId {
        LineId(line.0 ^ 1)
    }

    pub fn service_of_endpoint(&self, ep: EndpointId) -> Option<ServiceId> {
        self.endpoints[ep.index()].service()
    }

    pub fn service(&self, id: ServiceId) -> Option<&ServiceDesc> {
        self.services.get(id.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RequestStatus {
    InFlight,
    Dma,
    Transmitted,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestSlot {
    pub service: ServiceId,
    pub status: RequestStatus,
}

/// All mutable protocol and scheduler state. `Hash + Eq + Ord` so the checker
/// can deduplicate and canonicalise states.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MachineState {
    pub cores: Vec<CoreState>,
    pub lines: Vec<LineState>,
    pub endpoints: Vec<EndpointState>,
    pub kernel_queue: VecDeque<RequestId>,
    /// The NIC's copy of each core's scheduling context.
    pub mirror: Vec<CoreContext>,
    /// Context changes not yet propagated to the NIC, coalesced per core.
    pub mirror_pending: Vec<Option<CoreContext>>,
    pub requests: Vec<Option<RequestSlot>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AfterTryAgain {
    Reload,
    Yield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AfterComplete {
    Continue,
    Yield,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// A decoded packet reaches the NIC dispatch stage.
    Arrive(RpcRequest),
    /// The NIC answers a pending load with the head of the matching queue.
    Deliver(LineId),
    FetchExclusive(LineId),
    TryAgain { line: LineId, then: AfterTryAgain },
    Complete { core: CoreId, then: AfterComplete },
    /// An IPI is sent to the core.
    Preempt(CoreId),
    Retire(CoreId),
    Reinstate(CoreId),
    MirrorSync(CoreId),
    DmaDone(RequestId),
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::Arrive(_) => "arrive",
            Action::Deliver(_) => "deliver",
            Action::FetchExclusive(_) => "fetch_exclusive",
            Action::TryAgain { then: AfterTryAgain::Reload, .. } => "try_again",
            Action::TryAgain { then: AfterTryAgain::Yield, .. } => "try_again_yield",
            Action::Complete { then: AfterComplete::Continue, .. } => "complete",
            Action::Complete { then: AfterComplete::Yield, .. } => "complete_yield",
            Action::Preempt(_) => "ipi",
            Action::Retire(_) => "retire",
            Action::Reinstate(_) => "reinstate",
            Action::MirrorSync(_) => "mirror_sync",
            Action::DmaDone(_) => "dma_done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryKind {
    /// Record delivered on a user CONTROL line: the core jumps straight in.
    User,
    /// Record delivered to a kernel dispatcher, which switches into the target
    /// process. `claimed` is the user endpoint the core now loops on, if any.
    KernelDispatch { claimed: Option<EndpointId> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Decided { request: RequestId, decision: Decision },
    Stalled { core: CoreId, line: LineId },
    Delivered { core: CoreId, line: LineId, request: RequestId, kind: DeliveryKind },
    /// A fulfilled record raced a preemption and went back to the kernel queue.
    Requeued { core: CoreId, request: RequestId },
    TryAgainDelivered { core: CoreId, line: LineId },
    IpiLatched { core: CoreId },
    KernelEntry { core: CoreId },
    Yielded { core: CoreId },
    ContextChanged { core: CoreId, context: CoreContext },
    ResponseWritten { core: CoreId, line: LineId, request: RequestId },
    Transmitted { line: Option<LineId>, request: RequestId },
    Retired { core: CoreId },
    Reinstated { core: CoreId },
    MirrorApplied { core: CoreId, context: CoreContext },
    EndpointDrained { endpoint: EndpointId, moved: u32 },
    Dropped { request: RequestId, reason: DropReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    UnknownFlow,
    NoProcess,
}

/// Safety properties checked on every transition and state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Property {
    /// Exactly-once response per request.
    S1,
    /// No line exclusive at one core while loaded by another.
    S2,
    /// Every pending load has an armed TRY_AGAIN timer.
    S3,
    /// A latched IPI always reaches kernel entry.
    S4,
    /// Terminal states hold no in-flight work.
    S5,
    /// An action was applied outside its precondition.
    Protocol,
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Property::S1 => "S1",
            Property::S2 => "S2",
            Property::S3 => "S3",
            Property::S4 => "S4",
            Property::S5 => "S5",
            Property::Protocol => "protocol",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{property} violation: {detail}")]
pub struct Violation {
    pub property: Property,
    pub detail: String,
}

impl Violation {
    pub fn new(property: Property, detail: impl Into<String>) -> Self {
        Violation {
            property,
            detail: detail.into(),
        }
    }

    pub fn protocol(detail: impl Into<String>) -> Self {
        Self::new(Property::Protocol, detail)
    }
}

pub type Step = Result<Vec<Effect>, Violation>;

impl MachineState {
    /// Every core starts as a kernel dispatcher stalled on the first line of
    /// its kernel endpoint.
    pub fn new(topo: &Topology) -> Self {
        let mut state = MachineState {
            cores: vec![CoreState::default(); topo.cores as usize],
            lines: vec![LineState::default(); topo.control_line_count()],
            endpoints: vec![EndpointState::default(); topo.endpoints.len()],
            kernel_queue: VecDeque::new(),
            mirror: vec![CoreContext::Kernel; topo.cores as usize],
            mirror_pending: vec![None; topo.cores as usize],
            requests: Vec::new(),
        };
        let mut sink = Vec::new();
        for c in 0..topo.cores {
            state
                .load_next(topo, CoreId(c), &mut sink)
                .expect("initial load cannot fail");
        }
        state
    }

    pub fn request(&self, id: RequestId) -> Option<&RequestSlot> {
        self.requests.get(id.index()).and_then(|s| s.as_ref())
    }

    pub(crate) fn request_mut(&mut self, id: RequestId) -> Result<&mut RequestSlot, Violation> {
        self.requests
            .get_mut(id.index())
            .and_then(|s| s.as_mut())
            .ok_or_else(|| Violation::protocol(format!("unknown request {id}")))
    }

    pub fn in_flight(&self) -> usize {
        self.requests
            .iter()
            .flatten()
            .filter(|r| matches!(r.status, RequestStatus::InFlight | RequestStatus::Dma))
            .count()
    }

    pub fn has_in_flight(&self) -> bool {
        self.requests
            .iter()
            .flatten()
            .any(|r| matches!(r.status, RequestStatus::InFlight | RequestStatus::Dma))
    }

    /// Sets the ground-truth context of a core and queues a mirror update.
    pub(crate) fn set_context(&mut self, core: CoreId, ctx: CoreContext, fx: &mut Vec<Effect>) {
        self.cores[core.index()].context = ctx;
        self.mirror_pending[core.index()] = Some(ctx);
        fx.push(Effect::ContextChanged { core, context: ctx });
    }

    /// Issues the core's next load: its kernel endpoint when in the kernel,
    /// its claimed endpoint when in a user loop.
    pub(crate) fn load_next(
        &mut self,
        topo: &Topology,
        core: CoreId,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        let ep = match self.cores[core.index()].context {
            CoreContext::Kernel => topo.kernel_endpoint(core),
            CoreContext::User(ep) => ep,
            CoreContext::Retired => return Ok(()),
        };
        let line = topo.endpoints[ep.index()].control_lines[self.endpoints[ep.index()].active as usize];
        self.stall(core, line, fx)
    }
}

/// Applies one action. On success returns the observable effects in order.
pub fn apply(topo: &Topology, state: &mut MachineState, action: &Action) -> Step {
    let mut fx = Vec::new();
    match action {
        Action::Arrive(req) => state.arrive(topo, req, &mut fx)?,
        Action::Deliver(line) => state.deliver(topo, *line, &mut fx)?,
        Action::FetchExclusive(line) => state.fetch_exclusive(*line, &mut fx)?,
        Action::TryAgain { line, then } => state.try_again(topo, *line, *then, &mut fx)?,
        Action::Complete { core, then } => state.complete(topo, *core, *then, &mut fx)?,
        Action::Preempt(core) => state.preempt(*core, &mut fx),
        Action::Retire(core) => state.retire(topo, *core, &mut fx)?,
        Action::Reinstate(core) => state.reinstate(topo, *core, &mut fx)?,
        Action::MirrorSync(core) => state.mirror_sync(topo, *core, &mut fx),
        Action::DmaDone(req) => {
            let slot = state.request_mut(*req)?;
            if slot.status != RequestStatus::Dma {
                return Err(Violation::protocol(format!("request {req} is not on the DMA path")));
            }
            slot.status = RequestStatus::Transmitted;
            fx.push(Effect::Transmitted {
                line: None,
                request: *req,
            });
        }
    }
    Ok(fx)
}

/// Which optional transitions the checker explores.
#[derive(Debug, Clone, Copy)]
pub struct Enablement {
    pub preemption: bool,
    pub retire: bool,
    /// Packets still to arrive or requests in flight. Timeouts and scheduler
    /// interventions are only explored while work remains, so quiescent
    /// states are genuinely terminal.
    pub work_remains: bool,
}

impl MachineState {
    /// Lines whose pending load the NIC may answer right now.
    pub fn deliverable_lines<'a>(&'a self, topo: &'a Topology) -> impl Iterator<Item = LineId> + 'a {
        (0..self.lines.len() as u32)
            .map(LineId)
            .filter(move |&l| self.can_deliver(topo, l))
    }

    pub fn can_deliver(&self, topo: &Topology, line: LineId) -> bool {
        let ls = &self.lines[line.index()];
        if ls.pending.is_none() {
            return false;
        }
        let ep = topo.endpoint_of_line(line);
        let queued = if topo.is_kernel_endpoint(ep) {
            !self.kernel_queue.is_empty()
        } else {
            !self.endpoints[ep.index()].queue.is_empty()
        };
        queued && (topo.mutation == Some(Mutation::FulfillBeforeFetch) || self.sibling_fetched(topo, line))
    }

    /// Every action enabled in this state, except `Arrive`, which only the
    /// driver can supply.
    pub fn enabled_actions(&self, topo: &Topology, en: Enablement) -> Vec<Action> {
        let mut out = Vec::new();
        out.extend(self.deliverable_lines(topo).map(Action::Deliver));
        for (i, ls) in self.lines.iter().enumerate() {
            if matches!(ls.content, LineContent::Response(_)) {
                out.push(Action::FetchExclusive(LineId(i as u32)));
            }
        }
        for (i, ls) in self.lines.iter().enumerate() {
            let Some(core) = ls.pending else { continue };
            let cs = &self.cores[core.index()];
            if !(en.work_remains || cs.pending_ipi) {
                continue;
            }
            let line = LineId(i as u32);
            out.push(Action::TryAgain {
                line,
                then: AfterTryAgain::Reload,
            });
            if !cs.pending_ipi && matches!(cs.context, CoreContext::User(_)) {
                out.push(Action::TryAgain {
                    line,
                    then: AfterTryAgain::Yield,
                });
            }
        }
        for (i, cs) in self.cores.iter().enumerate() {
            let core = CoreId(i as u16);
            if let Activity::Executing { .. } = cs.activity {
                out.push(Action::Complete {
                    core,
                    then: AfterComplete::Continue,
                });
                if !cs.pending_ipi && matches!(cs.context, CoreContext::User(_)) {
                    out.push(Action::Complete {
                        core,
                        then: AfterComplete::Yield,
                    });
                }
            }
            if en.work_remains
                && en.preemption
                && !cs.pending_ipi
                && matches!(cs.context, CoreContext::User(_))
            {
                out.push(Action::Preempt(core));
            }
            if en.work_remains && en.retire && cs.context == CoreContext::Kernel && !cs.pending_ipi {
                if let Activity::Stalled(_) = cs.activity {
                    out.push(Action::Retire(core));
                }
            }
            if en.work_remains && cs.context == CoreContext::Retired {
                out.push(Action::Reinstate(core));
            }
            if self.mirror_pending[i].is_some() {
                out.push(Action::MirrorSync(core));
            }
        }
        for (i, slot) in self.requests.iter().enumerate() {
            if let Some(RequestSlot {
                status: RequestStatus::Dma,
                ..
            }) = slot
            {
                out.push(Action::DmaDone(RequestId(i as u64)));
            }
        }
        out
    }

    /// State-level safety checks. `enabled` must be the result of
    /// [`MachineState::enabled_actions`] for this state; `terminal` means no
    /// action at all (including arrivals) is enabled.
    pub fn check_properties(
        &self,
        enabled: &[Action],
        en: Enablement,
        terminal: bool,
    ) -> Result<(), Violation> {
        for (i, ls) in self.lines.iter().enumerate() {
            if let (Some(c), Holder::Exclusive(owner)) = (ls.pending, ls.holder) {
                if c != owner {
                    return Err(Violation::new(
                        Property::S2,
                        format!("line {i} loaded by core {c} while exclusive at core {owner}"),
                    ));
                }
            }
            if let Some(c) = ls.pending {
                if !ls.timer_armed {
                    return Err(Violation::new(
                        Property::S3,
                        format!("core {c} stalled on line {i} with no TRY_AGAIN timer"),
                    ));
                }
                let timeout_enabled = enabled.iter().any(
                    |a| matches!(a, Action::TryAgain { line, .. } if line.index() == i),
                );
                if (en.work_remains || self.cores[c.index()].pending_ipi) && !timeout_enabled {
                    return Err(Violation::new(
                        Property::S3,
                        format!("no TRY_AGAIN transition for stalled line {i}"),
                    ));
                }
            }
        }
        for (i, cs) in self.cores.iter().enumerate() {
            if !cs.pending_ipi {
                continue;
            }
            let escape = match cs.activity {
                Activity::Stalled(l) => enabled.iter().any(
                    |a| matches!(a, Action::TryAgain { line, .. } if *line == l),
                ),
                Activity::Executing { .. } => enabled.iter().any(
                    |a| matches!(a, Action::Complete { core, .. } if core.index() == i),
                ),
                Activity::Idle => false,
            };
            if !escape {
                return Err(Violation::new(
                    Property::S4,
                    format!("core {i} has a latched IPI and no path to kernel entry"),
                ));
            }
        }
        if terminal {
            if let Some((i, _)) = self
                .requests
                .iter()
                .enumerate()
                .find(|(_, r)| matches!(r, Some(s) if matches!(s.status, RequestStatus::InFlight | RequestStatus::Dma)))
            {
                return Err(Violation::new(
                    Property::S5,
                    format!("terminal state with request {i} still in flight"),
                ));
            }
            if !self.kernel_queue.is_empty() || self.endpoints.iter().any(|e| !e.queue.is_empty()) {
                return Err(Violation::new(Property::S5, "terminal state with queued records"));
            }
            if self
                .lines
                .iter()
                .any(|l| !matches!(l.content, LineContent::Empty))
            {
                return Err(Violation::new(Property::S5, "terminal state with an occupied line"));
            }
            if self.cores.iter().any(|c| c.pending_ipi) {
                return Err(Violation::new(Property::S4, "terminal state with a latched IPI"));
            }
        }
        Ok(())
    }
}
