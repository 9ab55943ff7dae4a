//! Kernel side of NIC-driven scheduling: dispatcher threads on kernel CONTROL
//! lines, entry into per-process user loops, voluntary yield, IPI preemption,
//! RETIRE-based reallocation and rebalance victim selection.

use serde::{Deserialize, Serialize};

use crate::machine::{AfterComplete, DeliveryKind, DropReason, Effect, MachineState, RequestStatus, Topology, Violation};
use crate::model::{CoreId, EndpointId, LineId, RequestId, ServiceId, SimTime};
use crate::protocol::{Holder, LineContent};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CoreContext {
    /// Kernel dispatcher loop on the core's kernel endpoint.
    #[default]
    Kernel,
    /// User loop of the process owning this endpoint.
    User(EndpointId),
    /// Handed back to the OS for non-RPC work.
    Retired,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Activity {
    #[default]
    Idle,
    Stalled(LineId),
    Executing { request: RequestId, line: LineId },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CoreState {
    pub context: CoreContext,
    pub activity: Activity,
    pub pending_ipi: bool,
}

impl CoreState {
    pub fn mode(&self) -> crate::model::CoreMode {
        use crate::model::CoreMode;
        match (self.context, self.activity) {
            (_, Activity::Stalled(l)) => CoreMode::StalledOnLoad(l),
            (_, Activity::Executing { request, .. }) => CoreMode::Executing(request),
            (CoreContext::Kernel, Activity::Idle) => CoreMode::KernelLoop,
            (CoreContext::User(_), Activity::Idle) => CoreMode::UserLoop,
            (CoreContext::Retired, Activity::Idle) => CoreMode::Idle,
        }
    }
}

/// Which side raises the preemption IPI. Both behave identically here; the
/// choice is recorded in reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpiOrigin {
    #[default]
    Os,
    Nic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Dispatcher bookkeeping period, ns.
    pub schedule_period: u64,
    /// A dispatcher switches into a process even if it already runs elsewhere.
    pub scale_out: bool,
    pub ipi_origin: IpiOrigin,
    /// User endpoints (and so maximum concurrent cores) per service.
    pub instances_per_service: u32,
    /// Services 0..n start with one core already in their user loop.
    pub prewarm_services: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            schedule_period: 1_000_000,
            scale_out: true,
            ipi_origin: IpiOrigin::Os,
            instances_per_service: 4,
            prewarm_services: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RebalanceRequest {
    /// Service that should gain cores.
    pub service: ServiceId,
    pub delta_cores: i32,
    /// Service expected to give one up.
    pub donor: ServiceId,
}

/// Picks the rebalance victim: the donor's user-loop core whose last
/// fulfilment is oldest. Ties go to the lowest core id.
pub fn select_victim(
    topo: &Topology,
    state: &MachineState,
    donor: ServiceId,
    last_fulfilled: &[SimTime],
) -> Option<CoreId> {
    state
        .cores
        .iter()
        .enumerate()
        .filter_map(|(i, cs)| match cs.context {
            CoreContext::User(ep)
                if topo.service_of_endpoint(ep) == Some(donor) && !cs.pending_ipi =>
            {
                Some(CoreId(i as u16))
            }
            _ => None,
        })
        .min_by_key(|c| (last_fulfilled[c.index()], c.0))
}

impl MachineState {
    fn release_endpoint(&mut self, core: CoreId) {
        if let CoreContext::User(ep) = self.cores[core.index()].context {
            if self.endpoints[ep.index()].claimed_by == Some(core) {
                self.endpoints[ep.index()].claimed_by = None;
            }
        }
    }

    /// A dispatcher received a record for some process. Returns `None` when the
    /// target process does not exist and the request was dropped.
    pub(crate) fn kernel_dispatch(
        &mut self,
        topo: &Topology,
        core: CoreId,
        line: LineId,
        request: RequestId,
        fx: &mut Vec<Effect>,
    ) -> Result<Option<DeliveryKind>, Violation> {
        let service = self.request_mut(request)?.service;
        let eps = topo
            .service(service)
            .map(|s| s.endpoints.as_slice())
            .unwrap_or(&[]);
        if eps.is_empty() {
            self.request_mut(request)?.status = RequestStatus::Dropped;
            let ls = &mut self.lines[line.index()];
            ls.content = LineContent::Empty;
            ls.holder = Holder::Nic;
            self.cores[core.index()].activity = Activity::Idle;
            fx.push(Effect::Dropped {
                request,
                reason: DropReason::NoProcess,
            });
            self.load_next(topo, core, fx)?;
            return Ok(None);
        }
        let running = eps
            .iter()
            .any(|e| self.endpoints[e.index()].claimed_by.is_some());
        let mut claimed = None;
        if topo.scale_out || !running {
            if let Some(&ep) = eps
                .iter()
                .find(|e| self.endpoints[e.index()].claimed_by.is_none())
            {
                self.endpoints[ep.index()].claimed_by = Some(core);
                self.set_context(core, CoreContext::User(ep), fx);
                claimed = Some(ep);
            }
        }
        Ok(Some(DeliveryKind::KernelDispatch { claimed }))
    }

    /// The handler finished: the response goes into the line the record came
    /// on, then the core loads its next line (or yields / takes a latched IPI).
    pub(crate) fn complete(
        &mut self,
        topo: &Topology,
        core: CoreId,
        then: AfterComplete,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        let Activity::Executing { request, line } = self.cores[core.index()].activity else {
            return Err(Violation::protocol(format!("core {core} completed with nothing executing")));
        };
        let ls = &mut self.lines[line.index()];
        ls.content = LineContent::Response(request);
        ls.holder = Holder::Exclusive(core);
        self.cores[core.index()].activity = Activity::Idle;
        fx.push(Effect::ResponseWritten { core, line, request });
        let cs = self.cores[core.index()];
        if cs.pending_ipi {
            return self.kernel_entry(topo, core, fx);
        }
        if then == AfterComplete::Yield && matches!(cs.context, CoreContext::User(_)) {
            return self.voluntary_yield(topo, core, fx);
        }
        self.load_next(topo, core, fx)
    }

    pub(crate) fn kernel_entry(
        &mut self,
        topo: &Topology,
        core: CoreId,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        self.cores[core.index()].pending_ipi = false;
        if matches!(self.cores[core.index()].context, CoreContext::User(_)) {
            self.release_endpoint(core);
            self.set_context(core, CoreContext::Kernel, fx);
        }
        fx.push(Effect::KernelEntry { core });
        self.load_next(topo, core, fx)
    }

    pub(crate) fn voluntary_yield(
        &mut self,
        topo: &Topology,
        core: CoreId,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        if !matches!(self.cores[core.index()].context, CoreContext::User(_)) {
            return Err(Violation::protocol(format!("core {core} yielded outside a user loop")));
        }
        self.release_endpoint(core);
        self.set_context(core, CoreContext::Kernel, fx);
        fx.push(Effect::Yielded { core });
        self.load_next(topo, core, fx)
    }

    /// Latches an IPI on a user-loop core. Kernel, retired or already
    /// interrupted cores ignore it.
    pub(crate) fn preempt(&mut self, core: CoreId, fx: &mut Vec<Effect>) {
        let cs = &mut self.cores[core.index()];
        if matches!(cs.context, CoreContext::User(_)) && !cs.pending_ipi {
            cs.pending_ipi = true;
            fx.push(Effect::IpiLatched { core });
        }
    }

    /// Completes a dispatcher's stalled kernel load with RETIRE.
    pub(crate) fn retire(
        &mut self,
        topo: &Topology,
        core: CoreId,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        let cs = self.cores[core.index()];
        let line = match (cs.context, cs.activity) {
            (CoreContext::Kernel, Activity::Stalled(l))
                if topo.is_kernel_endpoint(topo.endpoint_of_line(l)) =>
            {
                l
            }
            (CoreContext::User(_), _) => {
                return Err(Violation::protocol(format!(
                    "RETIRE sent to core {core} on a user-mode endpoint"
                )))
            }
            _ => {
                return Err(Violation::protocol(format!(
                    "RETIRE sent to core {core} which is not stalled on a kernel line"
                )))
            }
        };
        let ls = &mut self.lines[line.index()];
        ls.pending = None;
        ls.timer_armed = false;
        self.cores[core.index()].activity = Activity::Idle;
        self.set_context(core, CoreContext::Retired, fx);
        fx.push(Effect::Retired { core });
        Ok(())
    }

    pub(crate) fn reinstate(
        &mut self,
        topo: &Topology,
        core: CoreId,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        if self.cores[core.index()].context != CoreContext::Retired {
            return Err(Violation::protocol(format!("core {core} is not retired")));
        }
        self.set_context(core, CoreContext::Kernel, fx);
        fx.push(Effect::Reinstated { core });
        self.load_next(topo, core, fx)
    }

    /// Puts a core straight into the user loop of `service`, as if an earlier
    /// kernel dispatch had happened. Used to start experiments warm.
    pub fn prewarm(
        &mut self,
        topo: &Topology,
        core: CoreId,
        service: ServiceId,
    ) -> Result<Vec<Effect>, Violation> {
        let mut fx = Vec::new();
        let cs = self.cores[core.index()];
        let Activity::Stalled(line) = cs.activity else {
            return Err(Violation::protocol(format!("core {core} is not an idle dispatcher")));
        };
        let ep = topo
            .service(service)
            .and_then(|s| s.endpoints.iter().find(|e| self.endpoints[e.index()].claimed_by.is_none()))
            .copied()
            .ok_or_else(|| Violation::protocol(format!("service {service} has no free endpoint")))?;
        let ls = &mut self.lines[line.index()];
        ls.pending = None;
        ls.timer_armed = false;
        self.cores[core.index()].activity = Activity::Idle;
        self.endpoints[ep.index()].claimed_by = Some(core);
        self.cores[core.index()].context = CoreContext::User(ep);
        self.mirror[core.index()] = CoreContext::User(ep);
        self.load_next(topo, core, &mut fx)?;
        Ok(fx)
    }
}
