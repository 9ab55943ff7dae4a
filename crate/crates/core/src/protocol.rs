//! NIC↔CPU cache-line protocol: stalled loads on CONTROL lines, fulfilment,
//! alternation between the two lines of an endpoint, fetch-exclusive response
//! retrieval and TRY_AGAIN timeouts.
//!
//! Coherence is modelled at message level. A line is either held by the NIC,
//! shared by the core that received a record on it, or exclusive at the core
//! that wrote its response into it.

use std::collections::VecDeque;

use crate::machine::{
    AfterTryAgain, DeliveryKind, Effect, MachineState, Mutation, Property, RequestStatus,
    Topology, Violation,
};
use crate::model::{CoreId, LineId, RequestId};
use crate::scheduler::{Activity, CoreContext};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Holder {
    #[default]
    Nic,
    Shared(CoreId),
    Exclusive(CoreId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LineContent {
    #[default]
    Empty,
    /// Dispatch record handed to a core.
    Record(RequestId),
    /// Response written by the core, not yet pulled back by the NIC.
    Response(RequestId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LineState {
    pub content: LineContent,
    pub holder: Holder,
    /// Core whose load the NIC is holding back.
    pub pending: Option<CoreId>,
    pub timer_armed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EndpointState {
    /// Which CONTROL line the next load targets.
    pub active: u8,
    pub claimed_by: Option<CoreId>,
    /// Records waiting on the NIC for this endpoint's next load.
    pub queue: VecDeque<RequestId>,
}

/// Kind of a protocol message between NIC and core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Load,
    Fulfill,
    TryAgain,
    Retire,
    FetchExclusive,
}

impl MessageKind {
    /// TRY_AGAIN and RETIRE are dummy fills with no payload.
    pub fn carries_payload(self) -> bool {
        matches!(self, MessageKind::Fulfill | MessageKind::FetchExclusive)
    }
}

impl MachineState {
    pub(crate) fn sibling_fetched(&self, topo: &Topology, line: LineId) -> bool {
        !matches!(
            self.lines[topo.sibling(line).index()].content,
            LineContent::Response(_)
        )
    }

    /// A core issues a load on a NIC-homed line and stalls until it is filled.
    pub(crate) fn stall(
        &mut self,
        core: CoreId,
        line: LineId,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        let cs = &self.cores[core.index()];
        if !matches!(cs.activity, Activity::Idle) {
            return Err(Violation::protocol(format!(
                "core {core} issued a load while {:?}",
                cs.activity
            )));
        }
        let ls = &mut self.lines[line.index()];
        if let Some(other) = ls.pending {
            return Err(Violation::protocol(format!(
                "core {core} loaded line {line} already pending for core {other}"
            )));
        }
        ls.pending = Some(core);
        ls.timer_armed = true;
        self.cores[core.index()].activity = Activity::Stalled(line);
        fx.push(Effect::Stalled { core, line });
        Ok(())
    }

    /// The NIC fulfils the pending load on `line` with the next queued record.
    pub(crate) fn deliver(
        &mut self,
        topo: &Topology,
        line: LineId,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        let core = self.lines[line.index()]
            .pending
            .ok_or_else(|| Violation::protocol(format!("fulfil on line {line} with no pending load")))?;
        let ep = topo.endpoint_of_line(line);
        let kernel = topo.is_kernel_endpoint(ep);
        if topo.mutation != Some(Mutation::FulfillBeforeFetch) && !self.sibling_fetched(topo, line) {
            return Err(Violation::protocol(format!(
                "line {line} fulfilled before its sibling's response was fetched"
            )));
        }
        let request = if kernel {
            self.kernel_queue.pop_front()
        } else {
            self.endpoints[ep.index()].queue.pop_front()
        }
        .ok_or_else(|| Violation::protocol(format!("fulfil on line {line} with nothing queued")))?;

        let ls = &mut self.lines[line.index()];
        if let LineContent::Response(lost) = ls.content {
            return Err(Violation::new(
                Property::S1,
                format!("response for request {lost} on line {line} overwritten before fetch-exclusive"),
            ));
        }
        ls.pending = None;
        ls.timer_armed = false;
        self.endpoints[ep.index()].active ^= 1;
        self.cores[core.index()].activity = Activity::Idle;

        if self.cores[core.index()].pending_ipi {
            // The core takes the interrupt as soon as its load retires; the
            // record goes back to software.
            self.kernel_queue.push_back(request);
            fx.push(Effect::Requeued { core, request });
            return self.kernel_entry(topo, core, fx);
        }

        let ls = &mut self.lines[line.index()];
        ls.content = LineContent::Record(request);
        ls.holder = Holder::Shared(core);
        self.cores[core.index()].activity = Activity::Executing { request, line };
        let kind = if kernel {
            match self.kernel_dispatch(topo, core, line, request, fx)? {
                Some(kind) => kind,
                None => return Ok(()),
            }
        } else {
            DeliveryKind::User
        };
        fx.push(Effect::Delivered {
            core,
            line,
            request,
            kind,
        });
        Ok(())
    }

    /// The NIC pulls a written response out of the core's cache and sends it.
    pub(crate) fn fetch_exclusive(&mut self, line: LineId, fx: &mut Vec<Effect>) -> Result<(), Violation> {
        let ls = &mut self.lines[line.index()];
        let LineContent::Response(request) = ls.content else {
            return Err(Violation::new(
                Property::S1,
                format!("fetch-exclusive on line {line} which holds no response"),
            ));
        };
        ls.content = LineContent::Empty;
        ls.holder = Holder::Nic;
        let slot = self.request_mut(request)?;
        if slot.status != RequestStatus::InFlight {
            return Err(Violation::new(
                Property::S1,
                format!("request {request} transmitted twice"),
            ));
        }
        slot.status = RequestStatus::Transmitted;
        fx.push(Effect::Transmitted {
            line: Some(line),
            request,
        });
        Ok(())
    }

    /// The TRY_AGAIN timer for `line` fires. A no-op when the load was already
    /// answered.
    pub(crate) fn try_again(
        &mut self,
        topo: &Topology,
        line: LineId,
        then: AfterTryAgain,
        fx: &mut Vec<Effect>,
    ) -> Result<(), Violation> {
        let ls = &mut self.lines[line.index()];
        let Some(core) = ls.pending else {
            return Ok(());
        };
        ls.pending = None;
        ls.timer_armed = false;
        self.cores[core.index()].activity = Activity::Idle;
        fx.push(Effect::TryAgainDelivered { core, line });
        let cs = &self.cores[core.index()];
        if cs.pending_ipi {
            return self.kernel_entry(topo, core, fx);
        }
        if then == AfterTryAgain::Yield && matches!(cs.context, CoreContext::User(_)) {
            return self.voluntary_yield(topo, core, fx);
        }
        self.stall(core, line, fx)
    }
}
