//! Event trace shared by the simulator and the checker: one tab-separated
//! line per event with columns `time, kind, core, line, request_id`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::machine::{Action, AfterComplete, AfterTryAgain, Effect, MachineState};
use crate::model::{CoreId, LineId, RequestId, RpcRequest, SimTime};
use crate::scheduler::Activity;

pub const TRACE_HEADER: &str = "time\tkind\tcore\tline\trequest_id";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: SimTime,
    pub kind: String,
    pub core: Option<CoreId>,
    pub line: Option<LineId>,
    pub request: Option<RequestId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {0}: expected 5 tab-separated fields")]
    Fields(usize),
    #[error("line {line}: bad value {value:?}")]
    Value { line: usize, value: String },
    #[error("missing trace header")]
    Header,
    #[error("line {0}: action {1:?} lacks a required field")]
    Incomplete(usize, String),
    #[error("line {0}: arrival of unknown request {1}")]
    UnknownRequest(usize, RequestId),
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.time,
            self.kind,
            opt(self.core),
            opt(self.line),
            opt(self.request)
        )
    }
}

impl TraceEvent {
    fn new(time: SimTime, kind: &str) -> Self {
        TraceEvent {
            time,
            kind: kind.to_string(),
            core: None,
            line: None,
            request: None,
        }
    }

    fn core(mut self, c: CoreId) -> Self {
        self.core = Some(c);
        self
    }

    fn line(mut self, l: LineId) -> Self {
        self.line = Some(l);
        self
    }

    fn request(mut self, r: RequestId) -> Self {
        self.request = Some(r);
        self
    }

    /// Describes `action` as applied to `before`, filling in the core a line
    /// action concerns where the state tells us.
    pub fn from_action(time: SimTime, action: &Action, before: &MachineState) -> Self {
        let ev = TraceEvent::new(time, action.kind());
        let pending = |l: LineId| before.lines.get(l.index()).and_then(|s| s.pending);
        match action {
            Action::Arrive(r) => ev.request(r.request_id),
            Action::Deliver(l) | Action::TryAgain { line: l, .. } => {
                let ev = ev.line(*l);
                match pending(*l) {
                    Some(c) => ev.core(c),
                    None => ev,
                }
            }
            Action::FetchExclusive(l) => ev.line(*l),
            Action::Complete { core, .. } => {
                let ev = ev.core(*core);
                match before.cores.get(core.index()).map(|c| c.activity) {
                    Some(Activity::Executing { request, line }) => ev.line(line).request(request),
                    _ => ev,
                }
            }
            Action::Preempt(c) | Action::Retire(c) | Action::Reinstate(c) | Action::MirrorSync(c) => {
                ev.core(*c)
            }
            Action::DmaDone(r) => ev.request(*r),
        }
    }

    pub fn from_effect(time: SimTime, effect: &Effect) -> Self {
        let ev = |k: &str| TraceEvent::new(time, k);
        match *effect {
            Effect::Decided { request, decision } => {
                ev(&format!("route_{}", decision.path().as_str())).request(request)
            }
            Effect::Stalled { core, line } => ev("load").core(core).line(line),
            Effect::Delivered { core, line, request, .. } => {
                ev("fulfill").core(core).line(line).request(request)
            }
            Effect::Requeued { core, request } => ev("requeue").core(core).request(request),
            Effect::TryAgainDelivered { core, line } => ev("try_again_fill").core(core).line(line),
            Effect::IpiLatched { core } => ev("ipi_latched").core(core),
            Effect::KernelEntry { core } => ev("kernel_entry").core(core),
            Effect::Yielded { core } => ev("yield").core(core),
            Effect::ContextChanged { core, .. } => ev("context").core(core),
            Effect::ResponseWritten { core, line, request } => {
                ev("response").core(core).line(line).request(request)
            }
            Effect::Transmitted { line, request } => {
                let e = ev("transmit").request(request);
                match line {
                    Some(l) => e.line(l),
                    None => e,
                }
            }
            Effect::Retired { core } => ev("retired").core(core),
            Effect::Reinstated { core } => ev("reinstated").core(core),
            Effect::MirrorApplied { core, .. } => ev("mirror").core(core),
            Effect::EndpointDrained { .. } => ev("drain"),
            Effect::Dropped { request, .. } => ev("drop").request(request),
        }
    }

    /// Rebuilds the action this line records, if it records one. Arrivals
    /// are resolved through `lookup`.
    pub fn to_action(
        &self,
        line_no: usize,
        lookup: &dyn Fn(RequestId) -> Option<RpcRequest>,
    ) -> Result<Option<Action>, TraceError> {
        let need_line = || self.line.ok_or_else(|| TraceError::Incomplete(line_no, self.kind.clone()));
        let need_core = || self.core.ok_or_else(|| TraceError::Incomplete(line_no, self.kind.clone()));
        let need_req = || self.request.ok_or_else(|| TraceError::Incomplete(line_no, self.kind.clone()));
        let a = match self.kind.as_str() {
            "arrive" => {
                let id = need_req()?;
                Action::Arrive(lookup(id).ok_or(TraceError::UnknownRequest(line_no, id))?)
            }
            "deliver" => Action::Deliver(need_line()?),
            "fetch_exclusive" => Action::FetchExclusive(need_line()?),
            "try_again" => Action::TryAgain { line: need_line()?, then: AfterTryAgain::Reload },
            "try_again_yield" => Action::TryAgain { line: need_line()?, then: AfterTryAgain::Yield },
            "complete" => Action::Complete { core: need_core()?, then: AfterComplete::Continue },
            "complete_yield" => Action::Complete { core: need_core()?, then: AfterComplete::Yield },
            "ipi" => Action::Preempt(need_core()?),
            "retire" => Action::Retire(need_core()?),
            "reinstate" => Action::Reinstate(need_core()?),
            "mirror_sync" => Action::MirrorSync(need_core()?),
            "dma_done" => Action::DmaDone(need_req()?),
            _ => return Ok(None),
        };
        Ok(Some(a))
    }
}

pub fn format_trace(events: &[TraceEvent]) -> String {
    let mut out = String::with_capacity(32 * (events.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for e in events {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

fn field<T: FromStr>(s: &str, line: usize) -> Result<Option<T>, TraceError> {
    if s == "-" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| TraceError::Value {
        line,
        value: s.to_string(),
    })
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRACE_HEADER => {}
        _ => return Err(TraceError::Header),
    }
    let mut out = Vec::new();
    for (i, l) in lines {
        let n = i + 1;
        if l.is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 5 {
            return Err(TraceError::Fields(n));
        }
        let time = field::<u64>(f[0], n)?.ok_or(TraceError::Value {
            line: n,
            value: f[0].into(),
        })?;
        out.push(TraceEvent {
            time: SimTime(time),
            kind: f[1].to_string(),
            core: field::<u16>(f[2], n)?.map(CoreId),
            line: field::<u32>(f[3], n)?.map(LineId),
            request: field::<u64>(f[4], n)?.map(RequestId),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_parse_round_trip() {
        let evs = vec![
            TraceEvent::new(SimTime(5), "deliver").line(LineId(3)).core(CoreId(1)),
            TraceEvent::new(SimTime(9), "arrive").request(RequestId(7)),
            TraceEvent::new(SimTime(9), "drain"),
        ];
        let text = format_trace(&evs);
        assert!(text.starts_with(TRACE_HEADER));
        assert!(text.contains("5\tdeliver\t1\t3\t-\n"));
        assert_eq!(parse_trace(&text).unwrap(), evs);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert_eq!(parse_trace("nope\n"), Err(TraceError::Header));
        let bad = format!("{TRACE_HEADER}\n1\tdeliver\t-\n");
        assert_eq!(parse_trace(&bad), Err(TraceError::Fields(2)));
        let bad = format!("{TRACE_HEADER}\nx\tdeliver\t-\t-\t-\n");
        assert!(matches!(parse_trace(&bad), Err(TraceError::Value { .. })));
    }

    #[test]
    fn effect_lines_are_not_actions() {
        let ev = TraceEvent::new(SimTime(0), "kernel_entry").core(CoreId(0));
        assert_eq!(ev.to_action(1, &|_| None).unwrap(), None);
        let ev = TraceEvent::new(SimTime(0), "ipi").core(CoreId(2));
        assert_eq!(ev.to_action(1, &|_| None).unwrap(), Some(Action::Preempt(CoreId(2))));
        let ev = TraceEvent::new(SimTime(0), "deliver");
        assert!(ev.to_action(1, &|_| None).is_err());
    }
}
