//! Breadth-first explicit-state exploration of the protocol and scheduler on
//! small configurations, using the same [`apply`] the simulator uses.
//!
//! Timers are abstract: a TRY_AGAIN may fire at any point while its load is
//! pending. Safety properties S1-S5 are our formalisation of "all races are
//! benign":
//!
//! - S1: every request is transmitted at most once and no response is
//!   overwritten before the NIC fetched it.
//! - S2: no line is loaded by one core while exclusive at another.
//! - S3: every pending load has an armed timer and a TRY_AGAIN transition.
//! - S4: a latched IPI always has an enabled path to kernel entry.
//! - S5: terminal states have no in-flight requests, queued records or
//!   occupied lines.

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{apply, Action, Enablement, MachineState, Mutation, Property, Topology, Violation};
use crate::model::{CoreId, FlowKey, LineId, RequestId, RpcRequest, ServiceId, SimTime};
use crate::protocol::Holder;
use crate::scheduler::{Activity, CoreContext};
use crate::trace::TraceEvent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckerConfig {
    pub cores: u16,
    /// User endpoints, spread round-robin over `services`.
    pub endpoints: u32,
    pub services: u32,
    pub packets: u32,
    pub enable_preemption: bool,
    pub enable_retire: bool,
    /// Let packet arrivals interleave with everything else. When off, a
    /// packet arrives only once nothing else can happen.
    pub permute_arrivals: bool,
    /// Let timeouts interleave with everything else. When off, TRY_AGAIN
    /// fires only once nothing but arrivals and timeouts are enabled.
    pub permute_timeouts: bool,
    /// Canonicalise states under core renaming.
    pub symmetry: bool,
    pub max_states: u64,
    pub mutation: Option<Mutation>,
}

impl Default for CheckerConfig {
    fn default() -> Self {
        CheckerConfig {
            cores: 1,
            endpoints: 1,
            services: 1,
            packets: 1,
            enable_preemption: false,
            enable_retire: false,
            permute_arrivals: true,
            permute_timeouts: true,
            symmetry: false,
            max_states: 10_000_000,
            mutation: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("invalid checker config: {0}")]
    Config(String),
    #[error("state bound exceeded: {states} states visited, frontier {frontier}")]
    BoundExceeded { states: u64, frontier: u64 },
}

impl CheckerConfig {
    pub fn validate(&self) -> Result<(), CheckError> {
        let bad = |m: &str| Err(CheckError::Config(m.to_string()));
        if !(1..=3).contains(&self.cores) {
            return bad("cores must be in 1..=3");
        }
        if !(1..=2).contains(&self.endpoints) {
            return bad("endpoints must be in 1..=2");
        }
        if !(1..=4).contains(&self.packets) {
            return bad("packets must be in 1..=4");
        }
        if self.services == 0 || self.services > self.endpoints {
            return bad("services must be in 1..=endpoints");
        }
        if self.max_states == 0 {
            return bad("max_states must be positive");
        }
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        let mut instances = vec![0u32; self.services as usize];
        for e in 0..self.endpoints {
            instances[(e % self.services) as usize] += 1;
        }
        let mut topo = Topology::new(self.cores, &instances, 0, u32::MAX);
        topo.mutation = self.mutation;
        topo
    }

    /// Packet `i` targets service `i mod services` with a small payload.
    pub fn packet(&self, i: u32) -> RpcRequest {
        let service = i % self.services;
        RpcRequest {
            request_id: RequestId(i as u64),
            flow_key: FlowKey {
                src_addr: 1,
                src_port: 1000 + i as u16,
                dst_addr: 2,
                dst_port: service as u16,
            },
            service_id: ServiceId(service),
            method_id: 0,
            args_len: 16,
            arrival_time: SimTime(i as u64),
            handler_ns: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Node {
    machine: MachineState,
    arrived: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub property: Property,
    pub detail: String,
    /// Actions from the initial state; the last one (or the state it
    /// reaches) breaks the property.
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckReport {
    pub states_visited: u64,
    pub transitions: u64,
    pub terminal_states: u64,
    pub max_depth: u32,
    pub violations: Vec<Counterexample>,
    /// A path to one of the deepest states reached.
    pub witness: Vec<Action>,
}

pub struct Checker {
    cfg: CheckerConfig,
    topo: Topology,
}

impl Checker {
    pub fn new(cfg: CheckerConfig) -> Result<Self, CheckError> {
        cfg.validate()?;
        let topo = cfg.topology();
        Ok(Checker { cfg, topo })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    fn enablement(&self, n: &Node) -> Enablement {
        Enablement {
            preemption: self.cfg.enable_preemption,
            retire: self.cfg.enable_retire,
            work_remains: n.arrived < self.cfg.packets || n.machine.has_in_flight(),
        }
    }

    /// All actions enabled in `n`, after the configured ordering reductions.
    fn successors(&self, n: &Node, en: Enablement) -> (Vec<Action>, Vec<Action>) {
        let all = n.machine.enabled_actions(&self.topo, en);
        let is_timeout = |a: &Action| matches!(a, Action::TryAgain { .. });
        let mut acts: Vec<Action> = if self.cfg.permute_timeouts {
            all.clone()
        } else {
            let others: Vec<Action> = all.iter().filter(|a| !is_timeout(a)).cloned().collect();
            if others.is_empty() {
                all.clone()
            } else {
                others
            }
        };
        if n.arrived < self.cfg.packets && (self.cfg.permute_arrivals || acts.is_empty()) {
            acts.push(Action::Arrive(self.cfg.packet(n.arrived)));
        }
        (acts, all)
    }

    fn canonical(&self, n: Node) -> Node {
        if !self.cfg.symmetry || self.topo.cores < 2 {
            return n;
        }
        permutations(self.topo.cores)
            .into_iter()
            .map(|p| Node {
                machine: permute(&self.topo, &n.machine, &p),
                arrived: n.arrived,
            })
            .min()
            .expect("at least the identity permutation")
    }

    fn initial(&self) -> Node {
        Node {
            machine: MachineState::new(&self.topo),
            arrived: 0,
        }
    }

    fn step(&self, n: &Node, a: &Action) -> Result<Node, Violation> {
        let mut next = n.clone();
        apply(&self.topo, &mut next.machine, a)?;
        if let Action::Arrive(_) = a {
            next.arrived += 1;
        }
        Ok(next)
    }

    pub fn explore(&self) -> Result<CheckReport, CheckError> {
        let mut seen: IndexSet<Node> = IndexSet::new();
        let mut parent: Vec<Option<(u32, Action)>> = Vec::new();
        let mut depth: Vec<u32> = Vec::new();
        seen.insert(self.canonical(self.initial()));
        parent.push(None);
        depth.push(0);
        let mut transitions = 0u64;
        let mut terminals = 0u64;
        let mut failures: Vec<(usize, Option<Action>, Violation)> = Vec::new();
        let mut head = 0usize;
        while head < seen.len() {
            let node = seen[head].clone();
            let en = self.enablement(&node);
            let (acts, all) = self.successors(&node, en);
            let terminal = acts.is_empty();
            if let Err(v) = node.machine.check_properties(&all, en, terminal) {
                failures.push((head, None, v));
                head += 1;
                continue;
            }
            if terminal {
                terminals += 1;
            }
            for a in acts {
                transitions += 1;
                match self.step(&node, &a) {
                    Ok(next) => {
                        let (_, fresh) = seen.insert_full(self.canonical(next));
                        if fresh {
                            parent.push(Some((head as u32, a)));
                            depth.push(depth[head] + 1);
                            if seen.len() as u64 > self.cfg.max_states {
                                return Err(CheckError::BoundExceeded {
                                    states: seen.len() as u64,
                                    frontier: (seen.len() - head - 1) as u64,
                                });
                            }
                        }
                    }
                    Err(v) => failures.push((head, Some(a), v)),
                }
            }
            head += 1;
        }
        let path_to = |mut i: usize| {
            let mut idx = vec![i];
            while let Some((p, _)) = &parent[i] {
                i = *p as usize;
                idx.push(i);
            }
            idx.reverse();
            idx
        };
        let violations = failures
            .into_iter()
            .map(|(at, last, v)| {
                let idx = path_to(at);
                let mut actions = self.concretise(&seen, &idx);
                if let Some(a) = last {
                    actions.push(self.concretise_failing(&actions, &a, v.property));
                }
                Counterexample {
                    property: v.property,
                    detail: v.detail,
                    actions,
                }
            })
            .collect();
        let deepest = (0..depth.len()).max_by_key(|&i| (depth[i], std::cmp::Reverse(i))).unwrap_or(0);
        Ok(CheckReport {
            states_visited: seen.len() as u64,
            transitions,
            terminal_states: terminals,
            max_depth: depth.iter().copied().max().unwrap_or(0),
            violations,
            witness: self.concretise(&seen, &path_to(deepest)),
        })
    }

    /// Turns a path of stored (possibly canonicalised) states into actions
    /// that replay from the real initial state.
    fn concretise(&self, seen: &IndexSet<Node>, idx: &[usize]) -> Vec<Action> {
        let mut cur = self.initial();
        let mut out = Vec::new();
        for &target in &idx[1..] {
            let en = self.enablement(&cur);
            let (acts, _) = self.successors(&cur, en);
            let (a, next) = acts
                .into_iter()
                .find_map(|a| {
                    let next = self.step(&cur, &a).ok()?;
                    (self.canonical(next.clone()) == seen[target]).then_some((a, next))
                })
                .expect("every stored state is reachable from its parent");
            out.push(a);
            cur = next;
        }
        out
    }

    fn concretise_failing(&self, prefix: &[Action], stored: &Action, property: Property) -> Action {
        if !self.cfg.symmetry {
            return stored.clone();
        }
        let mut cur = self.initial();
        for a in prefix {
            cur = self.step(&cur, a).expect("prefix replays");
        }
        let en = self.enablement(&cur);
        self.successors(&cur, en)
            .0
            .into_iter()
            .find(|a| matches!(self.step(&cur, a), Err(v) if v.property == property))
            .unwrap_or_else(|| stored.clone())
    }

    /// States along `actions` from the initial state, stopping at the first
    /// failing action.
    pub fn path_states(&self, actions: &[Action]) -> (Vec<MachineState>, Option<Violation>) {
        let mut cur = self.initial();
        let mut states = vec![cur.machine.clone()];
        for a in actions {
            match self.step(&cur, a) {
                Ok(n) => {
                    cur = n;
                    states.push(cur.machine.clone());
                }
                Err(v) => return (states, Some(v)),
            }
        }
        (states, None)
    }

    /// Renders `actions` in the simulator trace schema, with the step index as
    /// the time column.
    pub fn trace_events(&self, actions: &[Action]) -> Vec<TraceEvent> {
        let mut cur = self.initial();
        let mut out = Vec::new();
        for (i, a) in actions.iter().enumerate() {
            let t = SimTime(i as u64);
            out.push(TraceEvent::from_action(t, a, &cur.machine));
            let mut next = cur.clone();
            match apply(&self.topo, &mut next.machine, a) {
                Ok(fx) => {
                    out.extend(fx.iter().map(|e| TraceEvent::from_effect(t, e)));
                    if let Action::Arrive(_) = a {
                        next.arrived += 1;
                    }
                    cur = next;
                }
                Err(_) => break,
            }
        }
        out
    }
}

fn permutations(n: u16) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    let mut p: Vec<u16> = (0..n).collect();
    fn rec(k: usize, p: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
        if k == p.len() {
            out.push(p.clone());
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            rec(k + 1, p, out);
            p.swap(k, i);
        }
    }
    rec(0, &mut p, &mut out);
    out
}

/// Renames core `c` to `perm[c]`, moving kernel endpoints and their lines
/// along with their cores.
fn permute(topo: &Topology, m: &MachineState, perm: &[u16]) -> MachineState {
    let kernel_lines = 2 * topo.cores as u32;
    let core = |c: CoreId| CoreId(perm[c.index()]);
    let line = |l: LineId| {
        if l.0 < kernel_lines {
            LineId(2 * perm[(l.0 / 2) as usize] as u32 + (l.0 & 1))
        } else {
            l
        }
    };
    let holder = |h: Holder| match h {
        Holder::Nic => Holder::Nic,
        Holder::Shared(c) => Holder::Shared(core(c)),
        Holder::Exclusive(c) => Holder::Exclusive(core(c)),
    };
    let mut out = m.clone();
    for (c, cs) in m.cores.iter().enumerate() {
        let mut ncs = *cs;
        ncs.activity = match cs.activity {
            Activity::Idle => Activity::Idle,
            Activity::Stalled(l) => Activity::Stalled(line(l)),
            Activity::Executing { request, line: l } => Activity::Executing { request, line: line(l) },
        };
        let nc = perm[c] as usize;
        out.cores[nc] = ncs;
        out.mirror[nc] = m.mirror[c];
        out.mirror_pending[nc] = m.mirror_pending[c];
    }
    for (l, ls) in m.lines.iter().enumerate() {
        let mut nls = *ls;
        nls.holder = holder(ls.holder);
        nls.pending = ls.pending.map(core);
        out.lines[line(LineId(l as u32)).index()] = nls;
    }
    for (e, es) in m.endpoints.iter().enumerate() {
        let mut nes = es.clone();
        nes.claimed_by = es.claimed_by.map(core);
        let ne = if (e as u32) < topo.cores as u32 { perm[e] as usize } else { e };
        out.endpoints[ne] = nes;
    }
    debug_assert!(out
        .cores
        .iter()
        .all(|c| !matches!(c.context, CoreContext::User(ep) if topo.is_kernel_endpoint(ep))));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn explore(cfg: CheckerConfig) -> CheckReport {
        Checker::new(cfg).unwrap().explore().unwrap()
    }

    #[test]
    fn bounds_enforced() {
        assert!(Checker::new(CheckerConfig { cores: 4, ..Default::default() }).is_err());
        assert!(Checker::new(CheckerConfig { packets: 0, ..Default::default() }).is_err());
        assert!(Checker::new(CheckerConfig { services: 2, ..Default::default() }).is_err());
    }

    #[test]
    fn state_cap_reports_partial_result() {
        let err = Checker::new(CheckerConfig {
            cores: 2,
            packets: 2,
            max_states: 10,
            ..Default::default()
        })
        .unwrap()
        .explore()
        .unwrap_err();
        assert!(matches!(err, CheckError::BoundExceeded { states: 11, .. }));
    }

    #[test]
    fn symmetry_reduces_without_changing_verdict() {
        let base = CheckerConfig {
            cores: 2,
            packets: 2,
            enable_preemption: true,
            ..Default::default()
        };
        let plain = explore(base.clone());
        let sym = explore(CheckerConfig { symmetry: true, ..base });
        assert!(plain.violations.is_empty() && sym.violations.is_empty());
        assert!(sym.states_visited < plain.states_visited);
    }

    #[test]
    fn witness_replays() {
        let c = Checker::new(CheckerConfig {
            cores: 2,
            packets: 2,
            symmetry: true,
            ..Default::default()
        })
        .unwrap();
        let r = c.explore().unwrap();
        let (states, v) = c.path_states(&r.witness);
        assert!(v.is_none());
        assert_eq!(states.len() as u32, r.max_depth + 1);
    }

    #[test]
    fn serialised_ordering_is_smaller() {
        let base = CheckerConfig {
            cores: 2,
            packets: 2,
            ..Default::default()
        };
        let full = explore(base.clone());
        let reduced = explore(CheckerConfig {
            permute_arrivals: false,
            permute_timeouts: false,
            ..base
        });
        assert!(reduced.violations.is_empty());
        assert!(reduced.states_visited < full.states_visited);
    }

    #[test]
    fn permutations_count() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(1), vec![vec![0]]);
    }
}
