//! Per-request cost ledgers and their summary into the report table.

use std::fmt::Write as _;

use thiserror::Error;

use crate::datapath::Path;
use crate::model::{CostModel, RequestId, ServiceId, SimTime};

/// A charged stage of the receive path. `step()` gives the classic receive
/// step number where one exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    NicPipeline,
    LineTransfer,
    DmaWrite,
    DescriptorFetch,
    Interrupt,
    KernelProto,
    ProcessLookup,
    CoreSelection,
    Schedule,
    ContextSwitch,
    Unmarshal,
    FnLookup,
    Jump,
    Handler,
    Transmit,
    Queueing,
}

impl Stage {
    pub fn step(self) -> Option<u8> {
        Some(match self {
            Stage::Interrupt => 4,
            Stage::KernelProto => 5,
            Stage::ProcessLookup => 6,
            Stage::CoreSelection => 7,
            Stage::Schedule => 8,
            Stage::ContextSwitch => 9,
            Stage::Unmarshal => 10,
            Stage::FnLookup => 11,
            Stage::Jump => 12,
            _ => return None,
        })
    }

    /// Whether the stage burns host CPU cycles.
    pub fn on_cpu(self) -> bool {
        !matches!(
            self,
            Stage::NicPipeline
                | Stage::LineTransfer
                | Stage::DmaWrite
                | Stage::DescriptorFetch
                | Stage::Transmit
                | Stage::Queueing
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestLedger {
    pub request_id: RequestId,
    pub service: ServiceId,
    pub path: Path,
    pub entries: Vec<(Stage, u64)>,
    pub t_arrival_nic: SimTime,
    pub t_handler_start: Option<SimTime>,
    pub t_response_on_wire: Option<SimTime>,
    pub dropped: bool,
}

impl RequestLedger {
    pub fn new(request_id: RequestId, service: ServiceId, path: Path, t_arrival_nic: SimTime) -> Self {
        RequestLedger {
            request_id,
            service,
            path,
            entries: Vec::new(),
            t_arrival_nic,
            t_handler_start: None,
            t_response_on_wire: None,
            dropped: false,
        }
    }

    pub fn charge(&mut self, stage: Stage, ns: u64) {
        self.entries.push((stage, ns));
    }

    pub fn completed(&self) -> bool {
        self.t_response_on_wire.is_some()
    }

    pub fn end_system_latency(&self) -> Option<u64> {
        self.t_response_on_wire.map(|t| t - self.t_arrival_nic)
    }

    pub fn dispatch_overhead(&self) -> Option<u64> {
        self.t_handler_start.map(|t| t - self.t_arrival_nic)
    }

    pub fn stage_ns(&self, stage: Stage) -> u64 {
        self.entries.iter().filter(|e| e.0 == stage).map(|e| e.1).sum()
    }

    /// CPU cycles spent getting the request to its handler.
    pub fn dispatch_cycles(&self, cost: &CostModel) -> u64 {
        self.entries
            .iter()
            .filter(|(s, _)| s.on_cpu() && *s != Stage::Handler)
            .map(|&(_, ns)| cost.cycles(ns))
            .sum()
    }

    pub fn cpu_cycles(&self, cost: &CostModel) -> u64 {
        self.entries
            .iter()
            .filter(|(s, _)| s.on_cpu())
            .map(|&(_, ns)| cost.cycles(ns))
            .sum()
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[u64], pct: u32) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (pct as usize * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Percentiles {
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl Percentiles {
    pub fn of(mut v: Vec<u64>) -> Self {
        v.sort_unstable();
        Percentiles {
            p50: nearest_rank(&v, 50),
            p90: nearest_rank(&v, 90),
            p99: nearest_rank(&v, 99),
            max: v.last().copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSummary {
    pub path: Path,
    pub count: u64,
    pub latency: Percentiles,
    pub dispatch: Percentiles,
    pub cycles_total: u64,
    pub cycles_dispatch: u64,
    pub spin_cycles: u64,
    pub drops: u64,
}

/// Counters a driver reports alongside its ledgers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunTotals {
    pub injected: u64,
    pub in_flight: u64,
    pub try_again: u64,
    pub scheduler_cycles: u64,
    /// Busy-poll cycles per path.
    pub spin: Vec<(Path, u64)>,
    pub end_time: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub model: String,
    pub cost_label: String,
    pub rows: Vec<PathSummary>,
    pub injected: u64,
    pub completed: u64,
    pub in_flight: u64,
    pub dropped: u64,
    pub try_again: u64,
    pub scheduler_cycles: u64,
    pub end_time: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("conservation violated: injected {injected} != completed {completed} + in-flight {in_flight} + dropped {dropped}")]
    Conservation {
        injected: u64,
        completed: u64,
        in_flight: u64,
        dropped: u64,
    },
}

/// Short digest of a cost model, printed with every report.
pub fn cost_label(cost: &CostModel) -> String {
    use sha2::{Digest, Sha256};
    let text = toml::to_string(cost).expect("cost model serialises");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

pub fn summarize(
    model: &str,
    cost: &CostModel,
    ledgers: &[RequestLedger],
    totals: &RunTotals,
) -> Result<Report, MetricsError> {
    let completed = ledgers.iter().filter(|l| l.completed()).count() as u64;
    let dropped = ledgers.iter().filter(|l| l.dropped).count() as u64;
    if totals.injected != completed + totals.in_flight + dropped {
        return Err(MetricsError::Conservation {
            injected: totals.injected,
            completed,
            in_flight: totals.in_flight,
            dropped,
        });
    }
    let mut paths: Vec<Path> = ledgers.iter().map(|l| l.path).collect();
    paths.extend(totals.spin.iter().map(|s| s.0));
    paths.sort();
    paths.dedup();
    let rows = paths
        .into_iter()
        .map(|path| {
            let of_path: Vec<&RequestLedger> = ledgers.iter().filter(|l| l.path == path).collect();
            let done: Vec<&RequestLedger> = of_path.iter().copied().filter(|l| l.completed()).collect();
            PathSummary {
                path,
                count: done.len() as u64,
                latency: Percentiles::of(done.iter().filter_map(|l| l.end_system_latency()).collect()),
                dispatch: Percentiles::of(done.iter().filter_map(|l| l.dispatch_overhead()).collect()),
                cycles_total: of_path.iter().map(|l| l.cpu_cycles(cost)).sum(),
                cycles_dispatch: of_path.iter().map(|l| l.dispatch_cycles(cost)).sum(),
                spin_cycles: totals.spin.iter().filter(|s| s.0 == path).map(|s| s.1).sum(),
                drops: of_path.iter().filter(|l| l.dropped).count() as u64,
            }
        })
        .collect();
    Ok(Report {
        model: model.to_string(),
        cost_label: cost_label(cost),
        rows,
        injected: totals.injected,
        completed,
        in_flight: totals.in_flight,
        dropped,
        try_again: totals.try_again,
        scheduler_cycles: totals.scheduler_cycles,
        end_time: totals.end_time,
    })
}

pub const TABLE_HEADER: &str =
    "path\tcount\tp50_ns\tp90_ns\tp99_ns\tmax_ns\tcycles_total\tcycles_dispatch\tspin_cycles\tdrops";

impl Report {
    pub fn row(&self, path: Path) -> Option<&PathSummary> {
        self.rows.iter().find(|r| r.path == path)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.path.as_str(),
                r.count,
                r.latency.p50,
                r.latency.p90,
                r.latency.p99,
                r.latency.max,
                r.cycles_total,
                r.cycles_dispatch,
                r.spin_cycles,
                r.drops
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model: {}", self.model);
        let _ = writeln!(out, "cost_model: {}", self.cost_label);
        let _ = writeln!(out, "end_time_ns: {}", self.end_time);
        for r in &self.rows {
            let _ = writeln!(out, "\n[{}]", r.path.as_str());
            let _ = writeln!(out, "  count: {}", r.count);
            let _ = writeln!(out, "  drops: {}", r.drops);
            let l = r.latency;
            let _ = writeln!(
                out,
                "  end_system_latency_ns: p50={} p90={} p99={} max={}",
                l.p50, l.p90, l.p99, l.max
            );
            let d = r.dispatch;
            let _ = writeln!(
                out,
                "  dispatch_overhead_ns: p50={} p90={} p99={} max={}",
                d.p50, d.p90, d.p99, d.max
            );
            let _ = writeln!(out, "  cycles_total: {}", r.cycles_total);
            let _ = writeln!(out, "  cycles_dispatch: {}", r.cycles_dispatch);
            let _ = writeln!(out, "  spin_cycles: {}", r.spin_cycles);
        }
        let _ = writeln!(out, "\ntry_again: {}", self.try_again);
        let _ = writeln!(out, "scheduler_cycles: {}", self.scheduler_cycles);
        let _ = writeln!(
            out,
            "conservation: injected {} = completed {} + in_flight {} + dropped {}",
            self.injected, self.completed, self.in_flight, self.dropped
        );
        out
    }
}

/// Share of completed requests on the fastpath, ignoring the first
/// `warmup` fraction of requests by id.
pub fn fastpath_fraction(ledgers: &[RequestLedger], warmup: f64) -> f64 {
    let mut sorted: Vec<&RequestLedger> = ledgers.iter().collect();
    sorted.sort_by_key(|l| l.request_id);
    let skip = (sorted.len() as f64 * warmup).floor() as usize;
    let tail = &sorted[skip..];
    if tail.is_empty() {
        return 0.0;
    }
    let fast = tail.iter().filter(|l| l.path == Path::Fastpath).count();
    fast as f64 / tail.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(id: u64, path: Path, latency: u64) -> RequestLedger {
        let mut l = RequestLedger::new(RequestId(id), ServiceId(0), path, SimTime(10));
        l.t_handler_start = Some(SimTime(12));
        l.t_response_on_wire = Some(SimTime(10 + latency));
        l.charge(Stage::Jump, 5);
        l
    }

    #[test]
    fn nearest_rank_basics() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(nearest_rank(&v, 50), 50);
        assert_eq!(nearest_rank(&v, 99), 99);
        assert_eq!(nearest_rank(&[7], 90), 7);
        assert_eq!(nearest_rank(&[], 50), 0);
        assert_eq!(nearest_rank(&[1, 2, 3], 50), 2);
    }

    #[test]
    fn empty_run_conserves() {
        let r = summarize("sysname", &CostModel::default(), &[], &RunTotals::default()).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!((r.injected, r.completed, r.in_flight, r.dropped), (0, 0, 0, 0));
        assert!(r.to_text().contains("injected 0 = completed 0 + in_flight 0 + dropped 0"));
    }

    #[test]
    fn constant_stream_percentiles_equal_constant() {
        let ls: Vec<_> = (0..1000).map(|i| ledger(i, Path::Fastpath, 777)).collect();
        let totals = RunTotals {
            injected: 1000,
            ..Default::default()
        };
        let r = summarize("sysname", &CostModel::default(), &ls, &totals).unwrap();
        let row = r.row(Path::Fastpath).unwrap();
        assert_eq!(row.count, 1000);
        assert_eq!(row.latency, Percentiles { p50: 777, p90: 777, p99: 777, max: 777 });
        assert_eq!(row.cycles_dispatch, 1000 * CostModel::default().cycles(5));
    }

    #[test]
    fn conservation_failure_is_an_error() {
        let ls = vec![ledger(0, Path::Fastpath, 1)];
        let totals = RunTotals {
            injected: 2,
            ..Default::default()
        };
        assert!(summarize("x", &CostModel::default(), &ls, &totals).is_err());
    }

    #[test]
    fn tsv_has_exact_columns() {
        let ls = vec![ledger(0, Path::KernelDispatch, 50)];
        let totals = RunTotals {
            injected: 1,
            ..Default::default()
        };
        let tsv = summarize("x", &CostModel::default(), &ls, &totals).unwrap().to_tsv();
        let mut lines = tsv.lines();
        assert_eq!(lines.next(), Some(TABLE_HEADER));
        let row: Vec<&str> = lines.next().unwrap().split('\t').collect();
        assert_eq!(row.len(), 10);
        assert_eq!(row[0], "kernel_dispatch");
    }

    #[test]
    fn fastpath_fraction_skips_warmup() {
        let mut ls: Vec<_> = (0..10).map(|i| ledger(i, Path::Fastpath, 1)).collect();
        ls[0].path = Path::KernelDispatch;
        ls[1].path = Path::KernelDispatch;
        assert_eq!(fastpath_fraction(&ls, 0.2), 1.0);
        assert_eq!(fastpath_fraction(&ls, 0.0), 0.8);
    }
}
