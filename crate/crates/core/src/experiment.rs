//! Library entry points behind the CLI: simulate, check, sweep and replay,
//! plus writing their output files.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::baseline::{BaselineSim, BaselineVariant};
use crate::checker::{CheckError, CheckReport, Checker};
use crate::config::{ConfigError, ExperimentConfig, NicModel};
use crate::machine::{Action, Violation};
use crate::metrics::{summarize, MetricsError, Report, RequestLedger};
use crate::model::{RequestId, SimTime};
use crate::scheduler::SchedulerConfig;
use crate::sim::{SimError, Simulator};
use crate::trace::{format_trace, parse_trace, TraceError, TraceEvent};
use crate::workload::{generate, stream_hash, ArrivalProcess, RequestSource};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("replay diverged from the checker at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Trace(_) | ExperimentError::Io { .. } => 1,
            ExperimentError::Sim(SimError::Setup(_)) => 1,
            ExperimentError::Check(CheckError::Config(_)) => 1,
            ExperimentError::Check(CheckError::BoundExceeded { .. }) => 3,
            ExperimentError::Sim(SimError::Violation { .. })
            | ExperimentError::Metrics(_)
            | ExperimentError::Divergence { .. } => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub struct RunArtifacts {
    pub model: NicModel,
    pub report: Report,
    pub ledgers: Vec<RequestLedger>,
    pub trace: Vec<TraceEvent>,
    pub workload_hash: String,
}

impl RunArtifacts {
    pub fn report_text(&self) -> String {
        format!("workload: {}\n{}", self.workload_hash, self.report.to_text())
    }

    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let files = [
            ("report.tsv", Some(self.report.to_tsv())),
            ("report.txt", Some(self.report_text())),
            ("trace.tsv", (!self.trace.is_empty()).then(|| format_trace(&self.trace))),
        ];
        for (name, body) in files {
            if let Some(body) = body {
                let p = dir.join(name);
                fs::write(&p, body).map_err(io_err(&p))?;
            }
        }
        Ok(())
    }
}

/// Identifies the offered load. Open-loop streams hash their requests; a
/// closed loop's stream depends on the model, so its spec is hashed instead.
pub fn workload_hash(cfg: &ExperimentConfig) -> String {
    let spec = cfg.workload_spec();
    match spec.arrival {
        ArrivalProcess::OpenPoisson { .. } => stream_hash(&generate(&spec)),
        ArrivalProcess::ClosedLoop { .. } => {
            use sha2::{Digest, Sha256};
            let text = format!("{}\n{}", cfg.seed, toml::to_string(&spec).expect("spec serialises"));
            hex::encode(Sha256::digest(text.as_bytes()))
        }
    }
}

pub fn run_simulate(cfg: &ExperimentConfig) -> Result<RunArtifacts, ExperimentError> {
    cfg.validate()?;
    let spec = cfg.workload_spec();
    let source = RequestSource::from_spec(&spec);
    let (ledgers, totals, trace) = match cfg.model {
        NicModel::Sysname => {
            let out = Simulator::new(
                cfg.cost.clone(),
                cfg.scheduler.clone(),
                cfg.rebalance.clone(),
                cfg.sim.clone(),
                spec.cores,
                spec.services,
                source,
            )?
            .run()?;
            (out.ledgers, out.totals, out.trace)
        }
        NicModel::BaselineInterrupt | NicModel::BaselineBypass => {
            let variant = if cfg.model == NicModel::BaselineInterrupt {
                BaselineVariant::Interrupt
            } else {
                BaselineVariant::Bypass
            };
            let out = BaselineSim::new(cfg.cost.clone(), variant, cfg.sim.clone(), spec.cores, source)?.run()?;
            (out.ledgers, out.totals, out.trace)
        }
    };
    let report = summarize(cfg.model.as_str(), &cfg.cost, &ledgers, &totals)?;
    Ok(RunArtifacts {
        model: cfg.model,
        report,
        ledgers,
        trace,
        workload_hash: workload_hash(cfg),
    })
}

/// Runs the same workload through every NIC model.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<RunArtifacts>, ExperimentError> {
    NicModel::ALL
        .into_iter()
        .map(|model| {
            run_simulate(&ExperimentConfig {
                model,
                ..cfg.clone()
            })
        })
        .collect()
}

pub struct CheckArtifacts {
    pub report: CheckReport,
    pub violation_traces: Vec<Vec<TraceEvent>>,
    pub witness_trace: Vec<TraceEvent>,
}

impl CheckArtifacts {
    pub fn summary(&self) -> String {
        let r = &self.report;
        let mut s = format!(
            "states_visited: {}\ntransitions: {}\nterminal_states: {}\nmax_depth: {}\nviolations: {}\n",
            r.states_visited,
            r.transitions,
            r.terminal_states,
            r.max_depth,
            r.violations.len()
        );
        for (i, v) in r.violations.iter().enumerate() {
            s.push_str(&format!(
                "violation {i}: {} {} ({} steps)\n",
                v.property,
                v.detail,
                v.actions.len()
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files = vec![
            ("check.txt".to_string(), self.summary()),
            ("witness.tsv".to_string(), format_trace(&self.witness_trace)),
        ];
        for (i, t) in self.violation_traces.iter().enumerate() {
            files.push((format!("violation-{i}.tsv"), format_trace(t)));
        }
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

pub fn run_check(cfg: &ExperimentConfig) -> Result<CheckArtifacts, ExperimentError> {
    let checker = Checker::new(cfg.checker.clone())?;
    let report = checker.explore()?;
    let violation_traces = report
        .violations
        .iter()
        .map(|v| checker.trace_events(&v.actions))
        .collect();
    let witness_trace = checker.trace_events(&report.witness);
    Ok(CheckArtifacts {
        report,
        violation_traces,
        witness_trace,
    })
}

#[derive(Debug)]
pub struct ReplaySummary {
    pub steps: usize,
    pub violation: Option<Violation>,
}

/// Feeds a checker trace through the simulator's handlers and demands the
/// same state after every step and the same event lines.
pub fn replay(cfg: &ExperimentConfig, trace_text: &str) -> Result<ReplaySummary, ExperimentError> {
    let checker = Checker::new(cfg.checker.clone())?;
    let events = parse_trace(trace_text)?;
    let lookup = |id: RequestId| (id.0 < cfg.checker.packets as u64).then(|| cfg.checker.packet(id.0 as u32));
    let mut script: Vec<(SimTime, Action)> = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        if let Some(a) = ev.to_action(i + 2, &lookup)? {
            script.push((ev.time, a));
        }
    }
    let actions: Vec<Action> = script.iter().map(|s| s.1.clone()).collect();
    let (expected, expected_violation) = checker.path_states(&actions);

    let sched = SchedulerConfig {
        prewarm_services: 0,
        ..cfg.scheduler.clone()
    };
    let sim = Simulator::with_topology(
        cfg.cost.clone(),
        sched,
        cfg.rebalance.clone(),
        cfg.sim.clone(),
        checker.topology().clone(),
        RequestSource::Open(Default::default()),
    )?;
    let out = sim.replay(&script)?;
    if out.states.len() != expected.len() {
        return Err(ExperimentError::Divergence {
            step: out.states.len().min(expected.len()),
            detail: format!("{} states replayed, checker path has {}", out.states.len(), expected.len()),
        });
    }
    if let Some(step) = (0..expected.len()).find(|&i| out.states[i] != expected[i]) {
        return Err(ExperimentError::Divergence {
            step,
            detail: "machine state differs".into(),
        });
    }
    let violation = out.violation.map(|(_, v)| v);
    if violation != expected_violation {
        return Err(ExperimentError::Divergence {
            step: actions.len(),
            detail: format!("violation {violation:?} vs checker {expected_violation:?}"),
        });
    }
    if out.trace != events {
        let step = out
            .trace
            .iter()
            .zip(&events)
            .position(|(a, b)| a != b)
            .unwrap_or(out.trace.len().min(events.len()));
        return Err(ExperimentError::Divergence {
            step,
            detail: "event lines differ".into(),
        });
    }
    Ok(ReplaySummary {
        steps: actions.len(),
        violation,
    })
}
