use nicsim::checker::CheckerConfig;
use nicsim::config::{ExperimentConfig, NicModel};
use nicsim::experiment::{run_check, run_simulate, sweep};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 3;
    cfg.workload.cores = 4;
    cfg.workload.services = 4;
    cfg.workload.duration_ns = 1_000_000;
    cfg
}

#[test]
fn sweep_runs_every_model_on_one_workload() {
    let runs = sweep(&small()).unwrap();
    let models: Vec<NicModel> = runs.iter().map(|r| r.model).collect();
    assert_eq!(models, NicModel::ALL);
    assert!(runs.iter().all(|r| r.workload_hash == runs[0].workload_hash));
    let injected: Vec<u64> = runs.iter().map(|r| r.report.injected).collect();
    assert!(injected.iter().all(|&n| n == injected[0] && n > 0));
    for r in &runs {
        assert_eq!(r.report.injected, r.report.completed + r.report.in_flight + r.report.dropped);
    }
}

#[test]
fn zero_duration_gives_empty_report() {
    let mut cfg = small();
    cfg.workload.duration_ns = 0;
    let art = run_simulate(&cfg).unwrap();
    assert_eq!(art.report.injected, 0);
    assert!(art.report.rows.iter().all(|r| r.count == 0));
}

#[test]
fn outputs_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.sim.trace = true;
    run_simulate(&cfg).unwrap().write(dir.path()).unwrap();
    for f in ["report.tsv", "report.txt", "trace.tsv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.starts_with("workload: "));
    assert!(text.contains("conservation:"));
}

#[test]
fn check_bound_exceeded_exit_code() {
    let cfg = ExperimentConfig {
        checker: CheckerConfig {
            cores: 2,
            endpoints: 2,
            packets: 3,
            max_states: 100,
            ..Default::default()
        },
        ..Default::default()
    };
    let err = run_check(&cfg).err().unwrap();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn check_writes_witness_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let art = run_check(&ExperimentConfig::default()).unwrap();
    art.write(dir.path()).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("check.txt")).unwrap();
    assert!(summary.contains("states_visited: 14"));
    assert!(dir.path().join("witness.tsv").is_file());
}
