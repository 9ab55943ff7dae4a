use nicsim::checker::CheckerConfig;
use nicsim::config::ExperimentConfig;
use nicsim::experiment::{replay, run_check, ExperimentError};
use nicsim::machine::{Mutation, Property};
use nicsim::trace::format_trace;

fn config(checker: CheckerConfig) -> ExperimentConfig {
    ExperimentConfig {
        checker,
        ..Default::default()
    }
}

#[test]
fn witness_replays_through_the_simulator() {
    let cfg = config(CheckerConfig {
        cores: 2,
        endpoints: 2,
        packets: 2,
        enable_preemption: true,
        ..Default::default()
    });
    let art = run_check(&cfg).unwrap();
    assert!(art.report.violations.is_empty());
    let text = format_trace(&art.witness_trace);
    let out = replay(&cfg, &text).unwrap();
    assert_eq!(out.steps, art.report.witness.len());
    assert!(out.violation.is_none());
}

#[test]
fn mutant_counterexample_replays_to_the_same_violation() {
    let cfg = config(CheckerConfig {
        packets: 3,
        mutation: Some(Mutation::FulfillBeforeFetch),
        ..Default::default()
    });
    let art = run_check(&cfg).unwrap();
    let first = &art.report.violations[0];
    assert_eq!(first.property, Property::S1);
    let out = replay(&cfg, &format_trace(&art.violation_traces[0])).unwrap();
    assert_eq!(out.violation.map(|v| v.property), Some(Property::S1));
}

#[test]
fn tampered_trace_diverges() {
    let cfg = config(CheckerConfig::default());
    let art = run_check(&cfg).unwrap();
    let text = format_trace(&art.witness_trace);
    let lines: Vec<&str> = text.lines().collect();
    let pos = lines.iter().position(|l| l.split('\t').nth(1) == Some("fulfill")).unwrap();
    let mut tampered: Vec<&str> = lines.clone();
    tampered.remove(pos);
    let err = replay(&cfg, &(tampered.join("\n") + "\n")).unwrap_err();
    assert!(matches!(err, ExperimentError::Divergence { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn garbage_trace_is_a_parse_error() {
    let cfg = config(CheckerConfig::default());
    let err = replay(&cfg, "not a trace\n").unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
