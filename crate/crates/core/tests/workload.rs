use nicsim::workload::{generate, ArrivalProcess, WorkloadSpec, ZipfTable};

#[test]
fn poisson_count_within_three_sigma() {
    let spec = WorkloadSpec {
        seed: 7,
        duration_ns: 1_000_000_000,
        arrival: ArrivalProcess::OpenPoisson { rate_per_sec: 1e6 },
        ..Default::default()
    };
    let n = generate(&spec).len() as f64;
    let sigma = 1e6f64.sqrt();
    assert!((n - 1e6).abs() <= 3.0 * sigma, "{n} arrivals");
}

#[test]
fn zipf_head_holds_the_analytic_mass() {
    let spec = WorkloadSpec {
        seed: 7,
        duration_ns: 200_000_000,
        arrival: ArrivalProcess::OpenPoisson { rate_per_sec: 1e6 },
        services: 96,
        zipf_exponent: 1.2,
        ..Default::default()
    };
    let reqs = generate(&spec);
    let n = reqs.len() as f64;
    let head = reqs.iter().filter(|r| r.service_id.0 < 48).count() as f64 / n;

    let weights: Vec<f64> = (1..=96).map(|k| (k as f64).powf(-1.2)).collect();
    let total: f64 = weights.iter().sum();
    let analytic: f64 = weights[..48].iter().sum::<f64>() / total;
    let table = ZipfTable::new(96, 1.2);
    let table_mass: f64 = (0..48).map(|k| table.pmf(k)).sum();
    assert!((table_mass - analytic).abs() < 1e-12);

    let sigma = (analytic * (1.0 - analytic) / n).sqrt();
    assert!(head > 0.5, "head share {head}");
    assert!((head - analytic).abs() <= 4.0 * sigma, "head share {head}, analytic {analytic}");
}
