//! Behavioral checks of full training runs.

use privsgp::engine::{run, Algorithm, PrivacyMode, RunConfig};
use privsgp::problems::{synthetic_logistic_shards, Model, Problem};
use privsgp::topology::GraphSchedule;

fn logistic(n: usize, j: usize, d: usize) -> Problem {
    Problem::new(Model::Logistic { reg: 1e-3 }, synthetic_logistic_shards(n, j, d, 0.3, 0)).unwrap()
}

#[test]
fn noisy_run_loss_decreases_after_burn_in() {
    // n = 16, sigma^2 = 0.03; the raw loss is noisy, so compare averages of
    // 50-iteration windows
    let n = 16;
    let k = 2000;
    let mut config = RunConfig::new(Algorithm::PrivSgpVr, GraphSchedule::exponential(n), k);
    config.privacy_mode = PrivacyMode::FixedSigma(0.03f64.sqrt());
    config.seed = 5;
    config.metrics_stride = 10;
    let result = run(&config, &logistic(n, 32, 10), None).unwrap();
    let losses: Vec<f64> = result.metrics.iter().map(|m| m.loss).collect();
    // windows of 5 records = 50 iterations
    let smoothed: Vec<f64> =
        losses.windows(5).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    let burn = 20; // 200 iterations
    for pair in smoothed[burn..].windows(2) {
        assert!(
            pair[1] <= pair[0] * 1.02,
            "smoothed loss rose from {} to {} after burn-in",
            pair[0],
            pair[1]
        );
    }
    assert!(smoothed.last().unwrap() < &smoothed[burn]);
}

#[test]
fn consensus_error_vanishes_without_noise() {
    let n = 8;
    let k = 2000;
    let mut config = RunConfig::new(Algorithm::PrivSgpVr, GraphSchedule::exponential(n), k);
    config.seed = 3;
    config.metrics_stride = k;
    let result = run(&config, &logistic(n, 32, 10), None).unwrap();
    let final_m = result.metrics.last().unwrap().m_k;
    assert!(final_m < 1e-4, "M^K = {final_m}");
}
