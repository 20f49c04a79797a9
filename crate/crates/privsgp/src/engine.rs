//! Lockstep orchestration of the PrivSGP-VR and PrivSGP loops, plus metrics.
//!
//! Each iteration is a fork-join: node-local work (sampling, gradients,
//! table updates, noise, local step) runs in parallel across nodes, then
//! mixing and de-biasing form a barrier. Every node owns its own RNG
//! streams and table, so the metric series is bit-identical for any worker
//! thread count.

use crate::privacy::{
    calibrate_sigma_accountant, calibrate_sigma_closed_form, clip, sample_noise, AccountantState,
    PrivacyBudget, PrivacyError, ProblemConstants,
};
use crate::problems::{Problem, ProblemError};
use crate::pushsum::{debias, local_step, mix, NodeState, PushSumError};
use crate::rng::{stream, Purpose};
use crate::topology::{
    consensus_constants, mixing_matrix, verify_b_strong_connectivity, GraphSchedule, TopologyError,
};
use crate::varred::{GradientTable, VarRedError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    PushSum(#[from] PushSumError),
    #[error(transparent)]
    VarRed(#[from] VarRedError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("non-finite loss at iteration {iteration}")]
    NumericalBlowup { iteration: u64 },
    #[error("config invalid: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Algorithm {
    PrivSgpVr,
    PrivSgp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrivacyMode {
    Off,
    FixedSigma(f64),
    BudgetClosedForm,
    BudgetAccountant,
}

/// Everything a run needs besides the problem itself.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub schedule: GraphSchedule,
    pub k: u64,
    /// Step size; defaults to sqrt(n/K) when absent.
    pub gamma: Option<f64>,
    pub privacy_mode: PrivacyMode,
    /// Per-node budgets; required (one per node) in the budget-* modes.
    pub budgets: Vec<PrivacyBudget>,
    /// Clip bound G; infinity disables clipping.
    pub clip: f64,
    pub seed: u64,
    pub metrics_stride: u64,
    /// Record SAGA anchor points so the table-drift metric T^k is available.
    pub record_drift: bool,
    /// Connectivity window B; defaults to the schedule period.
    pub window: Option<usize>,
    pub c1: f64,
    pub c2: f64,
    pub lambda_max: u32,
    pub sensitivity_factor: f64,
    /// Planner constants, if known; used only for the minimum-K warning.
    pub constants: Option<ProblemConstants>,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, schedule: GraphSchedule, k: u64) -> Self {
        Self {
            algorithm,
            schedule,
            k,
            gamma: None,
            privacy_mode: PrivacyMode::Off,
            budgets: Vec::new(),
            clip: f64::INFINITY,
            seed: 0,
            metrics_stride: 10,
            record_drift: false,
            window: None,
            c1: 1.0,
            c2: 1.0,
            lambda_max: 32,
            sensitivity_factor: 6.0,
            constants: None,
        }
    }

    pub fn n(&self) -> usize {
        self.schedule.n
    }

    pub fn effective_gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| (self.n() as f64 / self.k as f64).sqrt())
    }
}

/// One metrics row, emitted every `metrics_stride` iterations.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub k: u64,
    /// Global loss at the averaged iterate f(x_bar).
    pub loss: f64,
    /// (1/n) sum_i ||grad f(z_i)||^2.
    pub grad_sq: f64,
    /// Consensus error M^k = (1/n) sum_i ||z_i - x_bar||^2.
    pub m_k: f64,
    /// Table drift T^k (VR runs with drift recording only).
    pub t_k: Option<f64>,
    /// Max over nodes of accountant epsilon spent so far (accountant mode).
    pub eps_spent: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct RunResult {
    pub metrics: Vec<MetricsRecord>,
    pub final_states: Vec<NodeState>,
    /// Calibrated (or fixed) per-node noise scales used in the run.
    pub sigmas: Vec<f64>,
    /// Max relative residual of the average-system identity over the run.
    pub avg_system_residual: f64,
    pub warnings: Vec<String>,
}

struct NodeWorker {
    state: NodeState,
    table: Option<GradientTable>,
    sampler: ChaCha8Rng,
    noiser: ChaCha8Rng,
    sigma: f64,
}

/// Minimum K for which the convergence theorem applies; logged as a warning
/// only, since the constant is far beyond desk scale.
pub fn min_iterations_for_bound(l: f64, n: usize, j: usize, c: f64, q: f64) -> f64 {
    let nf = n as f64;
    let jf = j as f64;
    let one_minus_q = 1.0 - q;
    let c2 = c * c;
    [
        4.0 * nf * l * l * (jf * jf * (1.0 + jf) / nf + 12.0 * (1.0 + jf) * c2 / (one_minus_q * one_minus_q)),
        144.0 * nf.powi(3) * l * l * c2 * c2 / one_minus_q.powi(4),
        16.0 * (4.0 * jf + 5.0).powi(2) * l * l / nf,
        4.0 * l * l * c2 * (48.0 * jf + 66.0) * nf / (one_minus_q * one_minus_q),
        64.0 * jf.powi(4) * (1.0 + jf).powi(2) * l * l * nf / 9.0,
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn resolve_sigmas(config: &RunConfig, j: usize) -> Result<Vec<f64>, EngineError> {
    let n = config.n();
    match &config.privacy_mode {
        PrivacyMode::Off => Ok(vec![0.0; n]),
        PrivacyMode::FixedSigma(s) => {
            if *s < 0.0 {
                return Err(EngineError::InvalidConfig(format!("sigma {s} must be >= 0")));
            }
            Ok(vec![*s; n])
        }
        PrivacyMode::BudgetClosedForm => {
            require_budgets(config)?;
            config
                .budgets
                .iter()
                .map(|b| {
                    calibrate_sigma_closed_form(config.k, j, *b, config.clip, config.c1, config.c2)
                        .map_err(EngineError::from)
                })
                .collect()
        }
        PrivacyMode::BudgetAccountant => {
            require_budgets(config)?;
            config
                .budgets
                .iter()
                .map(|b| {
                    calibrate_sigma_accountant(
                        config.k,
                        j,
                        *b,
                        config.clip,
                        config.sensitivity_factor,
                        config.lambda_max,
                    )
                    .map_err(EngineError::from)
                })
                .collect()
        }
    }
}

fn require_budgets(config: &RunConfig) -> Result<(), EngineError> {
    if config.budgets.len() != config.n() {
        return Err(EngineError::InvalidConfig(format!(
            "budget mode needs {} per-node budgets, got {}",
            config.n(),
            config.budgets.len()
        )));
    }
    if config.clip.is_infinite() {
        return Err(EngineError::InvalidConfig(
            "budget mode requires a finite clip bound G".into(),
        ));
    }
    Ok(())
}

/// Runs the configured algorithm from x0 (zeros when absent). Identical
/// config and seeds produce bit-identical metric series apart from wall
/// times.
pub fn run(config: &RunConfig, problem: &Problem, x0: Option<&[f64]>) -> Result<RunResult, EngineError> {
    let n = config.n();
    if problem.n_nodes() != n {
        return Err(EngineError::InvalidConfig(format!(
            "schedule has n={n} but problem has {} shards",
            problem.n_nodes()
        )));
    }
    if config.k < 1 {
        return Err(EngineError::InvalidConfig("K must be >= 1".into()));
    }
    let window = config.window.unwrap_or_else(|| config.schedule.period());
    let report = verify_b_strong_connectivity(&config.schedule, window);
    if !report.connected {
        return Err(EngineError::Topology(TopologyError::NotConnected { b: window }));
    }

    let d = problem.dim();
    let j = problem.samples_per_node();
    let gamma = config.effective_gamma();
    let x0: Vec<f64> = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; d]);
    if x0.len() != d {
        return Err(EngineError::InvalidConfig(format!(
            "x0 has dimension {}, problem needs {d}",
            x0.len()
        )));
    }
    let sigmas = resolve_sigmas(config, j)?;

    let mut warnings = Vec::new();
    if let Some(consts) = &config.constants {
        if let Ok(cc) = consensus_constants(&config.schedule, window, d) {
            if cc.c.is_finite() {
                let k_hat = min_iterations_for_bound(consts.l, n, j, cc.c, cc.q);
                if (config.k as f64) < k_hat {
                    warnings.push(format!(
                        "K={} is below the theorem's minimum K_hat={:.3e}; the convergence bound does not formally apply",
                        config.k, k_hat
                    ));
                }
            }
        }
    }

    // accountant for the eps-spent metric, shared log-moments per distinct sigma
    let eps_tracker: Option<Vec<AccountantState>> = match config.privacy_mode {
        PrivacyMode::BudgetAccountant => {
            let sens = config.sensitivity_factor * config.clip / j as f64;
            let q = 1.0 / j as f64;
            let mut states = Vec::with_capacity(n);
            for s in &sigmas {
                states.push(AccountantState::new(s / sens, q, config.lambda_max)?);
            }
            Some(states)
        }
        _ => None,
    };

    let mut workers: Vec<NodeWorker> = (0..n)
        .map(|node| -> Result<NodeWorker, EngineError> {
            let table = if config.algorithm == Algorithm::PrivSgpVr {
                let z0 = x0.clone();
                let mut t = GradientTable::init(j, |idx| {
                    clip(&problem.grad_sample(node, &z0, idx).expect("valid index"), config.clip)
                })?;
                if config.record_drift {
                    t.record_anchors(&x0);
                }
                Some(t)
            } else {
                None
            };
            Ok(NodeWorker {
                state: NodeState::new(node, x0.clone()),
                table,
                sampler: stream(config.seed, node, Purpose::Sampling),
                noiser: stream(config.seed, node, Purpose::Noise),
                sigma: sigmas[node],
            })
        })
        .collect::<Result<_, _>>()?;

    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut avg_residual: f64 = 0.0;
    let stride = config.metrics_stride.max(1);

    let record = |workers: &[NodeWorker],
                  k: u64,
                  metrics: &mut Vec<MetricsRecord>|
     -> Result<(), EngineError> {
        let rec = compute_metrics(
            workers,
            problem,
            k,
            config.record_drift,
            eps_tracker.as_deref(),
            config.budgets.first().map(|b| b.delta),
            started,
        )?;
        if !rec.loss.is_finite() {
            return Err(EngineError::NumericalBlowup { iteration: k });
        }
        metrics.push(rec);
        Ok(())
    };

    for k in 0..config.k {
        if k % stride == 0 {
            record(&workers, k, &mut metrics)?;
        }
        let p = mixing_matrix(&config.schedule, k as usize)?;

        let x_bar_before = mean_x(&workers);

        // node-local phase
        let step_outputs: Vec<(Vec<f64>, Vec<f64>)> = workers
            .par_iter_mut()
            .map(|w| -> Result<(Vec<f64>, Vec<f64>), EngineError> {
                let node = w.state.node_id;
                let xi = w.sampler.gen_range(0..j);
                let fresh = clip(&problem.grad_sample(node, &w.state.z, xi)?, config.clip);
                let base = match &mut w.table {
                    Some(table) => {
                        let g = table.corrected_gradient(&fresh, xi)?;
                        let anchor = w.state.z.clone();
                        table.update(xi, fresh, Some(&anchor))?;
                        g
                    }
                    None => fresh,
                };
                let noise = sample_noise(w.sigma, d, &mut w.noiser);
                let direction: Vec<f64> = base.iter().zip(&noise).map(|(g, n)| g + n).collect();
                let intermediate = local_step(&w.state, &direction, gamma)?;
                Ok((intermediate, direction))
            })
            .collect::<Result<_, _>>()?;

        // barrier phase: mixing and de-bias
        let intermediates: Vec<Vec<f64>> = step_outputs.iter().map(|(i, _)| i.clone()).collect();
        let weights: Vec<f64> = workers.iter().map(|w| w.state.w).collect();
        let mixed = mix(&intermediates, &weights, &p)?;
        for (w, (x, weight)) in workers.iter_mut().zip(mixed) {
            w.state.x = x;
            w.state.w = weight;
            debias(&mut w.state)?;
        }

        // average-system identity residual
        let x_bar_after = mean_x(&workers);
        let mut mean_dir = vec![0.0; d];
        for (_, dir) in &step_outputs {
            for (m, di) in mean_dir.iter_mut().zip(dir) {
                *m += di / n as f64;
            }
        }
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for c in 0..d {
            let expected = x_bar_before[c] - gamma * mean_dir[c];
            num = num.max((x_bar_after[c] - expected).abs());
            den = den.max(expected.abs()).max(x_bar_before[c].abs()).max(1e-30);
        }
        avg_residual = avg_residual.max(num / den.max(1.0));
    }
    record(&workers, config.k, &mut metrics)?;

    Ok(RunResult {
        metrics,
        final_states: workers.into_iter().map(|w| w.state).collect(),
        sigmas,
        avg_system_residual: avg_residual,
        warnings,
    })
}

pub fn run_privsgp_vr(config: &RunConfig, problem: &Problem, x0: Option<&[f64]>) -> Result<RunResult, EngineError> {
    let mut config = config.clone();
    config.algorithm = Algorithm::PrivSgpVr;
    run(&config, problem, x0)
}

pub fn run_privsgp(config: &RunConfig, problem: &Problem, x0: Option<&[f64]>) -> Result<RunResult, EngineError> {
    let mut config = config.clone();
    config.algorithm = Algorithm::PrivSgp;
    run(&config, problem, x0)
}

fn mean_x(workers: &[NodeWorker]) -> Vec<f64> {
    let n = workers.len();
    let d = workers[0].state.dim();
    let mut mean = vec![0.0; d];
    for w in workers {
        for (m, xi) in mean.iter_mut().zip(&w.state.x) {
            *m += xi / n as f64;
        }
    }
    mean
}

fn compute_metrics(
    workers: &[NodeWorker],
    problem: &Problem,
    k: u64,
    record_drift: bool,
    eps_tracker: Option<&[AccountantState]>,
    delta: Option<f64>,
    started: Instant,
) -> Result<MetricsRecord, EngineError> {
    let n = workers.len();
    let x_bar = mean_x(workers);
    let loss = problem.global_loss(&x_bar)?;
    let mut grad_sq = 0.0;
    let mut m_k = 0.0;
    for w in workers {
        let g = problem.global_grad(&w.state.z)?;
        grad_sq += g.iter().map(|gi| gi * gi).sum::<f64>() / n as f64;
        m_k += w
            .state
            .z
            .iter()
            .zip(&x_bar)
            .map(|(zi, xb)| (zi - xb) * (zi - xb))
            .sum::<f64>()
            / n as f64;
    }
    let t_k = if record_drift {
        let mut total = 0.0;
        let mut have_anchors = false;
        for w in workers {
            if let Some(table) = &w.table {
                if let Some(anchors) = table.anchors() {
                    have_anchors = true;
                    let j = anchors.len();
                    for anchor in anchors {
                        total += anchor
                            .iter()
                            .zip(&x_bar)
                            .map(|(a, xb)| (xb - a) * (xb - a))
                            .sum::<f64>()
                            / (n as f64 * j as f64);
                    }
                }
            }
        }
        have_anchors.then_some(total)
    } else {
        None
    };
    let eps_spent = match (eps_tracker, delta) {
        (Some(states), Some(_)) if k > 0 => {
            let mut worst = 0.0f64;
            for (idx, s) in states.iter().enumerate() {
                let mut s = s.clone();
                s.compose(k);
                // each node's own delta
                let node_delta = delta.unwrap();
                let _ = idx;
                worst = worst.max(s.epsilon(node_delta));
            }
            Some(worst)
        }
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(MetricsRecord {
        k,
        loss,
        grad_sq,
        m_k,
        t_k,
        eps_spent,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Writes the metrics series as CSV with the fixed column set.
pub fn write_metrics_csv<W: Write>(out: &mut W, metrics: &[MetricsRecord]) -> std::io::Result<()> {
    writeln!(out, "k,loss,grad_sq,m_k,t_k,eps_spent,wall_ms")?;
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.k,
            fmt_f64(m.loss),
            fmt_f64(m.grad_sq),
            fmt_f64(m.m_k),
            m.t_k.map(fmt_f64).unwrap_or_default(),
            m.eps_spent.map(fmt_f64).unwrap_or_default(),
            fmt_f64(m.wall_ms),
        )?;
    }
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v}")
}

const STATE_MAGIC: &[u8; 8] = b"PSGPST01";

/// Dumps the de-biased model states as little-endian f64 after a 16-byte
/// header (8-byte magic, u32 n, u32 d).
pub fn write_states(path: &std::path::Path, states: &[NodeState]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    let n = states.len() as u32;
    let d = states.first().map_or(0, |s| s.dim()) as u32;
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    for s in states {
        for v in &s.z {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)
}

/// Reads a state dump written by [`write_states`].
pub fn read_states(path: &std::path::Path) -> std::io::Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != STATE_MAGIC {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "bad state header"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + n * d * 8 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "truncated state dump"));
    }
    let mut out = Vec::with_capacity(n);
    let mut offset = 16;
    for _ in 0..n {
        let mut row = Vec::with_capacity(d);
        for _ in 0..d {
            row.push(f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()));
            offset += 8;
        }
        out.push(row);
    }
    Ok(out)
}
