//! Gaussian mechanism, clipping, moments-accountant privacy accounting,
//! closed-form noise calibration and the optimal-iteration planner.
//!
//! The accountant computes per-step log-moments of the subsampled Gaussian
//! mechanism for integer orders, composes them additively over iterations
//! and converts to (epsilon, delta) with the tightened Renyi-to-DP bound of
//! Balle et al. (2020). The closed-form sigma = 3 c2 G sqrt(K log(1/delta))
//! / (J epsilon) is the planner's analytic surrogate; the accountant is the
//! ground truth for the privacy actually spent.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("epsilon={epsilon} violates the calibration precondition epsilon < c1*K/J^2 = {limit} (c1={c1}, K={k}, J={j})")]
    Precondition { epsilon: f64, limit: f64, c1: f64, k: u64, j: usize },
    #[error("invalid budget: epsilon={epsilon}, delta={delta}")]
    InvalidBudget { epsilon: f64, delta: f64 },
    #[error("invalid accountant input: {0}")]
    InvalidInput(String),
    #[error("bisection failed to bracket sigma for epsilon={epsilon} after {iters} iterations")]
    BracketFailure { epsilon: f64, iters: usize },
    #[error("planner denominator is zero")]
    ZeroDenominator,
}

/// Per-node (epsilon, delta) privacy budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, PrivacyError> {
        if epsilon > 0.0 && delta > 0.0 && delta < 1.0 {
            Ok(Self { epsilon, delta })
        } else {
            Err(PrivacyError::InvalidBudget { epsilon, delta })
        }
    }
}

/// Calibrated Gaussian noise for one node.
#[derive(Debug, Clone, Copy)]
pub struct NoiseScale {
    pub node: usize,
    pub sigma: f64,
}

/// Problem-level constants feeding the planner.
#[derive(Debug, Clone, Copy)]
pub struct ProblemConstants {
    /// Per-sample smoothness L.
    pub l: f64,
    /// Data-heterogeneity bound b^2.
    pub b2: f64,
    /// Initial suboptimality f(x0) - f*.
    pub f0: f64,
    /// ||x0||^2.
    pub x0_sq: f64,
    /// Uniform per-sample gradient norm bound G.
    pub g: f64,
    /// Model dimension.
    pub d: usize,
    /// Unspecified accountant constants from the calibration theorem;
    /// defaults 1.0, overridable in config.
    pub c1: f64,
    pub c2: f64,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales g onto the L2 ball of radius `bound` if it lies outside.
/// `bound = f64::INFINITY` disables clipping.
pub fn clip(g: &[f64], bound: f64) -> Vec<f64> {
    let norm = l2_norm(g);
    if norm <= bound || norm == 0.0 {
        g.to_vec()
    } else {
        let scale = bound / norm;
        g.iter().map(|x| x * scale).collect()
    }
}

/// Closed-form sigma = 3 c2 G sqrt(K log(1/delta)) / (J epsilon), guarded by
/// the theorem precondition epsilon < c1 K / J^2.
pub fn calibrate_sigma_closed_form(
    k: u64,
    j: usize,
    budget: PrivacyBudget,
    g_bound: f64,
    c1: f64,
    c2: f64,
) -> Result<f64, PrivacyError> {
    assert!(k >= 1 && j >= 1);
    let limit = c1 * k as f64 / (j as f64 * j as f64);
    if !(budget.epsilon < limit) {
        return Err(PrivacyError::Precondition { epsilon: budget.epsilon, limit, c1, k, j });
    }
    Ok(closed_form_sigma(k, j, budget, g_bound, c2))
}

/// The bare closed-form expression without the precondition guard; used where the
/// caller handles the regime check itself (e.g. sweeps that log a warning).
pub fn closed_form_sigma(k: u64, j: usize, budget: PrivacyBudget, g_bound: f64, c2: f64) -> f64 {
    3.0 * c2 * g_bound * (k as f64 * (1.0 / budget.delta).ln()).sqrt() / (j as f64 * budget.epsilon)
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    fn new() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    fn add(&mut self, log_term: f64) {
        if log_term == f64::NEG_INFINITY {
            return;
        }
        if log_term > self.max {
            self.sum = self.sum * (self.max - log_term).exp() + 1.0;
            self.max = log_term;
        } else {
            self.sum += (log_term - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Per-step log-moments alpha(lambda) of the subsampled Gaussian mechanism
/// with noise-to-sensitivity ratio `sigma_rel` and sampling probability `q`,
/// for integer lambda = 1..=lambda_max, plus a composition counter.
#[derive(Debug, Clone)]
pub struct AccountantState {
    log_moments: Vec<f64>,
    pub steps: u64,
}

impl AccountantState {
    pub fn new(sigma_rel: f64, q: f64, lambda_max: u32) -> Result<Self, PrivacyError> {
        if !(sigma_rel > 0.0) {
            return Err(PrivacyError::InvalidInput(format!("sigma_rel={sigma_rel} must be > 0")));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(PrivacyError::InvalidInput(format!("q={q} must be in (0,1]")));
        }
        if lambda_max < 1 {
            return Err(PrivacyError::InvalidInput("lambda_max must be >= 1".into()));
        }
        let log_moments = (1..=lambda_max).map(|lambda| log_moment(lambda, q, sigma_rel)).collect();
        Ok(Self { log_moments, steps: 0 })
    }

    pub fn compose(&mut self, steps: u64) {
        self.steps += steps;
    }

    pub fn log_moments(&self) -> &[f64] {
        &self.log_moments
    }

    /// Cumulative epsilon at failure probability delta after the composed
    /// number of steps. Uses, per order, the tighter of the classic moment
    /// tail bound and the improved Renyi-to-DP conversion.
    pub fn epsilon(&self, delta: f64) -> f64 {
        let log_inv_delta = (1.0 / delta).ln();
        let mut best = f64::INFINITY;
        for (idx, alpha) in self.log_moments.iter().enumerate() {
            let lambda = (idx + 1) as f64;
            let total = self.steps as f64 * alpha;
            let simple = (total + log_inv_delta) / lambda;
            // Renyi order lambda+1 with epsilon_rdp = total / lambda
            let improved = total / lambda
                + (lambda / (lambda + 1.0)).ln()
                + (log_inv_delta - (lambda + 1.0).ln()) / lambda;
            best = best.min(simple).min(improved);
        }
        best.max(0.0)
    }
}

/// Log-moment of order lambda for one step of the subsampled Gaussian
/// mechanism: the max over both adjacency directions of
/// log E[(likelihood ratio)^lambda]. The mixture-vs-base direction has a
/// closed-form binomial expansion; the reverse direction is integrated by
/// Simpson quadrature in log space.
pub fn log_moment(lambda: u32, q: f64, sigma_rel: f64) -> f64 {
    if q >= 1.0 {
        // plain Gaussian mechanism: exact moment
        let l = lambda as f64;
        return l * (l + 1.0) / (2.0 * sigma_rel * sigma_rel);
    }
    let e1 = log_moment_mixture_over_base(lambda, q, sigma_rel);
    let e2 = log_moment_base_over_mixture(lambda, q, sigma_rel);
    e1.max(e2).max(0.0)
}

/// log E_{z ~ N(0, s^2)}[(mu(z)/mu0(z))^(lambda+1)] via the exact binomial
/// expansion, where mu = (1-q) N(0,s^2) + q N(1,s^2).
fn log_moment_mixture_over_base(lambda: u32, q: f64, sigma_rel: f64) -> f64 {
    let m = lambda as u64 + 1;
    let log_q = q.ln();
    let log_1q = (1.0 - q).ln();
    let inv_2s2 = 1.0 / (2.0 * sigma_rel * sigma_rel);
    let mut acc = LogSum::new();
    let mut log_binom = 0.0; // ln C(m, 0)
    for i in 0..=m {
        let fi = i as f64;
        acc.add(log_binom + fi * log_q + (m - i) as f64 * log_1q + fi * (fi - 1.0) * inv_2s2);
        if i < m {
            log_binom += ((m - i) as f64).ln() - (fi + 1.0).ln();
        }
    }
    acc.value()
}

/// log E_{z ~ N(0, s^2)}[(mu0(z)/mu(z))^lambda] by composite Simpson
/// quadrature over a range wide enough that the truncated tail is
/// negligible against the (>= 1) integral value.
fn log_moment_base_over_mixture(lambda: u32, q: f64, sigma_rel: f64) -> f64 {
    let l = lambda as f64;
    let s = sigma_rel;
    // integrand <= phi(t) * (1-q)^(-lambda); pick T so the Gaussian tail
    // kills that envelope
    let t_max = (2.0 * (l * (1.0 / (1.0 - q)).ln() + 60.0)).sqrt().max(12.0);
    let steps = 16_384usize; // even
    let h = 2.0 * t_max / steps as f64;
    let mut acc = LogSum::new();
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI).ln();
    for idx in 0..=steps {
        let t = -t_max + idx as f64 * h;
        // z = s * t; ratio mu0/mu = 1 / ((1-q) + q exp((2z-1)/(2 s^2)))
        let expo = (2.0 * s * t - 1.0) / (2.0 * s * s);
        // log(1-q + q e^expo) computed stably
        let log_mix = if expo > 0.0 {
            expo + (q + (1.0 - q) * (-expo).exp()).ln()
        } else {
            ((1.0 - q) + q * expo.exp()).ln()
        };
        let log_f = ln_norm - 0.5 * t * t - l * log_mix;
        let weight: f64 = if idx == 0 || idx == steps {
            1.0
        } else if idx % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc.add(log_f + weight.ln());
    }
    acc.value() + (h / 3.0).ln()
}

/// Composes the per-step log-moments over `k` steps and converts to epsilon
/// at the given delta.
pub fn accountant_epsilon(
    sigma_rel: f64,
    q_sample: f64,
    k: u64,
    delta: f64,
    lambda_max: u32,
) -> Result<f64, PrivacyError> {
    if k < 1 {
        return Err(PrivacyError::InvalidInput("K must be >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidInput(format!("delta={delta} must be in (0,1)")));
    }
    let mut state = AccountantState::new(sigma_rel, q_sample, lambda_max)?;
    state.compose(k);
    Ok(state.epsilon(delta))
}

/// Bisects the noise-to-sensitivity ratio until the accountant's epsilon
/// lands in [eps*(1-1e-3), eps], then scales by the sensitivity
/// `sensitivity_factor * G / J` (default factor 6 = two changed occurrences
/// of a gradient bounded by 3G, averaged over J slots).
pub fn calibrate_sigma_accountant(
    k: u64,
    j: usize,
    budget: PrivacyBudget,
    g_bound: f64,
    sensitivity_factor: f64,
    lambda_max: u32,
) -> Result<f64, PrivacyError> {
    let q = 1.0 / j as f64;
    let target = budget.epsilon;
    let eps_at = |sigma_rel: f64| accountant_epsilon(sigma_rel, q, k, budget.delta, lambda_max);

    let mut hi = 1.0;
    let mut iters = 0usize;
    while eps_at(hi)? > target {
        hi *= 2.0;
        iters += 1;
        if iters > 200 {
            return Err(PrivacyError::BracketFailure { epsilon: target, iters });
        }
    }
    let mut lo = hi / 2.0;
    while eps_at(lo)? <= target {
        lo /= 2.0;
        iters += 1;
        if lo < 1e-9 || iters > 200 {
            // even near-zero noise stays under budget
            break;
        }
    }
    // invariant: eps(lo) > target >= eps(hi)
    for _ in 0..200 {
        let eps_hi = eps_at(hi)?;
        if eps_hi >= target * (1.0 - 1e-3) && eps_hi <= target {
            let sensitivity = sensitivity_factor * g_bound / j as f64;
            return Ok(hi * sensitivity);
        }
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(PrivacyError::BracketFailure { epsilon: target, iters: 200 })
}

/// d independent draws from N(0, sigma^2); sigma = 0 returns the zero
/// vector without consuming randomness.
pub fn sample_noise<R: Rng>(sigma: f64, d: usize, rng: &mut R) -> Vec<f64> {
    assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return vec![0.0; d];
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    (0..d).map(|_| normal.sample(rng)).collect()
}

// ---------------------------------------------------------------------------
// Planner: optimal K, error-vs-K function, utility bound
// ---------------------------------------------------------------------------

fn numerator_a(c: &ProblemConstants) -> f64 {
    13.0 * c.f0 + 6.0 * c.l * c.x0_sq + 18.0 * c.l * c.b2
}

/// Sum over nodes of log(1/delta_i) / epsilon_i^2.
pub fn budget_noise_sum(budgets: &[PrivacyBudget]) -> f64 {
    budgets.iter().map(|b| (1.0 / b.delta).ln() / (b.epsilon * b.epsilon)).sum()
}

/// Real-valued minimizer of the error-vs-K function:
/// K = A J^2 n / (216 L d c2^2 G^2 sum_i log(1/delta_i)/eps_i^2).
pub fn optimal_iterations_unrounded(
    constants: &ProblemConstants,
    budgets: &[PrivacyBudget],
    n: usize,
    j: usize,
) -> Result<f64, PrivacyError> {
    let a = numerator_a(constants);
    let s = budget_noise_sum(budgets);
    let denom =
        216.0 * constants.l * constants.d as f64 * constants.c2 * constants.c2 * constants.g * constants.g * s;
    if denom == 0.0 {
        return Err(PrivacyError::ZeroDenominator);
    }
    Ok(a * (j as f64) * (j as f64) * n as f64 / denom)
}

/// Planner's K*, rounded to the nearest integer >= 1.
pub fn optimal_iterations(
    constants: &ProblemConstants,
    budgets: &[PrivacyBudget],
    n: usize,
    j: usize,
) -> Result<u64, PrivacyError> {
    let k = optimal_iterations_unrounded(constants, budgets, n, j)?;
    Ok((k.round() as u64).max(1))
}

/// Error bound as a function of K with sigma(K) from the closed form
/// substituted: A / sqrt(nK) + sqrt(K) * B where
/// B = (216 L d c2^2 G^2 / (J^2 sqrt(n))) * (1/n) sum_i log(1/delta_i)/eps_i^2.
pub fn error_bound_vs_k(
    k: f64,
    constants: &ProblemConstants,
    budgets: &[PrivacyBudget],
    n: usize,
    j: usize,
) -> f64 {
    let a = numerator_a(constants);
    let s = budget_noise_sum(budgets);
    let nf = n as f64;
    let jf = j as f64;
    let b = 216.0 * constants.l * constants.d as f64 * constants.c2 * constants.c2 * constants.g * constants.g
        / (jf * jf * nf.sqrt())
        * (s / nf);
    a / (nf * k).sqrt() + k.sqrt() * b
}

/// Convergence bound at given fixed per-node noise scales:
/// (A + 24 L (d/n) sum_i sigma_i^2) / sqrt(nK).
pub fn theorem_bound_fixed_noise(
    k: f64,
    constants: &ProblemConstants,
    sigmas: &[f64],
    n: usize,
) -> f64 {
    let a = numerator_a(constants);
    let noise: f64 = sigmas.iter().map(|s| s * s).sum();
    (a + 24.0 * constants.l * constants.d as f64 / n as f64 * noise) / (n as f64 * k).sqrt()
}

/// Guaranteed stationarity level at the privacy-optimal K:
/// 12 c2 G sqrt(6 L d A sum_i log(1/delta_i)/eps_i^2) / (n J).
pub fn utility_bound(
    constants: &ProblemConstants,
    budgets: &[PrivacyBudget],
    n: usize,
    j: usize,
) -> f64 {
    let a = numerator_a(constants);
    let s = budget_noise_sum(budgets);
    12.0 * constants.c2 * constants.g
        * (6.0 * constants.l * constants.d as f64 * a * s).sqrt()
        / (n as f64 * j as f64)
}

/// Golden-section argmin of a unimodal function on [lo, hi].
pub fn golden_section_argmin<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}
