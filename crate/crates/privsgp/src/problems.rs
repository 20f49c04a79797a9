//! Loss functions with analytic per-sample gradients, dataset ingestion and
//! partitioning, and probe-based estimation of the planner constants.
//!
//! Models are hand-differentiated; every gradient is checked against central
//! finite differences in the tests. Problems are read-only after
//! construction and shared freely across node workers.

use crate::privacy::{l2_norm, ProblemConstants};
use crate::rng::{stream, Purpose};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("node count {n} exceeds dataset size {size}")]
    TooManyNodes { n: usize, size: usize },
    #[error("sample or node index out of range: node {node}, sample {sample}")]
    IndexOutOfRange { node: usize, sample: usize },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid model configuration: {0}")]
    InvalidModel(String),
}

/// One training sample: feature vector plus a scalar label (class index for
/// the perceptron, +/-1 for logistic regression, unused for quadratics).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    /// f(x; j) = ||x - a_j||^2 / 2 with anchor a_j = features of sample j.
    Quadratic,
    /// Binary logistic loss with L2 penalty, labels in {-1, +1}.
    Logistic { reg: f64 },
    /// tanh hidden layer + softmax cross-entropy; labels are class indices.
    Mlp { input: usize, hidden: usize, classes: usize },
}

impl Model {
    /// Parameter-vector dimension.
    pub fn dim(&self, feature_dim: usize) -> usize {
        match self {
            Model::Quadratic | Model::Logistic { .. } => feature_dim,
            Model::Mlp { input, hidden, classes } => hidden * (input + 1) + classes * (hidden + 1),
        }
    }
}

/// A distributed finite-sum problem: one shard of J samples per node.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: Model,
    shards: Vec<Vec<Sample>>,
    dim: usize,
}

impl Problem {
    pub fn new(model: Model, shards: Vec<Vec<Sample>>) -> Result<Self, ProblemError> {
        if shards.is_empty() || shards.iter().any(|s| s.is_empty()) {
            return Err(ProblemError::InvalidModel("every node needs at least one sample".into()));
        }
        let j = shards[0].len();
        if shards.iter().any(|s| s.len() != j) {
            return Err(ProblemError::InvalidModel("all shards must hold the same J".into()));
        }
        let feature_dim = shards[0][0].features.len();
        if shards.iter().flatten().any(|s| s.features.len() != feature_dim) {
            return Err(ProblemError::InvalidModel("inconsistent feature dimensions".into()));
        }
        if let Model::Mlp { input, .. } = model {
            if input != feature_dim {
                return Err(ProblemError::InvalidModel(format!(
                    "mlp input {input} != feature dim {feature_dim}"
                )));
            }
        }
        let dim = model.dim(feature_dim);
        Ok(Self { model, shards, dim })
    }

    pub fn n_nodes(&self) -> usize {
        self.shards.len()
    }

    /// Local sample count J (identical across nodes).
    pub fn samples_per_node(&self) -> usize {
        self.shards[0].len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shard(&self, node: usize) -> &[Sample] {
        &self.shards[node]
    }

    fn sample(&self, node: usize, j: usize) -> Result<&Sample, ProblemError> {
        self.shards
            .get(node)
            .and_then(|s| s.get(j))
            .ok_or(ProblemError::IndexOutOfRange { node, sample: j })
    }

    pub fn loss_sample(&self, node: usize, x: &[f64], j: usize) -> Result<f64, ProblemError> {
        let s = self.sample(node, j)?;
        Ok(match &self.model {
            Model::Quadratic => {
                0.5 * x.iter().zip(&s.features).map(|(xi, ai)| (xi - ai) * (xi - ai)).sum::<f64>()
            }
            Model::Logistic { reg } => {
                let margin = s.label * dot(x, &s.features);
                softplus(-margin) + 0.5 * reg * dot(x, x)
            }
            Model::Mlp { input, hidden, classes } => {
                mlp_forward(x, &s.features, s.label as usize, *input, *hidden, *classes).0
            }
        })
    }

    /// Exact analytic per-sample gradient.
    pub fn grad_sample(&self, node: usize, x: &[f64], j: usize) -> Result<Vec<f64>, ProblemError> {
        let s = self.sample(node, j)?;
        Ok(match &self.model {
            Model::Quadratic => x.iter().zip(&s.features).map(|(xi, ai)| xi - ai).collect(),
            Model::Logistic { reg } => {
                let margin = s.label * dot(x, &s.features);
                let sig = sigmoid(-margin);
                x.iter()
                    .zip(&s.features)
                    .map(|(xi, vi)| -s.label * vi * sig + reg * xi)
                    .collect()
            }
            Model::Mlp { input, hidden, classes } => {
                mlp_grad(x, &s.features, s.label as usize, *input, *hidden, *classes)
            }
        })
    }

    /// Mean of the per-sample gradients over the node's shard.
    pub fn full_grad(&self, node: usize, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let j = self.samples_per_node();
        let mut acc = vec![0.0; self.dim];
        for idx in 0..j {
            let g = self.grad_sample(node, x, idx)?;
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        for a in &mut acc {
            *a /= j as f64;
        }
        Ok(acc)
    }

    pub fn local_loss(&self, node: usize, x: &[f64]) -> Result<f64, ProblemError> {
        let j = self.samples_per_node();
        let mut total = 0.0;
        for idx in 0..j {
            total += self.loss_sample(node, x, idx)?;
        }
        Ok(total / j as f64)
    }

    pub fn global_loss(&self, x: &[f64]) -> Result<f64, ProblemError> {
        let mut total = 0.0;
        for node in 0..self.n_nodes() {
            total += self.local_loss(node, x)?;
        }
        Ok(total / self.n_nodes() as f64)
    }

    pub fn global_grad(&self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let mut acc = vec![0.0; self.dim];
        for node in 0..self.n_nodes() {
            let g = self.full_grad(node, x)?;
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        for a in &mut acc {
            *a /= self.n_nodes() as f64;
        }
        Ok(acc)
    }

    /// Per-sample Hessian-vector product where an analytic form exists
    /// (quadratic, logistic). None for the perceptron.
    pub fn hvp_sample(&self, node: usize, x: &[f64], j: usize, u: &[f64]) -> Option<Vec<f64>> {
        let s = self.sample(node, j).ok()?;
        match &self.model {
            Model::Quadratic => Some(u.to_vec()),
            Model::Logistic { reg } => {
                let margin = s.label * dot(x, &s.features);
                let sig = sigmoid(-margin);
                let scale = sig * (1.0 - sig) * dot(&s.features, u);
                Some(
                    s.features
                        .iter()
                        .zip(u)
                        .map(|(vi, ui)| scale * vi + reg * ui)
                        .collect(),
                )
            }
            Model::Mlp { .. } => None,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^t) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

// Parameter layout for the perceptron: W1 (hidden x input, row-major),
// b1 (hidden), W2 (classes x hidden, row-major), b2 (classes).
fn mlp_forward(
    x: &[f64],
    v: &[f64],
    label: usize,
    input: usize,
    hidden: usize,
    classes: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (w1, rest) = x.split_at(hidden * input);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(classes * hidden);
    let mut act = vec![0.0; hidden];
    for h in 0..hidden {
        act[h] = (dot(&w1[h * input..(h + 1) * input], v) + b1[h]).tanh();
    }
    let mut logits = vec![0.0; classes];
    for c in 0..classes {
        logits[c] = dot(&w2[c * hidden..(c + 1) * hidden], &act) + b2[c];
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = log_z - logits[label];
    (loss, act, logits.iter().map(|l| (l - log_z).exp()).collect())
}

fn mlp_grad(
    x: &[f64],
    v: &[f64],
    label: usize,
    input: usize,
    hidden: usize,
    classes: usize,
) -> Vec<f64> {
    let (_, act, probs) = mlp_forward(x, v, label, input, hidden, classes);
    let w2 = &x[hidden * input + hidden..hidden * input + hidden + classes * hidden];
    let mut dlogits = probs;
    dlogits[label] -= 1.0;
    let mut grad = vec![0.0; x.len()];
    let (gw1, rest) = grad.split_at_mut(hidden * input);
    let (gb1, rest) = rest.split_at_mut(hidden);
    let (gw2, gb2) = rest.split_at_mut(classes * hidden);
    // output layer
    for c in 0..classes {
        gb2[c] = dlogits[c];
        for h in 0..hidden {
            gw2[c * hidden + h] = dlogits[c] * act[h];
        }
    }
    // back through tanh
    for h in 0..hidden {
        let mut da = 0.0;
        for c in 0..classes {
            da += dlogits[c] * w2[c * hidden + h];
        }
        let dpre = da * (1.0 - act[h] * act[h]);
        gb1[h] = dpre;
        for i in 0..input {
            gw1[h * input + i] = dpre * v[i];
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// Data ingestion and partitioning
// ---------------------------------------------------------------------------

/// Result of sharding a dataset across n nodes.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Vec<Sample>>,
    /// Trailing samples dropped to make the size divisible by n.
    pub dropped: usize,
}

/// Deterministic shuffle by seed, then contiguous equal shards of
/// J = size / n samples. The remainder is dropped (and reported).
pub fn partition(dataset: &[Sample], n: usize, seed: u64) -> Result<Partition, ProblemError> {
    if n == 0 || n > dataset.len() {
        return Err(ProblemError::TooManyNodes { n, size: dataset.len() });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = stream(seed, 0, Purpose::Data);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let used = dataset.len() / n * n;
    let dropped = dataset.len() - used;
    let j = used / n;
    let shards = (0..n)
        .map(|node| order[node * j..(node + 1) * j].iter().map(|&idx| dataset[idx].clone()).collect())
        .collect();
    Ok(Partition { shards, dropped })
}

/// Synthetic Gaussian-feature logistic data with controllable inter-node
/// label skew. skew = 0 makes the shards statistically identical; larger
/// skew shifts each node's feature distribution along its own direction,
/// dialing the heterogeneity bound b^2.
pub fn synthetic_logistic_shards(
    n: usize,
    samples_per_node: usize,
    d: usize,
    skew: f64,
    seed: u64,
) -> Vec<Vec<Sample>> {
    let mut master = stream(seed, 0, Purpose::Data);
    let w_true: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut master)).collect();
    (0..n)
        .map(|node| {
            let mut rng = stream(seed, node + 1, Purpose::Data);
            let shift: Vec<f64> = {
                let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = l2_norm(&raw).max(1e-12);
                raw.iter().map(|r| skew * r / norm).collect()
            };
            (0..samples_per_node)
                .map(|_| {
                    let features: Vec<f64> = shift
                        .iter()
                        .map(|s| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            s + z
                        })
                        .collect();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let margin = dot(&features, &w_true) + 0.5 * noise;
                    Sample { features, label: if margin >= 0.0 { 1.0 } else { -1.0 } }
                })
                .collect()
        })
        .collect()
}

/// Flat dataset variant of the synthetic generator for use with `partition`.
pub fn synthetic_logistic_dataset(total: usize, d: usize, seed: u64) -> Vec<Sample> {
    synthetic_logistic_shards(1, total, d, 0.0, seed).pop().unwrap()
}

/// Numeric CSV: every column parsed as f64, last column is the label.
/// No header by default; `skip_header` drops the first line.
pub fn load_csv(path: &std::path::Path, skip_header: bool) -> Result<Vec<Sample>, ProblemError> {
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if idx == 0 && skip_header {
            continue;
        }
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut values = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| ProblemError::Csv {
                line: idx + 1,
                msg: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(ProblemError::Csv { line: idx + 1, msg: "non-finite entry".into() });
            }
            values.push(v);
        }
        if values.len() < 2 {
            return Err(ProblemError::Csv { line: idx + 1, msg: "need features + label".into() });
        }
        let label = values.pop().unwrap();
        samples.push(Sample { features: values, label });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Constant estimation
// ---------------------------------------------------------------------------

/// Probe-based estimates of (L, b^2, F0, ||x0||^2, G). L, b^2 and G are
/// empirical lower bounds: random probe pairs plus Hessian power iteration
/// where analytic Hessian-vector products exist. F0 uses a short
/// deterministic descent to approximate f*.
pub fn estimate_constants(
    problem: &Problem,
    probes: usize,
    seed: u64,
    x0: &[f64],
) -> ProblemConstants {
    assert!(probes >= 1);
    let d = problem.dim();
    let mut rng = stream(seed, 0, Purpose::Probe);
    let mut random_point = |scale: f64| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect()
    };

    let sample_cap = problem.samples_per_node().min(32);
    let mut l_est: f64 = 0.0;
    let mut g_est: f64 = 0.0;
    let mut b2_est: f64 = 0.0;
    let mut points = Vec::with_capacity(probes);
    for _ in 0..probes {
        points.push(random_point(1.0));
    }
    // secant estimates of L over probe pairs, plus G over probe points
    for p in 0..probes {
        let x = &points[p];
        let y = &points[(p + 1) % probes.max(1)];
        let dist = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        for node in 0..problem.n_nodes() {
            for j in 0..sample_cap {
                let gx = problem.grad_sample(node, x, j).expect("valid index");
                g_est = g_est.max(l2_norm(&gx));
                if dist > 1e-12 {
                    let gy = problem.grad_sample(node, y, j).expect("valid index");
                    let diff = gx.iter().zip(&gy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    l_est = l_est.max(diff / dist);
                }
            }
        }
        // heterogeneity at this probe point
        let global = problem.global_grad(x).expect("grad");
        for node in 0..problem.n_nodes() {
            let local = problem.full_grad(node, x).expect("grad");
            let dev: f64 = local.iter().zip(&global).map(|(a, b)| (a - b) * (a - b)).sum();
            b2_est = b2_est.max(dev);
        }
    }
    // power iteration on the per-sample Hessian where available
    if problem.hvp_sample(0, &points[0], 0, &points[0]).is_some() {
        for point in points.iter().take(probes.min(3)) {
            for node in 0..problem.n_nodes() {
                for j in 0..sample_cap {
                    let mut u = random_point(1.0);
                    let norm = l2_norm(&u).max(1e-12);
                    u.iter_mut().for_each(|ui| *ui /= norm);
                    let mut eig = 0.0;
                    for _ in 0..30 {
                        let hu = problem.hvp_sample(node, point, j, &u).expect("hvp");
                        eig = l2_norm(&hu);
                        if eig < 1e-15 {
                            break;
                        }
                        u = hu.iter().map(|h| h / eig).collect();
                    }
                    l_est = l_est.max(eig);
                }
            }
        }
    }

    // F0: short deterministic full-gradient descent from x0
    let f_x0 = problem.global_loss(x0).expect("loss");
    let gamma = 1.0 / l_est.max(1e-6);
    let mut x = x0.to_vec();
    let mut best = f_x0;
    for _ in 0..300 {
        let g = problem.global_grad(&x).expect("grad");
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= gamma * gi;
        }
        let f = problem.global_loss(&x).expect("loss");
        if f.is_finite() {
            best = best.min(f);
        } else {
            break;
        }
    }

    ProblemConstants {
        l: l_est,
        b2: b2_est,
        f0: (f_x0 - best).max(0.0),
        x0_sq: dot(x0, x0),
        g: g_est,
        d,
        c1: 1.0,
        c2: 1.0,
    }
}
