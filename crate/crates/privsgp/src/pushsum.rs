//! Push-sum state and the local / mixing / de-bias steps.
//!
//! Each node carries (x, w, z) with z = x/w. Mixing is a synchronous global
//! matrix product per iteration; summation order is fixed (ascending sender
//! index) so runs are bit-reproducible regardless of thread count.

use crate::topology::MixingMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PushSumError {
    #[error("dimension mismatch: state has d={expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mixing matrix is not column-stochastic")]
    NotColumnStochastic,
    #[error("push-sum weight underflow at node {node}: w={w:e}")]
    WeightUnderflow { node: usize, w: f64 },
}

/// Smallest push-sum weight we tolerate before declaring numerical failure.
const W_MIN: f64 = 1e-300;

/// Per-node push-sum triple.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub node_id: usize,
    pub x: Vec<f64>,
    pub w: f64,
    pub z: Vec<f64>,
}

impl NodeState {
    /// Initialization: x = z = x0, w = 1.
    pub fn new(node_id: usize, x0: Vec<f64>) -> Self {
        Self { node_id, z: x0.clone(), x: x0, w: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Returns x - gamma * direction without touching the state; the result is
/// the intermediate parameter handed to the mix.
pub fn local_step(state: &NodeState, direction: &[f64], gamma: f64) -> Result<Vec<f64>, PushSumError> {
    if direction.len() != state.dim() {
        return Err(PushSumError::DimensionMismatch { expected: state.dim(), got: direction.len() });
    }
    Ok(state.x.iter().zip(direction).map(|(xi, di)| xi - gamma * di).collect())
}

/// Applies one round of mixing: x_i <- sum_j P[i][j] * intermediate_j and
/// w_i <- sum_j P[i][j] * w_j. Column-stochasticity makes both total mass
/// sums invariant.
pub fn mix(
    intermediates: &[Vec<f64>],
    weights: &[f64],
    p: &MixingMatrix,
) -> Result<Vec<(Vec<f64>, f64)>, PushSumError> {
    let n = p.n;
    assert_eq!(intermediates.len(), n);
    assert_eq!(weights.len(), n);
    if !p.is_column_stochastic(1e-12) {
        return Err(PushSumError::NotColumnStochastic);
    }
    let d = intermediates.first().map_or(0, |v| v.len());
    for v in intermediates {
        if v.len() != d {
            return Err(PushSumError::DimensionMismatch { expected: d, got: v.len() });
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = vec![0.0; d];
        let mut w = 0.0;
        for j in 0..n {
            let pij = p.get(i, j);
            if pij == 0.0 {
                continue;
            }
            w += pij * weights[j];
            for (xi, src) in x.iter_mut().zip(&intermediates[j]) {
                *xi += pij * src;
            }
        }
        out.push((x, w));
    }
    Ok(out)
}

/// Recomputes z = x/w in place and returns it.
pub fn debias(state: &mut NodeState) -> Result<&[f64], PushSumError> {
    if !(state.w > W_MIN) {
        return Err(PushSumError::WeightUnderflow { node: state.node_id, w: state.w });
    }
    state.z.clear();
    state.z.extend(state.x.iter().map(|xi| xi / state.w));
    Ok(&state.z)
}
