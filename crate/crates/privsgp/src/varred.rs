//! SAGA-style per-node gradient table and corrected stochastic gradients.
//!
//! The table stores one gradient per local sample, evaluated at the anchor
//! point last used for that sample, plus a running average maintained in
//! O(d) per update. Anchor points themselves are recorded only when drift
//! metrics are requested.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VarRedError {
    #[error("node shard is empty")]
    EmptyShard,
    #[error("sample index {xi} out of range for J={j}")]
    IndexOutOfRange { xi: usize, j: usize },
    #[error("gradient dimension {got} does not match table dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Gradient table for one node's J local samples.
#[derive(Debug, Clone)]
pub struct GradientTable {
    stored: Vec<Vec<f64>>,
    running_avg: Vec<f64>,
    /// Anchor points phi_{i,j}; kept only in drift-recording mode.
    anchors: Option<Vec<Vec<f64>>>,
}

impl GradientTable {
    /// Fills all J slots with per-sample gradients at z0; the running average
    /// then equals the full local gradient at z0.
    pub fn init<F>(j: usize, mut grad_at_z0: F) -> Result<Self, VarRedError>
    where
        F: FnMut(usize) -> Vec<f64>,
    {
        if j == 0 {
            return Err(VarRedError::EmptyShard);
        }
        let stored: Vec<Vec<f64>> = (0..j).map(&mut grad_at_z0).collect();
        let d = stored[0].len();
        let mut running_avg = vec![0.0; d];
        for g in &stored {
            if g.len() != d {
                return Err(VarRedError::DimensionMismatch { expected: d, got: g.len() });
            }
            for (a, gi) in running_avg.iter_mut().zip(g) {
                *a += gi;
            }
        }
        for a in &mut running_avg {
            *a /= j as f64;
        }
        Ok(Self { stored, running_avg, anchors: None })
    }

    /// Enables anchor recording; all anchors start at z0.
    pub fn record_anchors(&mut self, z0: &[f64]) {
        self.anchors = Some(vec![z0.to_vec(); self.stored.len()]);
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn running_avg(&self) -> &[f64] {
        &self.running_avg
    }

    pub fn stored(&self, xi: usize) -> Result<&[f64], VarRedError> {
        self.stored
            .get(xi)
            .map(|v| v.as_slice())
            .ok_or(VarRedError::IndexOutOfRange { xi, j: self.stored.len() })
    }

    pub fn anchors(&self) -> Option<&[Vec<f64>]> {
        self.anchors.as_deref()
    }

    /// fresh - stored[xi] + running_avg; the table is not mutated.
    pub fn corrected_gradient(&self, fresh: &[f64], xi: usize) -> Result<Vec<f64>, VarRedError> {
        let stored = self.stored(xi)?;
        if fresh.len() != stored.len() {
            return Err(VarRedError::DimensionMismatch { expected: stored.len(), got: fresh.len() });
        }
        Ok(fresh
            .iter()
            .zip(stored)
            .zip(&self.running_avg)
            .map(|((f, s), a)| f - s + a)
            .collect())
    }

    /// Replaces slot xi with fresh and updates the running average in O(d).
    /// `anchor` is the point fresh was evaluated at; ignored unless anchor
    /// recording is on.
    pub fn update(&mut self, xi: usize, fresh: Vec<f64>, anchor: Option<&[f64]>) -> Result<(), VarRedError> {
        let j = self.stored.len();
        if xi >= j {
            return Err(VarRedError::IndexOutOfRange { xi, j });
        }
        if fresh.len() != self.running_avg.len() {
            return Err(VarRedError::DimensionMismatch {
                expected: self.running_avg.len(),
                got: fresh.len(),
            });
        }
        let old = std::mem::replace(&mut self.stored[xi], fresh);
        for ((a, new), old) in self.running_avg.iter_mut().zip(&self.stored[xi]).zip(&old) {
            *a += (new - old) / j as f64;
        }
        if let (Some(anchors), Some(point)) = (&mut self.anchors, anchor) {
            anchors[xi] = point.to_vec();
        }
        Ok(())
    }

    /// Recomputed mean of the stored gradients, used to re-validate the
    /// incrementally maintained average.
    pub fn recomputed_avg(&self) -> Vec<f64> {
        let d = self.running_avg.len();
        let mut avg = vec![0.0; d];
        for g in &self.stored {
            for (a, gi) in avg.iter_mut().zip(g) {
                *a += gi;
            }
        }
        for a in &mut avg {
            *a /= self.stored.len() as f64;
        }
        avg
    }

    /// Max abs deviation between the running average and a recomputation.
    pub fn avg_drift(&self) -> f64 {
        self.recomputed_avg()
            .iter()
            .zip(&self.running_avg)
            .map(|(r, a)| (r - a).abs())
            .fold(0.0, f64::max)
    }
}
