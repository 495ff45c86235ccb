//! Chat-duration prediction head and batched pool scoring.
//!
//! Both users' representations are projected into separate latent spaces,
//! `ē_i = W1 e_i + b1` and `ē_j = W2 e_j + b2`, and scored as
//! `z = w (ē_i · ē_j) + b`. In exponential mode the raw prediction is
//! `exp(z)`; in linear mode it is `max(z, 0)` in the head's linear unit.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, NodeId, ParamId, ParamStore, Tensor};

/// `|z|` is clamped to this bound before exponentiation.
pub const EXP_CLAMP: f64 = 30.0;

/// One minute; the unit of linear-mode targets and predictions.
pub const LINEAR_UNIT_MS: f64 = 60_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    Exponential,
    Linear,
}

/// Number of predictions whose logit hit [`EXP_CLAMP`].
#[derive(Clone, Debug, Default)]
pub struct ClampCounter(Arc<AtomicU64>);

impl ClampCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// `e = e_s + e_u`.
pub fn combine(e_s: &[f64], e_u: &[f64]) -> Result<Vec<f64>> {
    if e_s.len() != e_u.len() {
        return Err(Error::shape("combine", format!("{} vs {}", e_s.len(), e_u.len())));
    }
    Ok(e_s.iter().zip(e_u).map(|(a, b)| a + b).collect())
}

#[derive(Clone, Debug)]
pub struct PredictionHead {
    /// Projects the requesting user.
    pub w1: Linear,
    /// Projects the counterpart.
    pub w2: Linear,
    pub w: ParamId,
    pub b: ParamId,
    pub mode: HeadMode,
    pub dim: usize,
    pub proj_dim: usize,
    pub clamps: ClampCounter,
}

impl PredictionHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        proj_dim: usize,
        mode: HeadMode,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, &format!("{name}.w1"), dim, proj_dim, true, rng)?,
            w2: Linear::new(store, &format!("{name}.w2"), dim, proj_dim, true, rng)?,
            w: store.add_filled(format!("{name}.w"), &[1], 1.0)?,
            b: store.add_filled(format!("{name}.b"), &[1], 0.0)?,
            mode,
            dim,
            proj_dim,
            clamps: ClampCounter::default(),
        })
    }

    /// Logits `[B, 1]` for row-aligned requester/counterpart batches.
    pub fn forward_logit(&self, g: &mut Graph<'_>, e_i: NodeId, e_j: NodeId) -> Result<NodeId> {
        let pi = self.w1.forward(g, e_i)?;
        let pj = self.w2.forward(g, e_j)?;
        let dot = g.row_dot(pi, pj)?;
        let w = g.param(self.w);
        let b = g.param(self.b);
        let z = g.scale(dot, w)?;
        g.shift(z, b)
    }

    fn project(store: &ParamStore, lin: &Linear, e: &[f64]) -> Vec<f64> {
        let w = store.get(lin.w).data();
        let b = lin.b.map(|b| store.get(b).data());
        (0..lin.out_dim)
            .map(|j| {
                let row = &w[j * lin.in_dim..(j + 1) * lin.in_dim];
                let acc: f64 = row.iter().zip(e).map(|(a, x)| a * x).sum();
                acc + b.map_or(0.0, |b| b[j])
            })
            .collect()
    }

    /// `z = w ((W1 e_i + b1) · (W2 e_j + b2)) + b`, directly.
    pub fn predict_log(&self, store: &ParamStore, e_i: &[f64], e_j: &[f64]) -> Result<f64> {
        if e_i.len() != self.dim || e_j.len() != self.dim {
            return Err(Error::shape("predict_log", format!("need dim {}", self.dim)));
        }
        let pi = Self::project(store, &self.w1, e_i);
        let pj = Self::project(store, &self.w2, e_j);
        let dot: f64 = pi.iter().zip(&pj).map(|(a, b)| a * b).sum();
        Ok(store.get(self.w).data()[0] * dot + store.get(self.b).data()[0])
    }

    /// Raw-domain prediction from a logit.
    pub fn duration_from_logit(&self, z: f64) -> f64 {
        match self.mode {
            HeadMode::Exponential => {
                if z.abs() > EXP_CLAMP {
                    self.clamps.bump();
                }
                z.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
            }
            HeadMode::Linear => z.max(0.0),
        }
    }

    /// Converts a raw-domain prediction into milliseconds.
    pub fn to_ms(&self, raw: f64) -> f64 {
        match self.mode {
            HeadMode::Exponential => raw,
            HeadMode::Linear => raw * LINEAR_UNIT_MS,
        }
    }

    /// Training target in the logit's domain for a duration in ms.
    pub fn target(&self, duration_ms: u64) -> f64 {
        match self.mode {
            HeadMode::Exponential => (duration_ms as f64).ln_1p(),
            HeadMode::Linear => duration_ms as f64 / LINEAR_UNIT_MS,
        }
    }

    pub fn predict_duration(&self, store: &ParamStore, e_i: &[f64], e_j: &[f64]) -> Result<f64> {
        Ok(self.duration_from_logit(self.predict_log(store, e_i, e_j)?))
    }

    /// Predicted durations for every ordered pair of `reps` (`[n, d]`),
    /// computed with one `(W1 E)(W2 E)ᵀ` product. The diagonal holds
    /// `-inf` so a user can never be paired with itself.
    pub fn score_matrix(&self, store: &ParamStore, reps: &Tensor) -> Result<Tensor> {
        let n = reps.rows();
        if n < 2 {
            return Err(Error::InvalidValue(format!(
                "score_matrix needs at least 2 users, got {n}"
            )));
        }
        if reps.cols() != self.dim {
            return Err(Error::shape(
                "score_matrix",
                format!("reps have width {}, need {}", reps.cols(), self.dim),
            ));
        }
        let mut g = Graph::new(store);
        let e = g.input_tensor(reps);
        let pi = self.w1.forward(&mut g, e)?;
        let pj = self.w2.forward(&mut g, e)?;
        let dots = g.matmul_t(pi, pj)?;
        let w = store.get(self.w).data()[0];
        let b = store.get(self.b).data()[0];
        let mut out: Vec<f64> = g
            .value(dots)
            .iter()
            .map(|d| self.duration_from_logit(w * d + b))
            .collect();
        for i in 0..n {
            out[i * n + i] = f64::NEG_INFINITY;
        }
        Tensor::matrix(n, n, out)
    }
}
