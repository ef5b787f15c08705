//! Central finite-difference verification of analytic gradients.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{forward_loss, loss_and_grad, Batch, ModelState};

/// A differentiable scalar function of a flat parameter vector.
pub trait GradCheck {
    fn params_mut(&mut self) -> &mut [f64];
    fn loss(&self) -> f64;
    fn gradient(&self) -> Vec<f64>;
    /// Named parameter groups to sample from evenly.
    fn strata(&self) -> Vec<(String, Range<usize>)>;
}

/// The transformer loss on one fixed batch, without dropout.
pub struct TransformerLoss<'a> {
    pub state: ModelState<f64>,
    pub batch: &'a Batch,
}

impl GradCheck for TransformerLoss<'_> {
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.state.params
    }

    fn loss(&self) -> f64 {
        forward_loss(&self.state, self.batch)
            .expect("finite loss")
            .loss
    }

    fn gradient(&self) -> Vec<f64> {
        loss_and_grad(&self.state, self.batch, None)
            .expect("finite loss")
            .1
    }

    fn strata(&self) -> Vec<(String, Range<usize>)> {
        self.state
            .layout
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.range()))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSettings {
    pub epsilon: f64,
    pub samples: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so parameters whose
    /// true gradient is zero are judged by absolute error.
    pub floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples: 100,
            seed: 0,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<TensorReport>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks `settings.samples` parameters, cycling through the strata so
/// every tensor is represented before any is sampled twice.
pub fn check_gradients(f: &mut impl GradCheck, settings: &GradCheckSettings) -> GradCheckReport {
    let grad = f.gradient();
    let strata: Vec<_> = f
        .strata()
        .into_iter()
        .filter(|(_, r)| !r.is_empty())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..strata.len()).collect();
    let mut checks = Vec::with_capacity(settings.samples);
    let mut max = 0.0f64;
    for s in 0..settings.samples {
        if s % strata.len() == 0 {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        }
        let (name, range) = &strata[order[s % strata.len()]];
        let i = rng.gen_range(range.clone());
        let orig = f.params_mut()[i];
        f.params_mut()[i] = orig + settings.epsilon;
        let up = f.loss();
        f.params_mut()[i] = orig - settings.epsilon;
        let down = f.loss();
        f.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * settings.epsilon);
        let rel = relative_error(grad[i], numeric, settings.floor);
        max = max.max(rel);
        checks.push(TensorReport {
            name: name.clone(),
            index: i,
            analytic: grad[i],
            numeric,
            rel_error: rel,
        });
    }
    GradCheckReport {
        max_rel_error: max,
        checks,
    }
}
