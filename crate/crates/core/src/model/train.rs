use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    loss_and_grad, save_checkpoint, AdamW, Batch, Example, ModelError, ModelState, OptimConfig,
    Scalar,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch shuffles and dropout.
    pub seed: u64,
    /// Overwritten after every completed epoch.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            batch_size: 16,
            epochs: 20,
            seed: 0,
            checkpoint: None,
        }
    }
}

/// One row of the loss curve: mean training loss of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Final state, or the last state that finished an epoch if training
    /// diverged.
    pub state: ModelState<T>,
    pub curve: Vec<LossPoint>,
    /// `(epoch, batch)` of the first non-finite loss or parameter.
    pub diverged: Option<(usize, usize)>,
}

impl<T> TrainOutcome<T> {
    pub fn curve_csv(&self) -> String {
        curve_csv(&self.curve)
    }
}

pub fn curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("epoch,step,loss,lr\n");
    for p in curve {
        writeln!(s, "{},{},{},{}", p.epoch, p.step, p.loss, p.lr).expect("string write");
    }
    s
}

pub fn write_curve(curve: &[LossPoint], path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, curve_csv(curve)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    order.shuffle(&mut rng);
    order
}

/// Trains for `cfg.epochs` epochs. `on_epoch` runs after each completed
/// epoch (after the checkpoint is written).
pub fn train<T: Scalar>(
    mut state: ModelState<T>,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LossPoint, &ModelState<T>),
) -> Result<TrainOutcome<T>, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let opt = AdamW::new(cfg.optim.clone(), &state)?;
    let dropout = state.config.dropout > 0.0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let good = state.clone();
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Batch::new(&examples);
            let seed = dropout.then(|| cfg.seed.wrapping_add(state.step.wrapping_mul(0x9E37_79B9)));
            let (loss, mut grads) = match loss_and_grad(&state, &batch, seed) {
                Ok(r) => r,
                Err(ModelError::NonFinite { .. }) => {
                    return Ok(TrainOutcome {
                        state: good,
                        curve,
                        diverged: Some((epoch, bi)),
                    })
                }
                Err(e) => return Err(e),
            };
            lr = opt.step(&mut state, &mut grads);
            if !state.all_finite() {
                return Ok(TrainOutcome {
                    state: good,
                    curve,
                    diverged: Some((epoch, bi)),
                });
            }
            total += loss.f64();
            batches += 1;
        }
        let point = LossPoint {
            epoch,
            step: state.step,
            loss: total / batches as f64,
            lr,
        };
        if let Some(p) = &cfg.checkpoint {
            save_checkpoint(&state, p)?;
        }
        on_epoch(&point, &state);
        curve.push(point);
    }
    Ok(TrainOutcome {
        state,
        curve,
        diverged: None,
    })
}
