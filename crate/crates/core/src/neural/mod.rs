//! From-scratch multilabel MLP detector.

mod adam;
mod checkpoint;
mod model;
mod scheduler;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, manifest_path, save_checkpoint, Checkpoint, Manifest, TensorEntry};
pub use model::{
    backward, bce, forward, loss, predict, Architecture, BatchNorm, Dense, ForwardCache, ForwardConfig, Mode, ModelParams, TensorKind,
    PROB_CLAMP,
};
pub use scheduler::{plateau_events, PlateauScheduler, PLATEAU_MIN_DELTA};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub l2: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            lr: 1e-3,
            l2: 0.01,
            dropout_p: 0.4,
            batch_size: 64,
            adam: AdamConfig::default(),
            plateau_factor: 0.1,
            plateau_patience: 10,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout must lie in [0, 1), got {}", self.dropout_p)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid(format!("plateau factor must lie in (0, 1), got {}", self.plateau_factor)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::invalid("learning rate and l2 must be non-negative"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::invalid("batch-norm momentum must lie in [0, 1] and eps be positive"));
        }
        Ok(())
    }

    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            dropout_p: self.dropout_p,
            bn_eps: self.bn_eps,
        }
    }

    pub fn architecture(&self, meters: usize) -> Architecture {
        Architecture::new(meters, self.hidden.clone(), meters)
    }
}

/// One shuffled pass of mini-batch Adam. Returns the sample-weighted mean
/// training loss over the pass.
pub fn train_epoch(
    params: &mut ModelParams,
    opt: &mut AdamState,
    x: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::invalid("feature and label row counts differ"));
    }
    if x.nrows() == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let fwd = cfg.forward_config();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let xb = x.select(Axis(0), batch);
        let yb = y.select(Axis(0), batch);
        let cache = forward(params, xb.view(), &fwd, Mode::Train(rng))?;
        let l = loss(cache.probs().view(), yb.view(), params, cfg.l2);
        if !l.is_finite() {
            return Err(Error::Divergence {
                round: None,
                what: "non-finite training loss".into(),
            });
        }
        total += l * batch.len() as f64;
        let grads = backward(params, &cache, yb.view(), cfg.l2)?;
        adam_step(params, &grads, opt, &cfg.adam, lr)?;
        params.update_running_stats(&cache, cfg.bn_momentum);
    }
    if !params.all_finite() {
        return Err(Error::Divergence {
            round: None,
            what: "non-finite parameters".into(),
        });
    }
    Ok(total / x.nrows() as f64)
}

/// Eval-mode probabilities and loss (cross-entropy plus the L2 term).
pub fn evaluate(params: &ModelParams, x: &Array2<f64>, y: &Array2<f64>, cfg: &TrainConfig) -> Result<(f64, Array2<f64>)> {
    let probs = predict(params, x.view(), &cfg.forward_config())?;
    Ok((loss(probs.view(), y.view(), params, cfg.l2), probs))
}
