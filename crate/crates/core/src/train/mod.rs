//! AdamW optimization, polynomial LR decay, the training loop, and
//! evaluation over a sample set.
//!
//! Determinism: every random draw in a run derives from the config seed via
//! pure (seed, epoch, index) stream derivation, so two runs with the same
//! seed produce identical loss logs and a resumed run continues the exact
//! trajectory of an uninterrupted one.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, derive_seed, make_batch, AugmentConfig, DepthSample};
use crate::error::{FscnError, Result};
use crate::loss::{aggregate, eval_metrics, silog_loss, valid_mask, LossParams, MetricsReport};
use crate::model::{FscnModel, ParamSet};
use crate::tensor::{Graph, Scalar};

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    8
}
fn default_lr0() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    1e-2
}

/// Training hyperparameters; the `train` section of the run config.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    /// When > 0 this is the exact run length (and the LR horizon), cycling
    /// epochs as needed; when 0 the length is epochs * steps_per_epoch.
    #[serde(default)]
    pub total_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossParams,
    /// Checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr0: default_lr0(),
            total_steps: 0,
            seed: 0,
            loss: LossParams::default(),
            checkpoint_every: 0,
            weight_decay: default_weight_decay(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FscnError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(FscnError::Config(format!(
                "lr0 must be > 0, got {}",
                self.lr0
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(FscnError::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.loss.validate()
    }
}

/// Polynomial decay (power 0.9) from lr0 to lr0/10 across `total_steps`.
pub fn lr_at(step: usize, lr0: f64, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    let lr_end = lr0 / 10.0;
    (lr0 - lr_end) * (1.0 - s).powf(0.9) + lr_end
}

/// AdamW state: per-parameter moments plus the shared hyperparameters
/// (beta1 = 0.9, beta2 = 0.999, eps = 1e-6, decoupled weight decay).
#[derive(Clone, Debug)]
pub struct OptimState<S: Scalar> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr0: f64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &ParamSet<S>, cfg: &TrainConfig) -> Self {
        OptimState {
            m: params
                .entries()
                .iter()
                .map(|e| vec![S::zero(); e.tensor.numel()])
                .collect(),
            v: params
                .entries()
                .iter()
                .map(|e| vec![S::zero(); e.tensor.numel()])
                .collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: cfg.weight_decay,
            lr0: cfg.lr0,
        }
    }
}

/// One AdamW update from the gradients stored on the parameters:
/// m = b1 m + (1-b1) g, v = b2 v + (1-b2) g^2, bias-corrected, then
/// theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd * theta).
/// Weight decay is decoupled and skipped for biases and alphas.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamSet<S>,
    state: &mut OptimState<S>,
    lr: f64,
) -> Result<()> {
    for entry in params.entries() {
        let grad = entry.tensor.grad().ok_or_else(|| {
            FscnError::InvalidArgument(format!("parameter '{}' has no gradient", entry.name))
        })?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(FscnError::NonFiniteGrad {
                param: entry.name.clone(),
            });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        let wd = if entry.decay { state.weight_decay } else { 0.0 };
        let grad = entry.tensor.grad().expect("checked above").to_vec();
        let theta = entry.tensor.data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..theta.len() {
            let g = grad[j].as_f64();
            let mj = state.beta1 * m[j].as_f64() + (1.0 - state.beta1) * g;
            let vj = state.beta2 * v[j].as_f64() + (1.0 - state.beta2) * g * g;
            m[j] = S::from_f64(mj);
            v[j] = S::from_f64(vj);
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            let th = theta[j].as_f64();
            theta[j] = S::from_f64(th - lr * (m_hat / (v_hat.sqrt() + state.eps) + wd * th));
        }
    }
    Ok(())
}

/// One row of the loss log.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct LossLogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TrainStatus {
    Completed,
    /// Loss went non-finite; training stopped with the last good checkpoint
    /// left on disk.
    HaltedNonFinite { step: u64 },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub loss_log: Vec<LossLogRow>,
    pub status: TrainStatus,
    pub final_step: u64,
}

/// Write the loss log as `step,lr,loss` CSV.
pub fn write_loss_log(path: &Path, rows: &[LossLogRow]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    std::fs::write(path, out).map_err(|e| FscnError::io(path, e))
}

fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, epoch));
    order.shuffle(&mut rng);
    order
}

/// Train from scratch. Checkpoints (when `ckpt_dir` is set) go to
/// `<ckpt_dir>/checkpoint.bin` per the schedule and at the end.
pub fn train(
    model: &mut FscnModel<f32>,
    dataset: &[DepthSample],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    cap_m: f64,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut opt = OptimState::new(model.params(), cfg);
    run_loop(model, &mut opt, 0, dataset, cfg, aug, cap_m, ckpt_dir)
}

/// Continue a run from a checkpoint; reproduces the uninterrupted
/// trajectory because every stream is derived from (seed, epoch, index).
pub fn resume(
    ckpt: &Checkpoint,
    dataset: &[DepthSample],
    aug: &AugmentConfig,
    cap_m: f64,
    ckpt_dir: Option<&Path>,
) -> Result<(FscnModel<f32>, TrainOutcome)> {
    let (mut model, mut opt) = ckpt.restore()?;
    let outcome = run_loop(
        &mut model,
        &mut opt,
        ckpt.step,
        dataset,
        &ckpt.train_config,
        aug,
        cap_m,
        ckpt_dir,
    )?;
    Ok((model, outcome))
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    model: &mut FscnModel<f32>,
    opt: &mut OptimState<f32>,
    start_step: u64,
    dataset: &[DepthSample],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    cap_m: f64,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if dataset.is_empty() {
        return Err(FscnError::Data("training dataset is empty".into()));
    }
    if (aug.crop_h, aug.crop_w) != (model.config().input_h, model.config().input_w) {
        return Err(FscnError::Config(format!(
            "augment crop {}x{} must match model input {}x{}",
            aug.crop_h,
            aug.crop_w,
            model.config().input_h,
            model.config().input_w
        )));
    }

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total = if cfg.total_steps > 0 {
        cfg.total_steps
    } else {
        cfg.epochs * steps_per_epoch
    };

    // Periodic saves are step-stamped; the final state is `checkpoint.bin`.
    let save = |model: &FscnModel<f32>, opt: &OptimState<f32>, step: u64, fin: bool| -> Result<()> {
        if let Some(dir) = ckpt_dir {
            std::fs::create_dir_all(dir).map_err(|e| FscnError::io(dir, e))?;
            let ckpt = Checkpoint::capture(model, opt, cfg, step);
            let name = if fin {
                "checkpoint.bin".to_string()
            } else {
                format!("checkpoint_step{step:06}.bin")
            };
            save_checkpoint(&dir.join(name), &ckpt)?;
        }
        Ok(())
    };

    let mut log = Vec::new();
    let mut cached_epoch = u64::MAX;
    let mut order: Vec<usize> = Vec::new();

    for step in start_step..total as u64 {
        let epoch = step / steps_per_epoch as u64;
        let slot = (step % steps_per_epoch as u64) as usize;
        if epoch != cached_epoch {
            order = epoch_order(cfg.seed, epoch, dataset.len());
            cached_epoch = epoch;
        }
        let lo = slot * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(dataset.len());
        let augmented: Vec<DepthSample> = order[lo..hi]
            .iter()
            .map(|&idx| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    derive_seed(cfg.seed, 2, epoch),
                    3,
                    idx as u64,
                ));
                augment(&dataset[idx], aug, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&DepthSample> = augmented.iter().collect();
        let batch = make_batch(&refs, cap_m)?;

        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let x = g.constant(batch.rgb.clone());
        let pred = model.forward(&mut g, &bound, x)?;
        let loss_node = silog_loss(&mut g, pred, &batch.depth, &batch.mask, &cfg.loss)?;
        let loss = g.scalar_value(loss_node) as f64;
        let lr = lr_at(step as usize, cfg.lr0, total);

        if !loss.is_finite() {
            // Keep whatever checkpoint is already on disk.
            return Ok(TrainOutcome {
                loss_log: log,
                status: TrainStatus::HaltedNonFinite { step },
                final_step: step,
            });
        }
        g.backward(loss_node)?;
        model.store_grads(&g, &bound);
        drop(g);
        adamw_step(model.params_mut(), opt, lr)?;
        log.push(LossLogRow { step, lr, loss });

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 {
            save(model, opt, done, false)?;
        }
    }
    save(model, opt, total as u64, true)?;
    Ok(TrainOutcome {
        loss_log: log,
        status: TrainStatus::Completed,
        final_step: total as u64,
    })
}

/// Aggregate metrics of the model over a sample set (no augmentation).
pub fn evaluate(
    model: &FscnModel<f32>,
    samples: &[DepthSample],
    cap_m: f64,
) -> Result<MetricsReport> {
    let reports = samples
        .iter()
        .map(|s| {
            let pred = model.predict(&s.rgb)?;
            let mask = valid_mask(&s.depth, cap_m)?;
            eval_metrics(&pred, &s.depth, &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&reports)
}
