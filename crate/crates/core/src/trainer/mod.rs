//! Optimisation loop: Adam with L2 weight decay, online augmentation,
//! checkpoints and a per-step loss log.

mod adam;
mod augment;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{apply as apply_augmentation, augment, AugmentConfig, Augmentation, AugmentedPair};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cli::container::{self, Container};
use crate::cvae_model::{loss_and_gradients, LossBreakdown, ModelConfig, ModelParams};
use crate::error::{invalid, Error, Result};
use crate::grid_field::ScalarImage;

pub const LOSS_LOG: &str = "loss_log.csv";
pub const LOSS_LOG_HEADER: &str = "step,total,reconstruction,kl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    /// Optimizer steps between checkpoints; the final step is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 1,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augmentation: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self, weight_decay: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        self.augmentation.validate()?;
        self.adam(0.0).validate()
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e}",
            self.step, self.total, self.reconstruction, self.kl
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepRecord>,
    pub steps_per_epoch: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Mean total loss of every epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.log
            .chunks(self.steps_per_epoch.max(1))
            .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// A training example: the moving image and the fixed image it should be
/// registered to.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub moving: ScalarImage,
    pub fixed: ScalarImage,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step}.bin")
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut items = vec![Container::f64(vec![0], vec![])
        .with_name("config")
        .with_meta("model", serde_json::to_value(params.config())?)];
    for (name, t) in params.names().iter().zip(params.tensors()) {
        items.push(Container::from_tensor(t).with_name(name));
    }
    container::save(path, &items)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let items = container::load(path)?;
    let (head, rest) = items
        .split_first()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    if head.name() != Some("config") {
        return Err(Error::Format("checkpoint does not start with a config record".into()));
    }
    let model = head
        .meta
        .get("model")
        .cloned()
        .ok_or_else(|| Error::Format("config record lacks the model section".into()))?;
    let cfg: ModelConfig = serde_json::from_value(model)?;
    let named = rest
        .iter()
        .map(|c| {
            let name = c
                .name()
                .ok_or_else(|| Error::Format("unnamed parameter tensor".into()))?;
            Ok((name.to_string(), c.to_tensor()?))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_named(&cfg, named)
}

fn write_snapshot(dir: &Path, step: usize, pair: usize, params: &ModelParams, loss: &LossBreakdown) -> Result<()> {
    let path = dir.join(format!("abort_step{step}.bin"));
    save_checkpoint(&path, params)?;
    let mut w = BufWriter::new(File::create(dir.join("abort.txt"))?);
    writeln!(w, "step={step}")?;
    writeln!(w, "pair={pair}")?;
    writeln!(w, "total={:.8e}", loss.total)?;
    writeln!(w, "reconstruction={:.8e}", loss.reconstruction)?;
    writeln!(w, "kl={:.8e}", loss.kl)?;
    writeln!(w, "params={}", path.display())?;
    Ok(())
}

fn finite(loss: &LossBreakdown, grads: &[Tensor]) -> bool {
    [loss.total, loss.reconstruction, loss.kl].iter().all(|v| v.is_finite())
        && grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()))
}

/// Trains `params` on `pairs`. With `out_dir`, the loss log and checkpoints
/// are written there as training proceeds.
///
/// All randomness (epoch order, augmentation, latent noise) comes from one
/// generator seeded with `cfg.seed`, so runs are reproducible.
pub fn train(
    pairs: &[TrainPair],
    mut params: ModelParams,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(invalid("pairs", "training set is empty"));
    }
    let model_cfg = params.config().clone();
    let adam = cfg.adam(model_cfg.weight_decay);
    let mut state = AdamState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join(LOSS_LOG))?);
            writeln!(w, "{LOSS_LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(total_steps);
    let mut checkpoints = Vec::new();
    let mut step = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut sum = LossBreakdown {
                total: 0.0,
                reconstruction: 0.0,
                kl: 0.0,
                weight_penalty: 0.0,
            };
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in batch {
                let aug = augment(&pairs[i].moving, &pairs[i].fixed, &[], &cfg.augmentation, &mut rng)?;
                let noise: Vec<f64> = (0..model_cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                let (loss, g) = loss_and_gradients(&aug.fixed, &aug.moving, &params, &noise)?;
                if !finite(&loss, &g) {
                    if let Some(dir) = out_dir {
                        write_snapshot(dir, step, i, &params, &loss)?;
                    }
                    return Err(Error::NonFinite("training loss"));
                }
                sum.total += loss.total;
                sum.reconstruction += loss.reconstruction;
                sum.kl += loss.kl;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(params.tensors_mut(), &grads, &mut state, &adam)?;
            if !params.is_finite() {
                return Err(Error::NonFinite("model parameters"));
            }
            let record = StepRecord {
                step,
                total: sum.total * inv,
                reconstruction: sum.reconstruction * inv,
                kl: sum.kl * inv,
            };
            if let Some(w) = log_file.as_mut() {
                writeln!(w, "{}", record.to_line())?;
            }
            log.push(record);
            let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
            if let Some(dir) = out_dir.filter(|_| due || step == total_steps) {
                let path = dir.join(checkpoint_name(step));
                save_checkpoint(&path, &params)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    Ok(TrainOutcome {
        params,
        log,
        steps_per_epoch,
        checkpoints,
    })
}

#[cfg(test)]
mod tests;
