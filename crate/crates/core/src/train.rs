//! SGD with polynomial learning-rate decay and the training loop.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Modality, PatchBatch, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::model::{HsaNet, ModelConfig};
use crate::objectives::{denoise_loss, LossConfig};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

pub const POLY_POWER: f64 = 0.9;

/// `lr_base * (1 - n / m)^0.9`.
pub fn poly_lr(lr_base: f64, n_iter: u64, m_total: u64) -> Result<f64> {
    if m_total == 0 {
        return Err(Error::invalid("total iteration count must be positive"));
    }
    if n_iter > m_total {
        return Err(Error::invalid(format!("iteration {n_iter} exceeds total {m_total}")));
    }
    Ok(lr_base * (1.0 - n_iter as f64 / m_total as f64).powf(POLY_POWER))
}

/// One SGD update of a single tensor: `g += wd*θ; buf = μ*buf + g; θ -= lr*buf`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    buf: &mut Tensor,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != buf.shape() {
        return Err(Error::invalid(format!(
            "sgd: parameter {:?}, gradient {:?}, buffer {:?}",
            param.shape(),
            grad.shape(),
            buf.shape()
        )));
    }
    for ((p, &g), b) in param.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
        let g = g + weight_decay * *p;
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
        }
    }

    /// Applies the accumulated gradients in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.buffers.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        for ((p, g), b) in store.split_mut().zip(&mut self.buffers) {
            sgd_step(p, g, b, lr, self.weight_decay, self.momentum)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: u64,
    pub batch: usize,
    pub patch: usize,
    /// Sobel weight; when unset, 0.1 for CT and 0 for PET.
    pub lambda: Option<f64>,
    pub seed: u64,
    /// Defaults to `ceil(total slices / batch)`.
    pub steps_per_epoch: Option<u64>,
    /// Overrides `epochs * steps_per_epoch` as the total step count.
    pub total_steps: Option<u64>,
    /// Checkpoint cadence in steps; the final checkpoint is always written.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_base: 0.01,
            weight_decay: 1e-4,
            momentum: 0.9,
            epochs: 3000,
            batch: 16,
            patch: PATCH_SIZE,
            lambda: None,
            seed: 0,
            steps_per_epoch: None,
            total_steps: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn lambda_for(&self, modality: Modality) -> f64 {
        self.lambda.unwrap_or(match modality {
            Modality::Ct => 0.1,
            Modality::Pet => 0.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("train.lr_base", self.lr_base, false),
            ("train.weight_decay", self.weight_decay, true),
            ("train.momentum", self.momentum, true),
        ];
        for (field, v, zero_ok) in reals {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return Err(Error::config(field, format!("invalid value {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config("train.momentum", "must be below 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if self.patch < 2 {
            return Err(Error::config("train.patch", "must be at least 2"));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::config("train.lambda", format!("must be >= 0, got {l}")));
            }
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("train.steps_per_epoch", "must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("train.checkpoint_every", "must be positive"));
        }
        Ok(())
    }

    /// `M_total` for a dataset with `total_slices` slices.
    pub fn total_steps_for(&self, total_slices: usize) -> u64 {
        self.total_steps.unwrap_or_else(|| {
            let per_epoch = self
                .steps_per_epoch
                .unwrap_or_else(|| (total_slices.max(1) as u64).div_ceil(self.batch as u64));
            self.epochs * per_epoch
        })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub mae: f64,
    pub sobel: f64,
    pub total: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Network, parameters and optimizer state.
pub struct Trainer {
    pub net: HsaNet,
    pub store: ParamStore,
    pub sgd: Sgd,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    pub step: u64,
    pub total_steps: u64,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, lambda: f64, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        let (net, store) = HsaNet::build(model)?;
        Self::from_parts(net, store, cfg, lambda, total_steps)
    }

    fn from_parts(net: HsaNet, store: ParamStore, cfg: &TrainConfig, lambda: f64, total_steps: u64) -> Result<Self> {
        let loss = LossConfig::with_lambda(lambda);
        loss.validate()?;
        let sgd = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
        Ok(Trainer {
            net,
            store,
            sgd,
            cfg: cfg.clone(),
            loss,
            step: 0,
            total_steps,
        })
    }

    /// Resumes from a checkpoint, including momentum when present.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig, lambda: f64) -> Result<Self> {
        cfg.validate()?;
        let (net, store) = ckpt.restore()?;
        let mut t = Self::from_parts(net, store, cfg, lambda, ckpt.total_steps)?;
        if !ckpt.momentum.is_empty() {
            t.sgd.buffers = ckpt.momentum.clone();
        }
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.net.cfg, &self.store);
        c.train = Some(self.cfg.clone());
        c.step = self.step;
        c.total_steps = self.total_steps;
        c.momentum = self.sgd.buffers.clone();
        c
    }

    pub fn lr(&self) -> Result<f64> {
        poly_lr(self.cfg.lr_base, self.step, self.total_steps)
    }

    /// Loss of the current parameters on a batch, without updating.
    pub fn evaluate_loss(&self, batch: &PatchBatch) -> Result<(f64, f64, f64)> {
        let p = Bindings::inference(&self.store);
        let pred = self.net.forward(&p, &Var::constant(batch.low.clone()))?;
        let l = denoise_loss(&pred, &Var::constant(batch.full.clone()), &self.loss)?;
        Ok((l.total_value(), l.mae, l.sobel))
    }

    /// Forward, backward and one SGD update; the logged loss is the one
    /// before the update.
    pub fn train_step(&mut self, batch: &PatchBatch) -> Result<LogRow> {
        if self.step >= self.total_steps {
            return Err(Error::invalid(format!(
                "step {} is past the schedule end {}",
                self.step, self.total_steps
            )));
        }
        let lr = self.lr()?;
        let (grads, row) = {
            let p = Bindings::tracked(&self.store);
            let pred = self.net.forward(&p, &Var::constant(batch.low.clone()))?;
            let loss = denoise_loss(&pred, &Var::constant(batch.full.clone()), &self.loss)?;
            let total = loss.total_value();
            if !total.is_finite() {
                return Err(Error::Numerical {
                    step: self.step,
                    message: format!("loss is {total} (mae {}, sobel {})", loss.mae, loss.sobel),
                });
            }
            let row = LogRow {
                step: self.step,
                lr,
                mae: loss.mae,
                sobel: loss.sobel,
                total,
            };
            (loss.total.backward()?, row)
        };
        self.store.zero_grad();
        self.store.accumulate(&grads);
        if let Some(bad) = self.store.entries().iter().find(|e| !e.grad.is_finite()) {
            return Err(Error::Numerical {
                step: self.step,
                message: format!("non-finite gradient in `{}`", bad.name),
            });
        }
        self.sgd.step(&mut self.store, lr)?;
        self.step += 1;
        Ok(row)
    }
}

/// Where training batches come from.
pub enum BatchSource<'a> {
    /// The same batch every step.
    Fixed(&'a PatchBatch),
    /// Online random patches.
    Sampled { dataset: &'a Dataset, rng: ChaCha8Rng },
}

impl<'a> BatchSource<'a> {
    pub fn sampled(dataset: &'a Dataset, seed: u64) -> Self {
        BatchSource::Sampled {
            dataset,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, batch: usize, patch: usize) -> Result<PatchBatch> {
        match self {
            BatchSource::Fixed(b) => Ok((*b).clone()),
            BatchSource::Sampled { dataset, rng } => dataset.sample_batch(rng, batch, patch),
        }
    }
}

/// Runs until the schedule ends, calling `on_step` after every update.
pub fn train_loop(
    trainer: &mut Trainer,
    source: &mut BatchSource,
    mut on_step: impl FnMut(&Trainer, &LogRow) -> Result<()>,
) -> Result<Vec<LogRow>> {
    let mut log = Vec::with_capacity((trainer.total_steps - trainer.step.min(trainer.total_steps)) as usize);
    while trainer.step < trainer.total_steps {
        let batch = source.next(trainer.cfg.batch, trainer.cfg.patch)?;
        let row = trainer.train_step(&batch)?;
        on_step(trainer, &row)?;
        log.push(row);
    }
    Ok(log)
}
