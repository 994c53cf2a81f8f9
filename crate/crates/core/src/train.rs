//! Teacher-forced training with Adam.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetRecord, Split};
use crate::error::{Error, Result};
use crate::model::JambaTalk;
use crate::params::{seeded_rng, Param};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    /// Sequences averaged per optimizer step.
    pub batch_size: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 200,
            max_steps: 0,
            batch_size: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    params: Vec<Param>,
}

impl Adam {
    pub fn new(params: Vec<Param>, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            params,
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let mut w = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                w[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            p.set_data(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Set on the last step of each epoch when a validation split exists.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    pub epochs: usize,
    /// Wall-clock seconds per epoch; a final partial epoch is scaled up to
    /// a full one.
    pub epoch_seconds: Vec<f64>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

impl TrainReport {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            0.0
        } else {
            self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,train_loss,val_loss")?;
        for p in &self.curve {
            match p.val_loss {
                Some(v) => writeln!(f, "{},{},{}", p.step, p.train_loss, v)?,
                None => writeln!(f, "{},{},", p.step, p.train_loss)?,
            }
        }
        Ok(())
    }
}

/// Mean teacher-forced loss over `records`, without gradient tracking.
pub fn mean_loss(model: &JambaTalk, records: &[&DatasetRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("no sequences to score".into()));
    }
    no_grad(|| {
        let mut total = 0.0;
        for r in records {
            total += model.loss(r)?.item();
        }
        Ok(total / records.len() as f64)
    })
}

/// Trains on the `train` split. The data order of every epoch is drawn from
/// `seed`, so runs with the same seed see the same batches.
pub fn train(model: &JambaTalk, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    let train_set = data.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let val_set = data.split(Split::Val);
    let mut opt = Adam::new(model.trainable_params(), cfg);
    let initial = mean_loss(model, &train_set)?;

    let mut curve = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut step = 0;
    let mut epochs = 0;
    'outer: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut seeded_rng(seed, &format!("train.epoch{epoch}")));
        }
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let mut loss: Option<Tensor> = None;
            for &i in batch.iter() {
                let l = model.loss(train_set[i])?;
                loss = Some(match loss {
                    Some(acc) => acc.add(&l)?,
                    None => l,
                });
            }
            let loss = loss.expect("non-empty batch").scale(1.0 / batch.len() as f64);
            let value = loss.item();
            if !value.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| train_set[i].sentence_id.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "loss became {value} at step {step} (epoch {epoch}) on {}",
                    ids.join(", ")
                )));
            }
            loss.backward()?;
            opt.step()?;
            step += 1;
            let last = bi + 1 == batches.len() || (cfg.max_steps > 0 && step >= cfg.max_steps);
            let val_loss = if last && !val_set.is_empty() {
                Some(mean_loss(model, &val_set)?)
            } else {
                None
            };
            curve.push(CurvePoint {
                step,
                epoch,
                train_loss: value,
                val_loss,
            });
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                epoch_seconds.push(started.elapsed().as_secs_f64() * batches.len() as f64 / (bi + 1) as f64);
                epochs = epoch + 1;
                break 'outer;
            }
        }
        epoch_seconds.push(started.elapsed().as_secs_f64());
        epochs = epoch + 1;
    }
    let final_train_loss = mean_loss(model, &train_set)?;
    Ok(TrainReport {
        curve,
        steps: step,
        epochs,
        epoch_seconds,
        initial_train_loss: initial,
        final_train_loss,
    })
}

#[cfg(test)]
mod tests;
