//! Losses, z-transform normalization, Adam and the training loop.

use std::io::Write;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::denoiser::{forward, matrix_tensor, DenoiserModel, ParamVars, PocketMask};
use crate::diffusion::q_sample;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, WarmupSpec};
use crate::seed;

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension mean and standard deviation for the z-transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean 0, std 1: the transform is the identity.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Pools every row of every matrix and computes per-column statistics.
    pub fn fit(matrices: &[&EmbeddingMatrix]) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::invalid("cannot fit normalization on an empty set"))?;
        let d = first.cols();
        let mut sum = vec![0.0f64; d];
        let mut count = 0usize;
        for m in matrices {
            if m.cols() != d {
                return Err(Error::DimensionMismatch { expected: d, found: m.cols() });
            }
            for row in m.iter_rows() {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += f64::from(v);
                }
            }
            count += m.rows();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0f64; d];
        for m in matrices {
            for row in m.iter_rows() {
                for ((s, &v), mu) in sq.iter_mut().zip(row).zip(&mean) {
                    let c = f64::from(v) - mu;
                    *s += c * c;
                }
            }
        }
        let std = sq.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.mean.len() != d || self.std.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.mean.len().min(self.std.len()),
            });
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("normalization mean is not finite"));
        }
        if let Some(i) = self.std.iter().position(|&s| !(s.is_finite() && s >= STD_FLOOR)) {
            return Err(Error::invalid(format!(
                "normalization std[{i}] = {} is below the floor {STD_FLOOR:e}",
                self.std[i]
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        self.apply(x, |v, mu, sd| (v - mu) / sd)
    }

    pub fn denormalize(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        self.apply(x, |v, mu, sd| v * sd + mu)
    }

    fn apply(&self, x: &EmbeddingMatrix, f: impl Fn(f64, f64, f64) -> f64) -> Result<EmbeddingMatrix> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.cols() });
        }
        let d = self.dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(f64::from(v), self.mean[i % d], self.std[i % d]) as f32)
            .collect();
        Ok(EmbeddingMatrix::from_raw(x.rows(), d, data))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseReduction {
    /// Average over all entries.
    #[default]
    Mean,
    /// Plain squared norm.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub lambda_mse: f64,
    pub lambda_cos: f64,
    pub mse_reduction: MseReduction,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 500,
            base_lr: 5e-5,
            warmup_fraction: 0.1,
            lambda_mse: 0.9,
            lambda_cos: 0.1,
            mse_reduction: MseReduction::Mean,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if self.lambda_mse < 0.0 || self.lambda_cos < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if ((self.lambda_mse + self.lambda_cos) - 1.0).abs() > 1e-9 {
            log::warn!(
                "loss weights sum to {} rather than 1",
                self.lambda_mse + self.lambda_cos
            );
        }
        Ok(())
    }
}

fn check_pair(pred: &EmbeddingMatrix, target: &EmbeddingMatrix) -> Result<()> {
    pred.check_same_shape(target, "loss operands")
}

pub fn mse_loss(pred: &EmbeddingMatrix, target: &EmbeddingMatrix) -> Result<f64> {
    mse_loss_with(pred, target, MseReduction::Mean)
}

pub fn mse_loss_with(
    pred: &EmbeddingMatrix,
    target: &EmbeddingMatrix,
    reduction: MseReduction,
) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &e)| (f64::from(p) - f64::from(e)).powi(2))
        .sum();
    Ok(match reduction {
        MseReduction::Mean => sum / pred.data().len() as f64,
        MseReduction::Sum => sum,
    })
}

// Row cosine plus the norms it was computed from.
fn row_cosine(p: &[f32], e: &[f32]) -> (f64, f64, f64) {
    let (mut dot, mut pp, mut ee) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in p.iter().zip(e) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        pp += a * a;
        ee += b * b;
    }
    let (np, ne) = (pp.sqrt(), ee.sqrt());
    if np == 0.0 || ne == 0.0 {
        (0.0, np, ne)
    } else {
        (dot / (np * ne), np, ne)
    }
}

/// `1 − mean_i cos(pred_i, target_i)` over rows; zero rows count as cosine 0.
pub fn cosine_loss(pred: &EmbeddingMatrix, target: &EmbeddingMatrix) -> Result<f64> {
    check_pair(pred, target)?;
    let total: f64 = pred
        .iter_rows()
        .zip(target.iter_rows())
        .map(|(p, e)| row_cosine(p, e).0)
        .sum();
    Ok(1.0 - total / pred.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub cos: f64,
}

pub fn total_loss(pred: &EmbeddingMatrix, target: &EmbeddingMatrix, cfg: &TrainConfig) -> Result<f64> {
    Ok(loss_and_grad(pred, target, cfg)?.0.total)
}

/// Weighted loss and its gradient with respect to `pred` (row-major).
pub fn loss_and_grad(
    pred: &EmbeddingMatrix,
    target: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<f64>)> {
    let mse = mse_loss_with(pred, target, cfg.mse_reduction)?;
    let cos = cosine_loss(pred, target)?;
    let n = pred.data().len() as f64;
    let l = pred.rows() as f64;
    let mse_scale = match cfg.mse_reduction {
        MseReduction::Mean => 2.0 / n,
        MseReduction::Sum => 2.0,
    };
    let mut grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &e)| cfg.lambda_mse * mse_scale * (f64::from(p) - f64::from(e)))
        .collect();
    let d = pred.cols();
    for (r, (p, e)) in pred.iter_rows().zip(target.iter_rows()).enumerate() {
        let (c, np, ne) = row_cosine(p, e);
        if np == 0.0 || ne == 0.0 {
            continue;
        }
        for j in 0..d {
            let (pj, ej) = (f64::from(p[j]), f64::from(e[j]));
            let dc = ej / (np * ne) - c * pj / (np * np);
            grad[r * d + j] -= cfg.lambda_cos * dc / l;
        }
    }
    let parts = LossParts {
        total: cfg.lambda_mse * mse + cfg.lambda_cos * cos,
        mse,
        cos,
    };
    Ok((parts, grad))
}

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn update(
        &mut self,
        params: &mut IndexMap<String, Tensor<f32>>,
        grads: &IndexMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name:?}")))?;
            if p.numel() != g.len() {
                return Err(Error::shape(format!(
                    "gradient for {name:?} has {} entries, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = (f64::from(*w) - lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// One receptor/binder training pair in raw (un-normalized) embedding space.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub receptor: EmbeddingMatrix,
    pub mask: PocketMask,
    pub binder: EmbeddingMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mse_component: f64,
    pub cos_component: f64,
    pub lr: f64,
}

pub fn write_loss_csv<W: Write>(history: &[EpochLoss], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,mean_loss,mse_component,cos_component,lr")?;
    for e in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch, e.mean_loss, e.mse_component, e.cos_component, e.lr
        )?;
    }
    Ok(())
}

fn check_dataset(model: &DenoiserModel, data: &[TrainingExample]) -> Result<()> {
    let first = data
        .first()
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    let d = model.config.d_emb;
    let len = first.binder.rows();
    for (i, ex) in data.iter().enumerate() {
        for m in [&ex.receptor, &ex.binder] {
            if m.cols() != d {
                return Err(Error::DimensionMismatch { expected: d, found: m.cols() });
            }
        }
        if ex.binder.rows() != len {
            return Err(Error::invalid(format!(
                "example {i} has binder length {}, expected the fixed length {len}",
                ex.binder.rows()
            )));
        }
        if ex.mask.len() != ex.receptor.rows() {
            return Err(Error::shape(format!(
                "example {i}: pocket mask length {} vs receptor length {}",
                ex.mask.len(),
                ex.receptor.rows()
            )));
        }
    }
    Ok(())
}

/// Trains until `model.epochs_completed == cfg.epochs`, returning the
/// per-epoch losses of the epochs run in this call.
///
/// Normalization statistics are taken from `model.norm_stats`; fit them on
/// the training binders beforehand. Shuffling and noise are seeded per
/// epoch, so a resumed run sees the same data order as an uninterrupted one.
pub fn train(
    model: &mut DenoiserModel,
    data: &[TrainingExample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    check_dataset(model, data)?;
    model.norm_stats.validate(model.config.d_emb)?;
    if sched.timesteps() != model.config.timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps, model expects {}",
            sched.timesteps(),
            model.config.timesteps
        )));
    }

    let normalized: Vec<(EmbeddingMatrix, EmbeddingMatrix)> = data
        .iter()
        .map(|ex| {
            Ok((
                model.norm_stats.normalize(&ex.receptor)?,
                model.norm_stats.normalize(&ex.binder)?,
            ))
        })
        .collect::<Result<_>>()?;

    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * per_epoch).max(1);
    let warmup = WarmupSpec::new(cfg.base_lr, total_steps, cfg.warmup_fraction)?;
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut history = Vec::new();

    for epoch in model.epochs_completed..cfg.epochs {
        let mut rng = seed::rng(seed::derive(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let (mut sum, mut sum_mse, mut sum_cos) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (z, x0) = &normalized[i];
                let t = rng.random_range(1..=sched.timesteps());
                let eps = EmbeddingMatrix::randn(x0.rows(), x0.cols(), &mut rng);
                let x_t = q_sample(x0, t, &eps, sched)?;
                let dropout_seed: u64 = rng.random();

                let mut g: Graph<f32> = Graph::training(dropout_seed);
                let vars = ParamVars::bind(&mut g, &model.params, true);
                let xv = g.constant(matrix_tensor(&x_t));
                let zv = g.constant(matrix_tensor(z));
                let trace = forward(&mut g, &vars, &model.config, xv, zv, Some(&data[i].mask), t)?;
                let out = g.value(trace.output);
                let pred = EmbeddingMatrix::from_raw(x0.rows(), x0.cols(), out.data().to_vec());
                let (parts, grad) = loss_and_grad(&pred, &eps, cfg)?;
                if !parts.total.is_finite() {
                    return Err(Error::TrainingDivergence { step, loss: parts.total });
                }
                let grad = Tensor::matrix(
                    x0.rows(),
                    x0.cols(),
                    grad.into_iter().map(|v| v as f32).collect(),
                )?;
                let loss = g.external_loss(trace.output, parts.total as f32, grad)?;
                let back = g.backward(loss)?;
                for (name, v) in vars.iter() {
                    if let Some(gr) = back.get(v) {
                        let acc = grads
                            .entry(name.to_string())
                            .or_insert_with(|| vec![0.0; gr.numel()]);
                        for (a, &x) in acc.iter_mut().zip(gr.data()) {
                            *a += f64::from(x);
                        }
                    }
                }
                batch_loss += parts.total;
                sum += parts.total;
                sum_mse += parts.mse;
                sum_cos += parts.cos;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            if grads.values().flatten().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDivergence {
                    step,
                    loss: batch_loss * scale,
                });
            }
            lr = warmup.lr((step + 1).min(total_steps))?;
            adam.update(&mut model.params, &grads, lr)?;
        }
        let n = data.len() as f64;
        let record = EpochLoss {
            epoch,
            mean_loss: sum / n,
            mse_component: sum_mse / n,
            cos_component: sum_cos / n,
            lr,
        };
        log::info!(
            "epoch {} loss {:.6} (mse {:.6}, cos {:.6}) lr {:.3e}",
            epoch,
            record.mean_loss,
            record.mse_component,
            record.cos_component,
            lr
        );
        history.push(record);
        model.epochs_completed = epoch + 1;
    }
    Ok(history)
}
