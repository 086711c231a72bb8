//! Noise-prediction network conditioned on a receptor embedding, a binary
//! pocket mask and the diffusion timestep.
//!
//! Layout (all blocks pre-norm with residual connections and dropout):
//!
//! ```text
//! receptor z ─ in-proj ─ self-attn ─ pocket-masked attn ─ LN ─► z_pocket
//! peptide x_t ─ in-proj ─ + time-MLP(fourier(t/T)) ─┐
//!     layers × [ self-attn ─ cross-attn(z_pocket) ─ feed-forward ]
//!                                         └─ LN ─ out-proj ─► ε̂ (L'×d_emb)
//! ```
//!
//! There are no positional encodings; the embeddings carry position.

mod checkpoint;
mod forward;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward, ForwardTrace, ParamVars, POCKET_MASK_LOGIT};

use crate::autodiff::{Graph, Tensor};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed;
use crate::trainer::NormStats;

/// Name of the frozen Fourier frequency vector in the parameter map.
pub const FOURIER_PARAM: &str = "time.fourier.w";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub d_emb: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub timesteps: usize,
    /// Width of the Fourier time features; `None` means `hidden`.
    pub fourier_dim: Option<usize>,
    pub fourier_scale: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_emb: 1024,
            hidden: 2048,
            intermediate: 4096,
            heads: 8,
            layers: 2,
            dropout: 0.1,
            timesteps: 1000,
            fourier_dim: None,
            fourier_scale: 16.0,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// Small configuration used by tests and the toy codec.
    pub fn toy() -> Self {
        Self {
            d_emb: 32,
            hidden: 64,
            intermediate: 128,
            heads: 4,
            layers: 2,
            ..Self::default()
        }
    }

    pub fn fourier_dim(&self) -> usize {
        self.fourier_dim.unwrap_or(self.hidden)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_emb", self.d_emb),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("heads", self.heads),
            ("layers", self.layers),
            ("timesteps", self.timesteps),
            ("fourier_dim", self.fourier_dim()),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.fourier_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "fourier_dim {} must be even",
                self.fourier_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.fourier_scale > 0.0 && self.fourier_scale.is_finite()) {
            return Err(Error::Config("fourier_scale must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in initialization order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, i) = (self.d_emb, self.hidden, self.intermediate);
        let mut l = Layout { hidden: h, entries: Vec::new() };

        l.linear("receptor.in", d, h, true);
        l.attention("receptor.self");
        l.attention("receptor.pocket");
        l.norm("receptor.out_ln");

        l.entries.push((FOURIER_PARAM.to_string(), vec![self.fourier_dim() / 2]));
        l.linear("time.fc1", self.fourier_dim(), h, true);
        l.linear("time.fc2", h, h, true);

        l.linear("peptide.in", d, h, true);
        for k in 0..self.layers {
            l.attention(&format!("layers.{k}.self"));
            l.attention(&format!("layers.{k}.cross"));
            l.norm(&format!("layers.{k}.ff.ln"));
            l.linear(&format!("layers.{k}.ff.fc1"), h, i, true);
            l.linear(&format!("layers.{k}.ff.fc2"), i, h, true);
        }
        l.norm("out.ln");
        l.linear("out", h, d, true);
        l.entries
    }
}

struct Layout {
    hidden: usize,
    entries: Vec<(String, Vec<usize>)>,
}

impl Layout {
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.entries.push((format!("{prefix}.w"), vec![fan_in, fan_out]));
        if bias {
            self.entries.push((format!("{prefix}.b"), vec![1, fan_out]));
        }
    }

    fn norm(&mut self, prefix: &str) {
        self.entries.push((format!("{prefix}.g"), vec![1, self.hidden]));
        self.entries.push((format!("{prefix}.b"), vec![1, self.hidden]));
    }

    // Key projections carry no bias: a shared key offset shifts every logit
    // of a query row equally and never receives a gradient.
    fn attention(&mut self, prefix: &str) {
        let h = self.hidden;
        self.norm(&format!("{prefix}.ln"));
        self.linear(&format!("{prefix}.q"), h, h, true);
        self.linear(&format!("{prefix}.k"), h, h, false);
        self.linear(&format!("{prefix}.v"), h, h, true);
        self.linear(&format!("{prefix}.o"), h, h, true);
    }
}

/// Binary receptor mask marking binding-pocket residues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PocketMask {
    bits: Vec<bool>,
}

impl PocketMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::invalid("pocket mask has no pocket residue"));
        }
        Ok(Self { bits })
    }

    pub fn all(len: usize) -> Result<Self> {
        Self::new(vec![true; len])
    }

    /// Mask of length `len` with the given 0-based positions set.
    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; len];
        for &i in indices {
            if i >= len {
                return Err(Error::invalid(format!(
                    "pocket index {i} outside receptor of length {len}"
                )));
            }
            bits[i] = true;
        }
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            bits: perm.iter().map(|&p| self.bits[p]).collect(),
        }
    }
}

/// Gaussian random Fourier features of the normalized time `t_n`:
/// `[sin(2π·w·t_n), cos(2π·w·t_n)]`.
pub fn fourier_features_normalized(freqs: &[f32], t_norm: f64) -> Vec<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(freqs.len() * 2);
    out.extend(freqs.iter().map(|&w| (tau * f64::from(w) * t_norm).sin()));
    out.extend(freqs.iter().map(|&w| (tau * f64::from(w) * t_norm).cos()));
    out
}

/// Fourier features of timestep `t ∈ [1, T]`, normalized to `t/T`.
pub fn fourier_time_features(freqs: &[f32], t: usize, timesteps: usize) -> Result<Vec<f64>> {
    if t == 0 || t > timesteps {
        return Err(Error::invalid(format!("timestep {t} outside [1, {timesteps}]")));
    }
    Ok(fourier_features_normalized(freqs, t as f64 / timesteps as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training mode with dropout masks drawn from the given seed.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: IndexMap<String, Tensor<f32>>,
    pub norm_stats: NormStats,
    /// Completed training epochs, carried through checkpoints for resuming.
    pub epochs_completed: usize,
}

impl DenoiserModel {
    pub fn init(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed);
        let freq_dist = Normal::new(0.0, config.fourier_scale)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut params = IndexMap::new();
        for (name, shape) in config.parameter_layout() {
            let tensor = if name == FOURIER_PARAM {
                Tensor::from_fn(&shape, |_| freq_dist.sample(&mut rng) as f32)
            } else if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                Tensor::from_fn(&shape, |_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
            };
            params.insert(name, tensor);
        }
        Ok(Self {
            norm_stats: NormStats::identity(config.d_emb),
            config,
            params,
            epochs_completed: 0,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_trainable(name: &str) -> bool {
        name != FOURIER_PARAM
    }

    pub fn fourier_freqs(&self) -> &[f32] {
        self.params[FOURIER_PARAM].data()
    }

    pub(crate) fn check_inputs(
        &self,
        x_t: &EmbeddingMatrix,
        z: &EmbeddingMatrix,
        mask: Option<&PocketMask>,
        t: usize,
    ) -> Result<()> {
        let d = self.config.d_emb;
        if x_t.cols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: x_t.cols() });
        }
        if z.cols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: z.cols() });
        }
        if let Some(m) = mask {
            if m.len() != z.rows() {
                return Err(Error::shape(format!(
                    "pocket mask length {} does not match receptor length {}",
                    m.len(),
                    z.rows()
                )));
            }
        }
        if t == 0 || t > self.config.timesteps {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.config.timesteps
            )));
        }
        Ok(())
    }

    /// Predicts the noise in `x_t`. `z` must already be normalized.
    pub fn predict_noise(
        &self,
        x_t: &EmbeddingMatrix,
        z: &EmbeddingMatrix,
        mask: &PocketMask,
        t: usize,
        mode: Mode,
    ) -> Result<EmbeddingMatrix> {
        self.predict_noise_with(x_t, z, Some(mask), t, mode)
    }

    /// As [`predict_noise`](Self::predict_noise); `mask = None` disables the
    /// pocket mask so every receptor position is attended to.
    pub fn predict_noise_with(
        &self,
        x_t: &EmbeddingMatrix,
        z: &EmbeddingMatrix,
        mask: Option<&PocketMask>,
        t: usize,
        mode: Mode,
    ) -> Result<EmbeddingMatrix> {
        let (g, trace) = self.run_graph::<f32>(x_t, z, mask, t, mode, false)?;
        let out = g.value(trace.output);
        Ok(EmbeddingMatrix::from_raw(x_t.rows(), self.config.d_emb, out.data().to_vec()))
    }

    /// Builds the forward graph on a fresh tape, returning the tape so callers
    /// can inspect intermediate nodes or run the backward pass.
    pub fn run_graph<T: crate::autodiff::Scalar>(
        &self,
        x_t: &EmbeddingMatrix,
        z: &EmbeddingMatrix,
        mask: Option<&PocketMask>,
        t: usize,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Graph<T>, ForwardTrace)> {
        self.check_inputs(x_t, z, mask, t)?;
        let mut g = match mode {
            Mode::Eval => Graph::new(),
            Mode::Train { dropout_seed } => Graph::training(dropout_seed),
        };
        let vars = ParamVars::bind(&mut g, &self.params, trainable);
        let x = g.constant(matrix_tensor(x_t));
        let zv = g.constant(matrix_tensor(z));
        let trace = forward(&mut g, &vars, &self.config, x, zv, mask, t)?;
        Ok((g, trace))
    }
}

pub(crate) fn matrix_tensor<T: crate::autodiff::Scalar>(m: &EmbeddingMatrix) -> Tensor<T> {
    Tensor::matrix(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect(),
    )
    .expect("embedding shape")
}
