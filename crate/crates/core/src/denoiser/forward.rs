use indexmap::IndexMap;

use super::{fourier_features_normalized, DenoiserConfig, DenoiserModel, PocketMask, FOURIER_PARAM};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Additive logit applied to non-pocket keys in the masked receptor block.
pub const POCKET_MASK_LOGIT: f64 = -1e9;

/// Parameter handles on a graph, looked up by name.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Places every parameter on `g`. With `trainable`, all parameters except
    /// the Fourier frequencies become gradient-tracking leaves.
    pub fn bind<T: Scalar>(
        g: &mut Graph<T>,
        params: &IndexMap<String, Tensor<f32>>,
        trainable: bool,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let value = t.cast::<T>();
                let v = if trainable && DenoiserModel::is_trainable(name) {
                    g.param(value)
                } else {
                    g.constant(value)
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Nodes of interest from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Predicted noise, `L' × d_emb`.
    pub output: Var,
    /// Refined receptor representation, `L × hidden`.
    pub z_pocket: Var,
    /// Per-head attention weights of the pocket-masked block, `L × L` each.
    pub pocket_attention: Vec<Var>,
}

struct Net<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    p: &'a ParamVars,
    cfg: &'a DenoiserConfig,
}

impl<T: Scalar> Net<'_, T> {
    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.g.matmul(x, self.p.get(&format!("{prefix}.w"))?)?;
        match self.p.get(&format!("{prefix}.b")) {
            Ok(b) => self.g.add_row(y, b),
            Err(_) => Ok(y),
        }
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let n = self.g.layer_norm(x);
        let y = self.g.mul_row(n, self.p.get(&format!("{prefix}.g"))?)?;
        self.g.add_row(y, self.p.get(&format!("{prefix}.b"))?)
    }

    /// Pre-norm multi-head attention with residual. `context = None` attends
    /// over the normalized input itself.
    fn attention(
        &mut self,
        x: Var,
        context: Option<Var>,
        mask: Option<&PocketMask>,
        prefix: &str,
        weights: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let h = self.norm(x, &format!("{prefix}.ln"))?;
        let ctx = context.unwrap_or(h);
        let q = self.linear(h, &format!("{prefix}.q"))?;
        let k = self.linear(ctx, &format!("{prefix}.k"))?;
        let v = self.linear(ctx, &format!("{prefix}.v"))?;

        let bias = match mask {
            Some(m) => {
                let row = m
                    .bits()
                    .iter()
                    .map(|&b| T::from_f64_lossy(if b { 0.0 } else { POCKET_MASK_LOGIT }))
                    .collect();
                Some(self.g.constant(Tensor::matrix(1, m.len(), row)?))
            }
            None => None,
        };

        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut probs = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let (a, b) = (i * dh, (i + 1) * dh);
            let qh = self.g.slice_cols(q, a, b)?;
            let kh = self.g.slice_cols(k, a, b)?;
            let vh = self.g.slice_cols(v, a, b)?;
            let kt = self.g.transpose(kh);
            let logits = self.g.matmul(qh, kt)?;
            let mut logits = self.g.scale(logits, scale);
            if let Some(bias) = bias {
                logits = self.g.add_row(logits, bias)?;
            }
            let attn = self.g.softmax_rows(logits);
            probs.push(attn);
            heads.push(self.g.matmul(attn, vh)?);
        }
        if let Some(w) = weights {
            *w = probs;
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            self.g.concat_cols(&heads)?
        };
        let out = self.linear(cat, &format!("{prefix}.o"))?;
        let out = self.g.dropout(out, self.cfg.dropout)?;
        self.g.add(x, out)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.norm(x, &format!("{prefix}.ln"))?;
        let h = self.linear(h, &format!("{prefix}.fc1"))?;
        let h = self.g.gelu(h);
        let h = self.g.dropout(h, self.cfg.dropout)?;
        let h = self.linear(h, &format!("{prefix}.fc2"))?;
        let h = self.g.dropout(h, self.cfg.dropout)?;
        self.g.add(x, h)
    }

    fn time_embedding(&mut self, t: usize) -> Result<Var> {
        let freqs: Vec<f32> = self
            .g
            .value(self.p.get(FOURIER_PARAM)?)
            .data()
            .iter()
            .map(|w| w.as_f64() as f32)
            .collect();
        let feats = fourier_features_normalized(&freqs, t as f64 / self.cfg.timesteps as f64);
        let n = feats.len();
        let feats = Tensor::matrix(1, n, feats.into_iter().map(T::from_f64_lossy).collect())?;
        let f = self.g.constant(feats);
        let h = self.linear(f, "time.fc1")?;
        let h = self.g.gelu(h);
        self.linear(h, "time.fc2")
    }
}

/// Builds the noise-prediction graph for `x` (`L' × d_emb`) conditioned on
/// the normalized receptor `z` (`L × d_emb`).
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamVars,
    cfg: &DenoiserConfig,
    x: Var,
    z: Var,
    mask: Option<&PocketMask>,
    t: usize,
) -> Result<ForwardTrace> {
    if t == 0 || t > cfg.timesteps {
        return Err(Error::invalid(format!("timestep {t} outside [1, {}]", cfg.timesteps)));
    }
    let mut net = Net { g, p: params, cfg };

    let r = net.linear(z, "receptor.in")?;
    let r = net.attention(r, None, None, "receptor.self", None)?;
    let mut pocket_attention = Vec::new();
    let r = net.attention(r, None, mask, "receptor.pocket", Some(&mut pocket_attention))?;
    let z_pocket = net.norm(r, "receptor.out_ln")?;

    let temb = net.time_embedding(t)?;
    let h = net.linear(x, "peptide.in")?;
    let mut h = net.g.add_row(h, temb)?;
    for l in 0..cfg.layers {
        h = net.attention(h, None, None, &format!("layers.{l}.self"), None)?;
        h = net.attention(h, Some(z_pocket), None, &format!("layers.{l}.cross"), None)?;
        h = net.feed_forward(h, &format!("layers.{l}.ff"))?;
    }
    let h = net.norm(h, "out.ln")?;
    let output = net.linear(h, "out")?;
    Ok(ForwardTrace {
        output,
        z_pocket,
        pocket_attention,
    })
}
