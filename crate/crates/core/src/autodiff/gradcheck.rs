use rand::seq::index::sample;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many randomly chosen entries per tensor; `None`
    /// checks every entry.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
    /// Build training-mode graphs (with a fixed dropout seed) instead of
    /// evaluation-mode ones.
    pub train_mode: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_tensor: None,
            seed: 0,
            train_mode: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// `(tensor name, max relative error over checked entries)`.
    pub per_tensor: Vec<(String, f64)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Tensor-level relative error: the largest entry difference scaled by the
/// larger of the two gradients' magnitudes.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` receives a fresh graph and one parameter handle per entry of
/// `params` (in order) and must return the scalar loss.
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(cfg.eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let new_graph = || {
        if cfg.train_mode {
            Graph::training(cfg.seed)
        } else {
            Graph::new()
        }
    };
    let evaluate = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = new_graph();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = new_graph();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut pick = seed::rng(cfg.seed ^ 0x6772_6164);
    let mut report = GradCheckReport::default();

    for (i, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.numel();
        let entries: Vec<usize> = match cfg.max_entries_per_tensor {
            Some(k) if k < n => {
                let mut e = sample(&mut pick, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let zeros = Tensor::zeros(tensor.shape());
        let analytic_full = grads.get(vars[i]).unwrap_or(&zeros);
        let mut analytic = Vec::with_capacity(entries.len());
        let mut numeric = Vec::with_capacity(entries.len());
        for &e in &entries {
            let orig = values[i].data()[e];
            values[i].data_mut()[e] = orig + cfg.eps;
            let plus = evaluate(&values)?;
            values[i].data_mut()[e] = orig - cfg.eps;
            let minus = evaluate(&values)?;
            values[i].data_mut()[e] = orig;
            numeric.push((plus - minus) / (2.0 * cfg.eps));
            analytic.push(analytic_full.data()[e]);
        }
        report.entries_checked += entries.len();
        report
            .per_tensor
            .push((name.clone(), relative_error(&analytic, &numeric)));
    }
    Ok(report)
}
