//! Latent-space exploration around an existing binder embedding.
//!
//! Each source embedding is perturbed with isotropic Gaussian noise and
//! decoded; σ starts at `sigma_init` and grows by `sigma_step` whenever a
//! whole level of attempts yields nothing usable. A decoded sequence is
//! usable when it passes both low-complexity filters.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::sequence::PeptideSequence;

// Slack so that σ levels landing on sigma_max up to rounding are kept.
const SIGMA_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExploreConfig {
    pub sigma_init: f64,
    pub sigma_step: f64,
    pub attempts_per_sigma: usize,
    pub sigma_max: f64,
    pub seed: u64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            sigma_init: 0.3,
            sigma_step: 0.1,
            attempts_per_sigma: 50,
            sigma_max: 2.0,
            seed: 0,
        }
    }
}

impl ExploreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_init > 0.0 && self.sigma_init.is_finite()) {
            return Err(Error::Config("sigma_init must be positive".into()));
        }
        if !(self.sigma_step > 0.0 && self.sigma_step.is_finite()) {
            return Err(Error::Config("sigma_step must be positive".into()));
        }
        if self.attempts_per_sigma == 0 {
            return Err(Error::Config("attempts_per_sigma must be at least 1".into()));
        }
        if !(self.sigma_max >= self.sigma_init) {
            return Err(Error::Config("sigma_max must be at least sigma_init".into()));
        }
        Ok(())
    }

    /// σ of level `k` (0-based), computed directly rather than by repeated
    /// addition so rounding does not accumulate.
    pub fn sigma_at(&self, level: usize) -> f64 {
        self.sigma_init + level as f64 * self.sigma_step
    }

    /// All σ levels up to the cap.
    pub fn sigma_levels(&self) -> Vec<f64> {
        (0..)
            .map(|k| self.sigma_at(k))
            .take_while(|&s| s <= self.sigma_max + SIGMA_SLACK)
            .collect()
    }
}

/// `x + σ·ε` with i.i.d. standard-normal `ε`, drawn in row-major order.
pub fn perturb<R: Rng + ?Sized>(x: &EmbeddingMatrix, sigma: f64, rng: &mut R) -> Result<EmbeddingMatrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("perturbation scale {sigma} must be non-negative")));
    }
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let e: f64 = rng.sample(StandardNormal);
            (f64::from(v) + sigma * e) as f32
        })
        .collect();
    Ok(EmbeddingMatrix::from_raw(x.rows(), x.cols(), data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVerdict {
    Pass,
    /// More than half the residues are `residue`.
    DominantResidue { residue: char, count: usize },
    /// A run of `run` identical residues covers more than 30% of the peptide.
    LongRun { residue: char, run: usize },
}

impl FilterVerdict {
    pub fn passed(self) -> bool {
        self == FilterVerdict::Pass
    }
}

impl fmt::Display for FilterVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterVerdict::Pass => f.write_str("pass"),
            FilterVerdict::DominantResidue { residue, count } => {
                write!(f, "composition: {count} x {residue} exceeds half the length")
            }
            FilterVerdict::LongRun { residue, run } => {
                write!(f, "repeat: run of {run} x {residue} exceeds 30% of the length")
            }
        }
    }
}

/// Applies the composition rule, then the run-length rule. Both thresholds
/// are strict, and are evaluated in integers to avoid rounding at the
/// boundary.
pub fn passes_filters(seq: &PeptideSequence) -> FilterVerdict {
    let bytes = seq.as_bytes();
    let len = bytes.len();

    let mut counts = [0usize; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let (letter, count) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty table");
    if 2 * count > len {
        return FilterVerdict::DominantResidue {
            residue: letter as u8 as char,
            count: *count,
        };
    }

    let (mut best, mut best_letter) = (0usize, bytes[0]);
    let mut run = 0usize;
    for (i, &b) in bytes.iter().enumerate() {
        run = if i > 0 && bytes[i - 1] == b { run + 1 } else { 1 };
        if run > best {
            best = run;
            best_letter = b;
        }
    }
    if 10 * best > 3 * len {
        return FilterVerdict::LongRun {
            residue: best_letter as char,
            run: best,
        };
    }
    FilterVerdict::Pass
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExploreOutcome {
    Found {
        sequence: PeptideSequence,
        sigma_used: f64,
        /// Attempts across all levels, including the successful one.
        attempts: usize,
    },
    Exhausted {
        levels: usize,
        attempts: usize,
    },
}

/// Perturbs and decodes `x` until a filter-passing sequence appears or the
/// σ cap is passed. Decoder failures and filter rejections both count as
/// failed attempts.
pub fn explore_one<R: Rng + ?Sized>(
    x: &EmbeddingMatrix,
    codec: &dyn Codec,
    cfg: &ExploreConfig,
    rng: &mut R,
) -> Result<ExploreOutcome> {
    cfg.validate()?;
    if !x.is_finite() {
        return Err(Error::invalid("source embedding has non-finite values"));
    }
    if x.cols() != codec.d_emb() {
        return Err(Error::DimensionMismatch {
            expected: codec.d_emb(),
            found: x.cols(),
        });
    }
    let levels = cfg.sigma_levels();
    let mut attempts = 0;
    for &sigma in &levels {
        for _ in 0..cfg.attempts_per_sigma {
            attempts += 1;
            let candidate = perturb(x, sigma, rng)?;
            match codec.decode(&candidate) {
                Ok(seq) => {
                    let verdict = passes_filters(&seq);
                    if verdict.passed() {
                        return Ok(ExploreOutcome::Found {
                            sequence: seq,
                            sigma_used: sigma,
                            attempts,
                        });
                    }
                    log::debug!("σ={sigma:.2} attempt {attempts}: {seq} rejected ({verdict})");
                }
                Err(why) => log::debug!("σ={sigma:.2} attempt {attempts}: decode failed ({why})"),
            }
        }
    }
    Ok(ExploreOutcome::Exhausted {
        levels: levels.len(),
        attempts,
    })
}
