//! Pairwise similarity and set-level diversity over sequences, structures
//! and embeddings.
//!
//! Every diversity value averages `1 − sim(i, j)` over all ordered pairs
//! `i ≠ j`, so asymmetric similarities are symmetrized in aggregate.

mod align;
mod structure;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use align::{blosum62, nw_align, sim_seq, GapPenalties, SubstitutionMatrix};
pub use structure::{kabsch, kabsch_rmsd, raw_rmsd, tm_d0, tm_score, CoordSet, Superposition};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::sequence::PeptideSequence;

/// Cosine similarity of the row means; 0 when either mean is the zero vector.
pub fn sim_emb(e1: &EmbeddingMatrix, e2: &EmbeddingMatrix) -> Result<f64> {
    if e1.cols() != e2.cols() {
        return Err(Error::shape(format!(
            "embedding widths differ: {} vs {}",
            e1.cols(),
            e2.cols()
        )));
    }
    Ok(pooled_cosine(&e1.mean_pool(), &e2.mean_pool()))
}

fn pooled_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pairwise similarities plus the summary of their complements.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseSummary {
    /// `sim[i][j]`; the diagonal is 1.
    pub similarity: Vec<Vec<f64>>,
    /// Mean of `1 − sim` over ordered pairs.
    pub mean: f64,
    /// Population standard deviation of `1 − sim` over ordered pairs.
    pub std: f64,
}

/// Evaluates `sim(i, j)` for every ordered pair. Cells are independent, so
/// they are computed in parallel and assembled in index order.
pub fn pairwise<F>(n: usize, sim: F) -> Result<PairwiseSummary>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    if n < 2 {
        return Err(Error::invalid(format!("diversity needs at least 2 items, got {n}")));
    }
    let similarity: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| if i == j { Ok(1.0) } else { sim(i, j) })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| 1.0 - similarity[i][j])
        .collect();
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    Ok(PairwiseSummary {
        similarity,
        mean,
        std: var.sqrt(),
    })
}

pub fn div_seq_summary(
    seqs: &[PeptideSequence],
    matrix: &SubstitutionMatrix,
    gaps: &GapPenalties,
) -> Result<PairwiseSummary> {
    // Self-scores are shared by every pair with the same first element.
    let strs: Vec<&str> = seqs.iter().map(PeptideSequence::as_str).collect();
    let selfs: Vec<f64> = strs
        .iter()
        .map(|s| nw_align(s, s, matrix, gaps))
        .collect::<Result<_>>()?;
    pairwise(seqs.len(), |i, j| {
        if selfs[i] == 0.0 {
            return Err(Error::DegenerateNormalization(strs[i].to_string()));
        }
        Ok(nw_align(strs[i], strs[j], matrix, gaps)? / selfs[i])
    })
}

pub fn div_seq(seqs: &[PeptideSequence], matrix: &SubstitutionMatrix, gaps: &GapPenalties) -> Result<f64> {
    Ok(div_seq_summary(seqs, matrix, gaps)?.mean)
}

pub fn div_str_summary(structures: &[CoordSet]) -> Result<PairwiseSummary> {
    pairwise(structures.len(), |i, j| tm_score(&structures[i], &structures[j]))
}

pub fn div_str(structures: &[CoordSet]) -> Result<f64> {
    Ok(div_str_summary(structures)?.mean)
}

pub fn div_emb_summary(embeddings: &[EmbeddingMatrix]) -> Result<PairwiseSummary> {
    if let Some(e) = embeddings.iter().find(|e| e.cols() != embeddings[0].cols()) {
        return Err(Error::shape(format!(
            "embedding widths differ: {} vs {}",
            embeddings[0].cols(),
            e.cols()
        )));
    }
    let pooled: Vec<Vec<f64>> = embeddings.iter().map(EmbeddingMatrix::mean_pool).collect();
    pairwise(embeddings.len(), |i, j| Ok(pooled_cosine(&pooled[i], &pooled[j])))
}

pub fn div_emb(embeddings: &[EmbeddingMatrix]) -> Result<f64> {
    Ok(div_emb_summary(embeddings)?.mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl MetricsReport {
    pub fn from_summary(metric: &str, s: PairwiseSummary, with_matrix: bool) -> Self {
        Self {
            metric: metric.to_string(),
            n: s.similarity.len(),
            mean: s.mean,
            std: s.std,
            matrix: with_matrix.then_some(s.similarity),
            note: None,
        }
    }

    /// Writes the similarity matrix as CSV with an `id` column and one
    /// column per item.
    pub fn write_matrix_csv<W: Write>(&self, ids: &[String], mut out: W) -> Result<()> {
        let m = self
            .matrix
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("report {} has no matrix", self.metric)))?;
        if ids.len() != m.len() {
            return Err(Error::shape(format!("{} ids for a {}-row matrix", ids.len(), m.len())));
        }
        let io = |e| Error::io("<matrix csv>", e);
        writeln!(out, "id,{}", ids.join(",")).map_err(io)?;
        for (id, row) in ids.iter().zip(m) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{id},{}", cells.join(",")).map_err(io)?;
        }
        Ok(())
    }
}

/// The items a set metric may draw on. Each metric uses one field.
#[derive(Debug, Clone, Default)]
pub struct MetricInput {
    pub sequences: Option<Vec<PeptideSequence>>,
    pub structures: Option<Vec<CoordSet>>,
    pub embeddings: Option<Vec<EmbeddingMatrix>>,
}

fn require<'a, T>(field: &'a Option<Vec<T>>, metric: &str, what: &str) -> Result<&'a [T]> {
    field
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("{metric} needs {what}")))
}

pub trait SetMetric: Send + Sync {
    fn name(&self) -> &str;

    fn evaluate(&self, input: &MetricInput, with_matrix: bool) -> Result<MetricsReport>;
}

pub struct SequenceDiversity {
    pub matrix: SubstitutionMatrix,
    pub gaps: GapPenalties,
}

impl SetMetric for SequenceDiversity {
    fn name(&self) -> &str {
        "div_seq"
    }

    fn evaluate(&self, input: &MetricInput, with_matrix: bool) -> Result<MetricsReport> {
        let seqs = require(&input.sequences, self.name(), "sequences")?;
        let s = div_seq_summary(seqs, &self.matrix, &self.gaps)?;
        let negative = s.similarity.iter().flatten().any(|&v| v < 0.0);
        let mut r = MetricsReport::from_summary(self.name(), s, with_matrix);
        if negative {
            r.note = Some("some normalized alignment scores are negative; values above 1 are possible".into());
        }
        Ok(r)
    }
}

pub struct StructureDiversity;

impl SetMetric for StructureDiversity {
    fn name(&self) -> &str {
        "div_str"
    }

    fn evaluate(&self, input: &MetricInput, with_matrix: bool) -> Result<MetricsReport> {
        let s = div_str_summary(require(&input.structures, self.name(), "structures")?)?;
        Ok(MetricsReport::from_summary(self.name(), s, with_matrix))
    }
}

pub struct EmbeddingDiversity;

impl SetMetric for EmbeddingDiversity {
    fn name(&self) -> &str {
        "div_emb"
    }

    fn evaluate(&self, input: &MetricInput, with_matrix: bool) -> Result<MetricsReport> {
        let s = div_emb_summary(require(&input.embeddings, self.name(), "embeddings")?)?;
        Ok(MetricsReport::from_summary(self.name(), s, with_matrix))
    }
}

/// Set metrics selectable by name.
pub struct MetricRegistry {
    metrics: BTreeMap<String, Box<dyn SetMetric>>,
}

impl MetricRegistry {
    pub fn empty() -> Self {
        Self {
            metrics: BTreeMap::new(),
        }
    }

    /// `div_seq` (with the given gap model and BLOSUM62), `div_str`, `div_emb`.
    pub fn with_defaults(gaps: GapPenalties) -> Self {
        let mut r = Self::empty();
        r.register(Box::new(SequenceDiversity {
            matrix: blosum62().clone(),
            gaps,
        }));
        r.register(Box::new(StructureDiversity));
        r.register(Box::new(EmbeddingDiversity));
        r
    }

    pub fn register(&mut self, metric: Box<dyn SetMetric>) {
        self.metrics.insert(metric.name().to_string(), metric);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SetMetric> {
        self.metrics.get(name).map(Box::as_ref).ok_or_else(|| {
            Error::Config(format!(
                "unknown metric {name:?}; available: {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.metrics.keys().map(String::as_str).collect()
    }
}

impl Default for MetricRegistry {
    fn default() -> Self {
        Self::with_defaults(GapPenalties::default())
    }
}
