//! Sequence/embedding codecs and the embedding container format.
//!
//! Codecs are registered by name in a [`CodecRegistry`] and built at run
//! time from [`CodecParams`]. The built-in `toy` codec maps each residue to
//! a fixed seeded unit vector and appends a terminal-marker row, so an
//! encoded peptide of length `L'` is an `(L'+1) × d` matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed;
use crate::sequence::PeptideSequence;

pub const DEFAULT_TAU: f64 = 0.5;

/// Index of the terminal marker in a [`ResidueCodebook`].
pub const TERMINAL: usize = 20;

/// Why a matrix did not decode to a sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum DecodeFailure {
    TooShort { rows: usize },
    WrongDimension { expected: usize, found: usize },
    /// Row `row` matched no residue with cosine at least `tau`.
    LowConfidence { row: usize, best_cosine: f64 },
}

impl fmt::Display for DecodeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeFailure::TooShort { rows } => {
                write!(f, "{rows} rows; need at least one residue row and the terminal row")
            }
            DecodeFailure::WrongDimension { expected, found } => {
                write!(f, "embedding width {found}, codec expects {expected}")
            }
            DecodeFailure::LowConfidence { row, best_cosine } => {
                write!(f, "row {row} best cosine {best_cosine:.3} is below threshold")
            }
        }
    }
}

pub type DecodeResult = std::result::Result<PeptideSequence, DecodeFailure>;

pub trait Codec: Send + Sync {
    fn name(&self) -> &str;

    fn d_emb(&self) -> usize;

    fn encode(&self, seq: &PeptideSequence) -> Result<EmbeddingMatrix>;

    /// Decoding failure is an ordinary outcome, not an error.
    fn decode(&self, x: &EmbeddingMatrix) -> DecodeResult;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecParams {
    pub d_emb: usize,
    pub seed: u64,
    pub tau: f64,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            d_emb: 32,
            seed: 0,
            tau: DEFAULT_TAU,
        }
    }
}

type CodecFactory = Box<dyn Fn(&CodecParams) -> Result<Box<dyn Codec>> + Send + Sync>;

/// Name → constructor table for codecs.
pub struct CodecRegistry {
    factories: BTreeMap<String, CodecFactory>,
}

impl Default for CodecRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("toy", |p| Ok(Box::new(ToyCodec::new(p.d_emb, p.seed, p.tau)?)));
        r
    }
}

impl CodecRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Adds or replaces the constructor registered under `name`.
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&CodecParams) -> Result<Box<dyn Codec>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn build(&self, name: &str, params: &CodecParams) -> Result<Box<dyn Codec>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown codec {name:?}; available: {}",
                self.names().join(", ")
            ))
        })?;
        f(params)
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }
}

/// 21 seeded unit vectors: the 20 residues in [`crate::sequence::AMINO_ACIDS`] order, then
/// the terminal marker. Orthonormal when `d ≥ 21`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueCodebook {
    d: usize,
    vectors: Vec<Vec<f64>>,
}

impl ResidueCodebook {
    pub fn new(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("codebook dimension must be at least 1"));
        }
        let mut rng = seed::rng(seed);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(21);
        while vectors.len() < 21 {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            if d >= 21 {
                // Two Gram-Schmidt passes keep the basis orthogonal to f64 precision.
                for _ in 0..2 {
                    for u in &vectors {
                        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                        v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                    }
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            vectors.push(v);
        }
        Ok(Self { d, vectors })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        &self.vectors[index]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.vectors[TERMINAL]
    }

    /// Best residue (excluding the terminal marker) for `row` and its cosine.
    pub fn nearest_residue(&self, row: &[f32]) -> (usize, f64) {
        let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (0, 0.0);
        }
        self.vectors[..20]
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let dot: f64 = row.iter().zip(u).map(|(&a, b)| f64::from(a) * b).sum();
                (i, dot / norm)
            })
            .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
    }
}

#[derive(Debug, Clone)]
pub struct ToyCodec {
    codebook: ResidueCodebook,
    tau: f64,
}

impl ToyCodec {
    pub fn new(d: usize, seed: u64, tau: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("decode threshold {tau} outside [-1, 1]")));
        }
        Ok(Self {
            codebook: ResidueCodebook::new(d, seed)?,
            tau,
        })
    }

    pub fn codebook(&self) -> &ResidueCodebook {
        &self.codebook
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Codec for ToyCodec {
    fn name(&self) -> &str {
        "toy"
    }

    fn d_emb(&self) -> usize {
        self.codebook.dim()
    }

    /// Row `i` is the codebook vector of residue `i` scaled by `√d`, so
    /// entries have unit mean square; the last row is the terminal marker.
    fn encode(&self, seq: &PeptideSequence) -> Result<EmbeddingMatrix> {
        let d = self.codebook.dim();
        let scale = (d as f64).sqrt();
        let mut data = Vec::with_capacity((seq.len() + 1) * d);
        for i in seq.indices().chain(std::iter::once(TERMINAL)) {
            data.extend(self.codebook.vector(i).iter().map(|&v| (v * scale) as f32));
        }
        EmbeddingMatrix::new(seq.len() + 1, d, data)
    }

    fn decode(&self, x: &EmbeddingMatrix) -> DecodeResult {
        if x.rows() < 2 {
            return Err(DecodeFailure::TooShort { rows: x.rows() });
        }
        if x.cols() != self.d_emb() {
            return Err(DecodeFailure::WrongDimension {
                expected: self.d_emb(),
                found: x.cols(),
            });
        }
        let mut idx = Vec::with_capacity(x.rows() - 1);
        for (row, r) in x.iter_rows().take(x.rows() - 1).enumerate() {
            let (i, c) = self.codebook.nearest_residue(r);
            if c < self.tau {
                return Err(DecodeFailure::LowConfidence { row, best_cosine: c });
            }
            idx.push(i);
        }
        Ok(PeptideSequence::from_indices(idx))
    }
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PEPE";
pub const EMBEDDING_VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::EmbeddingFormat(msg.into())
}

pub fn write_embeddings<W: Write>(records: &IndexMap<String, EmbeddingMatrix>, mut w: W) -> Result<()> {
    let count = u32::try_from(records.len()).map_err(|_| fmt_err("too many records"))?;
    let io = |e| Error::io("<embeddings>", e);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for (id, m) in records {
        let len = u16::try_from(id.len()).map_err(|_| fmt_err(format!("id {id:?} is too long")))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
        let rows = u32::try_from(m.rows()).map_err(|_| fmt_err("too many rows"))?;
        let cols = u32::try_from(m.cols()).map_err(|_| fmt_err("too many columns"))?;
        w.write_all(&rows.to_le_bytes()).map_err(io)?;
        w.write_all(&cols.to_le_bytes()).map_err(io)?;
        let bytes: Vec<u8> = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn take<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io("<embeddings>", e))?;
    if buf.len() != n {
        return Err(fmt_err(format!("truncated {what}: wanted {n} bytes, got {}", buf.len())));
    }
    Ok(buf)
}

fn u32_at(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn read_embeddings<R: Read>(mut r: R) -> Result<IndexMap<String, EmbeddingMatrix>> {
    let head = take(&mut r, 12, "header")?;
    if &head[..4] != EMBEDDING_MAGIC {
        return Err(fmt_err(format!("bad magic {:?}", &head[..4])));
    }
    let version = u32_at(&head[4..8]);
    if version != EMBEDDING_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let count = u32_at(&head[8..12]) as usize;
    let mut out = IndexMap::new();
    for k in 0..count {
        let len = take(&mut r, 2, "id length")?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let id = String::from_utf8(take(&mut r, len, "id")?)
            .map_err(|_| fmt_err(format!("record {k}: id is not UTF-8")))?;
        let dims = take(&mut r, 8, "shape")?;
        let rows = u32_at(&dims[..4]) as usize;
        let cols = u32_at(&dims[4..]) as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| fmt_err(format!("record {id:?}: shape {rows}x{cols} overflows")))?;
        let bytes = take(&mut r, n, &format!("payload of {id:?}"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let m = EmbeddingMatrix::new(rows, cols, data)
            .map_err(|e| fmt_err(format!("record {id:?}: {e}")))?;
        if out.insert(id.clone(), m).is_some() {
            return Err(fmt_err(format!("duplicate id {id:?}")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io("<embeddings>", e))? != 0 {
        return Err(fmt_err("trailing bytes after the last record"));
    }
    Ok(out)
}

pub fn save_embeddings(records: &IndexMap<String, EmbeddingMatrix>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(records, BufWriter::new(f))
}

pub fn load_embeddings(path: &Path) -> Result<IndexMap<String, EmbeddingMatrix>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(f))
}

/// Fails with a dimension mismatch if any matrix is not `d` wide.
pub fn check_width(records: &IndexMap<String, EmbeddingMatrix>, d: usize) -> Result<()> {
    match records.values().find(|m| m.cols() != d) {
        Some(m) => Err(Error::DimensionMismatch { expected: d, found: m.cols() }),
        None => Ok(()),
    }
}
