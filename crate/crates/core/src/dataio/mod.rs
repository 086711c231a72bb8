//! Binder record ingestion, cluster-level dataset splits, FASTA parsing and
//! a cached RCSB FASTA client.

mod fasta;
mod fetch;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use fasta::{parse_fasta, parse_fasta_str};
pub use fetch::{fetch_rcsb_fasta, normalize_pdb_id, FastaFetcher, RCSB_BASE_URL};

use crate::denoiser::PocketMask;
use crate::error::{Error, Result};
use crate::seed;
use crate::sequence::{residue_index, PeptideSequence};

/// Structures with a resolution above this (in Å) are dropped.
pub const MAX_RESOLUTION: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinderRecord {
    pub pdb_id: String,
    pub receptor_seq: String,
    pub binder_seq: String,
    pub resolution: f64,
    pub pocket_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<String>,
}

impl BinderRecord {
    pub fn receptor(&self) -> Result<PeptideSequence> {
        PeptideSequence::new(self.receptor_seq.clone())
    }

    pub fn binder(&self) -> Result<PeptideSequence> {
        PeptideSequence::new(self.binder_seq.clone())
    }

    pub fn pocket_mask(&self) -> Result<PocketMask> {
        PocketMask::from_indices(self.receptor_seq.len(), &self.pocket_indices)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum RejectReason {
    DuplicateId { first_line: usize },
    LowResolution { resolution: f64 },
    InvalidResolution { resolution: f64 },
    UnknownResidue { field: String, position: usize, letter: char },
    EmptySequence { field: String },
    PocketOutOfRange { index: usize, receptor_len: usize },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateId { first_line } => write!(f, "duplicate-id (first seen on line {first_line})"),
            Self::LowResolution { resolution } => write!(f, "low-resolution ({resolution} Å)"),
            Self::InvalidResolution { resolution } => write!(f, "invalid-resolution ({resolution})"),
            Self::UnknownResidue { field, position, letter } => {
                write!(f, "unknown-residue ({letter:?} at {field}[{position}])")
            }
            Self::EmptySequence { field } => write!(f, "empty-sequence ({field})"),
            Self::PocketOutOfRange { index, receptor_len } => {
                write!(f, "pocket-out-of-range ({index} >= {receptor_len})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub pdb_id: String,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<BinderRecord>,
    pub rejected: Vec<Rejection>,
}

fn sequence_problem(field: &str, seq: &str) -> Option<RejectReason> {
    if seq.is_empty() {
        return Some(RejectReason::EmptySequence { field: field.into() });
    }
    seq.chars()
        .enumerate()
        .find(|(_, c)| !c.is_ascii() || residue_index(*c as u8).is_none())
        .map(|(position, letter)| RejectReason::UnknownResidue {
            field: field.into(),
            position,
            letter,
        })
}

fn screen(rec: &BinderRecord) -> Option<RejectReason> {
    if !(rec.resolution.is_finite() && rec.resolution > 0.0) {
        return Some(RejectReason::InvalidResolution {
            resolution: rec.resolution,
        });
    }
    if rec.resolution > MAX_RESOLUTION {
        return Some(RejectReason::LowResolution {
            resolution: rec.resolution,
        });
    }
    sequence_problem("receptor_seq", &rec.receptor_seq)
        .or_else(|| sequence_problem("binder_seq", &rec.binder_seq))
        .or_else(|| {
            rec.pocket_indices
                .iter()
                .find(|&&i| i >= rec.receptor_seq.len())
                .map(|&index| RejectReason::PocketOutOfRange {
                    index,
                    receptor_len: rec.receptor_seq.len(),
                })
        })
}

/// Reads JSON-lines records and applies the cleaning filters.
///
/// Duplicates are resolved first, in file order: the first line with a
/// given id (case-insensitive) is the only candidate for that id, even if
/// it later fails another filter. Then resolution, then the residue
/// alphabet, then pocket bounds. Ids and sequences are uppercased.
pub fn ingest_reader<R: BufRead>(reader: R) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: BinderRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        rec.pdb_id = rec.pdb_id.trim().to_ascii_uppercase();
        rec.receptor_seq = rec.receptor_seq.trim().to_ascii_uppercase();
        rec.binder_seq = rec.binder_seq.trim().to_ascii_uppercase();
        let reason = match seen.get(&rec.pdb_id) {
            Some(&first_line) => Some(RejectReason::DuplicateId { first_line }),
            None => {
                seen.insert(rec.pdb_id.clone(), lineno);
                screen(&rec)
            }
        };
        match reason {
            Some(reason) => report.rejected.push(Rejection {
                line: lineno,
                pdb_id: rec.pdb_id,
                reason,
            }),
            None => report.records.push(rec),
        }
    }
    Ok(report)
}

pub fn ingest(path: &Path) -> Result<IngestReport> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(f))
}

pub fn write_records<W: Write>(records: &[BinderRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<records>", e))?;
    }
    Ok(())
}

/// One line per rejection: `line<TAB>pdb_id<TAB>reason`.
pub fn write_rejections<W: Write>(rejected: &[Rejection], mut out: W) -> Result<()> {
    let io = |e| Error::io("<rejection log>", e);
    writeln!(out, "line\tpdb_id\treason").map_err(io)?;
    for r in rejected {
        writeln!(out, "{}\t{}\t{}", r.line, r.pdb_id, r.reason).map_err(io)?;
    }
    Ok(())
}

/// Reads `member<TAB>cluster` lines. Blank lines and `#` comments are
/// skipped. Member ids are uppercased to match ingested records.
pub fn parse_clusters_str(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 2 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 2 tab-separated columns, got {:?}", line),
            });
        }
        let member = cols[0].to_ascii_uppercase();
        if let Some(prev) = out.insert(member.clone(), cols[1].to_string()) {
            if prev != cols[1] {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("{member} assigned to both {prev} and {}", cols[1]),
                });
            }
        }
    }
    Ok(out)
}

pub fn parse_clusters(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_clusters_str(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitParams {
    /// Maximum members kept per train/val cluster.
    pub cap: usize,
    /// Fraction of clusters reserved for test, rounded up.
    pub test_fraction: f64,
    /// Train:val weights; the val cluster count is rounded down.
    pub train_val_ratio: [u32; 2],
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            cap: 10,
            test_fraction: 0.05,
            train_val_ratio: [80, 20],
        }
    }
}

impl SplitParams {
    pub fn validate(&self) -> Result<()> {
        if self.cap == 0 {
            return Err(Error::Config("cluster cap must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.train_val_ratio.iter().sum::<u32>() == 0 {
            return Err(Error::Config("train_val_ratio must not be all zero".into()));
        }
        Ok(())
    }

    pub fn test_clusters(&self, clusters: usize) -> usize {
        // The epsilon keeps products like 0.05 * 100 from rounding up to 6.
        (((self.test_fraction * clusters as f64) - 1e-9).ceil().max(0.0) as usize).min(clusters)
    }

    pub fn val_clusters(&self, remaining: usize) -> usize {
        let [tr, va] = self.train_val_ratio;
        remaining * va as usize / (tr + va) as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionClusters {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub clusters: PartitionClusters,
    pub seed: u64,
    pub parameters: SplitParams,
}

impl SplitManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.check_disjoint()?;
        Ok(m)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !ids.insert(id) {
                return Err(Error::invalid(format!("record {id} appears in more than one partition")));
            }
        }
        let mut cl = HashSet::new();
        for c in self.clusters.train.iter().chain(&self.clusters.val).chain(&self.clusters.test) {
            if !cl.insert(c) {
                return Err(Error::invalid(format!("cluster {c} appears in more than one partition")));
            }
        }
        Ok(())
    }
}

/// Cluster of each record: its own `cluster_id` if set, else the lookup.
fn cluster_of<'a>(rec: &'a BinderRecord, clusters: &'a BTreeMap<String, String>) -> Result<&'a str> {
    rec.cluster_id
        .as_deref()
        .or_else(|| clusters.get(&rec.pdb_id).map(String::as_str))
        .ok_or_else(|| Error::MissingCluster(rec.pdb_id.clone()))
}

/// Leakage-aware split. Clusters are visited in sorted order, shuffled with
/// the seed, and the first `test_clusters` become test clusters contributing
/// one random member each. The rest are split train/val at cluster level,
/// and each keeps at most `cap` randomly chosen members. Id lists are sorted.
pub fn cluster_split(
    records: &[BinderRecord],
    clusters: &BTreeMap<String, String>,
    params: &SplitParams,
    seed: u64,
) -> Result<SplitManifest> {
    params.validate()?;
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for rec in records {
        groups.entry(cluster_of(rec, clusters)?).or_default().push(&rec.pdb_id);
    }
    let mut ids = HashSet::new();
    if let Some(dup) = records.iter().find(|r| !ids.insert(&r.pdb_id)) {
        return Err(Error::invalid(format!("duplicate record id {}", dup.pdb_id)));
    }

    let mut rng = seed::rng(seed);
    let mut order: Vec<&str> = groups.keys().copied().collect();
    order.shuffle(&mut rng);
    let n_test = params.test_clusters(order.len());
    let n_val = params.val_clusters(order.len() - n_test);
    let (test_c, rest) = order.split_at(n_test);
    let (val_c, train_c) = rest.split_at(n_val);

    let mut test: Vec<String> = test_c
        .iter()
        .map(|c| {
            let m = &groups[c];
            m[rng.random_range(0..m.len())].to_string()
        })
        .collect();
    let mut capped = |cs: &[&str]| -> Vec<String> {
        let mut out = Vec::new();
        for c in cs {
            let m = &groups[c];
            if m.len() <= params.cap {
                out.extend(m.iter().map(|s| s.to_string()));
            } else {
                let mut pick = index::sample(&mut rng, m.len(), params.cap).into_vec();
                pick.sort_unstable();
                out.extend(pick.into_iter().map(|i| m[i].to_string()));
            }
        }
        out.sort();
        out
    };
    let val = capped(val_c);
    let train = capped(train_c);
    test.sort();

    let sorted = |cs: &[&str]| {
        let mut v: Vec<String> = cs.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    };
    let manifest = SplitManifest {
        train,
        val,
        test,
        clusters: PartitionClusters {
            train: sorted(train_c),
            val: sorted(val_c),
            test: sorted(test_c),
        },
        seed,
        parameters: params.clone(),
    };
    if manifest.train.is_empty() {
        warn!("split produced an empty training set");
    }
    Ok(manifest)
}
