//! Substitution matrices and affine-gap global alignment.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{PeptideSequence, AMINO_ACIDS};

const BLOSUM62_TEXT: &str = include_str!("../../data/blosum62.txt");

/// Square integer score table keyed by residue letter.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionMatrix {
    letters: Vec<u8>,
    // Letter byte → row/column index, 255 when absent.
    lookup: [u8; 256],
    scores: Vec<i32>,
}

impl SubstitutionMatrix {
    /// Parses the NCBI layout: `#` comment lines, a header row of column
    /// letters, then one row per letter starting with that letter.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines
            .next()
            .ok_or(Error::Parse { line: 0, message: "no header row".into() })?;
        let letters: Vec<u8> = header
            .split_whitespace()
            .map(|t| match t.as_bytes() {
                [b] => Ok(b.to_ascii_uppercase()),
                _ => Err(Error::Parse {
                    line: hline,
                    message: format!("header token {t:?} is not a single letter"),
                }),
            })
            .collect::<Result<_>>()?;
        let n = letters.len();
        let mut lookup = [u8::MAX; 256];
        for (i, &l) in letters.iter().enumerate() {
            if lookup[l as usize] != u8::MAX {
                return Err(Error::Parse {
                    line: hline,
                    message: format!("duplicate column {:?}", l as char),
                });
            }
            lookup[l as usize] = i as u8;
        }

        let mut scores = vec![0i32; n * n];
        let mut seen = vec![false; n];
        for (line, row) in lines {
            let mut tok = row.split_whitespace();
            let label = tok.next().unwrap_or_default();
            let r = match label.as_bytes() {
                [b] if lookup[b.to_ascii_uppercase() as usize] != u8::MAX => {
                    lookup[b.to_ascii_uppercase() as usize] as usize
                }
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("row label {label:?} is not a header letter"),
                    })
                }
            };
            if seen[r] {
                return Err(Error::Parse { line, message: format!("row {label:?} repeated") });
            }
            seen[r] = true;
            let vals: Vec<i32> = tok
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("bad score {t:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != n {
                return Err(Error::Parse {
                    line,
                    message: format!("row has {} scores, expected {n}", vals.len()),
                });
            }
            scores[r * n..(r + 1) * n].copy_from_slice(&vals);
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(Error::Parse {
                line: 0,
                message: format!("missing row for {:?}", letters[r] as char),
            });
        }
        let m = Self { letters, lookup, scores };
        for &a in AMINO_ACIDS {
            if m.index(a).is_none() {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("matrix lacks residue {:?}", a as char),
                });
            }
        }
        for i in 0..n {
            for j in 0..i {
                if m.scores[i * n + j] != m.scores[j * n + i] {
                    return Err(Error::Parse {
                        line: 0,
                        message: format!(
                            "matrix is not symmetric at {:?}/{:?}",
                            m.letters[i] as char, m.letters[j] as char
                        ),
                    });
                }
            }
        }
        Ok(m)
    }

    pub fn letters(&self) -> &[u8] {
        &self.letters
    }

    fn index(&self, letter: u8) -> Option<usize> {
        match self.lookup[letter as usize] {
            u8::MAX => None,
            i => Some(i as usize),
        }
    }

    /// Score for a letter pair; `None` if either letter is absent.
    pub fn score(&self, a: u8, b: u8) -> Option<i32> {
        Some(self.scores[self.index(a)? * self.letters.len() + self.index(b)?])
    }
}

/// The bundled BLOSUM62 table.
pub fn blosum62() -> &'static SubstitutionMatrix {
    static M: OnceLock<SubstitutionMatrix> = OnceLock::new();
    M.get_or_init(|| SubstitutionMatrix::parse(BLOSUM62_TEXT).expect("bundled BLOSUM62 parses"))
}

/// Affine gap model: a gap of length `k` costs `open + (k − 1)·extend`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapPenalties {
    pub open: f64,
    pub extend: f64,
}

impl Default for GapPenalties {
    fn default() -> Self {
        Self { open: 10.0, extend: 1.0 }
    }
}

impl GapPenalties {
    pub fn validate(&self) -> Result<()> {
        if !(self.open >= 0.0 && self.extend >= 0.0 && self.open.is_finite() && self.extend.is_finite()) {
            return Err(Error::Config("gap penalties must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn cost(&self, len: usize) -> f64 {
        if len == 0 {
            0.0
        } else {
            self.open + (len - 1) as f64 * self.extend
        }
    }
}

/// Optimal global alignment score (Gotoh three-state recursion).
///
/// States: `m` ends in an aligned pair, `x` ends with a residue of `s1`
/// against a gap, `y` ends with a residue of `s2` against a gap. Switching
/// directly between the two gap states opens a new gap.
pub fn nw_align(s1: &str, s2: &str, matrix: &SubstitutionMatrix, gaps: &GapPenalties) -> Result<f64> {
    let a = PeptideSequence::new(s1)?;
    let b = PeptideSequence::new(s2)?;
    Ok(nw_score(a.as_bytes(), b.as_bytes(), matrix, gaps))
}

pub(crate) fn nw_score(a: &[u8], b: &[u8], matrix: &SubstitutionMatrix, gaps: &GapPenalties) -> f64 {
    const NEG: f64 = f64::NEG_INFINITY;
    let (n, m) = (a.len(), b.len());
    let w = m + 1;
    let mut sm = vec![NEG; (n + 1) * w];
    let mut sx = vec![NEG; (n + 1) * w];
    let mut sy = vec![NEG; (n + 1) * w];
    sm[0] = 0.0;
    for i in 1..=n {
        sx[i * w] = -gaps.cost(i);
    }
    for j in 1..=m {
        sy[j] = -gaps.cost(j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let s = f64::from(matrix.score(a[i - 1], b[j - 1]).expect("validated residue"));
            let d = (i - 1) * w + (j - 1);
            sm[i * w + j] = s + sm[d].max(sx[d]).max(sy[d]);
            let up = (i - 1) * w + j;
            sx[i * w + j] = (sm[up] - gaps.open)
                .max(sx[up] - gaps.extend)
                .max(sy[up] - gaps.open);
            let left = i * w + j - 1;
            sy[i * w + j] = (sm[left] - gaps.open)
                .max(sy[left] - gaps.extend)
                .max(sx[left] - gaps.open);
        }
    }
    let end = n * w + m;
    sm[end].max(sx[end]).max(sy[end])
}

/// `NW(s1, s2) / NW(s1, s1)`. Normalized by the first argument only, so the
/// measure is not symmetric.
pub fn sim_seq(s1: &str, s2: &str, matrix: &SubstitutionMatrix, gaps: &GapPenalties) -> Result<f64> {
    let self_score = nw_align(s1, s1, matrix, gaps)?;
    if self_score == 0.0 {
        return Err(Error::DegenerateNormalization(s1.to_string()));
    }
    Ok(nw_align(s1, s2, matrix, gaps)? / self_score)
}
