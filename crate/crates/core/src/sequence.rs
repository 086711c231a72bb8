//! Amino-acid sequences over the 20 standard residues.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// Index of `letter` in [`AMINO_ACIDS`].
pub fn residue_index(letter: u8) -> Option<usize> {
    AMINO_ACIDS.iter().position(|&a| a == letter)
}

pub fn is_standard(seq: &str) -> bool {
    seq.bytes().all(|b| residue_index(b).is_some())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PeptideSequence(String);

impl PeptideSequence {
    pub fn new(seq: impl Into<String>) -> Result<Self> {
        let seq = seq.into();
        if seq.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        if let Some((position, letter)) = seq
            .char_indices()
            .find(|(_, c)| !c.is_ascii() || residue_index(*c as u8).is_none())
        {
            return Err(Error::Alphabet { position, letter });
        }
        Ok(Self(seq))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Residue indices into [`AMINO_ACIDS`].
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.bytes().map(|b| residue_index(b).expect("validated"))
    }

    /// # Panics
    ///
    /// If the iterator is empty or yields an index of 20 or more.
    pub fn from_indices(idx: impl IntoIterator<Item = usize>) -> Self {
        let s: String = idx.into_iter().map(|i| AMINO_ACIDS[i] as char).collect();
        assert!(!s.is_empty(), "empty sequence");
        Self(s)
    }

    /// Uniformly random sequence of `len` residues.
    pub fn random<R: rand::Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        Self::from_indices((0..len).map(|_| rng.random_range(0..AMINO_ACIDS.len())))
    }
}

impl fmt::Display for PeptideSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for PeptideSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

impl TryFrom<String> for PeptideSequence {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<PeptideSequence> for String {
    fn from(s: PeptideSequence) -> Self {
        s.0
    }
}

impl AsRef<str> for PeptideSequence {
    fn as_ref(&self) -> &str {
        &self.0
    }
}
