use std::collections::BTreeMap;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

/// Parses FASTA text into `id → sequence`.
///
/// The id is the first whitespace-delimited token of the header. Body lines
/// are concatenated and uppercased. A repeated id keeps the later entry.
pub fn parse_fasta_str(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut current: Option<(String, String)> = None;
    let finish = |entry: Option<(String, String)>, out: &mut BTreeMap<String, String>| {
        if let Some((id, seq)) = entry {
            if out.insert(id.clone(), seq).is_some() {
                warn!("duplicate FASTA header {id:?}; keeping the later entry");
            }
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header.split_whitespace().next().ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "empty FASTA header".into(),
            })?;
            finish(current.take(), &mut out);
            current = Some((id.to_string(), String::new()));
        } else {
            match current.as_mut() {
                Some((_, seq)) => seq.extend(line.chars().filter(|c| !c.is_whitespace()).map(|c| c.to_ascii_uppercase())),
                None => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: "sequence data before the first header".into(),
                    })
                }
            }
        }
    }
    finish(current, &mut out);
    Ok(out)
}

pub fn parse_fasta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fasta_str(&text)
}
