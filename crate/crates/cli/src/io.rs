use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::{CliError, CliResult};

/// Resolves an input path from the flag or the config and checks it exists.
pub fn input(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let p = flag
        .clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} given; pass --{what} or set paths.{what}")))?;
    existing(&p, what)
}

pub fn existing(p: &Path, what: &str) -> CliResult<PathBuf> {
    if p.is_file() {
        Ok(p.to_path_buf())
    } else {
        Err(CliError::Usage(format!("{what} file {} does not exist", p.display())))
    }
}

/// Writes through a temporary file in the target directory, then renames
/// it into place.
pub fn write_atomic<F>(path: &Path, f: F) -> CliResult
where
    F: FnOnce(&mut dyn Write) -> CliResult,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let ctx = || format!("writing {}", path.display());
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(ctx(), e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(ctx(), e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        f(&mut w)?;
        w.flush().map_err(|e| CliError::io(ctx(), e))?;
    }
    tmp.as_file().sync_all().map_err(|e| CliError::io(ctx(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(ctx(), e.error))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult {
    write_atomic(path, |w| {
        w.write_all(text.as_bytes())
            .map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    })
}

pub fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(format!("writing {}", path.display()), e)
}

/// Tab-separated row; tabs and newlines inside fields become spaces.
pub fn tsv_row(w: &mut dyn Write, fields: &[&str]) -> std::io::Result<()> {
    let cleaned: Vec<String> = fields.iter().map(|f| f.replace(['\t', '\n', '\r'], " ")).collect();
    writeln!(w, "{}", cleaned.join("\t"))
}
