use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{debug, info};

use super::fasta::parse_fasta_str;
use crate::error::{Error, Result};

pub const RCSB_BASE_URL: &str = "https://www.rcsb.org";

/// Checks the four-character alphanumeric form and returns the id uppercased.
pub fn normalize_pdb_id(id: &str) -> Result<String> {
    if id.len() == 4 && id.bytes().all(|b| b.is_ascii_alphanumeric()) {
        Ok(id.to_ascii_uppercase())
    } else {
        Err(Error::invalid(format!("malformed PDB id {id:?}")))
    }
}

/// Downloads entry FASTA files and caches one file per id.
pub struct FastaFetcher {
    base_url: String,
    cache_dir: PathBuf,
    offline: bool,
    agent: ureq::Agent,
}

impl FastaFetcher {
    pub fn new(cache_dir: impl Into<PathBuf>, offline: bool) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self {
            base_url: RCSB_BASE_URL.to_string(),
            cache_dir: cache_dir.into(),
            offline,
            agent,
        }
    }

    /// Points the client at another server, e.g. a mirror or a test stub.
    pub fn with_base_url(mut self, url: impl Into<String>) -> Self {
        self.base_url = url.into().trim_end_matches('/').to_string();
        self
    }

    pub fn cache_path(&self, pdb_id: &str) -> PathBuf {
        self.cache_dir.join(format!("{pdb_id}.fasta"))
    }

    pub fn url(&self, pdb_id: &str) -> String {
        format!("{}/fasta/entry/{pdb_id}", self.base_url)
    }

    /// FASTA text for `pdb_id`, from the cache when present.
    pub fn fetch_text(&self, pdb_id: &str) -> Result<String> {
        let id = normalize_pdb_id(pdb_id)?;
        let path = self.cache_path(&id);
        if path.exists() {
            debug!("cache hit for {id}");
            return std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e));
        }
        if self.offline {
            return Err(Error::CacheMiss(path));
        }
        let url = self.url(&id);
        info!("fetching {url}");
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| Error::Network(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(Error::Fetch { url, status });
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Network(format!("{url}: {e}")))?;
        write_atomic(&path, body.as_bytes())?;
        Ok(body)
    }

    pub fn fetch(&self, pdb_id: &str) -> Result<BTreeMap<String, String>> {
        parse_fasta_str(&self.fetch_text(pdb_id)?)
    }
}

// Concurrent fetches of the same id each write their own temp file; the
// rename makes whichever finishes last win with a complete file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension(format!("fasta.{}.part", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Convenience wrapper for a one-off fetch against the public server.
pub fn fetch_rcsb_fasta(pdb_id: &str, cache_dir: &Path, offline: bool) -> Result<BTreeMap<String, String>> {
    FastaFetcher::new(cache_dir, offline).fetch(pdb_id)
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::thread;

    use super::*;

    const BODY: &str = ">3Q0H_1|Chain A|T-cell immunoreceptor|Homo sapiens\nMMTGTIETTGNISAEKGGSIILQCHLSSTTAQVTQVNWEQQDQLLAICNADLGWHISPSFKDRVAPGPGLGLTLQSLTVNDTGEYFCIYHTYPDGTYTGRIFLEVLESSVAEHGARFQIP\n";

    /// Serves canned responses on localhost and counts requests.
    fn serve(status: u16, body: &'static str) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                while reader.read_line(&mut line).unwrap() > 0 && line != "\r\n" {
                    line.clear();
                }
                counter.fetch_add(1, Ordering::SeqCst);
                let reason = if status == 200 { "OK" } else { "Not Found" };
                write!(
                    stream,
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), hits)
    }

    #[test]
    fn id_validation() {
        assert_eq!(normalize_pdb_id("3q0h").unwrap(), "3Q0H");
        for bad in ["3q0", "3Q0HH", "3Q-H", ""] {
            assert!(matches!(normalize_pdb_id(bad), Err(Error::InvalidArgument(_))), "{bad}");
        }
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            FastaFetcher::new(dir.path(), true).fetch("3q0"),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn fetches_then_serves_from_cache() {
        let (url, hits) = serve(200, BODY);
        let dir = tempfile::tempdir().unwrap();
        let f = FastaFetcher::new(dir.path(), false).with_base_url(url);
        let m = f.fetch("3q0h").unwrap();
        assert_eq!(m.len(), 1);
        assert!(m["3Q0H_1|Chain"].starts_with("MMTGTIETT"));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        assert!(dir.path().join("3Q0H.fasta").exists());

        f.fetch("3Q0H").unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        let offline = FastaFetcher::new(dir.path(), true).with_base_url("http://127.0.0.1:9");
        assert_eq!(offline.fetch("3Q0H").unwrap(), m);
    }

    #[test]
    fn offline_miss() {
        let dir = tempfile::tempdir().unwrap();
        let f = FastaFetcher::new(dir.path(), true);
        assert!(matches!(f.fetch("1ABC"), Err(Error::CacheMiss(p)) if p.ends_with("1ABC.fasta")));
    }

    #[test]
    fn http_error_status_is_reported() {
        let (url, _) = serve(404, "no such entry");
        let dir = tempfile::tempdir().unwrap();
        let f = FastaFetcher::new(dir.path(), false).with_base_url(url);
        match f.fetch("9ZZZ") {
            Err(Error::Fetch { status, url }) => {
                assert_eq!(status, 404);
                assert!(url.ends_with("/fasta/entry/9ZZZ"));
            }
            other => panic!("{other:?}"),
        }
        assert!(!dir.path().join("9ZZZ.fasta").exists());
    }
}
