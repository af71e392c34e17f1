use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use aho_corasick::{AhoCorasick, AhoCorasickKind};
use offload_core::task::{TaskBundle, TaskError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Counts corpus files containing at least one signature. Splits by
/// partitioning the sorted file list.
#[derive(Debug, Clone, Copy, Default)]
pub struct VirusScan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanJob {
    pub corpus: PathBuf,
    /// One signature per line.
    pub signatures: PathBuf,
    /// Explicit subset of the corpus; the whole corpus when `None`.
    pub files: Option<Vec<PathBuf>>,
    /// Bytes to scan, recorded when the job is built.
    pub bytes: u64,
}

impl ScanJob {
    /// A job over the whole corpus.
    pub fn new(corpus: impl Into<PathBuf>, signatures: impl Into<PathBuf>) -> std::io::Result<Self> {
        let corpus = corpus.into();
        let bytes = list_files(&corpus)?.iter().map(|(_, len)| len).sum();
        Ok(Self {
            corpus,
            signatures: signatures.into(),
            files: None,
            bytes,
        })
    }

    fn paths(&self) -> std::io::Result<Vec<PathBuf>> {
        match &self.files {
            Some(f) => Ok(f.clone()),
            None => list_paths(&self.corpus),
        }
    }
}

/// Regular files under `root` with their sizes, sorted by path.
pub fn list_files(root: &Path) -> std::io::Result<Vec<(PathBuf, u64)>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        if entry.file_type().is_file() {
            let len = entry.metadata().map_err(std::io::Error::other)?.len();
            out.push((entry.path().to_path_buf(), len));
        }
    }
    Ok(out)
}

fn list_paths(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        if entry.file_type().is_file() {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

pub fn read_signatures(path: &Path) -> std::io::Result<Vec<String>> {
    Ok(parse_signatures(&std::fs::read_to_string(path)?))
}

fn parse_signatures(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

/// Automata keyed by the digest of the signature database they were built from.
fn matcher(path: &Path) -> Result<Option<Arc<AhoCorasick>>, TaskError> {
    static CACHE: OnceLock<Mutex<HashMap<Vec<u8>, Arc<AhoCorasick>>>> = OnceLock::new();
    let text = std::fs::read_to_string(path).map_err(|e| TaskError::Io(e.to_string()))?;
    let key = Sha256::digest(text.as_bytes()).to_vec();
    let cache = CACHE.get_or_init(Mutex::default);
    if let Some(ac) = cache.lock().unwrap().get(&key) {
        return Ok(Some(ac.clone()));
    }
    let signatures = parse_signatures(&text);
    if signatures.is_empty() {
        return Ok(None);
    }
    let ac = AhoCorasick::builder()
        .kind(Some(AhoCorasickKind::DFA))
        .build(&signatures)
        .map_err(|e| TaskError::InvalidInput(e.to_string()))?;
    let ac = Arc::new(ac);
    cache.lock().unwrap().insert(key, ac.clone());
    Ok(Some(ac))
}

impl TaskBundle for VirusScan {
    type State = ();
    type Input = ScanJob;
    type Output = u64;

    fn id(&self) -> &str {
        "virusscan"
    }

    fn run(&self, _: &mut (), job: &ScanJob) -> Result<u64, TaskError> {
        let io = |e: std::io::Error| TaskError::Io(e.to_string());
        let Some(ac) = matcher(&job.signatures)? else {
            return Ok(0);
        };
        let mut infected = 0;
        for path in job.paths().map_err(io)? {
            let data = std::fs::read(&path).map_err(io)?;
            infected += u64::from(ac.is_match(&data));
        }
        Ok(infected)
    }

    fn work_units(&self, job: &ScanJob) -> u64 {
        job.bytes
    }

    fn unit_cost_ms(&self) -> f64 {
        1e-5
    }

    fn input_size_proxy(&self, job: &ScanJob) -> f64 {
        job.bytes as f64
    }

    fn splittable(&self) -> bool {
        true
    }

    /// Contiguous runs of the sorted file list, balanced by file count.
    /// When the corpus cannot be listed the job stays whole and its run
    /// reports the error.
    fn split(&self, job: &ScanJob, parts: usize) -> Vec<ScanJob> {
        let files: Vec<(PathBuf, u64)> = match &job.files {
            Some(f) => f
                .iter()
                .map(|p| (p.clone(), std::fs::metadata(p).map(|m| m.len()).unwrap_or(0)))
                .collect(),
            None => match list_files(&job.corpus) {
                Ok(f) => f,
                Err(_) => return vec![job.clone()],
            },
        };
        let parts = parts.clamp(1, files.len().max(1));
        let (base, extra) = (files.len() / parts, files.len() % parts);
        let mut out = Vec::with_capacity(parts);
        let mut rest = files.as_slice();
        for i in 0..parts {
            let (chunk, tail) = rest.split_at(base + usize::from(i < extra));
            rest = tail;
            out.push(ScanJob {
                corpus: job.corpus.clone(),
                signatures: job.signatures.clone(),
                files: Some(chunk.iter().map(|(p, _)| p.clone()).collect()),
                bytes: chunk.iter().map(|(_, len)| len).sum(),
            });
        }
        out
    }

    fn merge(&self, partials: Vec<u64>) -> Result<u64, TaskError> {
        Ok(partials.into_iter().sum())
    }
}
