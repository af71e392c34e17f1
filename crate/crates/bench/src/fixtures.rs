//! Seeded on-disk inputs: the virus-scan corpus and signature database.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::workloads::{ImagePair, ScanJob, IMAGE_WIDTH};

const MANIFEST: &str = "manifest.json";
const SIGNATURE_LEN: usize = 24;
const FILES_PER_DIR: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub files: usize,
    pub total_bytes: u64,
    pub signatures: usize,
    /// Files that receive exactly one signature each.
    pub planted: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            files: 3500,
            total_bytes: 10 * 1024 * 1024,
            signatures: 1000,
            planted: 7,
            seed: 0x00ff_10ad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub spec: FixtureSpec,
    pub planted: u64,
    pub infected: Vec<String>,
    /// Image pair whose composite needs 120 MiB.
    pub oom_images: ImagePair,
}

#[derive(Debug, Clone)]
pub struct Fixtures {
    root: PathBuf,
    manifest: FixtureManifest,
}

impl Fixtures {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn signatures_path(&self) -> PathBuf {
        self.root.join("signatures.txt")
    }

    pub fn manifest(&self) -> &FixtureManifest {
        &self.manifest
    }

    pub fn scan_job(&self) -> ScanJob {
        ScanJob {
            corpus: self.corpus_dir(),
            signatures: self.signatures_path(),
            files: None,
            bytes: self.manifest.spec.total_bytes,
        }
    }

    pub fn open(root: impl AsRef<Path>) -> std::io::Result<Self> {
        let root = root.as_ref().to_path_buf();
        let text = fs::read_to_string(root.join(MANIFEST))?;
        let manifest = serde_json::from_str(&text).map_err(std::io::Error::other)?;
        Ok(Self { root, manifest })
    }

    /// Opens existing fixtures built from `spec`, building them otherwise.
    pub fn ensure(root: impl AsRef<Path>, spec: FixtureSpec) -> std::io::Result<Self> {
        match Self::open(&root) {
            Ok(fx) if fx.manifest.spec == spec => Ok(fx),
            _ => build(root, spec),
        }
    }
}

fn random_signature(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut sig: Vec<u8> = (0..SIGNATURE_LEN)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())])
        .collect();
    // Corpus text has no digits, so no signature can occur by chance.
    sig[SIGNATURE_LEN / 2] = b'0' + rng.gen_range(0..10);
    String::from_utf8(sig).unwrap()
}

/// Writes the corpus, the signature database and the manifest under `root`.
pub fn build(root: impl AsRef<Path>, spec: FixtureSpec) -> std::io::Result<Fixtures> {
    let root = root.as_ref().to_path_buf();
    if spec.files == 0 || spec.planted > spec.files || (spec.planted > 0 && spec.signatures == 0) {
        return Err(std::io::Error::other("inconsistent fixture spec"));
    }
    let min_bytes = (spec.files * SIGNATURE_LEN) as u64;
    if spec.total_bytes < min_bytes {
        return Err(std::io::Error::other(format!(
            "total_bytes must be at least {min_bytes} to fit a signature in every file"
        )));
    }
    let corpus = root.join("corpus");
    if corpus.exists() {
        fs::remove_dir_all(&corpus)?;
    }
    fs::create_dir_all(&corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let signatures: Vec<String> = (0..spec.signatures).map(|_| random_signature(&mut rng)).collect();
    let mut db = fs::File::create(root.join("signatures.txt"))?;
    for s in &signatures {
        writeln!(db, "{s}")?;
    }

    let mut infected_idx: Vec<usize> = sample(&mut rng, spec.files, spec.planted).into_vec();
    infected_idx.sort_unstable();
    let base = spec.total_bytes / spec.files as u64;
    let extra = (spec.total_bytes % spec.files as u64) as usize;
    let mut infected = Vec::new();
    for i in 0..spec.files {
        let len = base as usize + usize::from(i < extra);
        let mut body: Vec<u8> = (0..len)
            .map(|_| match rng.gen_range(0..32u8) {
                0..=25 => b'a' + rng.gen_range(0..26),
                26..=30 => b' ',
                _ => b'\n',
            })
            .collect();
        if infected_idx.binary_search(&i).is_ok() {
            let sig = signatures[rng.gen_range(0..signatures.len())].as_bytes();
            let at = rng.gen_range(0..=len - sig.len());
            body[at..at + sig.len()].copy_from_slice(sig);
        }
        let rel = format!("d{:03}/f{:05}.txt", i / FILES_PER_DIR, i);
        let path = corpus.join(&rel);
        fs::create_dir_all(path.parent().unwrap())?;
        fs::write(&path, &body)?;
        if infected_idx.binary_search(&i).is_ok() {
            infected.push(rel);
        }
    }

    let manifest = FixtureManifest {
        spec,
        planted: infected.len() as u64,
        infected,
        oom_images: ImagePair::square(IMAGE_WIDTH, 6144),
    };
    fs::write(
        root.join(MANIFEST),
        serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?,
    )?;
    Ok(Fixtures { root, manifest })
}
