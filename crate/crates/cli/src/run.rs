use std::fs;
use std::path::{Path, PathBuf};

use prefixmtl::probing::Normalization;
use prefixmtl::training::TrainConfig;
use prefixmtl::transfer::Strategy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub const RUN_FORMAT: &str = "prefixmtl.run.v1";
pub const RUN_FILE: &str = "run.json";

/// Where a corpus comes from. The manifest path is stored absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSource {
    pub manifest: PathBuf,
    pub k: Option<usize>,
}

/// Everything a command needs, fully resolved. Written to `run.json` before
/// any work starts, so a run can be repeated from that file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format: String,
    pub seed: u64,
    #[serde(flatten)]
    pub job: Job,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Job {
    Convert {
        corpus: CorpusSource,
    },
    Train {
        corpus: CorpusSource,
        train: TrainConfig,
        target: Option<String>,
        strategy: Option<Strategy>,
        subset: Vec<String>,
        matrix: Option<PathBuf>,
    },
    Probe {
        corpus: CorpusSource,
        train: TrainConfig,
        normalization: Normalization,
        warm_start: Option<PathBuf>,
    },
    Transfer {
        corpus: CorpusSource,
        train: TrainConfig,
        sources: Vec<String>,
        targets: Vec<String>,
        matrix: Option<PathBuf>,
    },
    Select {
        matrix: PathBuf,
        target: String,
        top_k: usize,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Convert { .. } => "convert",
            Job::Train { .. } => "train",
            Job::Probe { .. } => "probe",
            Job::Transfer { .. } => "transfer",
            Job::Select { .. } => "select",
        }
    }
}

impl RunConfig {
    pub fn new(seed: u64, job: Job) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            seed,
            job,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// First eight hex digits of the SHA-256 of the canonical JSON.
    pub fn short_hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("run config serializes"));
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::data("io", format!("{}: {e}", path.display())))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Failure::data("parse", format!("{}: {e}", path.display())))?;
        if config.format != RUN_FORMAT {
            return Err(Failure::data(
                "format",
                format!("{}: expected {RUN_FORMAT}, found {}", path.display(), config.format),
            ));
        }
        Ok(config)
    }

    /// Creates `<out>/<command>-<hash8>`, adding `-2`, `-3`, ... when the name
    /// is taken, and writes `run.json` into it.
    pub fn create_dir(&self, out: &Path) -> Result<PathBuf, Failure> {
        fs::create_dir_all(out)?;
        let base = format!("{}-{}", self.job.name(), self.short_hash());
        let mut dir = out.join(&base);
        let mut n = 1;
        loop {
            match fs::create_dir(&dir) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    dir = out.join(format!("{base}-{n}"));
                }
                Err(e) => return Err(e.into()),
            }
        }
        fs::write(dir.join(RUN_FILE), self.to_json() + "\n")?;
        Ok(dir)
    }
}

/// Accepts a matrix file or a probe run directory holding `relationships.json`.
pub fn matrix_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(crate::commands::RELATIONSHIPS_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn absolute(path: &Path) -> Result<PathBuf, Failure> {
    fs::canonicalize(path).map_err(|e| Failure::data("io", format!("{}: {e}", path.display())))
}
