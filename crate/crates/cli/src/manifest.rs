//! Run manifest of a training directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use saod::io::{json_hash, read_json, sha256_hex, write_json_atomic};
use saod::scene::CORPUS_FILE;
use saod::teacher::TrainConfig;

use crate::{CliResult, Failure};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATE_FILE: &str = "state.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DIAGNOSTIC_FILE: &str = "diverged.ckpt";
const FORMAT: &str = "saod-run/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| Failure::from(saod::Error::Io {
            path: path.to_owned(),
            source: e,
        }))?;
        Ok(Self {
            path: path.to_owned(),
            sha256: sha256_hex(&bytes),
        })
    }

    /// Corpora are directories; their index file pins the raster blob by hash.
    pub fn corpus(dir: &Path) -> CliResult<Self> {
        let mut f = Self::hash(&dir.join(CORPUS_FILE))?;
        f.path = dir.to_owned();
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub corpus: InputFile,
    pub annotations: InputFile,
    pub prompts: Option<InputFile>,
    pub eval_corpus: Option<InputFile>,
    pub state: String,
    pub teacher: String,
    pub metrics: String,
    pub seed: u64,
    /// Hash of the resolved config together with the input hashes.
    pub config_hash: String,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn new(
        config: TrainConfig,
        corpus: InputFile,
        annotations: InputFile,
        prompts: Option<InputFile>,
        eval_corpus: Option<InputFile>,
    ) -> Self {
        let config_hash = config_hash(&config, &corpus, &annotations, &prompts, &eval_corpus);
        Self {
            format: FORMAT.into(),
            corpus,
            annotations,
            prompts,
            eval_corpus,
            state: STATE_FILE.into(),
            teacher: TEACHER_FILE.into(),
            metrics: METRICS_FILE.into(),
            seed: config.seed,
            config_hash,
            config,
        }
    }

    pub fn save(&self, dir: &Path) -> CliResult {
        Ok(write_json_atomic(&dir.join(MANIFEST_FILE), self)?)
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let m: Self = read_json(&dir.join(MANIFEST_FILE))?;
        if m.format != FORMAT {
            return Err(Failure::validation(format!("{}: unexpected format {}", dir.display(), m.format)));
        }
        Ok(m)
    }
}

pub fn config_hash(
    config: &TrainConfig,
    corpus: &InputFile,
    annotations: &InputFile,
    prompts: &Option<InputFile>,
    eval_corpus: &Option<InputFile>,
) -> String {
    json_hash(&(
        config,
        &corpus.sha256,
        &annotations.sha256,
        prompts.as_ref().map(|p| &p.sha256),
        eval_corpus.as_ref().map(|p| &p.sha256),
    ))
}
