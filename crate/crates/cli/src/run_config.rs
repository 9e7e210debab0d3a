//! The merged run configuration echoed into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use distillseg_core::decoder::DecoderConfig;
use distillseg_core::digest::bytes_digest;
use distillseg_core::gateway::toy::ToyConfig;
use distillseg_core::gateway::{AdapterConfig, EmbeddingCache};
use distillseg_core::prompt::{AnnotationMode, SimulationConfig};
use distillseg_core::trainer::TrainConfig;
use distillseg_core::{Error, Result};

pub const CACHE_ENV: &str = "DISTILLSEG_CACHE";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Corpus directory; the other paths default to files inside it.
    pub data: PathBuf,
    pub manifest: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data.join("manifest.json"))
    }

    pub fn annotations(&self) -> PathBuf {
        self.annotations
            .clone()
            .unwrap_or_else(|| self.data.join("annotations").join("annotations.jsonl"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; copied into the trainer and the toy encoder.
    pub seed: u64,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    /// Filled in once the embedding shape and target size are known.
    pub decoder: Option<DecoderConfig>,
    pub annotation_mode: AnnotationMode,
    pub simulation: SimulationConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            adapter: AdapterConfig::None,
            train: TrainConfig::default(),
            decoder: None,
            annotation_mode: AnnotationMode::Box,
            simulation: SimulationConfig::default(),
            paths: Paths {
                data: PathBuf::from("."),
                ..Paths::default()
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Propagates the master seed; call after every override is applied.
    pub fn finalize(mut self) -> Self {
        self.train.seed = self.seed;
        if let AdapterConfig::Toy(cfg) = &mut self.adapter {
            cfg.seed = self.seed;
        }
        self
    }

    pub fn use_toy_encoder(&mut self) {
        if !matches!(self.adapter, AdapterConfig::Toy(_)) {
            self.adapter = AdapterConfig::Toy(ToyConfig::default());
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        bytes_digest(&serde_json::to_vec(self).expect("run config serializes"))
    }

    /// Explicit path wins over the environment variable.
    pub fn cache(&self) -> Result<Option<EmbeddingCache>> {
        match &self.paths.cache {
            Some(dir) => Ok(Some(EmbeddingCache::open(dir)?)),
            None => EmbeddingCache::from_env(),
        }
    }
}

/// Any JSON output: the payload plus the configuration that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub run_config: RunConfig,
    pub config_hash: String,
    pub result: T,
}

impl<T: Serialize> Artifact<T> {
    pub fn new(run_config: &RunConfig, result: T) -> Self {
        Self {
            config_hash: run_config.hash(),
            run_config: run_config.clone(),
            result,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Sidecar for artifacts whose own format has no room for provenance.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    artifact.with_file_name(name)
}
