//! Run configuration documents, run directories and input fingerprints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CarlError, Result};
use crate::eval::{FeatureLayer, LinearProbeConfig};
use crate::io::{Checkpoint, ToySceneConfig};
use crate::model::{CarlConfig, CarlModel, CONFIG_SCHEMA_VERSION};
use crate::ssl::{SslConfig, SslState};
use crate::tensor::ParamStore;
use crate::train::{TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    #[default]
    Knn,
    Linear,
}

impl std::str::FromStr for ProbeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "knn" => Ok(ProbeMode::Knn),
            "linear" => Ok(ProbeMode::Linear),
            other => Err(format!("unknown probe mode {other:?} (knn or linear)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub mode: ProbeMode,
    pub layer: FeatureLayer,
    pub k: usize,
    pub classes: usize,
    pub linear: LinearProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            mode: ProbeMode::Knn,
            layer: FeatureLayer::Spectral,
            k: 20,
            classes: 4,
            linear: LinearProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub subjects: usize,
    pub test_subjects: usize,
    pub images_per_subject: usize,
    pub variants: usize,
    pub scene: ToySceneConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            subjects: 12,
            test_subjects: 2,
            images_per_subject: 4,
            variants: 6,
            scene: ToySceneConfig::default(),
        }
    }
}

/// Everything a command reads from its config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Architecture preset the `[model]` table overrides.
    pub preset: String,
    pub model: toml::Table,
    pub log_every: u64,
    /// Write an intermediate checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub data: DataSection,
    pub train: TrainConfig,
    pub ssl: SslConfig,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            preset: "desk".into(),
            model: toml::Table::new(),
            log_every: 10,
            checkpoint_every: 0,
            data: DataSection::default(),
            train: TrainConfig::default(),
            ssl: SslConfig::default(),
            probe: ProbeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CarlError::config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CarlError::config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.model_config()?;
        cfg.train.validate()?;
        cfg.ssl.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CarlError::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            CarlError::Config(m) => CarlError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The preset with `[model]` keys applied on top.
    pub fn model_config(&self) -> Result<CarlConfig> {
        let base = CarlConfig::preset(&self.preset)?;
        let mut table = toml::Table::try_from(&base).map_err(|e| CarlError::config(e.to_string()))?;
        for (k, v) in &self.model {
            table.insert(k.clone(), v.clone());
        }
        let cfg: CarlConfig = table.try_into().map_err(|e| CarlError::config(format!("[model]: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Snapshot with the model table fully expanded, so the file alone
    /// reproduces the run.
    pub fn resolved(&self) -> Result<RunConfig> {
        let mut out = self.clone();
        out.model = toml::Table::try_from(self.model_config()?).map_err(|e| CarlError::config(e.to_string()))?;
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CarlError::config(e.to_string()))
    }
}

/// Output directory of one command invocation.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: impl Into<PathBuf>) -> Result<RunDir> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(|e| CarlError::io(&path, e))?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `config.toml` and `inputs.sha256` before any work starts.
    pub fn snapshot(&self, config: &RunConfig, inputs: &[PathBuf]) -> Result<String> {
        let text = config.resolved()?.to_toml()?;
        let cfg_path = self.file("config.toml");
        fs::write(&cfg_path, &text).map_err(|e| CarlError::io(&cfg_path, e))?;
        let (digest, listing) = hash_inputs(inputs)?;
        let hash_path = self.file("inputs.sha256");
        fs::write(&hash_path, format!("{listing}{digest}  total\n")).map_err(|e| CarlError::io(&hash_path, e))?;
        Ok(digest)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CarlError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Digest over `(path, content digest)` lines in the given order, plus the
/// listing itself in `sha256sum` format.
pub fn hash_inputs(paths: &[PathBuf]) -> Result<(String, String)> {
    let mut listing = String::new();
    for p in paths {
        listing.push_str(&format!("{}  {}\n", sha256_file(p)?, p.display()));
    }
    Ok((hex(&Sha256::digest(listing.as_bytes())), listing))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The kind tag stored in a checkpoint's metadata.
pub fn checkpoint_kind(ck: &Checkpoint) -> Result<String> {
    let table: toml::Table = toml::from_str(&ck.metadata).map_err(|e| CarlError::config(format!("checkpoint metadata: {e}")))?;
    table
        .get("kind")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| CarlError::config("checkpoint metadata has no kind"))
}

/// Encoder and weights from either an SSL checkpoint (the student) or a
/// supervised one.
pub fn load_model(ck: &Checkpoint) -> Result<(CarlModel, ParamStore)> {
    match checkpoint_kind(ck)?.as_str() {
        "ssl" => {
            let s = SslState::from_checkpoint(ck)?;
            Ok((s.model, s.student))
        }
        "supervised" => {
            let s = TrainState::from_checkpoint(ck)?;
            Ok((s.model, s.params))
        }
        other => Err(CarlError::config(format!("unknown checkpoint kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model_config().unwrap(), CarlConfig::desk());
    }

    #[test]
    fn model_overrides_apply_to_the_preset() {
        let cfg = RunConfig::parse("preset = \"smoke\"\n[model]\nnum_reps = 2\n[train]\nlr = 0.001\n").unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.num_reps, 2);
        assert_eq!(m.dim_spectral, CarlConfig::smoke().dim_spectral);
        assert_eq!(cfg.train.lr, 0.001);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        for text in [
            "schema_version = 2\n",
            "unknown = 1\n",
            "[model]\nnot_a_field = 3\n",
            "[train]\nbatch_size = 0\n",
            "[ssl]\nbatch_size = 1\n",
            "preset = \"huge\"\n",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(CarlError::Config(_))), "{text}");
        }
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let cfg = RunConfig::parse("preset = \"toy\"\nseed = 5\n").unwrap();
        let snap = cfg.resolved().unwrap().to_toml().unwrap();
        let back = RunConfig::parse(&snap).unwrap();
        assert_eq!(back.model_config().unwrap(), cfg.model_config().unwrap());
        assert_eq!(back.seed, 5);
    }

    #[test]
    fn input_hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        fs::write(&a, b"one").unwrap();
        let (h1, _) = hash_inputs(std::slice::from_ref(&a)).unwrap();
        fs::write(&a, b"two").unwrap();
        let (h2, listing) = hash_inputs(std::slice::from_ref(&a)).unwrap();
        assert_ne!(h1, h2);
        assert!(listing.starts_with(&sha256_file(&a).unwrap()));
    }
}
