//! Serializable experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PartitionScheme, ScaleMethod, SynthSpec};
use crate::error::{Error, Result};
use crate::federation::{ClientWeighting, FedConfig};
use crate::nn::TrainConfig;
use crate::thresholds::{MethodParams, MethodTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRef {
    Synth(SynthSpec),
    Csv {
        path: PathBuf,
        label_column: String,
        /// Class value treated as anomalous; the rarest class when absent.
        #[serde(default)]
        positive_label: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub partition: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 7,
            model: 11,
            partition: 13,
        }
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            model: seed,
            partition: seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    pub scale: ScaleMethod,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.6,
            val_frac: 0.2,
            scale: ScaleMethod::Minmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder widths; the decoder mirrors them. Empty means the default
    /// `[ceil(d/2), ceil(d/4)]`.
    pub hidden_dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    /// How many clients get noisy validation features. The corrupted set is a
    /// prefix of a seeded client permutation, so larger counts are supersets.
    pub num_corrupt: usize,
    pub noise_sigma_scale: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            num_corrupt: 0,
            noise_sigma_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SweepConfig {
    pub client_counts: Vec<usize>,
    pub corrupt_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario_id: String,
    pub dataset: DatasetRef,
    #[serde(default)]
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    /// Dirichlet concentration for the random scheme.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub fed: FedConfig,
    #[serde(default = "all_methods")]
    pub methods: Vec<MethodTag>,
    #[serde(default)]
    pub params: MethodParams,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub seeds: Seeds,
    /// Threshold timings take the minimum over this many repetitions.
    #[serde(default = "one")]
    pub timing_repeats: usize,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_concentration() -> f64 {
    0.5
}

fn all_methods() -> Vec<MethodTag> {
    MethodTag::ALL.to_vec()
}

fn one() -> usize {
    1
}

impl ScenarioConfig {
    /// Small synthetic scenario with default settings for every knob.
    pub fn synthetic(scenario_id: impl Into<String>, spec: SynthSpec, num_clients: usize) -> Self {
        Self {
            scenario_id: scenario_id.into(),
            dataset: DatasetRef::Synth(spec),
            scheme: PartitionScheme::Even,
            num_clients,
            concentration: default_concentration(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            fed: FedConfig {
                rounds: 20,
                train: TrainConfig::default(),
                client_weighting: ClientWeighting::BySampleCount,
            },
            methods: all_methods(),
            params: MethodParams::default(),
            corruption: CorruptionConfig::default(),
            seeds: Seeds::default(),
            timing_repeats: 1,
            sweep: SweepConfig::default(),
            output_dir: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.scenario_id.trim().is_empty() {
            return bad("scenario_id must not be empty".into());
        }
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1".into());
        }
        if self.scheme != PartitionScheme::Even && self.num_clients < 2 {
            return bad(format!("scheme {} needs at least 2 clients", self.scheme.as_str()));
        }
        if self.methods.is_empty() {
            return bad("methods must list at least one threshold method".into());
        }
        if self.params.candidates < 2 {
            return bad("params.candidates must be at least 2".into());
        }
        if self.corruption.num_corrupt > self.num_clients {
            return bad(format!(
                "cannot corrupt {} of {} clients",
                self.corruption.num_corrupt, self.num_clients
            ));
        }
        if !(self.corruption.noise_sigma_scale >= 0.0) {
            return bad("corruption.noise_sigma_scale must be non-negative".into());
        }
        if self.timing_repeats == 0 {
            return bad("timing_repeats must be at least 1".into());
        }
        self.fed.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 prefix of the canonical TOML form, ignoring the output
    /// directory so results do not depend on where they are written.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let text = toml::to_string(&canonical).unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset_name(&self) -> String {
        match &self.dataset {
            DatasetRef::Synth(_) => "synthetic".into(),
            DatasetRef::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
scenario_id = "demo"
num_clients = 4
scheme = "noniid_kmeans"
methods = ["our_method", "iqr"]

[dataset]
kind = "synth"
num_normal = 300
num_anomaly = 30
dim = 6
separation = 4.0

[fed]
rounds = 3
[fed.train]
local_epochs = 1
learning_rate = 0.05
batch_size = 16
seed = 0
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ScenarioConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.scheme, PartitionScheme::NoniidKmeans);
        assert_eq!(cfg.methods, vec![MethodTag::OurMethod, MethodTag::Iqr]);
        assert_eq!(cfg.params.candidates, 1000);
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn hash_tracks_content_not_output_dir() {
        let cfg = ScenarioConfig::from_toml_str(SAMPLE).unwrap();
        let mut moved = cfg.clone();
        moved.output_dir = Some("elsewhere".into());
        assert_eq!(moved.hash(), cfg.hash());
        let mut changed = cfg.clone();
        changed.params.percentile = 95.0;
        assert_ne!(changed.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn rejects_bad_values() {
        let unknown = SAMPLE.replace("\"iqr\"", "\"median\"");
        assert!(matches!(ScenarioConfig::from_toml_str(&unknown), Err(Error::Config(_))));
        let zero = SAMPLE.replace("num_clients = 4", "num_clients = 0");
        assert!(matches!(ScenarioConfig::from_toml_str(&zero), Err(Error::Config(_))));
        let rounds = SAMPLE.replace("rounds = 3", "rounds = 0");
        assert!(matches!(ScenarioConfig::from_toml_str(&rounds), Err(Error::Config(_))));
    }
}
