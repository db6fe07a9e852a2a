//! TOML run configuration: model + data paths + ordered stage list, plus the
//! mode (continual vs adapter) and ablation transforms applied from the
//! command line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Region;
use crate::error::{Error, Result};
use crate::inference::GraphConfig;
use crate::model::{FreezeSelector, ModelConfig};
use crate::synth::SynthConfig;
use crate::trainer::{AuxTask, StageConfig, PIVOT_LANG};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPaths {
    pub eur_shard: String,
    pub nam_shard: String,
    pub lrl_shard: String,
    pub parallel: String,
    pub mono: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    pub golden_fraction: f64,
    pub holdout_seed: Option<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            golden_fraction: 0.3,
            holdout_seed: Some(101),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseSection {
    /// Response set size cap per language.
    pub cap: usize,
    pub min_count: u64,
}

impl Default for ResponseSection {
    fn default() -> Self {
        ResponseSection {
            cap: 30,
            min_count: 2,
        }
    }
}

/// One pipeline stage as written in TOML. `shards` are data-path keys or
/// file paths; `seed` falls back to the run seed when omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub region: String,
    pub sr_languages: Vec<String>,
    #[serde(default = "default_aux")]
    pub auxiliary: AuxTask,
    #[serde(default = "default_proportion")]
    pub task_proportion: f64,
    pub peak_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_freeze")]
    pub freeze: FreezeSelector,
    #[serde(default)]
    pub use_adapters: bool,
    #[serde(default)]
    pub adapter_languages: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub shards: Vec<String>,
}

fn default_aux() -> AuxTask {
    AuxTask::None
}
fn default_proportion() -> f64 {
    0.5
}
fn default_freeze() -> FreezeSelector {
    FreezeSelector::None
}

impl StageSpec {
    pub fn region(&self) -> Result<Region> {
        self.region.parse()
    }

    pub fn to_stage_config(&self, run_seed: u64) -> Result<StageConfig> {
        let cfg = StageConfig {
            name: self.name.clone(),
            region: self.region()?,
            sr_languages: self.sr_languages.iter().cloned().collect(),
            auxiliary: self.auxiliary,
            task_proportion: self.task_proportion,
            peak_lr: self.peak_lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            freeze: self.freeze,
            use_adapters: self.use_adapters,
            adapter_languages: self.adapter_languages.iter().cloned().collect(),
            seed: self.seed.unwrap_or(run_seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Cl,
    Adp,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cl" => Ok(TrainMode::Cl),
            "adp" => Ok(TrainMode::Adp),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected cl or adp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    TlmOff,
    TlmToMlm,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tlm=off" => Ok(Ablation::TlmOff),
            "tlm=mlm" => Ok(Ablation::TlmToMlm),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected tlm=off or tlm=mlm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataPaths,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub inference: GraphConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub responses: ResponseSection,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub replay: Option<StageSpec>,
    /// Directory all data paths are resolved against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg: RunConfig =
            toml::from_str(&raw).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Map a stage's shard key ("eur" / "nam" / "lrl" or a literal path) to
    /// a resolved path.
    pub fn shard_path(&self, key: &str) -> PathBuf {
        match key {
            "eur" => self.resolve(&self.data.eur_shard),
            "nam" => self.resolve(&self.data.nam_shard),
            "lrl" => self.resolve(&self.data.lrl_shard),
            other => self.resolve(other),
        }
    }

    pub fn stage(&self, name: &str) -> Result<&StageSpec> {
        self.stages
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("no stage named {name:?} in config")))
    }

    /// All languages with in-region SR data, in stage order.
    pub fn sr_languages(&self) -> BTreeSet<String> {
        self.stages
            .iter()
            .flat_map(|s| s.sr_languages.iter().cloned())
            .collect()
    }

    /// Adapter mode swaps low-resource stages from full fine-tuning to
    /// frozen-base adapter training.
    pub fn apply_mode(&mut self, mode: TrainMode) -> Result<()> {
        if mode == TrainMode::Cl {
            return Ok(());
        }
        for spec in &mut self.stages {
            if spec.region()? == Region::Lrl && !spec.use_adapters {
                spec.use_adapters = true;
                spec.freeze = FreezeSelector::AllExceptAdapters;
                if spec.adapter_languages.is_empty() {
                    spec.adapter_languages = spec
                        .sr_languages
                        .iter()
                        .filter(|l| l.as_str() != PIVOT_LANG)
                        .cloned()
                        .collect();
                }
            }
        }
        Ok(())
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        for spec in &mut self.stages {
            if spec.auxiliary == AuxTask::Tlm {
                spec.auxiliary = match ablation {
                    Ablation::TlmOff => AuxTask::None,
                    Ablation::TlmToMlm => AuxTask::Mlm,
                };
            }
        }
    }

    /// Ready-to-run configuration pointing at a freshly synthesized data
    /// directory; written next to the data by the corpus generator.
    pub fn default_for_synth(synth: &SynthConfig, seed: u64) -> RunConfig {
        let stage = |name: &str,
                     region: &str,
                     langs: &[String],
                     aux: AuxTask,
                     peak_lr: f64,
                     shard: &str| StageSpec {
            name: name.into(),
            region: region.into(),
            sr_languages: langs.to_vec(),
            auxiliary: aux,
            task_proportion: 0.5,
            peak_lr,
            epochs: 8,
            batch_size: 32,
            freeze: FreezeSelector::None,
            use_adapters: false,
            adapter_languages: Vec::new(),
            seed: None,
            shards: vec![shard.into()],
        };
        let mut lrl_langs = synth.lrl_langs.clone();
        lrl_langs.push(PIVOT_LANG.into());
        let eur_langs: Vec<String> = synth.eur_langs.clone();
        let replay = StageSpec {
            name: "+EUR".into(),
            epochs: 4,
            ..stage("+EUR", "EUR", &eur_langs, AuxTask::None, 1e-4, "eur")
        };
        RunConfig {
            seed,
            model: ModelConfig::default(),
            data: DataPaths {
                eur_shard: "shards/eur.jsonl".into(),
                nam_shard: "shards/nam.jsonl".into(),
                lrl_shard: "shards/lrl.jsonl".into(),
                parallel: "public/parallel.jsonl".into(),
                mono: "public/mono.jsonl".into(),
            },
            synth: synth.clone(),
            inference: GraphConfig::default(),
            eval: EvalSection::default(),
            responses: ResponseSection::default(),
            stages: vec![
                stage("EUR", "EUR", &synth.eur_langs, AuxTask::Mlm, 5e-4, "eur"),
                stage("NAM", "NAM", &synth.nam_langs, AuxTask::Tlm, 3e-4, "nam"),
                stage("LRL", "LRL", &lrl_langs, AuxTask::Mlm, 1e-4, "lrl"),
            ],
            replay: Some(replay),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        std::fs::write(path, body).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}
