use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scalant::data::TaskKind;
use scalant::decoding::DistillOptions;
use scalant::model::ModelConfig;
use scalant::training::StageConfig;
use serde::Deserialize;

/// Everything a run needs, read from one TOML file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and data generation; stage sections keep
    /// their own `seed` for sampling and batching.
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub stage1: StageConfig,
    #[serde(default = "stage2_default")]
    pub stage2: StageConfig,
    #[serde(default = "stage3_default")]
    pub stage3: StageConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub artifacts: Artifacts,
}

fn default_seed() -> u64 {
    1
}

fn stage2_default() -> StageConfig {
    StageConfig {
        stage: 2,
        ..StageConfig::default()
    }
}

fn stage3_default() -> StageConfig {
    StageConfig {
        stage: 3,
        max_lr: 0.004,
        epochs: 30,
        ..StageConfig::default()
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub vocab: PathBuf,
    /// Synthetic corpus written by `prep`.
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub task: TaskKind,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub alpha: f64,
    /// Generated-token limit; defaults to the model's `max_seq_len`.
    pub max_len: Option<usize>,
    pub ratio_cap: f64,
    pub len_cap: usize,
    /// Decode only the first this-many training sources for targets.
    pub sources_limit: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 4,
            alpha: 0.6,
            max_len: None,
            ratio_cap: 20.0,
            len_cap: 250,
            sources_limit: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Accuracy,
    Bleu,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub menu: Vec<usize>,
    pub samples: usize,
    pub top_k: usize,
    pub metric: MetricName,
    pub valid_limit: Option<usize>,
    /// Checkpoint searched; defaults to the latest stage checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            menu: Vec::new(),
            samples: 1000,
            top_k: 10,
            metric: MetricName::Accuracy,
            valid_limit: None,
            checkpoint: None,
        }
    }
}

/// Artifact locations; unset entries live under `out_dir`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifacts {
    pub stage1: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
    pub stage3: Option<PathBuf>,
    pub distill: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (n, s) in [(1, &self.stage1), (2, &self.stage2), (3, &self.stage3)] {
            s.validate().with_context(|| format!("[stage{n}]"))?;
            if s.stage != n {
                bail!("[stage{n}] has stage = {}", s.stage);
            }
        }
        if self.decode.beam == 0 || !(self.decode.alpha >= 0.0) {
            bail!("[decode] needs beam >= 1 and alpha >= 0");
        }
        if let Some(m) = self.decode.max_len {
            if m == 0 || m > self.model.max_seq_len {
                bail!("[decode] max_len must be in 1..={}", self.model.max_seq_len);
            }
        }
        if let Some(s) = &self.data.synth {
            if s.min_len == 0 || s.min_len > s.max_len || s.max_len + 1 > self.model.max_seq_len {
                bail!("[data.synth] lengths must satisfy 1 <= min_len <= max_len < max_seq_len");
            }
        }
        Ok(())
    }

    pub fn stage(&self, n: u8) -> Result<&StageConfig> {
        match n {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            3 => Ok(&self.stage3),
            other => bail!("stage must be 1, 2 or 3, got {other}"),
        }
    }

    pub fn checkpoint_path(&self, stage: u8) -> PathBuf {
        let set = match stage {
            1 => &self.artifacts.stage1,
            2 => &self.artifacts.stage2,
            _ => &self.artifacts.stage3,
        };
        set.clone()
            .unwrap_or_else(|| self.out_dir.join(format!("stage{stage}.ckpt")))
    }

    pub fn distill_path(&self) -> PathBuf {
        self.artifacts
            .distill
            .clone()
            .unwrap_or_else(|| self.out_dir.join("distill.tsv"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.artifacts
            .metrics
            .clone()
            .unwrap_or_else(|| self.out_dir.join("metrics.csv"))
    }

    /// The most advanced stage checkpoint that exists.
    pub fn latest_checkpoint(&self) -> Result<PathBuf> {
        (1..=3)
            .rev()
            .map(|s| self.checkpoint_path(s))
            .find(|p| p.exists())
            .with_context(|| format!("no stage checkpoint found under {}", self.out_dir.display()))
    }

    pub fn max_len(&self) -> usize {
        self.decode.max_len.unwrap_or(self.model.max_seq_len)
    }

    pub fn distill_options(&self) -> DistillOptions {
        DistillOptions {
            beam: self.decode.beam,
            alpha: self.decode.alpha,
            ratio_cap: self.decode.ratio_cap,
            len_cap: self.decode.len_cap,
            max_len: self.max_len(),
        }
    }
}
