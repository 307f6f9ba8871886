//! Experiment configuration: one TOML document, every field defaulted.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bridgeprompt::bridges::TrajectoryKind;
use bridgeprompt::evaluation::{Experiment, T0_CANDIDATES};
use bridgeprompt::toyworld::{Degradation, DegradationKind};
use bridgeprompt::{BackboneConfig, ConditionerConfig, SamplerConfig, TrainConfig, VariantTag};
use serde::Deserialize;

/// Overrides the top-level `seed` when set.
pub const SEED_ENV: &str = "BRIDGEPROMPT_SEED";

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Run seed: data generation, prompt initialization and batching, sampler noise.
    pub seed: u64,
    pub backbone: BackboneSection,
    pub conditioner: ConditionerSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub experiment: ExperimentSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            backbone: BackboneSection::default(),
            conditioner: ConditionerSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub attention_dim: usize,
    pub time_embed_dim: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub seed: u64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let d = BackboneConfig::default();
        Self {
            input_dim: d.input_dim,
            hidden_dim: d.hidden_dim,
            hidden_layers: d.hidden_layers,
            attention_dim: d.attention_dim,
            time_embed_dim: d.time_embed_dim,
            pretrain_steps: d.pretrain_steps,
            pretrain_batch: d.pretrain_batch,
            pretrain_lr: d.pretrain_lr,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionerSection {
    pub tokens: usize,
    pub token_dim: usize,
    pub context_dim: usize,
    pub encoder_hidden: usize,
    pub seed: u64,
}

impl Default for ConditionerSection {
    fn default() -> Self {
        let d = ConditionerConfig::default();
        Self {
            tokens: d.tokens,
            token_dim: d.token_dim,
            context_dim: d.context_dim,
            encoder_hidden: d.encoder_hidden,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub trajectory: String,
    pub variant: String,
    pub degradation: String,
    /// Operator strength; the kind's default when absent.
    pub severity: Option<f64>,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub t0: f64,
    pub eta: f64,
    pub train_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            trajectory: "ebr".into(),
            variant: "embedding".into(),
            degradation: "veil".into(),
            severity: None,
            iterations: 4000,
            batch_size: 2,
            learning_rate: 1e-2,
            t0: 0.4,
            eta: 1.0,
            train_size: 256,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub test_size: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: 20,
            test_size: 64,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub t0_candidates: Vec<f64>,
    pub monte_carlo: usize,
    pub diagnostic_inputs: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            t0_candidates: T0_CANDIDATES.to_vec(),
            monte_carlo: 256,
            diagnostic_inputs: 16,
        }
    }
}

/// A parsed config plus the exact text it came from.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: Config,
    pub source: String,
    pub seed_override: Option<u64>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`, then applies the seed environment override.
    pub fn load(path: &Path) -> Result<Loaded> {
        let source = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config = Self::parse(&source).with_context(|| format!("in {}", path.display()))?;
        let seed_override = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not a u64"))?),
            Err(_) => None,
        };
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        Ok(Loaded {
            config,
            source,
            seed_override,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate().context("[backbone]")?;
        self.trajectory().context("train.trajectory")?;
        self.variant().context("train.variant")?;
        self.degradation().context("train.degradation / train.severity")?;
        self.train_config(self.seed).validate().context("[train]")?;
        if self.train.train_size == 0 {
            bail!("train.train_size must be >= 1");
        }
        if self.sampler.steps == 0 {
            bail!("sampler.steps must be >= 1");
        }
        if self.sampler.test_size == 0 {
            bail!("sampler.test_size must be >= 1");
        }
        if self.experiment.seeds.is_empty() {
            bail!("experiment.seeds must not be empty");
        }
        if self.experiment.diagnostic_inputs == 0 {
            bail!("experiment.diagnostic_inputs must be >= 1");
        }
        Ok(())
    }

    pub fn conditioner_config(&self) -> ConditionerConfig {
        let c = &self.conditioner;
        ConditionerConfig {
            tokens: c.tokens,
            token_dim: c.token_dim,
            context_dim: c.context_dim,
            encoder_hidden: c.encoder_hidden,
            seed: c.seed,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            input_dim: b.input_dim,
            hidden_dim: b.hidden_dim,
            hidden_layers: b.hidden_layers,
            context_tokens: self.conditioner.tokens,
            context_dim: self.conditioner.context_dim,
            attention_dim: b.attention_dim,
            time_embed_dim: b.time_embed_dim,
            pretrain_steps: b.pretrain_steps,
            pretrain_batch: b.pretrain_batch,
            pretrain_lr: b.pretrain_lr,
            seed: b.seed,
        }
    }

    pub fn trajectory(&self) -> Result<TrajectoryKind> {
        Ok(self.train.trajectory.parse()?)
    }

    pub fn variant(&self) -> Result<VariantTag> {
        Ok(self.train.variant.parse()?)
    }

    pub fn degradation_kind(&self) -> Result<DegradationKind> {
        Ok(self.train.degradation.parse()?)
    }

    pub fn degradation(&self) -> Result<Degradation> {
        self.degradation_for(self.degradation_kind()?)
    }

    /// The operator for `kind`; `train.severity` applies only to the configured kind.
    pub fn degradation_for(&self, kind: DegradationKind) -> Result<Degradation> {
        match self.train.severity {
            Some(s) if self.degradation_kind()? == kind => Ok(Degradation::with_severity(kind, s)?),
            _ => Ok(kind.default_degradation()),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            trajectory: self.trajectory().unwrap_or(TrajectoryKind::Ebr),
            variant: self.variant().unwrap_or(VariantTag::Embedding),
            degradation: self.degradation_kind().unwrap_or(DegradationKind::Veil),
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            t0: t.t0,
            eta: t.eta,
            seed,
        }
    }

    pub fn sampler_config(&self, kind: TrajectoryKind, seed: u64) -> Result<SamplerConfig> {
        Ok(SamplerConfig::from_kind(kind, self.train.t0, self.train.eta, self.sampler.steps, seed)?)
    }

    pub fn experiment(&self) -> Result<Experiment> {
        Ok(Experiment {
            degradation: self.degradation()?,
            variant: self.variant()?,
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            t0: self.train.t0,
            eta: self.train.eta,
            steps: self.sampler.steps,
            train_size: self.train.train_size,
            test_size: self.sampler.test_size,
            seeds: self.experiment.seeds.clone(),
        })
    }
}
