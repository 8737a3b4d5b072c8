//! Flat key-value run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetConfig, FilterConfig};
use crate::error::{Error, Result};
use crate::evalkit::CiMethod;
use crate::lengthdecode::{BucketTable, DecodeMode};
use crate::objectives::{ObjectiveConfig, ObjectiveKind, DEFAULT_SAMPLE_MAX_STEPS, DRIL_LAMBDA, RL_LAMBDA};
use crate::optim::OptimConfig;
use crate::pipelines::{objective_kind, schedule_defaults, DecodeConfig, TrainConfig, Variant};
use crate::seqcore::ModelConfig;

/// Every knob of a run. Unset optional keys fall back to per-variant
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,

    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_min_count: usize,

    pub dril_lambda: f64,
    pub rl_lambda: f64,
    pub sample_max_steps: usize,

    /// Answer-generator learning rate; per-variant default when unset.
    pub ag_lr: Option<f64>,
    pub ag_epochs: Option<usize>,
    pub qg_lr: Option<f64>,
    pub qg_epochs: Option<usize>,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    /// Upper token bounds of LB0, LB1 and LB2.
    pub bucket_bounds: [usize; 3],
    pub beam_width: usize,
    pub decode_mode: DecodeMode,
    pub question_max_tokens: usize,
    pub max_source_tokens: usize,

    pub min_article_tokens: usize,
    pub min_title_tokens: usize,
    pub classifier_threshold: f64,
    /// Logistic classifier weights (recall, precision, bias); the overlap
    /// classifier is used when unset.
    pub classifier_weights: Option<[f64; 3]>,
    pub target_precision: f64,

    pub ci_method: CiMethod,
    pub ci_level: f64,

    pub articles: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(0);
        let optim = OptimConfig::default();
        let filter = FilterConfig::default();
        Self {
            seed: 0,
            variant: Variant::DS,
            d_model: model.d_model,
            n_heads: model.n_heads,
            enc_layers: model.enc_layers,
            dec_layers: model.dec_layers,
            ffn_dim: model.ffn_dim,
            max_positions: model.max_positions,
            vocab_min_count: 1,
            dril_lambda: DRIL_LAMBDA,
            rl_lambda: RL_LAMBDA,
            sample_max_steps: DEFAULT_SAMPLE_MAX_STEPS,
            ag_lr: None,
            ag_epochs: None,
            qg_lr: None,
            qg_epochs: None,
            warmup_steps: optim.warmup_steps,
            batch_size: optim.batch_size,
            adam_beta1: optim.beta1,
            adam_beta2: optim.beta2,
            adam_eps: optim.eps,
            bucket_bounds: [30, 50, 72],
            beam_width: 4,
            decode_mode: DecodeMode::Beam,
            question_max_tokens: DecodeConfig::default().question_max_tokens,
            max_source_tokens: DecodeConfig::default().max_source_tokens,
            min_article_tokens: filter.min_article_tokens,
            min_title_tokens: filter.min_title_tokens,
            classifier_threshold: DatasetConfig::default().threshold,
            classifier_weights: None,
            target_precision: 0.98,
            ci_method: CiMethod::Wald,
            ci_level: 0.95,
            articles: None,
            dataset: None,
            checkpoints: None,
            pairs: None,
            references: None,
            annotations: None,
            dev: None,
            reports: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("dril_lambda", self.dril_lambda), ("rl_lambda", self.rl_lambda)] {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("{name} {l} outside [0, 1]")));
            }
        }
        self.model(1).validate()?;
        self.buckets()?;
        self.ag_optim().validate()?;
        self.qg_optim().validate()?;
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.question_max_tokens == 0 || self.sample_max_steps == 0 {
            return Err(Error::Config("token limits must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
        }
    }

    pub fn buckets(&self) -> Result<BucketTable> {
        BucketTable::from_upper_bounds(self.bucket_bounds)
    }

    fn optim(&self, lr: f64, epochs: usize) -> OptimConfig {
        OptimConfig {
            lr,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            epochs,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn ag_optim(&self) -> OptimConfig {
        let (_, (lr, epochs)) = schedule_defaults(self.variant);
        self.optim(self.ag_lr.unwrap_or(lr), self.ag_epochs.unwrap_or(epochs))
    }

    pub fn qg_optim(&self) -> OptimConfig {
        let ((lr, epochs), _) = schedule_defaults(self.variant);
        self.optim(self.qg_lr.unwrap_or(lr), self.qg_epochs.unwrap_or(epochs))
    }

    /// Objective of the configured variant with its lambda.
    pub fn objective(&self) -> ObjectiveConfig {
        let kind = objective_kind(self.variant);
        let lambda = match kind {
            ObjectiveKind::Mle => 0.0,
            ObjectiveKind::Dril => self.dril_lambda,
            ObjectiveKind::Rl => self.rl_lambda,
        };
        ObjectiveConfig {
            lambda,
            sample_max_steps: self.sample_max_steps,
            rng_seed: self.seed,
            ..ObjectiveConfig::for_kind(kind)
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            model: self.model(0),
            objective: self.objective(),
            ag_optim: self.ag_optim(),
            qg_optim: self.qg_optim(),
            vocab_min_count: self.vocab_min_count,
            max_source_tokens: self.max_source_tokens,
        }
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam_width: self.beam_width,
            mode: self.decode_mode,
            seed: self.seed,
            question_max_tokens: self.question_max_tokens,
            max_source_tokens: self.max_source_tokens,
        }
    }

    pub fn dataset(&self) -> Result<DatasetConfig> {
        Ok(DatasetConfig {
            filter: FilterConfig {
                min_article_tokens: self.min_article_tokens,
                min_title_tokens: self.min_title_tokens,
                ..FilterConfig::default()
            },
            buckets: self.buckets()?,
            beam_width: self.beam_width,
            threshold: self.classifier_threshold,
        })
    }
}
