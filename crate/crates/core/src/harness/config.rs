//! Flat, typed experiment configuration stored as TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ClaLossWeights, ClassifierConfig, ClassifierTrainConfig, TaskKind, TaskSpec, Variant};
use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::normalizer::{NormLossWeights, NormTrainConfig, NormalizerConfig};
use crate::synthdata::{FactorConfig, IdentitySplit};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Where the classifier's `I_n` stream comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// A normalizer trained on the training identities.
    Trained,
    /// Ground-truth re-rendering with the target's nuisance factors.
    Oracle,
    /// No normalization: both streams receive the original sample.
    None,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Trained => "trained",
            Pipeline::Oracle => "oracle",
            Pipeline::None => "none",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trained" => Ok(Pipeline::Trained),
            "oracle" => Ok(Pipeline::Oracle),
            "none" => Ok(Pipeline::None),
            other => Err(Error::UnknownVariant(other.into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub task: TaskKind,
    pub pipeline: Pipeline,
    pub variant: String,
    pub seeds: Vec<u64>,

    pub n_samples: usize,
    pub train_identities: usize,
    pub test_identities: usize,
    pub world_seed: u64,
    pub n_identities: usize,
    pub dim_identity: usize,
    pub dim_expression: usize,
    pub dim_pose: usize,
    pub dim_background: usize,
    pub sample_dim: usize,
    pub observation_noise_std: f64,
    pub identity_scale: f64,
    pub pose_scale: f64,
    pub background_scale: f64,
    pub expression_scale: f64,
    pub expression_jitter: f64,
    pub nonlinear: bool,

    pub norm_steps: usize,
    pub norm_batch_size: usize,
    pub p_rec: f64,
    pub norm_lr: f64,
    pub norm_beta1: f64,
    pub norm_beta2: f64,
    pub disc_lr: f64,
    pub norm_warmup_steps: usize,
    pub norm_cosine_decay: bool,
    pub disc_hidden: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub num_heads: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub token_bias_init: f64,
    pub lambda_rec: f64,
    pub lambda_perc: f64,
    pub lambda_id: f64,
    pub lambda_lm: f64,
    pub lambda_exp: f64,
    pub lambda_eye: f64,

    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub router_noise: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Zero selects the task's base learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_imp: f64,
    pub lambda_gl: f64,
    pub freeze_extractor: bool,

    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let f = FactorConfig::default();
        let n = NormTrainConfig::default();
        let nc = NormalizerConfig::default();
        let nw = NormLossWeights::default();
        let moe = MoeConfig::default();
        let cw = ClaLossWeights::default();
        ExperimentConfig {
            format_version: CONFIG_FORMAT_VERSION,
            task: TaskKind::Fer,
            pipeline: Pipeline::Trained,
            variant: "full".into(),
            seeds: vec![0, 1, 2, 3, 4],
            n_samples: 10_000,
            train_identities: 20,
            test_identities: 5,
            world_seed: f.world_seed,
            n_identities: f.n_identities,
            dim_identity: f.dim_identity,
            dim_expression: f.dim_expression,
            dim_pose: f.dim_pose,
            dim_background: f.dim_background,
            sample_dim: f.sample_dim,
            observation_noise_std: f.observation_noise_std,
            identity_scale: f.identity_scale,
            pose_scale: f.pose_scale,
            background_scale: f.background_scale,
            expression_scale: f.expression_scale,
            expression_jitter: f.expression_jitter,
            nonlinear: f.nonlinear,
            norm_steps: n.steps,
            norm_batch_size: n.batch_size,
            p_rec: n.p_rec,
            norm_lr: n.optimizer.lr,
            norm_beta1: n.optimizer.beta1,
            norm_beta2: n.optimizer.beta2,
            disc_lr: n.disc_optimizer.lr,
            norm_warmup_steps: n.warmup_steps,
            norm_cosine_decay: n.cosine_decay,
            disc_hidden: 64,
            n_patches: nc.n_patches,
            patch_dim: nc.patch_dim,
            num_heads: nc.num_heads,
            encoder_hidden: nc.encoder_hidden,
            decoder_hidden: nc.decoder_hidden,
            token_bias_init: nc.token_bias_init,
            lambda_rec: nw.rec,
            lambda_perc: nw.perc,
            lambda_id: nw.id,
            lambda_lm: nw.lm,
            lambda_exp: nw.exp,
            lambda_eye: nw.eye,
            num_experts: moe.num_experts,
            top_k: moe.top_k,
            expert_hidden: moe.expert_hidden,
            router_noise: moe.noise_enabled,
            epochs: 40,
            batch_size: 32,
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            lambda_imp: cw.importance,
            lambda_gl: cw.global_local,
            freeze_extractor: false,
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `task` with everything else at its default.
    pub fn for_task(task: TaskKind) -> Self {
        ExperimentConfig { task, ..Default::default() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse { what: "experiment config".into(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse { what: path.display().to_string(), msg },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                what: "experiment config".into(),
                found: self.format_version,
                expected: CONFIG_FORMAT_VERSION,
            });
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        self.variant()?;
        self.moe().validate()?;
        self.norm_weights().validate()?;
        self.norm_train().validate()?;
        if self.lambda_imp < 0.0 || self.lambda_gl < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.train_identities + self.test_identities > self.n_identities {
            return Err(Error::Config(format!(
                "identity split {}+{} exceeds {} identities",
                self.train_identities, self.test_identities, self.n_identities
            )));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::new(self.task)
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    pub fn factors(&self) -> FactorConfig {
        FactorConfig {
            n_identities: self.n_identities,
            dim_identity: self.dim_identity,
            dim_expression: self.dim_expression,
            dim_pose: self.dim_pose,
            dim_background: self.dim_background,
            sample_dim: self.sample_dim,
            observation_noise_std: self.observation_noise_std,
            identity_scale: self.identity_scale,
            pose_scale: self.pose_scale,
            background_scale: self.background_scale,
            expression_scale: self.expression_scale,
            expression_jitter: self.expression_jitter,
            nonlinear: self.nonlinear,
            world_seed: self.world_seed,
        }
    }

    pub fn split(&self) -> IdentitySplit {
        IdentitySplit { train: self.train_identities, test: self.test_identities }
    }

    pub fn normalizer(&self) -> NormalizerConfig {
        NormalizerConfig {
            sample_dim: self.sample_dim,
            n_patches: self.n_patches,
            patch_dim: self.patch_dim,
            num_heads: self.num_heads,
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
            token_bias_init: self.token_bias_init,
        }
    }

    pub fn norm_weights(&self) -> NormLossWeights {
        NormLossWeights {
            rec: self.lambda_rec,
            perc: self.lambda_perc,
            id: self.lambda_id,
            lm: self.lambda_lm,
            exp: self.lambda_exp,
            eye: self.lambda_eye,
        }
    }

    pub fn norm_train(&self) -> NormTrainConfig {
        let adam = |lr| AdamConfig { lr, beta1: self.norm_beta1, beta2: self.norm_beta2, eps: 1e-8 };
        NormTrainConfig {
            steps: self.norm_steps,
            batch_size: self.norm_batch_size,
            p_rec: self.p_rec,
            optimizer: adam(self.norm_lr),
            disc_optimizer: adam(self.disc_lr),
            warmup_steps: self.norm_warmup_steps,
            cosine_decay: self.norm_cosine_decay,
        }
    }

    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            num_experts: self.num_experts,
            top_k: self.top_k,
            expert_hidden: self.expert_hidden,
            noise_enabled: self.router_noise,
        }
    }

    pub fn classifier(&self, variant: Variant) -> Result<ClassifierConfig> {
        let mut cfg = ClassifierConfig::for_variant(self.task_spec(), self.moe(), variant)?;
        cfg.sample_dim = self.sample_dim;
        Ok(cfg)
    }

    pub fn classifier_train(&self) -> ClassifierTrainConfig {
        let mut cfg = ClassifierTrainConfig::for_task(self.task);
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        if self.lr > 0.0 {
            cfg.optimizer.lr = self.lr;
        }
        cfg.optimizer.beta1 = self.beta1;
        cfg.optimizer.beta2 = self.beta2;
        cfg.weights = ClaLossWeights { importance: self.lambda_imp, global_local: self.lambda_gl };
        cfg.freeze_extractor = self.freeze_extractor;
        cfg
    }
}
