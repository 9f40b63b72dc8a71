//! Model and training configuration, mirrored by the TOML config file and
//! the CLI flag surface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub gdks_layer: usize,
    /// Skip the FFN sublayer in the fused layer of the target branch.
    pub gdks_skip_ffn: bool,
    /// Correction input = detached source rows only (n -> n) instead of
    /// [source row || pooled target] (2n -> n).
    pub f_source_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 128,
            vocab_size: 0,
            max_seq_len: 64,
            dropout_rate: 0.1,
            gdks_layer: 2,
            gdks_skip_ffn: false,
            f_source_only: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.gdks_layer >= self.num_layers {
            return Err(Error::invalid(format!(
                "gdks_layer {} out of range (num_layers {})",
                self.gdks_layer, self.num_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NegativesScope {
    #[default]
    SourceSide,
    BothSides,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(default)]
pub struct AblationFlags {
    /// Replace GDKS with vanilla cross-attention (no stop-gradient, no
    /// correction term).
    pub no_gdks: bool,
    /// Remove attentive teacher-guided calibration entirely.
    pub no_atgc: bool,
    /// Keep the teacher-guided loss in training but skip the output
    /// averaging at inference.
    pub no_atgc_inference: bool,
    /// Feed raw (unnormalized) hidden states to the transfer attention.
    pub no_norm: bool,
    /// Drop the sentence-level contrastive term.
    pub no_align_s: bool,
    /// Drop the token-level entropy term.
    pub no_align_t: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma_s: f64,
    pub eta_t: f64,
    pub tau: f64,
    pub lambda0: f64,
    pub epsilon: f64,
    /// Global-norm gradient clipping threshold; 0 disables clipping.
    pub clip_norm: f64,
    /// Adam second-moment decay.
    pub adam_beta2: f64,
    /// Half-cosine learning-rate decay after warmup instead of linear.
    pub cosine_lr: bool,
    pub norm_momentum: f64,
    pub max_answer_len: usize,
    pub log_every: usize,
    pub negatives_scope: NegativesScope,
    /// Weight of the push-down term on the transferred distribution at
    /// non-gold positions; 0 disables the term.
    pub transfer_contrast: f64,
    /// Renormalize transferred span distributions to sum to 1 per column.
    pub renormalize_transfer: bool,
    /// Restrict transfer-attention keys to context tokens.
    pub context_only_transfer_keys: bool,
    /// Compute the token-level entropy penalty on the head-averaged GDKS
    /// cross-attention instead of the unprojected dot-product attention.
    pub eca_on_attention: bool,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            batch_size: 32,
            warmup_fraction: 0.1,
            epochs: 10,
            seed: 42,
            alpha: 0.2,
            gamma: 0.1,
            sigma_s: 0.05,
            eta_t: 0.05,
            tau: 0.05,
            lambda0: 0.3,
            epsilon: 1e-8,
            clip_norm: 1.0,
            adam_beta2: 0.999,
            cosine_lr: false,
            norm_momentum: 0.99,
            max_answer_len: 30,
            log_every: 10,
            negatives_scope: NegativesScope::SourceSide,
            transfer_contrast: 1.0,
            renormalize_transfer: false,
            context_only_transfer_keys: false,
            eca_on_attention: false,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must be in [0, 1]"));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("sigma_s", self.sigma_s),
            ("eta_t", self.eta_t),
            ("transfer_contrast", self.transfer_contrast),
        ] {
            if v < 0.0 {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        if self.tau <= 0.0 {
            return Err(Error::invalid("tau must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(s).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&s)
    }

    /// Apply a `key=value` override; used by the CLI and the sweep grid.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn pf(v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Parse(format!("expected a number, got {v:?}")))
        }
        fn pu(v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Parse(format!("expected an integer, got {v:?}")))
        }
        fn pb(v: &str) -> Result<bool> {
            v.parse()
                .map_err(|_| Error::Parse(format!("expected a bool, got {v:?}")))
        }
        match key {
            "lr" => self.train.lr = pf(value)?,
            "batch_size" => self.train.batch_size = pu(value)?,
            "warmup_fraction" => self.train.warmup_fraction = pf(value)?,
            "epochs" => self.train.epochs = pu(value)?,
            "seed" => {
                self.train.seed = value
                    .parse()
                    .map_err(|_| Error::Parse(format!("expected a seed, got {value:?}")))?
            }
            "alpha" => self.train.alpha = pf(value)?,
            "gamma" => self.train.gamma = pf(value)?,
            "sigma_s" => self.train.sigma_s = pf(value)?,
            "eta_t" => self.train.eta_t = pf(value)?,
            "tau" => self.train.tau = pf(value)?,
            "lambda0" => self.train.lambda0 = pf(value)?,
            "epsilon" => self.train.epsilon = pf(value)?,
            "clip_norm" => self.train.clip_norm = pf(value)?,
            "adam_beta2" => self.train.adam_beta2 = pf(value)?,
            "cosine_lr" => self.train.cosine_lr = pb(value)?,
            "norm_momentum" => self.train.norm_momentum = pf(value)?,
            "max_answer_len" => self.train.max_answer_len = pu(value)?,
            "log_every" => self.train.log_every = pu(value)?,
            "transfer_contrast" => self.train.transfer_contrast = pf(value)?,
            "renormalize_transfer" => self.train.renormalize_transfer = pb(value)?,
            "context_only_transfer_keys" => self.train.context_only_transfer_keys = pb(value)?,
            "eca_on_attention" => self.train.eca_on_attention = pb(value)?,
            "no_gdks" => self.train.ablation.no_gdks = pb(value)?,
            "no_atgc" => self.train.ablation.no_atgc = pb(value)?,
            "no_atgc_inference" => self.train.ablation.no_atgc_inference = pb(value)?,
            "no_norm" => self.train.ablation.no_norm = pb(value)?,
            "no_align_s" => self.train.ablation.no_align_s = pb(value)?,
            "no_align_t" => self.train.ablation.no_align_t = pb(value)?,
            "negatives_scope" => {
                self.train.negatives_scope = match value {
                    "source-side" => NegativesScope::SourceSide,
                    "both-sides" => NegativesScope::BothSides,
                    _ => return Err(Error::Parse(format!("unknown negatives scope {value:?}"))),
                }
            }
            "num_layers" => self.model.num_layers = pu(value)?,
            "hidden_size" => self.model.hidden_size = pu(value)?,
            "num_heads" => self.model.num_heads = pu(value)?,
            "ffn_size" => self.model.ffn_size = pu(value)?,
            "max_seq_len" => self.model.max_seq_len = pu(value)?,
            "dropout_rate" => self.model.dropout_rate = pf(value)?,
            "gdks_layer" => self.model.gdks_layer = pu(value)?,
            "gdks_skip_ffn" => self.model.gdks_skip_ffn = pb(value)?,
            "f_source_only" => self.model.f_source_only = pb(value)?,
            _ => return Err(Error::Parse(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}
