//! Run configuration: every hyperparameter of a pipeline run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Form of the positive-unlabeled debiasing objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// `eta_p*E_P[-log c] + max(0, E_U[-log(1-c)] - eta_p*E_P[-log(1-c)])`:
    /// the clamp keeps the estimated negative risk nonnegative.
    #[default]
    Nnpu,
    /// `-[eta_p*E_P log c + max(0, E_U log(1-c) - eta_p*E_P log(1-c))]`,
    /// transcribed sign for sign.
    PaperLiteral,
    /// The same estimator with no clamp at all (ORIL-style one-step training).
    Unclamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Thresholding strength in `exp(alpha * R)`.
    pub alpha: f64,
    /// Fraction of task-agnostic trajectories kept as safe negatives.
    pub beta1: f64,
    /// 0: cross-entropy formal training, 1: debiased formal training.
    pub beta2: f64,
    /// Positive class prior.
    pub eta_p: f64,
    /// Decay of weight propagation along a trajectory.
    pub gamma: f64,
    pub lr_disc: f64,
    pub lr_policy: f64,
    pub weight_decay_policy: f64,
    pub steps_pretrain: usize,
    pub steps_formal: usize,
    pub steps_bc: usize,
    pub batch_disc: usize,
    pub batch_bc: usize,
    pub grad_penalty_coef: f64,
    pub logit_clamp: f64,
    pub seed: u64,

    pub disc_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub loss_variant: LossVariant,
    pub normalize_weights: bool,

    /// Discount of the SMODICE value objective.
    pub gamma_v: f64,
    pub lr_value: f64,
    pub steps_value: usize,
    pub batch_value: usize,
    /// Steps between V-monitor records.
    pub monitor_interval: usize,

    /// BC steps between evaluations; 0 disables periodic evaluation.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Half-width of the uniform box around the origin for evaluation starts.
    pub eval_start_jitter: f64,
}

impl Default for RunConfig {
    /// Desk-scale defaults used by the synthetic suite.
    fn default() -> Self {
        RunConfig {
            alpha: 1.25,
            beta1: 0.8,
            beta2: 0.0,
            eta_p: 0.2,
            gamma: 0.998,
            lr_disc: 3e-4,
            lr_policy: 1e-4,
            weight_decay_policy: 1e-5,
            steps_pretrain: 2000,
            steps_formal: 5000,
            steps_bc: 20_000,
            batch_disc: 512,
            batch_bc: 1024,
            grad_penalty_coef: 10.0,
            logit_clamp: 10.0,
            seed: 0,
            disc_hidden: vec![256, 256],
            policy_hidden: vec![256, 256],
            value_hidden: vec![256, 256],
            loss_variant: LossVariant::Nnpu,
            normalize_weights: true,
            gamma_v: 0.99,
            lr_value: 3e-4,
            steps_value: 20_000,
            batch_value: 512,
            monitor_interval: 1000,
            eval_interval: 1000,
            eval_episodes: 100,
            eval_start_jitter: 0.3,
        }
    }
}

impl RunConfig {
    /// Step counts and batch sizes of the original large-scale training runs.
    pub fn large_scale() -> Self {
        RunConfig {
            steps_pretrain: 10_000,
            steps_formal: 40_000,
            steps_bc: 1_000_000,
            batch_bc: 8192,
            steps_value: 1_000_000,
            ..RunConfig::default()
        }
    }

    /// Short-horizon environments (pointmaze) propagate weights with 0.98.
    pub fn short_horizon() -> Self {
        RunConfig {
            gamma: 0.98,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return bad("beta1 must lie in (0, 1)");
        }
        if self.beta2 != 0.0 && self.beta2 != 1.0 {
            return bad("beta2 must be 0 or 1");
        }
        if !(0.0..=1.0).contains(&self.eta_p) {
            return bad("eta_p must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.gamma_v) {
            return bad("gamma_v must lie in [0, 1)");
        }
        if self.batch_disc == 0 || self.batch_bc == 0 || self.batch_value == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.logit_clamp > 0.0) {
            return bad("logit_clamp must be positive");
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite");
        }
        if self.monitor_interval == 0 {
            return bad("monitor_interval must be >= 1");
        }
        Ok(())
    }

    /// Parses TOML, filling absent fields from `base`.
    pub fn from_toml_with_base(text: &str, base: &RunConfig) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overlay {
            if !table.contains_key(&k) {
                return Err(Error::Config(format!("unknown config field {k:?}")));
            }
            table.insert(k, v);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
