use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{RewardWeights, TradeoffParams};

/// Every knob of the two training phases. Field names double as config-file
/// keys and CLI flag names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pretrain_lr: f64,
    pub rl_lr: f64,
    pub pretrain_batch: usize,
    pub rl_batch: usize,
    pub pretrain_epochs: usize,
    pub rl_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
    pub seed: u64,
    pub use_r_img: bool,
    pub use_r_trait: bool,
    pub use_r_cider: bool,
    pub run_rl_phase: bool,
    pub pretrain_ce_only: bool,
    /// Keep the pre-trained listener fixed as the reward model during RL.
    pub freeze_listener: bool,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stopping_metric: String,
    /// Beam width for final evaluation (dev evaluation during training is greedy).
    pub eval_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_lr: 1.25e-4,
            rl_lr: 3.25e-5,
            pretrain_batch: 64,
            rl_batch: 32,
            pretrain_epochs: 20,
            rl_epochs: 3,
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
            margin: 1.0,
            seed: 0,
            use_r_img: true,
            use_r_trait: true,
            use_r_cider: true,
            run_rl_phase: true,
            pretrain_ce_only: false,
            freeze_listener: true,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stopping_metric: "dev_cider".into(),
            eval_beam: 3,
        }
    }
}

impl TrainConfig {
    /// Full-scale batch for the RL phase (the default is the desk-scale 32).
    pub const FULL_SCALE_RL_BATCH: usize = 256;

    pub fn tradeoff(&self) -> TradeoffParams {
        TradeoffParams {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            margin: self.margin,
        }
    }

    /// α used by pre-training (`1` when `pretrain_ce_only`).
    pub fn effective_alpha(&self) -> f64 {
        if self.pretrain_ce_only {
            1.0
        } else {
            self.alpha
        }
    }

    pub fn reward_weights(&self) -> Result<RewardWeights> {
        RewardWeights::new(
            self.beta,
            self.gamma,
            self.use_r_img,
            self.use_r_trait,
            self.use_r_cider,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::TrainConfig(m.to_string()));
        self.tradeoff().validate()?;
        if !(self.pretrain_lr > 0.0 && self.rl_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.pretrain_epochs < 1 || self.rl_epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.pretrain_batch < 2 || self.rl_batch < 2 {
            return bad("batch sizes must be at least 2 (distractors come from the batch)");
        }
        if self.run_rl_phase && !(self.use_r_img || self.use_r_trait || self.use_r_cider) {
            return bad("at least one reward must be enabled when run_rl_phase is set");
        }
        if self.run_rl_phase {
            self.reward_weights()?;
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if self.early_stopping_metric != "dev_cider" {
            return bad("early_stopping_metric must be dev_cider");
        }
        if self.eval_beam < 1 {
            return bad("eval_beam must be at least 1");
        }
        Ok(())
    }
}
