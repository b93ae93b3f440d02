//! Losses and rewards.
//!
//! Pre-training minimises `α·L_CE + (1-α)·L_comp` where `L_CE` is the summed
//! teacher-forced negative log-likelihood and `L_comp = softplus(s' - s)`
//! ranks the true caption above an in-batch distractor caption. Fine-tuning
//! maximises `R(Ĉ) = β·R_img + γ·R_trait + (1-β-γ)·R_CIDEr` with the
//! one-sample REINFORCE surrogate `-(R - b)·log P(Ĉ)`, `b` the reward of the
//! greedy caption.

use serde::{Deserialize, Serialize};

use crate::agents::{listener_score_of, speaker_logits, DecodeResult};
use crate::error::{Error, Result};
use crate::model::{backward, forward, FeatureMap, Forward, Gradients, ModelParams};
use crate::tensor::{log_softmax, sigmoid, softplus, Matrix};
use crate::tokenizer::validate_complete;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
}

impl Default for TradeoffParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
            margin: 1.0,
        }
    }
}

impl TradeoffParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidTradeoff(format!("{name}={v} outside [0,1]")));
            }
        }
        if self.beta + self.gamma > 1.0 {
            return Err(Error::InvalidTradeoff("beta + gamma > 1".into()));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(Error::InvalidTradeoff("margin must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_img: f64,
    pub r_trait: f64,
    pub r_cider: f64,
    pub total: f64,
    pub baseline: f64,
}

/// `-max(0, m + s(V',T,Ĉ) - s(V,T,Ĉ))`.
pub fn reward_img(s_true: f64, s_distractor_img: f64, margin: f64) -> f64 {
    -(margin + s_distractor_img - s_true).max(0.0)
}

/// `-max(0, m + s(V,T',Ĉ) - s(V,T,Ĉ))`.
pub fn reward_trait(s_true: f64, s_distractor_trait: f64, margin: f64) -> f64 {
    -(margin + s_distractor_trait - s_true).max(0.0)
}

/// `β·r_img + γ·r_trait + (1-β-γ)·r_cider`.
pub fn total_reward(r_img: f64, r_trait: f64, r_cider: f64, beta: f64, gamma: f64) -> Result<f64> {
    if beta + gamma > 1.0 {
        return Err(Error::InvalidTradeoff("beta + gamma > 1".into()));
    }
    Ok(beta * r_img + gamma * r_trait + (1.0 - beta - gamma) * r_cider)
}

/// Reward weights after removing disabled components. The weights of the
/// remaining components are divided by `1 - w_removed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub img: f64,
    pub trait_: f64,
    pub cider: f64,
}

impl RewardWeights {
    pub fn new(beta: f64, gamma: f64, use_img: bool, use_trait: bool, use_cider: bool) -> Result<Self> {
        if beta + gamma > 1.0 {
            return Err(Error::InvalidTradeoff("beta + gamma > 1".into()));
        }
        if !(use_img || use_trait || use_cider) {
            return Err(Error::TrainConfig("at least one reward must be enabled".into()));
        }
        let raw = [beta, gamma, 1.0 - beta - gamma];
        let enabled = [use_img, use_trait, use_cider];
        // Equal to `1 - w_removed`, but summing the kept weights directly means a
        // lone remaining reward gets weight exactly 1 despite rounding in `raw`.
        let keep: f64 = raw.iter().zip(enabled).filter(|(_, e)| *e).map(|(w, _)| w).sum();
        if keep <= 0.0 {
            return Err(Error::TrainConfig("enabled rewards have zero total weight".into()));
        }
        let w = |i: usize| if enabled[i] { raw[i] / keep } else { 0.0 };
        Ok(Self {
            img: w(0),
            trait_: w(1),
            cider: w(2),
        })
    }

    pub fn combine(&self, r_img: f64, r_trait: f64, r_cider: f64) -> f64 {
        self.img * r_img + self.trait_ * r_trait + self.cider * r_cider
    }
}

/// `-(R - b)·log P(Ĉ)`; `R - b` is a constant for differentiation.
pub fn policy_gradient_surrogate(decode: &DecodeResult, reward: f64, baseline: f64) -> Result<f64> {
    if !reward.is_finite() || !baseline.is_finite() {
        return Err(Error::NonFinite("reward or baseline".into()));
    }
    Ok(-(reward - baseline) * decode.total_logprob)
}

/// Teacher-forced speaker steps over a forward pass: `(row, target, weight)`.
/// Returns `Σ weight·(-log p(target | row))` and adds its gradient with
/// respect to the hidden rows into `d_output` and to the head into `grads`.
fn speaker_nll(
    params: &ModelParams,
    fwd: &Forward,
    steps: impl Iterator<Item = (usize, u32, f64)>,
    d_output: &mut Matrix,
    grads: &mut Gradients,
) -> f64 {
    let mut loss = 0.0;
    let vocab = params.config.vocab_size;
    let mut dlogits = vec![0.0; vocab];
    for (row, target, weight) in steps {
        let hidden = fwd.output.row(row);
        let lp = log_softmax(&speaker_logits(params, hidden));
        loss -= weight * lp[target as usize];
        for (dl, l) in dlogits.iter_mut().zip(&lp) {
            *dl = weight * l.exp();
        }
        dlogits[target as usize] -= weight;
        for (k, &h) in hidden.iter().enumerate() {
            let gw = grads.spk_w.row_mut(k);
            for (g, dl) in gw.iter_mut().zip(&dlogits) {
                *g += h * dl;
            }
        }
        for (g, dl) in grads.spk_b.data.iter_mut().zip(&dlogits) {
            *g += dl;
        }
        let drow = d_output.row_mut(row);
        for (k, dh) in drow.iter_mut().enumerate() {
            *dh += crate::tensor::dot(params.spk_w.row(k), &dlogits);
        }
    }
    loss
}

/// Adds `ds·∂s/∂θ` for the listener score at the last position.
fn listener_backward(params: &ModelParams, fwd: &Forward, ds: f64, d_output: &mut Matrix, grads: &mut Gradients) {
    let last = fwd.len() - 1;
    let hidden = fwd.output.row(last);
    for (g, h) in grads.ltn_w.data.iter_mut().zip(hidden) {
        *g += ds * h;
    }
    grads.ltn_b.data[0] += ds;
    for (dh, w) in d_output.row_mut(last).iter_mut().zip(&params.ltn_w.data) {
        *dh += ds * w;
    }
}

/// `-Σ_k log P(c_k | V, T, C_{k-1})`, including the EOS step.
pub fn cross_entropy_loss(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    caption: &[u32],
) -> Result<f64> {
    validate_complete(caption)?;
    let fwd = forward(params, features, trait_id, caption)?;
    Ok((0..caption.len() - 1)
        .map(|i| -log_softmax(&speaker_logits(params, fwd.output.row(i)))[caption[i + 1] as usize])
        .sum())
}

/// `log(1 + exp(s(V,T,C') - s(V,T,C)))`.
pub fn comp_loss(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    caption: &[u32],
    distractor_caption: &[u32],
) -> Result<f64> {
    validate_complete(caption)?;
    validate_complete(distractor_caption)?;
    let s = listener_score_of(params, &forward(params, features, trait_id, caption)?);
    let s_neg = listener_score_of(params, &forward(params, features, trait_id, distractor_caption)?);
    Ok(comp_from_scores(s, s_neg))
}

pub fn comp_from_scores(s_true: f64, s_distractor: f64) -> f64 {
    softplus(s_distractor - s_true)
}

/// One pre-training example: image, trait, gold caption, distractor caption.
#[derive(Clone, Copy, Debug)]
pub struct PretrainItem<'a> {
    pub features: &'a FeatureMap,
    pub trait_id: usize,
    pub caption: &'a [u32],
    pub distractor_caption: &'a [u32],
}

/// Per-example loss parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PretrainParts {
    pub ce: f64,
    pub comp: f64,
    pub loss: f64,
}

/// `α·L_CE + (1-α)·L_comp` for one example, accumulating `weight·∇` into `grads`
/// when given. With `α = 1` the distractor pass is skipped.
pub fn pretrain_example(
    params: &ModelParams,
    item: &PretrainItem<'_>,
    alpha: f64,
    weight: f64,
    grads: Option<&mut Gradients>,
) -> Result<PretrainParts> {
    validate_complete(item.caption)?;
    validate_complete(item.distractor_caption)?;
    let fwd = forward(params, item.features, item.trait_id, item.caption)?;
    let ce = cross_entropy_from(params, &fwd, item.caption);
    let negative = if alpha < 1.0 {
        let fwd_neg = forward(params, item.features, item.trait_id, item.distractor_caption)?;
        let s = listener_score_of(params, &fwd);
        let s_neg = listener_score_of(params, &fwd_neg);
        Some((s, s_neg, fwd_neg))
    } else {
        None
    };
    let comp = negative
        .as_ref()
        .map_or(0.0, |(s, s_neg, _)| comp_from_scores(*s, *s_neg));

    if let Some(g) = grads {
        let d = params.config.hidden_dim;
        let mut d_out = Matrix::zeros(fwd.len(), d);
        if alpha != 0.0 {
            let steps = (0..item.caption.len() - 1).map(|i| (i, item.caption[i + 1], alpha * weight));
            speaker_nll(params, &fwd, steps, &mut d_out, g);
        }
        if let Some((s, s_neg, fwd_neg)) = &negative {
            let sig = sigmoid(s_neg - s) * (1.0 - alpha) * weight;
            listener_backward(params, &fwd, -sig, &mut d_out, g);
            let mut d_neg = Matrix::zeros(fwd_neg.len(), d);
            listener_backward(params, fwd_neg, sig, &mut d_neg, g);
            backward(params, item.features, fwd_neg, &d_neg, g);
        }
        backward(params, item.features, &fwd, &d_out, g);
    }
    Ok(PretrainParts {
        ce,
        comp,
        loss: alpha * ce + (1.0 - alpha) * comp,
    })
}

fn cross_entropy_from(params: &ModelParams, fwd: &Forward, caption: &[u32]) -> f64 {
    (0..caption.len() - 1)
        .map(|i| -log_softmax(&speaker_logits(params, fwd.output.row(i)))[caption[i + 1] as usize])
        .sum()
}

/// Checks a distractor assignment: a permutation with no fixed points.
pub fn check_distractors(distractor_index: &[usize]) -> Result<()> {
    let n = distractor_index.len();
    if n < 2 {
        return Err(Error::BatchTooSmall);
    }
    let mut seen = vec![false; n];
    for (i, &j) in distractor_index.iter().enumerate() {
        if j >= n || j == i || std::mem::replace(&mut seen[j], true) {
            return Err(Error::BatchTooSmall);
        }
    }
    Ok(())
}

/// Mean of `α·L_CE + (1-α)·L_comp` over a batch; example `i` takes its
/// distractor caption from example `distractor_index[i]`.
pub fn pretrain_loss(
    params: &ModelParams,
    examples: &[(&FeatureMap, usize, &[u32])],
    distractor_index: &[usize],
    alpha: f64,
) -> Result<f64> {
    if examples.len() != distractor_index.len() {
        return Err(Error::LengthMismatch(examples.len(), distractor_index.len()));
    }
    check_distractors(distractor_index)?;
    let mut total = 0.0;
    for (i, &(features, trait_id, caption)) in examples.iter().enumerate() {
        let item = PretrainItem {
            features,
            trait_id,
            caption,
            distractor_caption: examples[distractor_index[i]].2,
        };
        total += pretrain_example(params, &item, alpha, 1.0, None)?.loss;
    }
    Ok(total / examples.len() as f64)
}

/// Gradient of `pretrain_loss`; returns the loss too.
pub fn pretrain_loss_grad(
    params: &ModelParams,
    examples: &[(&FeatureMap, usize, &[u32])],
    distractor_index: &[usize],
    alpha: f64,
) -> Result<(f64, Gradients)> {
    if examples.len() != distractor_index.len() {
        return Err(Error::LengthMismatch(examples.len(), distractor_index.len()));
    }
    check_distractors(distractor_index)?;
    let n = examples.len() as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (i, &(features, trait_id, caption)) in examples.iter().enumerate() {
        let item = PretrainItem {
            features,
            trait_id,
            caption,
            distractor_caption: examples[distractor_index[i]].2,
        };
        total += pretrain_example(params, &item, alpha, 1.0 / n, Some(&mut grads))?.loss;
    }
    Ok((total / n, grads))
}

/// Accumulates `weight·∇[-(R - b)·log P(Ĉ)]` and returns the surrogate value.
/// The forced final EOS of a truncated decode carries no gradient.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient_backward(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    decode: &DecodeResult,
    reward: f64,
    baseline: f64,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let surrogate = policy_gradient_surrogate(decode, reward, baseline)?;
    let advantage = reward - baseline;
    if advantage == 0.0 {
        return Ok(surrogate);
    }
    let caption = &decode.caption;
    validate_complete(caption)?;
    let fwd = forward(params, features, trait_id, caption)?;
    let mut d_out = Matrix::zeros(fwd.len(), params.config.hidden_dim);
    let free_steps = caption.len() - 1 - usize::from(decode.truncated);
    let steps = (0..free_steps).map(|i| (i, caption[i + 1], advantage * weight));
    speaker_nll(params, &fwd, steps, &mut d_out, grads);
    backward(params, features, &fwd, &d_out, grads);
    Ok(surrogate)
}
