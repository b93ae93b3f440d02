//! Speaker and listener heads over the shared backbone, plus decoding.
//!
//! Decoding runs under a truncated policy: a caption is at most `max_len`
//! tokens including SOS and EOS, so when the prefix reaches `max_len - 1`
//! tokens the next token is EOS with probability one. That forced step
//! contributes log-probability 0, which keeps `total_logprob` the exact
//! log-probability of the sampling distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{affine_row, forward, FeatureMap, Forward, ModelParams};
use crate::tensor::{log_softmax, softmax};
use crate::tokenizer::{validate_complete, validate_prefix, EOS_ID, SOS_ID};

#[derive(Clone, Debug, PartialEq)]
pub struct NextWordDistribution {
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub caption: Vec<u32>,
    /// Log-probability of each generated token (forced final EOS counts as 0).
    pub stepwise_logprobs: Vec<f64>,
    pub total_logprob: f64,
    /// True when EOS was forced by the length limit.
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompatScore(pub f64);

/// Speaker logits `F_spk(h)` for one hidden row.
pub fn speaker_logits(params: &ModelParams, hidden: &[f64]) -> Vec<f64> {
    affine_row(hidden, &params.spk_w, &params.spk_b)
}

/// Listener score `F_ltn(h)` for one hidden row.
pub fn listener_score(params: &ModelParams, hidden: &[f64]) -> f64 {
    affine_row(hidden, &params.ltn_w, &params.ltn_b)[0]
}

/// Score read at the final (EOS) position of an already computed forward pass.
pub fn listener_score_of(params: &ModelParams, fwd: &Forward) -> f64 {
    listener_score(params, fwd.last_hidden())
}

fn next_logprobs(params: &ModelParams, features: &FeatureMap, trait_id: usize, prefix: &[u32]) -> Result<Vec<f64>> {
    let fwd = forward(params, features, trait_id, prefix)?;
    Ok(log_softmax(&speaker_logits(params, fwd.last_hidden())))
}

/// `softmax(F_spk(G(V, T, prefix)))`.
pub fn next_word_distribution(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    prefix: &[u32],
) -> Result<NextWordDistribution> {
    validate_prefix(prefix)?;
    let fwd = forward(params, features, trait_id, prefix)?;
    Ok(NextWordDistribution {
        probs: softmax(&speaker_logits(params, fwd.last_hidden())),
    })
}

fn check_max_len(params: &ModelParams, max_len: usize) -> Result<()> {
    if max_len < 2 {
        return Err(Error::InvalidConfig("decode max_len must be at least 2".into()));
    }
    if max_len > params.config.max_len {
        return Err(Error::ExceedsMaxLen {
            len: max_len,
            max_len: params.config.max_len,
        });
    }
    Ok(())
}

/// Runs a left-to-right decode where `choose` picks each free token.
fn decode_with<F>(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    max_len: usize,
    mut choose: F,
) -> Result<DecodeResult>
where
    F: FnMut(&[f64]) -> u32,
{
    check_max_len(params, max_len)?;
    let mut caption = vec![SOS_ID];
    let mut steps = Vec::new();
    let mut truncated = false;
    loop {
        if caption.len() == max_len - 1 {
            caption.push(EOS_ID);
            steps.push(0.0);
            truncated = true;
            break;
        }
        let lp = next_logprobs(params, features, trait_id, &caption)?;
        let tok = choose(&lp);
        caption.push(tok);
        steps.push(lp[tok as usize]);
        if tok == EOS_ID {
            break;
        }
    }
    let total_logprob = steps.iter().sum();
    Ok(DecodeResult {
        caption,
        stepwise_logprobs: steps,
        total_logprob,
        truncated,
    })
}

/// Ancestral sampling from the speaker, one roll-out.
pub fn sample_caption<R: Rng + ?Sized>(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<DecodeResult> {
    decode_with(params, features, trait_id, max_len, |lp| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, l) in lp.iter().enumerate() {
            let p = l.exp();
            if p > 0.0 {
                last_positive = i;
            }
            acc += p;
            if u < acc {
                return i as u32;
            }
        }
        last_positive as u32
    })
}

fn argmax_lowest(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    decode_with(params, features, trait_id, max_len, argmax_lowest)
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    steps: Vec<f64>,
    score: f64,
    truncated: bool,
}

/// Beam search over total log-probability with no length normalization.
///
/// Each step keeps the best `beam` expansions; expansions ending in EOS leave
/// the beam as finished hypotheses. The search stops once no live hypothesis
/// can beat the best finished one.
pub fn beam_search(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    beam: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    if beam < 1 {
        return Err(Error::InvalidBeam);
    }
    check_max_len(params, max_len)?;
    let mut live = vec![Hypothesis {
        tokens: vec![SOS_ID],
        steps: Vec::new(),
        score: 0.0,
        truncated: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        // (score, hypothesis index, token, step logprob)
        let mut candidates: Vec<(f64, usize, u32, f64)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            if h.tokens.len() == max_len - 1 {
                candidates.push((h.score, hi, EOS_ID, 0.0));
                continue;
            }
            let lp = next_logprobs(params, features, trait_id, &h.tokens)?;
            candidates.extend(lp.iter().enumerate().map(|(t, &l)| (h.score + l, hi, t as u32, l)));
        }
        // stable sort: ties keep hypothesis order, then token order
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(beam);
        for &(score, hi, tok, l) in candidates.iter().take(beam) {
            let parent = &live[hi];
            let mut h = Hypothesis {
                tokens: parent.tokens.clone(),
                steps: parent.steps.clone(),
                score,
                truncated: parent.tokens.len() == max_len - 1,
            };
            h.tokens.push(tok);
            h.steps.push(l);
            if tok == EOS_ID {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if best_finished >= best_live {
            break;
        }
    }
    let mut best = &finished[0];
    for h in &finished[1..] {
        if h.score > best.score {
            best = h;
        }
    }
    Ok(DecodeResult {
        caption: best.tokens.clone(),
        total_logprob: best.steps.iter().sum(),
        stepwise_logprobs: best.steps.clone(),
        truncated: best.truncated,
    })
}

/// Listener compatibility `s(V, T, C) = F_ltn(G(V, T, C))`, read at EOS.
pub fn compat_score(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    caption: &[u32],
) -> Result<CompatScore> {
    validate_complete(caption)?;
    let fwd = forward(params, features, trait_id, caption)?;
    Ok(CompatScore(listener_score_of(params, &fwd)))
}

/// Teacher-forced log-probability of `caption` under the truncated policy
/// with length limit `max_len`.
pub fn policy_logprob(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    caption: &[u32],
    max_len: usize,
) -> Result<f64> {
    validate_complete(caption)?;
    let fwd = forward(params, features, trait_id, caption)?;
    let mut total = 0.0;
    for i in 0..caption.len() - 1 {
        if i + 1 == max_len - 1 {
            break;
        }
        let lp = log_softmax(&speaker_logits(params, fwd.output.row(i)));
        total += lp[caption[i + 1] as usize];
    }
    Ok(total)
}
