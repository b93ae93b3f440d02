//! Shared machinery for checking the one-sample REINFORCE estimator against
//! the exact gradient of an enumerable policy.

use pic_core::agents::{policy_logprob, sample_caption, DecodeResult};
use pic_core::model::{FeatureMap, ModelParams};
use pic_core::objectives::policy_gradient_backward;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{enumerate_captions, numeric_gradient};

/// An arbitrary fixed reward over complete captions.
pub fn reward(caption: &[u32]) -> f64 {
    caption
        .iter()
        .enumerate()
        .map(|(i, &t)| ((t as f64 + 1.0) * (i as f64 + 0.7)).sin())
        .sum::<f64>()
        + 0.3
}

pub fn expected_reward(p: &ModelParams, v: &FeatureMap, max_len: usize) -> f64 {
    enumerate_captions(p, v, 1, max_len)
        .iter()
        .map(|(c, q)| q * reward(c))
        .sum()
}

pub fn flat(g: &ModelParams) -> Vec<f64> {
    g.tensors().into_iter().flat_map(|(_, t)| t.data.clone()).collect()
}

pub fn one_sample_grad(p: &ModelParams, v: &FeatureMap, d: &DecodeResult, baseline: f64) -> Vec<f64> {
    let mut g = p.zeros_like();
    policy_gradient_backward(p, v, 1, d, reward(&d.caption), baseline, 1.0, &mut g).unwrap();
    flat(&g)
}

pub fn directions(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// `u · ∇(-E[R])` by central differences of the enumerated expectation.
pub fn exact_projection(p: &ModelParams, v: &FeatureMap, max_len: usize, u: &[f64]) -> f64 {
    let h = 1e-4;
    let shifted = |s: f64| {
        let mut q = p.clone();
        let mut k = 0;
        for (_, t) in q.tensors_mut() {
            for x in &mut t.data {
                *x += s * u[k];
                k += 1;
            }
        }
        expected_reward(&q, v, max_len)
    };
    -(shifted(h) - shifted(-h)) / (2.0 * h)
}

/// Projections of the Monte-Carlo mean gradient on fixed random directions.
pub struct McCheck {
    pub z_scores: Vec<f64>,
    pub variance: f64,
}

pub fn monte_carlo(p: &ModelParams, v: &FeatureMap, max_len: usize, baseline: f64, draws: usize, seed: u64) -> McCheck {
    let dim = flat(p).len();
    let dirs = directions(6, dim, 99);
    let exact: Vec<f64> = dirs.iter().map(|u| exact_projection(p, v, max_len, u)).collect();
    let mut sum = vec![0.0; dirs.len()];
    let mut sum_sq = vec![0.0; dirs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        let d = sample_caption(p, v, 1, max_len, &mut rng).unwrap();
        let g = one_sample_grad(p, v, &d, baseline);
        for (k, u) in dirs.iter().enumerate() {
            let x: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
            sum[k] += x;
            sum_sq[k] += x * x;
        }
    }
    let n = draws as f64;
    let mut z_scores = Vec::new();
    let mut variance = 0.0;
    for k in 0..dirs.len() {
        let mean = sum[k] / n;
        let var = (sum_sq[k] / n - mean * mean) * n / (n - 1.0);
        variance += var;
        z_scores.push((mean - exact[k]) / (var / n).sqrt());
    }
    McCheck { z_scores, variance }
}

/// Max abs difference between the probability-weighted sum of one-sample
/// estimates over every caption and the finite-difference gradient of `-E[R]`.
pub fn enumerated_estimator_error(p: &ModelParams, v: &FeatureMap, max_len: usize, baseline: f64) -> f64 {
    let exact: Vec<f64> = numeric_gradient(p, 1e-4, |q| -expected_reward(q, v, max_len))
        .into_iter()
        .flat_map(|(_, g)| g)
        .collect();
    let mut avg = vec![0.0; exact.len()];
    for (caption, q) in enumerate_captions(p, v, 1, max_len) {
        let d = DecodeResult {
            truncated: caption.len() == max_len,
            total_logprob: policy_logprob(p, v, 1, &caption, max_len).unwrap(),
            stepwise_logprobs: vec![],
            caption,
        };
        for (a, g) in avg.iter_mut().zip(one_sample_grad(p, v, &d, baseline)) {
            *a += q * g;
        }
    }
    avg.iter().zip(&exact).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max)
}
