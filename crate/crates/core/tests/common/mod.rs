//! Shared fixtures and an independent, deliberately naive reference
//! implementation of the backbone used as a test oracle.
//!
//! The oracle processes one text position at a time with explicit loops over
//! plain vectors (incremental keys/values, no matrix helpers from the crate),
//! so it shares no code with the batched implementation under test.

#![allow(dead_code)]

pub mod policy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use pic_core::model::{FeatureMap, LayerParams, ModelConfig, ModelParams, LN_EPS};
use pic_core::tensor::Matrix;

pub fn tiny_config(vocab_size: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        grid_cells: 3,
        visual_dim: 5,
        vocab_size,
        max_len,
        num_traits: 4,
        injection_enabled: true,
    }
}

/// Parameters with every entry drawn from `N(0, scale²)`; layer-norm gains
/// are centred on 1 so activations stay well conditioned.
pub fn random_params(config: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in p.tensors_mut() {
        let gain = name.ends_with("_g");
        for v in &mut t.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = if gain { 1.0 + 0.3 * z } else { scale * z };
        }
    }
    p
}

pub fn random_features(config: &ModelConfig, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7);
    let data = (0..config.grid_cells * config.visual_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    FeatureMap::new(config.grid_cells, config.visual_dim, data).unwrap()
}

fn row(m: &Matrix, r: usize) -> Vec<f64> {
    m.data[r * m.cols..(r + 1) * m.cols].to_vec()
}

/// `x · W + b` for one row vector.
fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = b.data[j];
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w.data[i * w.cols + j];
        }
        *o = acc;
    }
    out
}

fn layer_norm(x: &[f64], g: &Matrix, b: &Matrix) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * g.data[i] + b.data[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Per-layer residual outputs and final layer-normed states, one row per
/// text position.
pub struct OracleOutput {
    pub layers: Vec<Vec<Vec<f64>>>,
    pub output: Vec<Vec<f64>>,
}

fn oracle_layer(
    lp: &LayerParams,
    cfg: &ModelConfig,
    injected: &[(Vec<f64>, Vec<f64>)],
    xs: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let hd = cfg.hidden_dim / cfg.num_heads;
    let mut keys: Vec<Vec<f64>> = injected.iter().map(|(k, _)| k.clone()).collect();
    let mut values: Vec<Vec<f64>> = injected.iter().map(|(_, v)| v.clone()).collect();
    let mut out = Vec::new();
    for x in xs {
        let a = layer_norm(x, &lp.ln1_g, &lp.ln1_b);
        let q = affine(&a, &lp.w_q, &lp.b_q);
        keys.push(affine(&a, &lp.w_k, &lp.b_k));
        values.push(affine(&a, &lp.w_v, &lp.b_v));
        let mut ctx = vec![0.0; cfg.hidden_dim];
        for h in 0..cfg.num_heads {
            let lo = h * hd;
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| (lo..lo + hd).map(|c| q[c] * k[c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (s, v) in scores.iter().zip(&values) {
                let w = (s - max).exp() / z;
                for c in lo..lo + hd {
                    ctx[c] += w * v[c];
                }
            }
        }
        let attn = affine(&ctx, &lp.w_o, &lp.b_o);
        let mid: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let c = layer_norm(&mid, &lp.ln2_g, &lp.ln2_b);
        let f: Vec<f64> = affine(&c, &lp.w_fc, &lp.b_fc).into_iter().map(gelu).collect();
        let ff = affine(&f, &lp.w_proj, &lp.b_proj);
        out.push(mid.iter().zip(&ff).map(|(a, b)| a + b).collect());
    }
    out
}

/// Reference forward pass. With injection disabled this is a plain
/// pre-layer-norm causal decoder.
pub fn oracle_forward(params: &ModelParams, features: &FeatureMap, trait_id: usize, tokens: &[u32]) -> OracleOutput {
    let cfg = &params.config;
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            row(&params.tok_emb, t as usize)
                .iter()
                .zip(row(&params.pos_emb, i))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let trait_vec = row(&params.traits, trait_id);
    let mut layers = Vec::new();
    for lp in &params.layers {
        let mut injected = Vec::new();
        if cfg.injection_enabled {
            for g in 0..cfg.grid_cells {
                let v = row(&features.0, g);
                injected.push((affine(&v, &lp.p_k, &lp.pb_k), affine(&v, &lp.p_v, &lp.pb_v)));
            }
            injected.push((
                affine(&trait_vec, &lp.w_k, &lp.b_k),
                affine(&trait_vec, &lp.w_v, &lp.b_v),
            ));
        }
        xs = oracle_layer(lp, cfg, &injected, &xs);
        layers.push(xs.clone());
    }
    let output = xs.iter().map(|x| layer_norm(x, &params.lnf_g, &params.lnf_b)).collect();
    OracleOutput { layers, output }
}

pub fn oracle_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits.iter().map(|l| (l - max).exp() / z).collect()
}

/// Next-word distribution computed from the oracle backbone.
pub fn oracle_next_probs(params: &ModelParams, features: &FeatureMap, trait_id: usize, prefix: &[u32]) -> Vec<f64> {
    let out = oracle_forward(params, features, trait_id, prefix);
    let h = out.output.last().unwrap();
    oracle_softmax(&affine(h, &params.spk_w, &params.spk_b))
}

/// Listener score computed from the oracle backbone.
pub fn oracle_score(params: &ModelParams, features: &FeatureMap, trait_id: usize, caption: &[u32]) -> f64 {
    let out = oracle_forward(params, features, trait_id, caption);
    affine(out.output.last().unwrap(), &params.ltn_w, &params.ltn_b)[0]
}

/// Teacher-forced cross-entropy, one oracle forward per prefix.
pub fn oracle_cross_entropy(params: &ModelParams, features: &FeatureMap, trait_id: usize, caption: &[u32]) -> f64 {
    (1..caption.len())
        .map(|k| -oracle_next_probs(params, features, trait_id, &caption[..k])[caption[k] as usize].ln())
        .sum()
}

/// Every complete caption reachable under the truncated policy with length
/// limit `max_len`, with its exact probability.
pub fn enumerate_captions(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    max_len: usize,
) -> Vec<(Vec<u32>, f64)> {
    const EOS: u32 = 2;
    let mut out = Vec::new();
    let mut stack = vec![(vec![1u32], 1.0)];
    while let Some((prefix, p)) = stack.pop() {
        if prefix.len() == max_len - 1 {
            let mut c = prefix;
            c.push(EOS);
            out.push((c, p));
            continue;
        }
        let probs = oracle_next_probs(params, features, trait_id, &prefix);
        for (tok, q) in probs.iter().enumerate() {
            let mut c = prefix.clone();
            c.push(tok as u32);
            if tok as u32 == EOS {
                out.push((c, p * q));
            } else {
                stack.push((c, p * q));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Relative error of two gradient blocks, measured on the block norm so that
/// near-zero individual entries do not dominate.
pub fn block_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of `f` over every entry of every tensor.
/// Parameter groups whose block relative error reaches `tol`.
pub fn failing_groups(analytic: &ModelParams, numeric: &[(String, Vec<f64>)], tol: f64) -> Vec<(String, f64)> {
    let mut failures = Vec::new();
    for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(numeric) {
        let err = block_rel_err(&a.data, n);
        if err >= tol {
            failures.push((name, err));
        }
    }
    failures
}

pub fn numeric_gradient<F>(params: &ModelParams, step: f64, f: F) -> Vec<(String, Vec<f64>)>
where
    F: Fn(&ModelParams) -> f64,
{
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let len = params.tensors()[ti].1.data.len();
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut p = params.clone();
            p.tensors_mut()[ti].1.data[i] += step;
            let up = f(&p);
            let mut p = params.clone();
            p.tensors_mut()[ti].1.data[i] -= step;
            let down = f(&p);
            *gi = (up - down) / (2.0 * step);
        }
        out.push((name.clone(), g));
    }
    out
}

/// A toy dataset, its vocabulary and a matching small model config.
pub struct World {
    pub dataset: pic_core::data::Dataset,
    pub vocab: pic_core::tokenizer::Vocab,
    pub model: ModelConfig,
}

/// Three objects, four traits, `train` training examples and 24 dev/test
/// examples each; a one-layer, 16-wide model.
pub fn small_world(train: usize, seed: u64) -> World {
    use pic_core::data::{generate_toy_dataset, ToyWorldConfig};
    let cfg = ToyWorldConfig {
        train_size: train,
        dev_size: 24,
        test_size: 24,
        ..ToyWorldConfig::new(3, 4)
    };
    let dataset = generate_toy_dataset(&cfg, seed).unwrap();
    let captions: Vec<&str> = dataset.train.iter().map(|e| e.caption.as_str()).collect();
    let vocab = pic_core::tokenizer::train_bpe(&captions, 64).unwrap();
    let arch = ModelConfig {
        num_layers: 1,
        hidden_dim: 16,
        num_heads: 2,
        max_len: 32,
        ..ModelConfig::default()
    };
    let model = pic_core::training::model_config_for(&dataset, &vocab, &arch);
    World { dataset, vocab, model }
}

/// Short training schedule for the small world.
pub fn quick_config() -> pic_core::training::TrainConfig {
    pic_core::training::TrainConfig {
        pretrain_lr: 3e-3,
        rl_lr: 1e-3,
        pretrain_batch: 8,
        rl_batch: 8,
        pretrain_epochs: 2,
        rl_epochs: 2,
        eval_beam: 2,
        ..Default::default()
    }
}
