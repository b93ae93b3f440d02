//! Two-phase training: listener-aware pre-training, then self-critical
//! REINFORCE fine-tuning, each with dev-CIDEr early stopping.

mod adam;
pub mod checkpoint;
mod config;
mod eval;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

pub use adam::{clip_grad_norm, Adam};
pub use checkpoint::{Checkpoint, Phase, RngState};
pub use config::TrainConfig;
pub use eval::{
    dev_cider, evaluate_checkpoint, listener_identification, listener_ranking_accuracy, run_ablation_suite,
    AblationOutcome, AblationRow, Evaluation, GeneratedCaption, ABLATION_ROWS,
};

use crate::agents::{compat_score, greedy_decode, sample_caption};
use crate::data::{make_batches, Dataset, Example};
use crate::error::{io_err, Error, Result};
use crate::metrics::{build_idf, cider, IdfTable};
use crate::model::{init_model, FeatureMap, Gradients, ModelConfig, ModelParams};
use crate::objectives::{
    policy_gradient_backward, pretrain_example, reward_img, reward_trait, PretrainItem, PretrainParts, RewardBreakdown,
    RewardWeights,
};
use crate::par;
use crate::tokenizer::{strip_special, Vocab};

/// Examples per work unit when spreading a batch over threads.
const GRAD_CHUNK: usize = 4;
const RL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// JSON-lines training log.
#[derive(Default)]
pub struct TrainLog {
    writer: Option<BufWriter<File>>,
    /// Where to dump a checkpoint if training diverges.
    pub diagnostic_path: Option<PathBuf>,
}

impl TrainLog {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            writer: Some(BufWriter::new(f)),
            diagnostic_path: None,
        })
    }

    pub fn record<T: Serialize>(&mut self, entry: &T) {
        if let Some(w) = self.writer.as_mut() {
            if serde_json::to_writer(&mut *w, entry).is_ok() {
                let _ = w.write_all(b"\n");
            }
        }
    }

    pub fn flush(&mut self) {
        if let Some(w) = self.writer.as_mut() {
            let _ = w.flush();
        }
    }
}

/// Model config whose data-dependent sizes come from the dataset and vocab.
pub fn model_config_for(dataset: &Dataset, vocab: &Vocab, arch: &ModelConfig) -> ModelConfig {
    ModelConfig {
        grid_cells: dataset.manifest.grid_cells,
        visual_dim: dataset.manifest.visual_dim,
        num_traits: dataset.manifest.num_traits,
        vocab_size: vocab.len(),
        ..arch.clone()
    }
}

/// Tokenizes gold captions, rejecting any longer than `max_len`.
pub fn encode_captions(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<u32>>> {
    examples
        .iter()
        .map(|ex| {
            let ids = vocab.encode(&ex.caption);
            if ids.len() > max_len {
                Err(Error::ExceedsMaxLen {
                    len: ids.len(),
                    max_len,
                })
            } else {
                Ok(ids)
            }
        })
        .collect()
}

fn check_compat(model: &ModelConfig, dataset: &Dataset, vocab: &Vocab) -> Result<()> {
    let m = &dataset.manifest;
    if model.vocab_size != vocab.len()
        || model.grid_cells != m.grid_cells
        || model.visual_dim != m.visual_dim
        || model.num_traits != m.num_traits
    {
        return Err(Error::InvalidConfig(format!(
            "model config (vocab {}, grid {}x{}, traits {}) does not match data (vocab {}, grid {}x{}, traits {})",
            model.vocab_size,
            model.grid_cells,
            model.visual_dim,
            model.num_traits,
            vocab.len(),
            m.grid_cells,
            m.visual_dim,
            m.num_traits
        )));
    }
    Ok(())
}

fn diverged(log: &mut TrainLog, ckpt: Checkpoint, phase: &str, epoch: usize, step: usize) -> Error {
    let diagnostic = log
        .diagnostic_path
        .clone()
        .filter(|p| checkpoint::save(&ckpt, p).is_ok());
    log.flush();
    Error::Diverged {
        phase: phase.to_string(),
        epoch,
        step,
        diagnostic,
    }
}

/// Sums per-chunk gradients in chunk order.
fn reduce<T>(params: &ModelParams, parts: Vec<Result<(Gradients, T)>>) -> Result<(Gradients, Vec<T>)> {
    let mut total = params.zeros_like();
    let mut stats = Vec::with_capacity(parts.len());
    for p in parts {
        let (g, s) = p?;
        total.axpy(1.0, &g);
        stats.push(s);
    }
    Ok((total, stats))
}

/// Mean pre-training loss and gradient over one batch.
pub fn pretrain_batch_grad(
    params: &ModelParams,
    items: &[PretrainItem<'_>],
    alpha: f64,
) -> Result<(PretrainParts, Gradients)> {
    let weight = 1.0 / items.len() as f64;
    let parts = par::map_chunks(items, GRAD_CHUNK, |chunk| {
        let mut g = params.zeros_like();
        let mut sum = PretrainParts::default();
        for item in chunk {
            let p = pretrain_example(params, item, alpha, weight, Some(&mut g))?;
            sum.ce += p.ce;
            sum.comp += p.comp;
            sum.loss += p.loss;
        }
        Ok((g, sum))
    });
    let (grads, sums) = reduce(params, parts)?;
    let mut mean = PretrainParts::default();
    for s in sums {
        mean.ce += s.ce * weight;
        mean.comp += s.comp * weight;
        mean.loss += s.loss * weight;
    }
    Ok((mean, grads))
}

fn pretrain_items<'a>(
    examples: &'a [Example],
    captions: &'a [Vec<u32>],
    batch: &crate::data::Batch,
) -> Vec<PretrainItem<'a>> {
    batch
        .indices
        .iter()
        .enumerate()
        .map(|(pos, &i)| PretrainItem {
            features: &examples[i].features,
            trait_id: examples[i].trait_id,
            caption: &captions[i],
            distractor_caption: &captions[batch.indices[batch.distractor_index[pos]]],
        })
        .collect()
}

/// Minimises `α·L_CE + (1-α)·L_comp`, keeping the epoch with the best dev CIDEr.
pub fn pretrain(
    config: &TrainConfig,
    model: &ModelConfig,
    dataset: &Dataset,
    vocab: &Vocab,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    config.validate()?;
    model.validate()?;
    let params = init_model(model, config.seed)?;
    let adam = Adam::new(
        &params,
        config.pretrain_lr,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    pretrain_loop(config, model, dataset, vocab, log, params, adam, Vec::new(), None)
}

/// Runs `config.pretrain_epochs` further pre-training epochs from a pretrain
/// checkpoint, continuing its optimizer state, batch order and dev history.
/// Training continues from the stored (best) parameters, which remain the
/// result unless a later epoch beats them on dev CIDEr.
pub fn pretrain_resume(
    config: &TrainConfig,
    dataset: &Dataset,
    vocab: &Vocab,
    start: &Checkpoint,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    config.validate()?;
    if start.phase != Phase::Pretrain {
        return Err(Error::TrainConfig(
            "can only resume pre-training from a pretrain checkpoint".into(),
        ));
    }
    check_vocab(start, vocab)?;
    let adam = match &start.optimizer {
        Some(a) => Adam {
            lr: config.pretrain_lr,
            ..a.clone()
        },
        None => Adam::new(
            &start.params,
            config.pretrain_lr,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        ),
    };
    let history = start.dev_history[..(start.rng.next_epoch as usize).min(start.dev_history.len())].to_vec();
    // The stored epoch stays eligible: further epochs must beat it to replace it.
    let kept = Some(start.best_dev_cider())
        .filter(|d| d.is_finite())
        .map(|d| (d, start.epoch, start.params.clone(), adam.clone()));
    pretrain_loop(
        config,
        &start.model_config,
        dataset,
        vocab,
        log,
        start.params.clone(),
        adam,
        history,
        kept,
    )
}

fn check_vocab(ckpt: &Checkpoint, vocab: &Vocab) -> Result<()> {
    let hash = vocab.hash();
    if ckpt.vocab_hash != hash {
        return Err(Error::VocabHashMismatch {
            checkpoint: ckpt.vocab_hash.clone(),
            vocab: hash,
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pretrain_loop(
    config: &TrainConfig,
    model: &ModelConfig,
    dataset: &Dataset,
    vocab: &Vocab,
    log: &mut TrainLog,
    mut params: ModelParams,
    mut adam: Adam,
    mut history: Vec<f64>,
    mut best: Option<(f64, usize, ModelParams, Adam)>,
) -> Result<Checkpoint> {
    check_compat(model, dataset, vocab)?;
    let alpha = config.effective_alpha();
    let captions = encode_captions(&dataset.train, vocab, model.max_len)?;
    let dev_idf = dev_reference_idf(dataset, vocab)?;
    let make = |params: ModelParams, adam: Option<Adam>, epoch: usize, history: &[f64]| Checkpoint {
        phase: Phase::Pretrain,
        model_config: model.clone(),
        params,
        listener: None,
        vocab_hash: vocab.hash(),
        train_config: config.clone(),
        epoch,
        dev_history: history.to_vec(),
        rng: RngState {
            seed: config.seed,
            next_epoch: history.len() as u64,
        },
        optimizer: adam,
    };

    let first = history.len();
    for epoch in first..first + config.pretrain_epochs {
        let batches = make_batches(dataset.train.len(), config.pretrain_batch, config.seed, epoch as u64)?;
        for (step, batch) in batches.iter().enumerate() {
            let items = pretrain_items(&dataset.train, &captions, batch);
            let (parts, mut grads) = pretrain_batch_grad(&params, &items, alpha)?;
            if !parts.loss.is_finite() || !grads.is_finite() {
                let ck = make(params.clone(), Some(adam.clone()), epoch, &history);
                return Err(diverged(log, ck, "pretrain", epoch + 1, step));
            }
            let norm = clip_grad_norm(&mut grads, config.grad_clip);
            adam.update(&mut params, &grads);
            log.record(&json!({
                "phase": "pretrain", "epoch": epoch + 1, "step": step, "loss": parts.loss,
                "ce": parts.ce, "comp": parts.comp, "grad_norm": norm, "lr": config.pretrain_lr,
            }));
        }
        let dev = dev_cider(&params, &dataset.dev, vocab, &dev_idf)?;
        history.push(dev);
        log.record(&json!({"phase": "pretrain", "epoch": epoch + 1, "dev_cider": dev}));
        log::info!("pretrain epoch {} dev CIDEr {:.4}", epoch + 1, dev);
        if best.as_ref().is_none_or(|(b, ..)| dev > *b) {
            best = Some((dev, epoch + 1, params.clone(), adam.clone()));
        }
    }
    log.flush();
    let (_, epoch, params, adam) = best.expect("at least one epoch");
    Ok(make(params, Some(adam), epoch, &history))
}

fn dev_reference_idf(dataset: &Dataset, vocab: &Vocab) -> Result<IdfTable> {
    let refs: Vec<Vec<u32>> = dataset
        .dev
        .iter()
        .map(|ex| strip_special(&vocab.encode(&ex.caption)).to_vec())
        .collect();
    if refs.is_empty() {
        return Err(Error::Dataset {
            file: "dev".into(),
            line: None,
            msg: "dev split is empty; early stopping needs it".into(),
        });
    }
    build_idf(&refs)
}

/// Scores a caption with every enabled reward component.
pub struct RewardModel<'a> {
    pub listener: &'a ModelParams,
    pub weights: RewardWeights,
    pub margin: f64,
    pub idf: &'a IdfTable,
}

impl RewardModel<'_> {
    /// Rewards for `caption` given the true image/trait and the distractors.
    pub fn score(
        &self,
        caption: &[u32],
        features: &FeatureMap,
        trait_id: usize,
        distractor_features: &FeatureMap,
        distractor_trait: usize,
        reference: &[u32],
    ) -> Result<RewardBreakdown> {
        let r_cider = cider(strip_special(caption), &[reference], self.idf)?;
        let (mut r_img, mut r_trait) = (0.0, 0.0);
        if self.weights.img > 0.0 || self.weights.trait_ > 0.0 {
            let s_true = compat_score(self.listener, features, trait_id, caption)?.0;
            if self.weights.img > 0.0 {
                let s = compat_score(self.listener, distractor_features, trait_id, caption)?.0;
                r_img = reward_img(s_true, s, self.margin);
            }
            if self.weights.trait_ > 0.0 {
                let s = compat_score(self.listener, features, distractor_trait, caption)?.0;
                r_trait = reward_trait(s_true, s, self.margin);
            }
        }
        Ok(RewardBreakdown {
            r_img,
            r_trait,
            r_cider,
            total: self.weights.combine(r_img, r_trait, r_cider),
            baseline: 0.0,
        })
    }
}

/// Per-example sampling stream, independent of thread scheduling.
pub fn rollout_rng(seed: u64, epoch: usize, step: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RL_SEED_SALT);
    rng.set_stream(((epoch as u64) << 40) | ((step as u64) << 20) | position as u64);
    rng
}

#[derive(Clone, Copy, Debug, Default)]
struct RlStats {
    surrogate: f64,
    reward: RewardBreakdown,
    sample_len: f64,
}

/// Self-critical REINFORCE from a pre-trained checkpoint.
pub fn rl_train(
    config: &TrainConfig,
    dataset: &Dataset,
    vocab: &Vocab,
    start: &Checkpoint,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    config.validate()?;
    if start.phase != Phase::Pretrain {
        return Err(Error::TrainConfig(
            "rl_train must start from a pretrain checkpoint".into(),
        ));
    }
    check_vocab(start, vocab)?;
    let hash = vocab.hash();
    let model = &start.model_config;
    check_compat(model, dataset, vocab)?;
    let weights = config.reward_weights()?;
    let captions = encode_captions(&dataset.train, vocab, model.max_len)?;
    let refs: Vec<Vec<u32>> = captions.iter().map(|c| strip_special(c).to_vec()).collect();
    let train_idf = build_idf(&refs)?;
    let dev_idf = dev_reference_idf(dataset, vocab)?;

    let frozen = config.freeze_listener.then(|| start.params.clone());
    let mut params = start.params.clone();
    let mut adam = Adam::new(
        &params,
        config.rl_lr,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams, Adam)> = None;
    let alpha = config.alpha;
    let make = |params: ModelParams, adam: Option<Adam>, epoch: usize, history: &[f64]| Checkpoint {
        phase: Phase::Rl,
        model_config: model.clone(),
        params,
        listener: frozen.clone(),
        vocab_hash: hash.clone(),
        train_config: config.clone(),
        epoch,
        dev_history: history.to_vec(),
        rng: RngState {
            seed: config.seed,
            next_epoch: history.len() as u64,
        },
        optimizer: adam,
    };

    for epoch in 0..config.rl_epochs {
        let batches = make_batches(
            dataset.train.len(),
            config.rl_batch,
            config.seed ^ RL_SEED_SALT,
            epoch as u64,
        )?;
        for (step, batch) in batches.iter().enumerate() {
            let n = batch.indices.len();
            let weight = 1.0 / n as f64;
            let positions: Vec<usize> = (0..n).collect();
            let listener = frozen.as_ref().unwrap_or(&params);
            let rewards = RewardModel {
                listener,
                weights,
                margin: config.margin,
                idf: &train_idf,
            };
            let parts = par::map_chunks(&positions, GRAD_CHUNK, |chunk| {
                let mut g = params.zeros_like();
                let mut stats = RlStats::default();
                for &pos in chunk {
                    let i = batch.indices[pos];
                    let j = batch.indices[batch.distractor_index[pos]];
                    let (ex, dx) = (&dataset.train[i], &dataset.train[j]);
                    let mut rng = rollout_rng(config.seed, epoch, step, pos);
                    let sample = sample_caption(&params, &ex.features, ex.trait_id, model.max_len, &mut rng)?;
                    let greedy = greedy_decode(&params, &ex.features, ex.trait_id, model.max_len)?;
                    let score = |cap: &[u32]| {
                        rewards.score(cap, &ex.features, ex.trait_id, &dx.features, dx.trait_id, &refs[i])
                    };
                    let mut rb = score(&sample.caption)?;
                    rb.baseline = score(&greedy.caption)?.total;
                    let sur = policy_gradient_backward(
                        &params,
                        &ex.features,
                        ex.trait_id,
                        &sample,
                        rb.total,
                        rb.baseline,
                        weight,
                        &mut g,
                    )?;
                    if frozen.is_none() && alpha < 1.0 {
                        let item = PretrainItem {
                            features: &ex.features,
                            trait_id: ex.trait_id,
                            caption: &captions[i],
                            distractor_caption: &captions[j],
                        };
                        pretrain_example(&params, &item, 0.0, (1.0 - alpha) * weight, Some(&mut g))?;
                    }
                    stats.surrogate += sur * weight;
                    stats.reward.r_img += rb.r_img * weight;
                    stats.reward.r_trait += rb.r_trait * weight;
                    stats.reward.r_cider += rb.r_cider * weight;
                    stats.reward.total += rb.total * weight;
                    stats.reward.baseline += rb.baseline * weight;
                    stats.sample_len += sample.caption.len() as f64 * weight;
                }
                Ok((g, stats))
            });
            let (mut grads, stats) = reduce(&params, parts)?;
            let mut s = RlStats::default();
            for st in stats {
                s.surrogate += st.surrogate;
                s.reward.r_img += st.reward.r_img;
                s.reward.r_trait += st.reward.r_trait;
                s.reward.r_cider += st.reward.r_cider;
                s.reward.total += st.reward.total;
                s.reward.baseline += st.reward.baseline;
                s.sample_len += st.sample_len;
            }
            if !s.surrogate.is_finite() || !grads.is_finite() {
                let ck = make(params.clone(), Some(adam.clone()), epoch, &history);
                return Err(diverged(log, ck, "rl", epoch + 1, step));
            }
            let norm = clip_grad_norm(&mut grads, config.grad_clip);
            adam.update(&mut params, &grads);
            log.record(&json!({
                "phase": "rl", "epoch": epoch + 1, "step": step, "loss": s.surrogate,
                "reward": s.reward, "sample_len": s.sample_len, "grad_norm": norm, "lr": config.rl_lr,
            }));
        }
        let dev = dev_cider(&params, &dataset.dev, vocab, &dev_idf)?;
        history.push(dev);
        log.record(&json!({"phase": "rl", "epoch": epoch + 1, "dev_cider": dev}));
        log::info!("rl epoch {} dev CIDEr {:.4}", epoch + 1, dev);
        if best.as_ref().is_none_or(|(b, ..)| dev > *b) {
            best = Some((dev, epoch + 1, params.clone(), adam.clone()));
        }
    }
    log.flush();
    let (_, epoch, params, adam) = best.expect("at least one epoch");
    Ok(make(params, Some(adam), epoch, &history))
}
