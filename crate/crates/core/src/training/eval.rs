use serde::{Deserialize, Serialize};

use super::{encode_captions, pretrain, rl_train, Checkpoint, TrainConfig, TrainLog};
use crate::agents::{beam_search, compat_score, greedy_decode};
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::metrics::{build_idf, cider, evaluate_corpus, IdfTable, MetricsReport};
use crate::model::{ModelConfig, ModelParams};
use crate::par;
use crate::tokenizer::{strip_special, Vocab};

/// Mean greedy-decode CIDEr-D over `examples`.
pub fn dev_cider(params: &ModelParams, examples: &[Example], vocab: &Vocab, idf: &IdfTable) -> Result<f64> {
    let max_len = params.config.max_len;
    let scores = par::map(examples, |ex| -> Result<f64> {
        let out = greedy_decode(params, &ex.features, ex.trait_id, max_len)?;
        let reference = vocab.encode(&ex.caption);
        cider(strip_special(&out.caption), &[strip_special(&reference)], idf)
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / examples.len().max(1) as f64)
}

fn win(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

/// Fraction of examples whose gold caption outscores the caption of the next
/// example (circular shift) under the listener; ties count one half.
pub fn listener_ranking_accuracy(listener: &ModelParams, examples: &[Example], captions: &[Vec<u32>]) -> Result<f64> {
    let n = examples.len();
    if n < 2 {
        return Err(Error::BatchTooSmall);
    }
    let wins = par::map_range(n, |i| -> Result<f64> {
        let ex = &examples[i];
        let s = compat_score(listener, &ex.features, ex.trait_id, &captions[i])?.0;
        let s_neg = compat_score(listener, &ex.features, ex.trait_id, &captions[(i + 1) % n])?.0;
        Ok(win(s, s_neg))
    });
    let mut total = 0.0;
    for w in wins {
        total += w?;
    }
    Ok(total / n as f64)
}

/// Image- and trait-identification accuracy of `captions` under the listener,
/// with distractors from the next example (circular shift); ties count one half.
pub fn listener_identification(
    listener: &ModelParams,
    examples: &[Example],
    captions: &[Vec<u32>],
) -> Result<(f64, f64)> {
    let n = examples.len();
    if n < 2 {
        return Err(Error::BatchTooSmall);
    }
    let wins = par::map_range(n, |i| -> Result<(f64, f64)> {
        let (ex, dx) = (&examples[i], &examples[(i + 1) % n]);
        let cap = &captions[i];
        let s = compat_score(listener, &ex.features, ex.trait_id, cap)?.0;
        let s_img = compat_score(listener, &dx.features, ex.trait_id, cap)?.0;
        let s_trait = compat_score(listener, &ex.features, dx.trait_id, cap)?.0;
        Ok((win(s, s_img), win(s, s_trait)))
    });
    let (mut img, mut tr) = (0.0, 0.0);
    for w in wins {
        let (a, b) = w?;
        img += a;
        tr += b;
    }
    Ok((img / n as f64, tr / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub image_id: String,
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub caption: String,
    pub logprob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub img_acc: f64,
    pub trait_acc: f64,
    pub outputs: Vec<GeneratedCaption>,
}

/// Beam-decodes every example and scores the result. CIDEr IDF comes from the
/// evaluated split's references.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    split: &str,
    vocab: &Vocab,
    beam: usize,
) -> Result<Evaluation> {
    let hash = vocab.hash();
    if ckpt.vocab_hash != hash {
        return Err(Error::VocabHashMismatch {
            checkpoint: ckpt.vocab_hash.clone(),
            vocab: hash,
        });
    }
    let examples = dataset.split(split)?;
    if examples.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let params = &ckpt.params;
    let max_len = params.config.max_len;
    let decoded = par::map(examples, |ex| {
        beam_search(params, &ex.features, ex.trait_id, beam, max_len)
    });
    let decoded = decoded.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<u32>> = examples
        .iter()
        .map(|ex| strip_special(&vocab.encode(&ex.caption)).to_vec())
        .collect();
    let cands: Vec<Vec<u32>> = decoded.iter().map(|d| strip_special(&d.caption).to_vec()).collect();
    let idf = build_idf(&refs)?;
    let report = evaluate_corpus(&cands, &refs, &idf)?;
    let captions: Vec<Vec<u32>> = decoded.iter().map(|d| d.caption.clone()).collect();
    let (img_acc, trait_acc) = if examples.len() >= 2 {
        listener_identification(ckpt.listener_params(), examples, &captions)?
    } else {
        (f64::NAN, f64::NAN)
    };
    let outputs = examples
        .iter()
        .zip(&decoded)
        .map(|(ex, d)| {
            Ok(GeneratedCaption {
                image_id: ex.image_id.clone(),
                trait_name: dataset.trait_name(ex.trait_id).to_string(),
                caption: vocab.decode(&d.caption)?,
                logprob: d.total_logprob,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        report,
        img_acc,
        trait_acc,
        outputs,
    })
}

pub const ABLATION_ROWS: [&str; 6] = [
    "full",
    "-R_img",
    "-R_trait",
    "-R_img-R_trait",
    "-R_img-R_trait-R_CIDEr",
    "pretrained_CE_only",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub img_acc: f64,
    pub trait_acc: f64,
    /// Best dev CIDEr of the row's final checkpoint.
    pub dev_cider: f64,
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub pretrain: Checkpoint,
    pub pretrain_ce_only: Checkpoint,
    pub full: Checkpoint,
}

/// Trains and evaluates every ablation row on the test split. The RL rows
/// share one pre-training run; the CE-only row pre-trains with `α = 1` and
/// then runs the full reward.
pub fn run_ablation_suite(
    config: &TrainConfig,
    model: &ModelConfig,
    dataset: &Dataset,
    vocab: &Vocab,
    log: &mut TrainLog,
) -> Result<AblationOutcome> {
    config.validate()?;
    let base = TrainConfig {
        pretrain_ce_only: false,
        run_rl_phase: true,
        use_r_img: true,
        use_r_trait: true,
        use_r_cider: true,
        ..config.clone()
    };
    let _ = encode_captions(&dataset.test, vocab, usize::MAX)?;
    let row = |name: &str, ck: &Checkpoint| -> Result<AblationRow> {
        let ev = evaluate_checkpoint(ck, dataset, "test", vocab, config.eval_beam)?;
        Ok(AblationRow {
            name: name.to_string(),
            bleu1: ev.report.bleu1,
            bleu4: ev.report.bleu4,
            rouge_l: ev.report.rouge_l,
            cider: ev.report.cider,
            img_acc: ev.img_acc,
            trait_acc: ev.trait_acc,
            dev_cider: ck.best_dev_cider(),
        })
    };

    let pre = pretrain(&base, model, dataset, vocab, log)?;
    let variants = [
        ("full", true, true, true),
        ("-R_img", false, true, true),
        ("-R_trait", true, false, true),
        ("-R_img-R_trait", false, false, true),
    ];
    let mut rows = Vec::new();
    let mut full = None;
    for (name, img, tr, cid) in variants {
        let cfg = TrainConfig {
            use_r_img: img,
            use_r_trait: tr,
            use_r_cider: cid,
            ..base.clone()
        };
        let ck = rl_train(&cfg, dataset, vocab, &pre, log)?;
        rows.push(row(name, &ck)?);
        if name == "full" {
            full = Some(ck);
        }
    }
    rows.push(row("-R_img-R_trait-R_CIDEr", &pre)?);
    let ce_cfg = TrainConfig {
        pretrain_ce_only: true,
        ..base.clone()
    };
    let pre_ce = pretrain(&ce_cfg, model, dataset, vocab, log)?;
    let ce_rl = rl_train(&ce_cfg, dataset, vocab, &pre_ce, log)?;
    rows.push(row("pretrained_CE_only", &ce_rl)?);
    Ok(AblationOutcome {
        rows,
        pretrain: pre,
        pretrain_ce_only: pre_ce,
        full: full.expect("full row trained"),
    })
}
