//! Checkpoint persistence: exact round trips, rejection of foreign files, and
//! resumed training that continues bit-for-bit.

mod common;

use common::{quick_config, small_world};
use pic_core::agents::greedy_decode;
use pic_core::error::Error;
use pic_core::model::forward;
use pic_core::training::checkpoint::{from_bytes, load, save, to_bytes, CHECKPOINT_VERSION};
use pic_core::training::{pretrain, pretrain_resume, rl_train, Checkpoint, Phase, TrainConfig, TrainLog};

fn pretrained(epochs: usize) -> (common::World, Checkpoint) {
    let w = small_world(48, 3);
    let cfg = TrainConfig {
        pretrain_epochs: epochs,
        ..quick_config()
    };
    let ck = pretrain(&cfg, &w.model, &w.dataset, &w.vocab, &mut TrainLog::disabled()).unwrap();
    (w, ck)
}

#[test]
fn save_then_load_is_exact() {
    let (w, ck) = pretrained(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save(&ck, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.phase, Phase::Pretrain);
    assert_eq!(back.vocab_hash, w.vocab.hash());
    assert!(!dir.path().join("a.tmp").exists());

    // Same parameters, so the same forward pass and decode.
    let ex = &w.dataset.dev[0];
    let ids = w.vocab.encode(&ex.caption);
    let a = forward(&ck.params, &ex.features, ex.trait_id, &ids).unwrap();
    let b = forward(&back.params, &ex.features, ex.trait_id, &ids).unwrap();
    assert_eq!(a.output, b.output);
    let ga = greedy_decode(&ck.params, &ex.features, ex.trait_id, w.model.max_len).unwrap();
    let gb = greedy_decode(&back.params, &ex.features, ex.trait_id, w.model.max_len).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn rl_checkpoint_round_trips_with_listener() {
    let (w, pre) = pretrained(1);
    let cfg = TrainConfig {
        rl_epochs: 1,
        ..quick_config()
    };
    let rl = rl_train(&cfg, &w.dataset, &w.vocab, &pre, &mut TrainLog::disabled()).unwrap();
    assert!(rl.listener.is_some());
    let back = from_bytes(&to_bytes(&rl).unwrap()).unwrap();
    assert_eq!(back, rl);
    assert_eq!(back.listener_params(), &pre.params);
}

#[test]
fn foreign_and_damaged_files_are_rejected() {
    let (_, ck) = pretrained(1);
    let bytes = to_bytes(&ck).unwrap();

    let needle = format!("\"version\":{CHECKPOINT_VERSION}");
    let text_start = 16;
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[text_start..text_start + header_len]).unwrap();
    assert!(header.contains(&needle));
    let mut wrong = bytes.clone();
    let at = text_start + header.find(&needle).unwrap() + needle.len() - 1;
    wrong[at] = b'7';
    match from_bytes(&wrong) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("version mismatch: file has 7"), "{msg}"),
        other => panic!("expected version mismatch, got {other:?}"),
    }

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(from_bytes(&magic), Err(Error::Checkpoint(_))));
    assert!(matches!(
        from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(from_bytes(&bytes[..20]), Err(Error::Checkpoint(_))));
    assert!(matches!(
        load(std::path::Path::new("/nonexistent/x.ckpt")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn identical_runs_write_identical_bytes() {
    let (_, a) = pretrained(2);
    let (_, b) = pretrained(2);
    assert_eq!(to_bytes(&a).unwrap(), to_bytes(&b).unwrap());
}

#[test]
fn reloaded_optimizer_takes_the_same_next_step() {
    let (_, ck) = pretrained(1);
    let mut back = from_bytes(&to_bytes(&ck).unwrap()).unwrap();
    let mut live = ck.clone();
    let mut grads = live.params.zeros_like();
    for (i, (_, t)) in grads.tensors_mut().into_iter().enumerate() {
        for (j, v) in t.data.iter_mut().enumerate() {
            *v = ((i * 31 + j) as f64 * 0.37).sin() * 1e-2;
        }
    }
    let (mut pa, mut pb) = (live.params.clone(), back.params.clone());
    live.optimizer.as_mut().unwrap().update(&mut pa, &grads);
    back.optimizer.as_mut().unwrap().update(&mut pb, &grads);
    assert_eq!(pa, pb);
    assert_eq!(live.optimizer, back.optimizer);
    assert_ne!(pa, ck.params);
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let (w, two) = pretrained(2);
    let (_, one) = pretrained(1);
    let reloaded = from_bytes(&to_bytes(&one).unwrap()).unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        ..quick_config()
    };
    let resumed = pretrain_resume(&cfg, &w.dataset, &w.vocab, &reloaded, &mut TrainLog::disabled()).unwrap();
    assert_eq!(resumed.dev_history, two.dev_history);
    assert_eq!(resumed.epoch, two.epoch);
    assert_eq!(resumed.params, two.params);
    assert_eq!(resumed.rng.next_epoch, 2);
}

#[test]
fn vocab_hash_is_checked_on_resume() {
    let (w, ck) = pretrained(1);
    let captions: Vec<&str> = w.dataset.train.iter().map(|e| e.caption.as_str()).collect();
    let other = pic_core::tokenizer::train_bpe(&captions, 60).unwrap();
    let err = pretrain_resume(&quick_config(), &w.dataset, &other, &ck, &mut TrainLog::disabled()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(&ck.vocab_hash) && msg.contains(&other.hash()), "{msg}");
    assert!(rl_train(&quick_config(), &w.dataset, &other, &ck, &mut TrainLog::disabled()).is_err());
}
