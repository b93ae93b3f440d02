//! `pic`: command-line driver for the personality captioning pipeline.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, missing input
//! files), 2 on runtime failures.

mod flags;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::ArgMatches;
use serde_json::{json, Value};

use pic_core::agents::beam_search;
use pic_core::data::{generate_toy_dataset, load_dataset, write_dataset, Dataset, ToyWorldConfig};
use pic_core::model::ModelConfig;
use pic_core::tokenizer::{train_bpe, Vocab};
use pic_core::training::{
    checkpoint, evaluate_checkpoint, model_config_for, pretrain, pretrain_resume, rl_train, run_ablation_suite,
    Checkpoint, GeneratedCaption, TrainLog,
};

use flags::{Settings, UsageError};

/// Version stamped into every JSON output.
const OUTPUT_VERSION: u32 = 1;

fn main() -> ExitCode {
    let matches = match flags::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let verbosity = if matches.get_flag("verbose") { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(verbosity)).init();

    let mut outputs = Outputs::default();
    match run(&matches, &mut outputs) {
        Ok(()) => {
            outputs.commit();
            ExitCode::SUCCESS
        }
        Err(e) => {
            outputs.discard();
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("error: {u}\n");
                let _ = flags::command().print_help();
                ExitCode::from(1)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        }
    }
}

/// Files written by the current command; removed again unless the command
/// succeeds.
#[derive(Default)]
struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn claim(&mut self, path: &Path) -> PathBuf {
        self.paths.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn commit(&mut self) {
        self.committed = true;
    }

    fn discard(&mut self) {
        if self.committed {
            return;
        }
        for p in self.paths.drain(..).rev() {
            if p.is_dir() {
                let _ = fs::remove_dir_all(&p);
            } else {
                let _ = fs::remove_file(&p);
            }
        }
    }
}

fn run(matches: &ArgMatches, outputs: &mut Outputs) -> anyhow::Result<()> {
    let json_out = matches.get_flag("json");
    let device = matches.get_one::<String>("device").cloned().unwrap_or_default();
    if device != "cpu" {
        log::warn!("device {device:?} requested; computation runs on the CPU");
    }
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let summary = match name {
        "make-toy-data" => cmd_make_toy_data(sub, outputs)?,
        "train-vocab" => cmd_train_vocab(sub, outputs)?,
        "pretrain" => cmd_pretrain(sub, outputs)?,
        "rl-train" => cmd_rl_train(sub, outputs)?,
        "generate" => cmd_generate(sub, outputs)?,
        "evaluate" => cmd_evaluate(sub, outputs)?,
        "ablate" => cmd_ablate(sub, outputs)?,
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    let mut summary = summary;
    summary.json["version"] = json!(OUTPUT_VERSION);
    summary.json["command"] = json!(name);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if json_out {
        writeln!(out, "{}", serde_json::to_string(&summary.json)?)?;
    } else {
        writeln!(out, "{}", summary.text)?;
    }
    Ok(())
}

struct Summary {
    text: String,
    json: Value,
}

fn path_arg(m: &ArgMatches, name: &str) -> PathBuf {
    m.get_one::<PathBuf>(name).cloned().expect("required by clap")
}

/// An input that must exist; a missing one is a usage error.
fn input_path(m: &ArgMatches, name: &str) -> anyhow::Result<PathBuf> {
    let p = path_arg(m, name);
    if !p.exists() {
        return Err(UsageError(format!("--{name}: {} does not exist", p.display())).into());
    }
    Ok(p)
}

fn load_data(m: &ArgMatches) -> anyhow::Result<Dataset> {
    let dir = input_path(m, "data")?;
    Ok(load_dataset(&dir)?)
}

fn load_vocab(m: &ArgMatches) -> anyhow::Result<Vocab> {
    let path = input_path(m, "vocab")?;
    Ok(Vocab::load(&path)?)
}

fn load_checkpoint(m: &ArgMatches, name: &str) -> anyhow::Result<Checkpoint> {
    let path = input_path(m, name)?;
    checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train_log(m: &ArgMatches, out: &Path, outputs: &mut Outputs) -> anyhow::Result<TrainLog> {
    let mut log = match m.get_one::<PathBuf>("log") {
        Some(p) => TrainLog::to_file(&outputs.claim(p))?,
        None => TrainLog::disabled(),
    };
    let mut diag = out.as_os_str().to_owned();
    diag.push(".diverged");
    log.diagnostic_path = Some(PathBuf::from(diag));
    Ok(log)
}

fn cmd_make_toy_data(m: &ArgMatches, outputs: &mut Outputs) -> anyhow::Result<Summary> {
    let out = path_arg(m, "out");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let objects = *m.get_one::<usize>("objects").expect("defaulted");
    let traits = *m.get_one::<usize>("traits").expect("defaulted");
    let cfg = ToyWorldConfig {
        grid_cells: *m.get_one::<usize>("grid-cells").expect("defaulted"),
        visual_dim: *m.get_one::<usize>("visual-dim").expect("defaulted"),
        train_size: *m.get_one::<usize>("train").expect("defaulted"),
        dev_size: *m.get_one::<usize>("dev").expect("defaulted"),
        test_size: *m.get_one::<usize>("test").expect("defaulted"),
        noise_scale: *m.get_one::<f64>("noise").expect("defaulted"),
        ..ToyWorldConfig::new(objects, traits)
    };
    let dataset = generate_toy_dataset(&cfg, seed)?;
    if !out.exists() {
        outputs.claim(&out);
    }
    write_dataset(&dataset, &out)?;
    let counts = json!({"train": dataset.train.len(), "dev": dataset.dev.len(), "test": dataset.test.len()});
    Ok(Summary {
        text: format!(
            "wrote toy dataset to {} ({} train / {} dev / {} test)",
            out.display(),
            dataset.train.len(),
            dataset.dev.len(),
            dataset.test.len()
        ),
        json: json!({"out": out, "seed": seed, "splits": counts}),
    })
}

fn cmd_train_vocab(m: &ArgMatches, outputs: &mut Outputs) -> anyhow::Result<Summary> {
    let dataset = load_data(m)?;
    let size = *m.get_one::<usize>("vocab-size").expect("defaulted");
    let out = path_arg(m, "out");
    let corpus: Vec<&str> = dataset.train.iter().map(|e| e.caption.as_str()).collect();
    let vocab = train_bpe(&corpus, size)?;
    vocab.save(&outputs.claim(&out))?;
    let hash = vocab.hash();
    Ok(Summary {
        text: format!("wrote {}-token vocab to {} (hash {hash})", vocab.len(), out.display()),
        json: json!({"out": out, "vocab_size": vocab.len(), "merges": vocab.merges().len(), "hash": hash}),
    })
}

fn checkpoint_summary(what: &str, out: &Path, ck: &Checkpoint) -> Summary {
    Summary {
        text: format!(
            "{what}: kept epoch {} (dev CIDEr {:.4}), history {:?}; wrote {}",
            ck.epoch,
            ck.best_dev_cider(),
            ck.dev_history,
            out.display()
        ),
        json: json!({
            "out": out, "epoch": ck.epoch, "best_dev_cider": ck.best_dev_cider(),
            "dev_history": ck.dev_history, "vocab_hash": ck.vocab_hash,
        }),
    }
}

fn cmd_pretrain(m: &ArgMatches, outputs: &mut Outputs) -> anyhow::Result<Summary> {
    let Settings { train, model } = flags::settings(m)?;
    let dataset = load_data(m)?;
    let vocab = load_vocab(m)?;
    let out = path_arg(m, "out");
    let mut log = train_log(m, &out, outputs)?;
    let ck = if m.contains_id("resume-from") {
        let start = load_checkpoint(m, "resume-from")?;
        pretrain_resume(&train, &dataset, &vocab, &start, &mut log)?
    } else {
        let model = model_config_for(&dataset, &vocab, &model);
        pretrain(&train, &model, &dataset, &vocab, &mut log)?
    };
    checkpoint::save(&ck, &outputs.claim(&out))?;
    Ok(checkpoint_summary("pretrain", &out, &ck))
}

fn cmd_rl_train(m: &ArgMatches, outputs: &mut Outputs) -> anyhow::Result<Summary> {
    let Settings { train, .. } = flags::settings(m)?;
    let dataset = load_data(m)?;
    let vocab = load_vocab(m)?;
    let start = load_checkpoint(m, "resume-from")?;
    let out = path_arg(m, "out");
    let mut log = train_log(m, &out, outputs)?;
    let ck = rl_train(&train, &dataset, &vocab, &start, &mut log)?;
    checkpoint::save(&ck, &outputs.claim(&out))?;
    Ok(checkpoint_summary("rl-train", &out, &ck))
}

/// Writes JSON lines to `--out` when given, otherwise to stdout.
fn write_lines(m: &ArgMatches, outputs: &mut Outputs, lines: &[Value]) -> anyhow::Result<Option<PathBuf>> {
    let mut buf = String::new();
    for l in lines {
        buf.push_str(&serde_json::to_string(l)?);
        buf.push('\n');
    }
    match m.get_one::<PathBuf>("out") {
        Some(p) => {
            fs::write(outputs.claim(p), buf).with_context(|| format!("writing {}", p.display()))?;
            Ok(Some(p.clone()))
        }
        None => {
            io::stdout().lock().write_all(buf.as_bytes())?;
            Ok(None)
        }
    }
}

fn caption_line(c: &GeneratedCaption) -> Value {
    let mut v = serde_json::to_value(c).expect("plain struct");
    v["version"] = json!(OUTPUT_VERSION);
    v
}

fn cmd_generate(m: &ArgMatches, outputs: &mut Outputs) -> anyhow::Result<Summary> {
    let ck = load_checkpoint(m, "checkpoint")?;
    let vocab = load_vocab(m)?;
    let dataset = load_data(m)?;
    let beam = *m.get_one::<usize>("beam").expect("defaulted");
    let captions = if let Some(image_id) = m.get_one::<String>("image-id") {
        let trait_arg = m.get_one::<String>("trait").expect("required with --image-id");
        let trait_id = match dataset.manifest.traits.iter().position(|t| t == trait_arg) {
            Some(i) => i,
            None => trait_arg
                .parse::<usize>()
                .ok()
                .filter(|&i| i < dataset.manifest.num_traits)
                .with_context(|| format!("unknown trait {trait_arg:?}"))?,
        };
        let ex = pic_core::data::SPLITS
            .iter()
            .flat_map(|s| dataset.split(s).unwrap_or_default())
            .find(|e| &e.image_id == image_id)
            .with_context(|| format!("image_id {image_id:?} not found in any split"))?;
        if ck.vocab_hash != vocab.hash() {
            bail!(pic_core::Error::VocabHashMismatch {
                checkpoint: ck.vocab_hash.clone(),
                vocab: vocab.hash()
            });
        }
        let d = beam_search(&ck.params, &ex.features, trait_id, beam, ck.model_config.max_len)?;
        vec![GeneratedCaption {
            image_id: ex.image_id.clone(),
            trait_name: dataset.trait_name(trait_id).to_string(),
            caption: vocab.decode(&d.caption)?,
            logprob: d.total_logprob,
        }]
    } else {
        let split = m.get_one::<String>("split").expect("defaulted");
        evaluate_checkpoint(&ck, &dataset, split, &vocab, beam)?.outputs
    };
    let lines: Vec<Value> = captions.iter().map(caption_line).collect();
    let out = write_lines(m, outputs, &lines)?;
    Ok(Summary {
        text: format!(
            "generated {} caption(s){}",
            captions.len(),
            out.as_ref()
                .map(|p| format!(" into {}", p.display()))
                .unwrap_or_default()
        ),
        json: json!({"generated": captions.len(), "out": out}),
    })
}

fn cmd_evaluate(m: &ArgMatches, outputs: &mut Outputs) -> anyhow::Result<Summary> {
    let ck = load_checkpoint(m, "checkpoint")?;
    let vocab = load_vocab(m)?;
    let dataset = load_data(m)?;
    let beam = *m.get_one::<usize>("beam").expect("defaulted");
    let split = m.get_one::<String>("split").expect("defaulted");
    let ev = evaluate_checkpoint(&ck, &dataset, split, &vocab, beam)?;
    let r = &ev.report;
    let report = json!({
        "version": OUTPUT_VERSION, "split": split, "beam": beam,
        "bleu1": r.bleu1, "bleu4": r.bleu4, "rougeL": r.rouge_l, "cider": r.cider, "n": r.n,
        "img_acc": ev.img_acc, "trait_acc": ev.trait_acc,
    });
    if let Some(p) = m.get_one::<PathBuf>("out") {
        fs::write(outputs.claim(p), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if let Some(p) = m.get_one::<PathBuf>("outputs") {
        let lines: String = ev.outputs.iter().map(|c| caption_line(c).to_string() + "\n").collect();
        fs::write(outputs.claim(p), lines)?;
    }
    Ok(Summary {
        text: format!(
            "{split} (n={}, beam={beam}): B@1 {:.4}  B@4 {:.4}  ROUGE-L {:.4}  CIDEr {:.4}  img-acc {:.3}  trait-acc {:.3}",
            r.n, r.bleu1, r.bleu4, r.rouge_l, r.cider, ev.img_acc, ev.trait_acc
        ),
        json: report,
    })
}

fn cmd_ablate(m: &ArgMatches, outputs: &mut Outputs) -> anyhow::Result<Summary> {
    let Settings { train, model } = flags::settings(m)?;
    let dataset = load_data(m)?;
    let vocab = load_vocab(m)?;
    let out = path_arg(m, "out");
    let mut log = train_log(m, &out, outputs)?;
    let model: ModelConfig = model_config_for(&dataset, &vocab, &model);
    let outcome = run_ablation_suite(&train, &model, &dataset, &vocab, &mut log)?;
    let table = json!({"version": OUTPUT_VERSION, "split": "test", "beam": train.eval_beam, "rows": outcome.rows});
    fs::write(outputs.claim(&out), serde_json::to_string_pretty(&table)? + "\n")?;
    if let Some(dir) = m.get_one::<PathBuf>("checkpoint-dir") {
        if !dir.exists() {
            outputs.claim(dir);
        }
        fs::create_dir_all(dir)?;
        checkpoint::save(&outcome.pretrain, &dir.join("pretrain.ckpt"))?;
        checkpoint::save(&outcome.pretrain_ce_only, &dir.join("pretrain_ce_only.ckpt"))?;
        checkpoint::save(&outcome.full, &dir.join("full.ckpt"))?;
    }
    let mut text = format!(
        "{:<26} {:>7} {:>7} {:>7} {:>7} {:>8} {:>9}\n",
        "row", "B@1", "B@4", "R", "C", "img-acc", "trait-acc"
    );
    for r in &outcome.rows {
        text.push_str(&format!(
            "{:<26} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8.3} {:>9.3}\n",
            r.name, r.bleu1, r.bleu4, r.rouge_l, r.cider, r.img_acc, r.trait_acc
        ));
    }
    text.push_str(&format!("wrote {}", out.display()));
    Ok(Summary { text, json: table })
}
