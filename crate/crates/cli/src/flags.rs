//! Flag tables. Training and architecture flags are generated from the
//! default `TrainConfig` / `ModelConfig` values, so parsing, `--help` and the
//! config-file keys all come from one table.

use std::fmt;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use serde_json::{Map, Value};

use pic_core::data::ToyWorldConfig;
use pic_core::model::ModelConfig;
use pic_core::training::TrainConfig;

/// Bad flags, unknown config keys, or missing input files.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Help text for every `TrainConfig` field.
pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("pretrain_lr", "Adam learning rate for pre-training"),
    ("rl_lr", "Adam learning rate for REINFORCE fine-tuning"),
    ("pretrain_batch", "pre-training batch size (>= 2)"),
    ("rl_batch", "REINFORCE batch size (>= 2)"),
    ("pretrain_epochs", "pre-training epochs"),
    ("rl_epochs", "REINFORCE epochs"),
    ("alpha", "weight of cross-entropy in the pre-training loss"),
    ("beta", "weight of the image-discrimination reward"),
    ("gamma", "weight of the trait-discrimination reward"),
    ("margin", "hinge margin of the listener rewards"),
    ("seed", "seed for initialization, batching and roll-outs"),
    ("use_r_img", "enable the image-discrimination reward"),
    ("use_r_trait", "enable the trait-discrimination reward"),
    ("use_r_cider", "enable the CIDEr-D reward"),
    (
        "run_rl_phase",
        "whether an RL phase follows (enforces at least one reward)",
    ),
    ("pretrain_ce_only", "pre-train with cross-entropy only (alpha = 1)"),
    (
        "freeze_listener",
        "keep the pre-trained listener fixed as the reward model",
    ),
    ("grad_clip", "global gradient-norm clip"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("early_stopping_metric", "early-stopping metric (only dev_cider)"),
    ("eval_beam", "beam width for final evaluation"),
];

/// Help text for the architecture fields settable from the command line;
/// the remaining `ModelConfig` fields come from the dataset and vocab.
pub const MODEL_KEYS: &[(&str, &str)] = &[
    ("num_layers", "transformer layers"),
    ("hidden_dim", "hidden size (divisible by num_heads)"),
    ("num_heads", "attention heads"),
    ("max_len", "maximum caption length in tokens, including SOS/EOS"),
    ("injection_enabled", "inject image and trait rows into attention"),
];

fn kebab(key: &str) -> String {
    key.replace('_', "-")
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn defaults<T: serde::Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("configs are structs"),
    }
}

fn table_args(
    keys: &'static [(&'static str, &'static str)],
    defaults: &Map<String, Value>,
    heading: &'static str,
) -> Vec<Arg> {
    keys.iter()
        .map(|&(key, help)| {
            let default = &defaults[key];
            let arg = Arg::new(key)
                .long(kebab(key))
                .alias(key)
                .value_name("VALUE")
                .help(format!("{help} [default: {}]", show(default)))
                .help_heading(heading);
            match default {
                Value::Bool(_) => arg.value_parser(value_parser!(bool)).value_name("BOOL"),
                Value::Number(n) if n.is_u64() => arg.value_parser(value_parser!(u64)).value_name("N"),
                Value::Number(_) => arg.value_parser(value_parser!(f64)).value_name("X"),
                _ => arg.value_parser(value_parser!(String)),
            }
        })
        .collect()
}

fn train_args() -> Vec<Arg> {
    let mut args = table_args(TRAIN_KEYS, &defaults(&TrainConfig::default()), "Training");
    args.push(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("flat TOML file of training/architecture keys; flags take precedence"),
    );
    args.push(path("log", "write a JSON-lines training log here", false));
    args
}

fn model_args() -> Vec<Arg> {
    table_args(MODEL_KEYS, &defaults(&ModelConfig::default()), "Architecture")
}

fn path(name: &'static str, help: &'static str, required: bool) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .required(required)
        .help(help)
}

fn number<T>(name: &'static str, help: &'static str, default: T) -> Arg
where
    T: Clone + Send + Sync + ToString + std::str::FromStr + 'static,
    <T as std::str::FromStr>::Err: std::error::Error + Send + Sync + 'static,
{
    Arg::new(name)
        .long(name)
        .value_name("N")
        .value_parser(|s: &str| s.parse::<T>())
        .default_value(default.to_string())
        .help(help)
}

pub fn command() -> Command {
    let toy = ToyWorldConfig::default();
    let beam = TrainConfig::default().eval_beam;
    let data = || path("data", "dataset directory", true);
    let vocab = || path("vocab", "vocab JSON file", true);
    let checkpoint = || path("checkpoint", "checkpoint file", true);
    let split = || {
        Arg::new("split")
            .long("split")
            .value_parser(["train", "dev", "test"])
            .default_value("test")
            .help("dataset split")
    };
    Command::new("pic")
        .about("Personality-conditioned image captioning with a speaker-listener game")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("json")
                .long("json")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("print a machine-readable JSON summary"),
        )
        .arg(
            Arg::new("device")
                .long("device")
                .global(true)
                .default_value("cpu")
                .help("compute device (recorded only; everything runs on the CPU)"),
        )
        .arg(
            Arg::new("verbose")
                .long("verbose")
                .short('v')
                .global(true)
                .action(ArgAction::SetTrue)
                .help("log progress to stderr"),
        )
        .subcommand(
            Command::new("make-toy-data")
                .about("generate the synthetic toy-world dataset")
                .arg(path("out", "output directory", true))
                .arg(number("seed", "generator seed", 0u64))
                .arg(number("objects", "number of object kinds", toy.num_objects))
                .arg(number("traits", "number of traits", toy.num_traits))
                .arg(number("train", "train split size", toy.train_size))
                .arg(number("dev", "dev split size", toy.dev_size))
                .arg(number("test", "test split size", toy.test_size))
                .arg(number("noise", "feature noise scale", toy.noise_scale))
                .arg(number("grid-cells", "grid cells per image", toy.grid_cells))
                .arg(number("visual-dim", "feature dimension per cell", toy.visual_dim)),
        )
        .subcommand(
            Command::new("train-vocab")
                .about("train a BPE vocabulary on the training captions")
                .arg(data())
                .arg(number(
                    "vocab-size",
                    "target vocabulary size, including 4 reserved ids",
                    512usize,
                ))
                .arg(path("out", "output vocab JSON file", true)),
        )
        .subcommand(
            Command::new("pretrain")
                .about("pre-train speaker and listener (cross-entropy + ranking loss)")
                .arg(data())
                .arg(vocab())
                .arg(path("out", "output checkpoint", true))
                .arg(path("resume-from", "continue from this pretrain checkpoint", false))
                .args(train_args())
                .args(model_args()),
        )
        .subcommand(
            Command::new("rl-train")
                .about("fine-tune with self-critical REINFORCE")
                .arg(data())
                .arg(vocab())
                .arg(path("resume-from", "pretrain checkpoint to start from", true))
                .arg(path("out", "output checkpoint", true))
                .args(train_args()),
        )
        .subcommand(
            Command::new("generate")
                .about("decode captions with beam search (JSON lines)")
                .arg(checkpoint())
                .arg(vocab())
                .arg(data())
                .arg(split().conflicts_with("image-id"))
                .arg(
                    Arg::new("image-id")
                        .long("image-id")
                        .requires("trait")
                        .help("decode one image"),
                )
                .arg(
                    Arg::new("trait")
                        .long("trait")
                        .requires("image-id")
                        .help("trait name or id for --image-id"),
                )
                .arg(number("beam", "beam width", beam))
                .arg(path("out", "output JSON-lines file (default: stdout)", false)),
        )
        .subcommand(
            Command::new("evaluate")
                .about("score a checkpoint on a split")
                .arg(checkpoint())
                .arg(vocab())
                .arg(data())
                .arg(split())
                .arg(number("beam", "beam width", beam))
                .arg(path("out", "write the JSON report here", false))
                .arg(path("outputs", "write generated captions (JSON lines) here", false)),
        )
        .subcommand(
            Command::new("ablate")
                .about("train and evaluate every ablation row on the test split")
                .arg(data())
                .arg(vocab())
                .arg(path("out", "output JSON table", true))
                .arg(path(
                    "checkpoint-dir",
                    "also save the pretrain, CE-only and full checkpoints here",
                    false,
                ))
                .args(train_args())
                .args(model_args()),
        )
}

/// Resolved training and architecture settings.
pub struct Settings {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

fn flag_value(m: &ArgMatches, key: &str, default: &Value) -> Option<Value> {
    if m.value_source(key) != Some(ValueSource::CommandLine) {
        return None;
    }
    Some(match default {
        Value::Bool(_) => Value::from(*m.get_one::<bool>(key)?),
        Value::Number(n) if n.is_u64() => Value::from(*m.get_one::<u64>(key)?),
        Value::Number(_) => Value::from(*m.get_one::<f64>(key)?),
        _ => Value::from(m.get_one::<String>(key)?.clone()),
    })
}

fn load_file(path: &PathBuf) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("--config: cannot read {}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
    let mut out = Map::new();
    for (k, v) in table {
        let key = k.replace('-', "_");
        let known = TRAIN_KEYS.iter().chain(MODEL_KEYS).any(|(name, _)| *name == key);
        if !known {
            return Err(UsageError(format!("--config {}: unknown key {k:?}", path.display())).into());
        }
        out.insert(key, serde_json::to_value(v)?);
    }
    Ok(out)
}

fn resolve<T: serde::Serialize + serde::de::DeserializeOwned>(
    m: &ArgMatches,
    base: &T,
    keys: &[(&str, &str)],
    file: &Map<String, Value>,
) -> anyhow::Result<T> {
    let mut values = defaults(base);
    for &(key, _) in keys {
        if let Some(v) = file.get(key) {
            values.insert(key.to_string(), v.clone());
        }
        if m.try_contains_id(key).unwrap_or(false) {
            if let Some(v) = flag_value(m, key, &values[key].clone()) {
                values.insert(key.to_string(), v);
            }
        }
    }
    serde_json::from_value(Value::Object(values)).map_err(|e| UsageError(format!("invalid setting: {e}")).into())
}

/// Defaults, then the `--config` file, then explicit flags.
pub fn settings(m: &ArgMatches) -> anyhow::Result<Settings> {
    let file = match m.get_one::<PathBuf>("config") {
        Some(p) => load_file(p)?,
        None => Map::new(),
    };
    let train = resolve(m, &TrainConfig::default(), TRAIN_KEYS, &file)?;
    let model = resolve(m, &ModelConfig::default(), MODEL_KEYS, &file)?;
    Ok(Settings { train, model })
}
