//! Datasets of (image features, trait, caption) triples.
//!
//! On disk a dataset is a directory holding `manifest.json` and one
//! `{split}.jsonl` per split. The synthetic toy world places one or two
//! objects on the image grid; each object has a fixed random feature
//! signature, and the caption is the trait's template filled with the object
//! words in grid order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::FeatureMap;

pub const DATASET_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

const OBJECT_WORDS: [&str; 16] = [
    "cat", "dog", "bird", "car", "tree", "boat", "cake", "lamp", "horse", "chair", "flower", "train", "kite", "clock",
    "apple", "bridge",
];

const TRAIT_TEMPLATES: [(&str, &str); 12] = [
    ("critical", "that {object} looks bad to me"),
    ("happy", "what a lovely {object} to see"),
    ("sarcastic", "oh great another {object}"),
    ("curious", "i wonder where the {object} came from"),
    ("fearful", "that {object} scares me a lot"),
    ("romantic", "the {object} reminds me of my love"),
    ("bored", "just a {object} nothing more"),
    ("excited", "wow a {object} this is amazing"),
    ("nostalgic", "this {object} takes me back"),
    ("angry", "i hate this {object} so much"),
    ("calm", "a quiet {object} at peace"),
    ("humble", "i am not worthy of this {object}"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub image_id: String,
    pub features: FeatureMap,
    pub trait_id: usize,
    pub caption: String,
    /// Object words in grid order, when the example came from the toy world.
    pub objects: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub grid_cells: usize,
    pub visual_dim: usize,
    pub num_traits: usize,
    pub traits: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
    pub splits: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            _ => Err(Error::Dataset {
                file: name.to_string(),
                line: None,
                msg: "unknown split (expected train, dev or test)".into(),
            }),
        }
    }

    pub fn trait_name(&self, id: usize) -> &str {
        self.manifest.traits.get(id).map_or("?", String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    pub num_objects: usize,
    pub num_traits: usize,
    pub grid_cells: usize,
    pub visual_dim: usize,
    /// `(trait name, caption template)`; templates contain `{object}`.
    pub templates: Vec<(String, String)>,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub noise_scale: f64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self::new(8, 12)
    }
}

impl ToyWorldConfig {
    /// Default sizes with `num_objects` objects and `num_traits` traits.
    pub fn new(num_objects: usize, num_traits: usize) -> Self {
        Self {
            num_objects,
            num_traits,
            grid_cells: 4,
            visual_dim: 16,
            templates: default_templates(num_traits),
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            noise_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ToyConfig(m));
        if self.num_objects < 2 {
            return bad("need at least 2 objects".into());
        }
        if self.num_traits < 2 {
            return bad("need at least 2 traits".into());
        }
        if self.grid_cells < 2 || self.visual_dim == 0 {
            return bad("need at least 2 grid cells and a positive visual_dim".into());
        }
        if self.templates.len() != self.num_traits {
            return bad(format!(
                "{} templates for {} traits",
                self.templates.len(),
                self.num_traits
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.templates {
            if !t.contains("{object}") {
                return bad(format!("template for {name} lacks {{object}}"));
            }
            if !seen.insert(t) {
                return bad(format!("duplicate template {t:?}"));
            }
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return bad("noise_scale must be a non-negative number".into());
        }
        if self.train_size == 0 {
            return bad("train split must be non-empty".into());
        }
        Ok(())
    }

    pub fn object_words(&self) -> Vec<String> {
        object_words(self.num_objects)
    }
}

fn object_words(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            OBJECT_WORDS
                .get(i)
                .map_or_else(|| format!("thing{i}"), |w| w.to_string())
        })
        .collect()
}

/// `(trait, template)` pairs; traits beyond the built-in list get a generic template.
pub fn default_templates(num_traits: usize) -> Vec<(String, String)> {
    (0..num_traits)
        .map(|i| match TRAIT_TEMPLATES.get(i) {
            Some((n, t)) => (n.to_string(), t.to_string()),
            None => {
                let name = format!("trait{i}");
                let t = format!("the {{object}} feels {name}");
                (name, t)
            }
        })
        .collect()
}

/// Fills a template with one or two object words.
pub fn render_caption(template: &str, objects: &[String]) -> String {
    template.replace("{object}", &objects.join(" and "))
}

/// Object feature signatures, one row per object, drawn from `N(0, 1)`.
pub fn object_signatures(cfg: &ToyWorldConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..cfg.num_objects)
        .map(|_| {
            (0..cfg.visual_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Renders a scene (object index per occupied cell) into a feature map.
pub fn render_scene<R: Rng>(
    cfg: &ToyWorldConfig,
    signatures: &[Vec<f64>],
    placements: &[(usize, usize)],
    rng: &mut R,
) -> Result<FeatureMap> {
    let mut data = vec![0.0; cfg.grid_cells * cfg.visual_dim];
    for &(cell, obj) in placements {
        data[cell * cfg.visual_dim..(cell + 1) * cfg.visual_dim].copy_from_slice(&signatures[obj]);
    }
    if cfg.noise_scale > 0.0 {
        for v in &mut data {
            *v += cfg.noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    FeatureMap::new(cfg.grid_cells, cfg.visual_dim, data)
}

/// Generates train/dev/test splits of the toy world, deterministic in `seed`.
pub fn generate_toy_dataset(cfg: &ToyWorldConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let signatures = object_signatures(cfg, seed);
    let words = cfg.object_words();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make_split = |name: &str, size: usize| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(size);
        for i in 0..size {
            let count = rng.gen_range(1..=2);
            let mut cells: Vec<usize> = (0..cfg.grid_cells).collect();
            cells.shuffle(&mut rng);
            let mut cells = cells[..count].to_vec();
            cells.sort_unstable();
            // Objects are named in index order: injected grid rows carry no
            // position, so the caption must not depend on which cell holds what.
            let mut objs = rand::seq::index::sample(&mut rng, cfg.num_objects, count).into_vec();
            objs.sort_unstable();
            let placements: Vec<(usize, usize)> = cells.into_iter().zip(objs.iter().copied()).collect();
            let trait_id = rng.gen_range(0..cfg.num_traits);
            let features = render_scene(cfg, &signatures, &placements, &mut rng)?;
            let objects: Vec<String> = objs.iter().map(|&o| words[o].clone()).collect();
            out.push(Example {
                image_id: format!("{name}-{i:06}"),
                features,
                trait_id,
                caption: render_caption(&cfg.templates[trait_id].1, &objects),
                objects: Some(objects),
            });
        }
        Ok(out)
    };
    let train = make_split("train", cfg.train_size)?;
    let dev = make_split("dev", cfg.dev_size)?;
    let test = make_split("test", cfg.test_size)?;
    let manifest = Manifest {
        version: DATASET_VERSION,
        grid_cells: cfg.grid_cells,
        visual_dim: cfg.visual_dim,
        num_traits: cfg.num_traits,
        traits: cfg.templates.iter().map(|(n, _)| n.clone()).collect(),
        templates: Some(cfg.templates.iter().map(|(_, t)| t.clone()).collect()),
        objects: Some(words),
        splits: [("train", train.len()), ("dev", dev.len()), ("test", test.len())]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    };
    Ok(Dataset {
        manifest,
        train,
        dev,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    image_id: String,
    trait_id: usize,
    caption: String,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    objects: Option<Vec<String>>,
}

/// Writes `manifest.json` and the split files into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mpath = dir.join("manifest.json");
    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(&mpath, manifest + "\n").map_err(io_err(&mpath))?;
    for name in SPLITS {
        let path = dir.join(format!("{name}.jsonl"));
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        for ex in dataset.split(name)? {
            let line = ExampleLine {
                image_id: ex.image_id.clone(),
                trait_id: ex.trait_id,
                caption: ex.caption.clone(),
                features: ex.features.matrix().data.clone(),
                objects: ex.objects.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        file: mpath.display().to_string(),
        line: Some(e.line()),
        msg: e.to_string(),
    })?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Dataset {
            file: mpath.display().to_string(),
            line: None,
            msg: format!("unsupported dataset version {}", manifest.version),
        });
    }
    if manifest.traits.len() != manifest.num_traits {
        return Err(Error::Dataset {
            file: mpath.display().to_string(),
            line: None,
            msg: format!(
                "{} trait names for num_traits={}",
                manifest.traits.len(),
                manifest.num_traits
            ),
        });
    }
    let mut splits = Vec::new();
    for name in SPLITS {
        let path = dir.join(format!("{name}.jsonl"));
        let file_label = path.display().to_string();
        let err = |line: usize, msg: String| Error::Dataset {
            file: file_label.clone(),
            line: Some(line),
            msg,
        };
        let file = File::open(&path).map_err(io_err(&path))?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExampleLine = serde_json::from_str(&line).map_err(|e| err(lineno, e.to_string()))?;
            if rec.features.len() != manifest.grid_cells * manifest.visual_dim {
                return Err(err(
                    lineno,
                    format!("feature dim mismatch at image_id={}", rec.image_id),
                ));
            }
            if rec.trait_id >= manifest.num_traits {
                return Err(err(
                    lineno,
                    format!(
                        "trait_id {} out of range (num_traits={}) at image_id={}",
                        rec.trait_id, manifest.num_traits, rec.image_id
                    ),
                ));
            }
            let features = FeatureMap::new(manifest.grid_cells, manifest.visual_dim, rec.features)
                .map_err(|e| err(lineno, format!("{e} at image_id={}", rec.image_id)))?;
            examples.push(Example {
                image_id: rec.image_id,
                features,
                trait_id: rec.trait_id,
                caption: rec.caption,
                objects: rec.objects,
            });
        }
        if let Some(&want) = manifest.splits.get(name) {
            if want != examples.len() {
                return Err(Error::Dataset {
                    file: file_label.clone(),
                    line: None,
                    msg: format!("manifest declares {want} examples, found {}", examples.len()),
                });
            }
        }
        splits.push(examples);
    }
    let test = splits.pop().unwrap();
    let dev = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        manifest,
        train,
        dev,
        test,
    })
}

/// A mini-batch: indices into a split plus each member's distractor source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `distractor_index[i]` is the batch position supplying example `i`'s distractors.
    pub distractor_index: Vec<usize>,
}

/// Circular shift by one: `[1, 2, …, n-1, 0]`.
pub fn circular_distractors(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Shuffles `0..num_examples` deterministically by `(seed, epoch)` and cuts
/// it into batches; a trailing batch of one example joins the previous batch.
pub fn make_batches(num_examples: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 || num_examples < 2 {
        return Err(Error::BatchTooSmall);
    }
    let mut order: Vec<usize> = (0..num_examples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(0x5eed));
    order.shuffle(&mut rng);
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < 2) {
        let tail = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(tail);
    }
    Ok(groups
        .into_iter()
        .map(|indices| {
            let n = indices.len();
            Batch {
                indices,
                distractor_index: circular_distractors(n),
            }
        })
        .collect())
}
