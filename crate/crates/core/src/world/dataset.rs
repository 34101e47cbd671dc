use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sample::{HallucinationPolicy, PreferenceSample, TaskKind, World};
use super::scene::Catalog;
use super::vocab::{Vocabulary, MAX_DIGIT};
use crate::digest::{sha256_hex, to_canonical_json};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Relative frequency of each task kind in the training and validation splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub describe: f64,
    pub exist: f64,
    pub count: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            describe: 0.4,
            exist: 0.4,
            count: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_objects: usize,
    pub image_dim: usize,
    pub cluster_size: usize,
    pub encoder_std: f64,
    pub feature_noise: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub hallucination_policy: HallucinationPolicy,
    pub train_size: usize,
    pub validation_size: usize,
    pub eval_hallucination_size: usize,
    pub eval_general_size: usize,
    pub task_mix: TaskMix,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_objects: 12,
            image_dim: 16,
            cluster_size: 3,
            encoder_std: 1.0,
            feature_noise: 0.5,
            min_objects: 1,
            max_objects: 4,
            hallucination_policy: HallucinationPolicy::CoOccur,
            train_size: 1000,
            validation_size: 200,
            eval_hallucination_size: 200,
            eval_general_size: 200,
            task_mix: TaskMix::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_objects < 2 {
            return fail(format!("dataset.num_objects must be at least 2, got {}", self.num_objects));
        }
        if self.image_dim == 0 || self.cluster_size == 0 {
            return fail("dataset.image_dim and dataset.cluster_size must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!(
                "dataset.min_objects ({}) must be in 1..=max_objects ({})",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects >= self.num_objects || self.max_objects > MAX_DIGIT - 1 {
            return fail(format!(
                "dataset.max_objects ({}) must be below num_objects ({}) and at most {}",
                self.max_objects,
                self.num_objects,
                MAX_DIGIT - 1
            ));
        }
        if !(self.encoder_std > 0.0) || !(self.feature_noise >= 0.0) {
            return fail("dataset.encoder_std must be positive and dataset.feature_noise non-negative".into());
        }
        for (name, size) in [
            ("train_size", self.train_size),
            ("validation_size", self.validation_size),
            ("eval_hallucination_size", self.eval_hallucination_size),
            ("eval_general_size", self.eval_general_size),
        ] {
            if size == 0 {
                return fail(format!("dataset.{name} must be positive"));
            }
        }
        let m = &self.task_mix;
        let weights = [m.describe, m.exist, m.count];
        if weights.iter().any(|w| !(*w >= 0.0)) || !(weights.iter().sum::<f64>() > 0.0) {
            return fail("dataset.task_mix weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&to_canonical_json(self)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    EvalHallucination,
    EvalGeneral,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Validation,
        Split::EvalHallucination,
        Split::EvalGeneral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::EvalHallucination => "eval_hallucination",
            Split::EvalGeneral => "eval_general",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub world: World,
    pub train: Vec<PreferenceSample>,
    pub validation: Vec<PreferenceSample>,
    pub eval_hallucination: Vec<PreferenceSample>,
    pub eval_general: Vec<PreferenceSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    /// SHA-256 of each written file.
    pub files: BTreeMap<String, String>,
    /// SHA-256 over the file hashes in name order.
    pub content_hash: String,
    pub config_hash: String,
}

impl Manifest {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

const WORLD_FILE: &str = "world.json";
const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn split(&self, split: Split) -> &[PreferenceSample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::EvalHallucination => &self.eval_hallucination,
            Split::EvalGeneral => &self.eval_general,
        }
    }

    /// Writes one JSON-lines file per split, the catalog and a manifest.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for split in Split::ALL {
            let mut bytes = Vec::new();
            for sample in self.split(split) {
                serde_json::to_writer(&mut bytes, sample)?;
                bytes.push(b'\n');
            }
            write_file(&dir.join(split.file_name()), &bytes)?;
            files.insert(split.file_name(), sha256_hex(&bytes));
            counts.insert(split.name().to_string(), self.split(split).len());
        }
        let mut world = serde_json::to_vec(&self.world.catalog)?;
        world.push(b'\n');
        write_file(&dir.join(WORLD_FILE), &world)?;
        files.insert(WORLD_FILE.to_string(), sha256_hex(&world));

        let joined: String = files.values().map(String::as_str).collect();
        let manifest = Manifest {
            config: self.config.clone(),
            seed: self.seed,
            counts,
            files,
            content_hash: sha256_hex(joined.as_bytes()),
            config_hash: self.config.hash()?,
        };
        write_file(&dir.join(MANIFEST_FILE), &manifest.to_bytes()?)?;
        Ok(manifest)
    }

    /// Reads a dataset written by [`Dataset::write`], checking file hashes.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)?;
        manifest.config.validate()?;
        let check = |name: &str, bytes: &[u8]| -> Result<()> {
            let expected = manifest.files.get(name).ok_or_else(|| Error::Format {
                path: manifest_path.display().to_string(),
                reason: format!("no hash for {name}"),
            })?;
            if *expected != sha256_hex(bytes) {
                return Err(Error::Format {
                    path: dir.join(name).display().to_string(),
                    reason: "content does not match the manifest hash".into(),
                });
            }
            Ok(())
        };
        let world_bytes = read_file(&dir.join(WORLD_FILE))?;
        check(WORLD_FILE, &world_bytes)?;
        let catalog: Catalog = serde_json::from_slice(&world_bytes)?;
        let mut splits = Vec::new();
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            let bytes = read_file(&path)?;
            check(&split.file_name(), &bytes)?;
            let mut samples = Vec::new();
            for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
                let line = line?;
                let sample = serde_json::from_str(&line).map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    reason: format!("line {}: {e}", i + 1),
                })?;
                samples.push(sample);
            }
            splits.push(samples);
        }
        let mut splits = splits.into_iter();
        let config = manifest.config;
        Ok(Dataset {
            world: world_for(&config, catalog),
            seed: manifest.seed,
            train: splits.next().unwrap_or_default(),
            validation: splits.next().unwrap_or_default(),
            eval_hallucination: splits.next().unwrap_or_default(),
            eval_general: splits.next().unwrap_or_default(),
            config,
        })
    }
}

fn world_for(config: &DatasetConfig, catalog: Catalog) -> World {
    World {
        vocab: Vocabulary::new(config.num_objects),
        catalog,
        feature_noise: config.feature_noise,
        policy: config.hallucination_policy,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Generates every split from `(config, seed)`.
///
/// Sample ids are consecutive across splits (train first), and each sample
/// draws from its own `sample#id` stream, so the result does not depend on
/// generation order.
pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let root = Rng::new(seed);
    let catalog = Catalog::generate(
        config.num_objects,
        config.image_dim,
        config.cluster_size,
        config.encoder_std,
        &mut root.derive("catalog"),
    );
    let world = world_for(config, catalog);
    let samples_root = root.derive("samples");
    let m = &config.task_mix;
    let mix = [m.describe, m.exist, m.count];

    let mut next_id = 0u64;
    let mut make = |size: usize, task: Option<TaskKind>| -> Result<Vec<PreferenceSample>> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            let id = next_id;
            next_id += 1;
            let mut rng = samples_root.derive_indexed("sample", id);
            let k = config.min_objects + rng.below(config.max_objects - config.min_objects + 1);
            let scene = world.catalog.generate_scene(id, &mut rng, k)?;
            let task = match task {
                Some(t) => t,
                None => TaskKind::ALL[rng.weighted_index(&mix).expect("positive mix")],
            };
            out.push(world.make_preference_sample(&scene, task, &mut rng)?);
        }
        Ok(out)
    };
    let train = make(config.train_size, None)?;
    let validation = make(config.validation_size, None)?;
    let eval_hallucination = make(config.eval_hallucination_size, Some(TaskKind::Describe))?;
    let eval_general = make(config.eval_general_size, Some(TaskKind::Count))?;
    Ok(Dataset {
        config: config.clone(),
        seed,
        world,
        train,
        validation,
        eval_hallucination,
        eval_general,
    })
}
