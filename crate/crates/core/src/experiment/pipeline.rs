use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::config::{ExperimentConfig, Method};
use crate::decoding::{DecodeConfig, Decoder, ModelDecoder};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::eval::{compare_methods, likelihood_displacement_trace, EvalInputs, EvalReport, MethodRun};
use crate::model::{Checkpoint, ModelParams, Policy, ProjectionPair, VisualProjection};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::training::{
    init_projection_from, pretrain_projection, sft_train, train_decoupled, train_dpo, InitSource,
    TrainTrace,
};
use crate::world::{build_dataset, examples, Dataset, Example, Manifest, PreferenceSample, TaskKind};

const MAIN: &str = "main";

/// File locations under an experiment's output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.ckpt"))
    }

    pub fn trace(&self, stage: &str) -> PathBuf {
        self.root.join("traces").join(format!("{stage}.csv"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn eval_json(&self) -> PathBuf {
        self.reports_dir().join("eval.json")
    }

    pub fn eval_table(&self) -> PathBuf {
        self.reports_dir().join("eval.txt")
    }

    pub fn summary(&self) -> PathBuf {
        self.reports_dir().join("summary.txt")
    }
}

/// What a training command wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub trace: PathBuf,
    pub trace_rows: usize,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn gen_data(config: &ExperimentConfig) -> Result<Manifest> {
    let dataset = build_dataset(&config.dataset, config.stage_seed("data"))?;
    dataset.write(&Layout::new(&config.out_dir).data_dir())
}

/// Loads the dataset and checks it was generated from this config.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let dir = Layout::new(&config.out_dir).data_dir();
    if !dir.join("manifest.json").exists() {
        return Err(Error::MissingDependency(format!(
            "no dataset at {}; run gen-data first",
            dir.display()
        )));
    }
    let dataset = Dataset::load(&dir)?;
    if dataset.config != config.dataset || dataset.seed != config.stage_seed("data") {
        return Err(Error::Config(format!(
            "dataset at {} was generated from a different dataset config or seed; rerun gen-data",
            dir.display()
        )));
    }
    Ok(dataset)
}

fn load_checkpoint<S: Scalar>(config: &ExperimentConfig, stage: &str, needed_by: &str) -> Result<Checkpoint<S>> {
    let path = Layout::new(&config.out_dir).checkpoint(stage);
    if !path.exists() {
        return Err(Error::MissingDependency(format!(
            "{needed_by} needs the {stage} checkpoint at {}; run train-{stage} first",
            path.display()
        )));
    }
    Checkpoint::load(&path)
}

fn projection<'a, S: Scalar>(ckpt: &'a Checkpoint<S>, name: &str) -> Result<&'a VisualProjection<S>> {
    ckpt.projection(name).ok_or_else(|| Error::Format {
        path: format!("{} checkpoint", ckpt.stage),
        reason: format!("no projection named {name}"),
    })
}

fn save_stage<S: Scalar>(
    config: &ExperimentConfig,
    stage: &str,
    checkpoint: &Checkpoint<S>,
    trace: &TrainTrace,
) -> Result<StageOutput> {
    let layout = Layout::new(&config.out_dir);
    let bytes = checkpoint.to_bytes()?;
    let path = layout.checkpoint(stage);
    write_bytes(&path, &bytes)?;
    let trace_path = layout.trace(stage);
    trace.write_csv(&trace_path)?;
    Ok(StageOutput {
        checkpoint: path,
        checkpoint_hash: sha256_hex(&bytes),
        trace: trace_path,
        trace_rows: trace.len(),
    })
}

fn checkpoint<S: Scalar>(
    config: &ExperimentConfig,
    stage: &str,
    dataset: &Dataset,
    stage_config: serde_json::Value,
    model: ModelParams<S>,
    projections: Vec<(&str, VisualProjection<S>)>,
) -> Result<Checkpoint<S>> {
    Ok(Checkpoint {
        stage: stage.to_string(),
        seed: config.seed,
        metadata: json!({
            "dataset_config_hash": dataset.config.hash()?,
            "stage_seed": config.stage_seed(stage),
            "config": stage_config,
        }),
        model,
        projections: projections.into_iter().map(|(n, p)| (n.to_string(), p)).collect(),
    })
}

fn heldout<'d>(config: &ExperimentConfig, dataset: &'d Dataset) -> &'d [PreferenceSample] {
    dataset.split(config.eval.heldout)
}

pub fn train_sft<S: Scalar>(config: &ExperimentConfig) -> Result<StageOutput> {
    let dataset = load_dataset(config)?;
    let rng = Rng::new(config.stage_seed("sft"));
    let policy = Policy::<S>::init(&config.model, &mut rng.derive("init"))?;
    let probes = heldout(config, &dataset);
    let (policy, trace) = sft_train(&policy, &examples(&dataset.train), &examples(&probes), &config.sft, &rng)?;
    let ckpt = checkpoint(
        config,
        "sft",
        &dataset,
        serde_json::to_value(&config.sft)?,
        policy.model,
        vec![(MAIN, policy.projection)],
    )?;
    save_stage(config, "sft", &ckpt, &trace)
}

fn sft_policy<S: Scalar>(config: &ExperimentConfig, needed_by: &str) -> Result<Policy<S>> {
    let sft = load_checkpoint::<S>(config, "sft", needed_by)?;
    let projection = projection(&sft, MAIN)?.clone();
    Ok(Policy {
        model: sft.model,
        projection,
    })
}

pub fn train_dpo_stage<S: Scalar>(config: &ExperimentConfig) -> Result<StageOutput> {
    let policy = sft_policy::<S>(config, "train-dpo")?;
    let dataset = load_dataset(config)?;
    let rng = Rng::new(config.stage_seed("dpo"));
    let data = &dataset.train;
    let probes = heldout(config, &dataset);
    let reference = policy.snapshot();
    let (policy, trace) = train_dpo(&policy, &reference, &examples(&data), &examples(&probes), &config.dpo, &rng)?;
    let ckpt = checkpoint(
        config,
        "dpo",
        &dataset,
        serde_json::to_value(&config.dpo)?,
        policy.model,
        vec![(MAIN, policy.projection)],
    )?;
    save_stage(config, "dpo", &ckpt, &trace)
}

pub fn train_dcd_stage<S: Scalar>(config: &ExperimentConfig) -> Result<StageOutput> {
    let sft = sft_policy::<S>(config, "train-dcd")?;
    let dataset = load_dataset(config)?;
    let rng = Rng::new(config.stage_seed("dcd"));
    let data = &dataset.train;
    let probes = heldout(config, &dataset);
    let pretrained = if config.dcd.init_source == InitSource::PretrainStage {
        let describe: Vec<Example<'_>> = dataset
            .train
            .iter()
            .filter(|s| s.task == TaskKind::Describe)
            .map(PreferenceSample::example)
            .collect();
        Some(pretrain_projection(&sft.model, &describe, &config.pretrain, &rng.derive("pretrain"))?)
    } else {
        None
    };
    let init = init_projection_from(config.dcd.init_source, &sft.projection, pretrained.as_ref(), &sft.model, &rng)?;
    let (pair, trace) = train_decoupled(&sft.model, &init, &examples(&data), &examples(&probes), &config.dcd, &rng)?;
    let ckpt = checkpoint(
        config,
        "dcd",
        &dataset,
        serde_json::to_value(&config.dcd)?,
        sft.model,
        vec![
            ("sft", sft.projection),
            ("init", init.positive),
            ("positive", pair.positive),
            ("negative", pair.negative),
        ],
    )?;
    save_stage(config, "dcd", &ckpt, &trace)
}

/// Stage checkpoints loaded for evaluation.
struct Loaded<S: Scalar> {
    sft: Policy<S>,
    dpo: Option<Policy<S>>,
    /// (ψ trained, φ trained) and (ψ trained, φ untouched).
    dcd: Option<(ModelParams<S>, ProjectionPair<S>, ProjectionPair<S>)>,
}

fn load_for_methods<S: Scalar>(config: &ExperimentConfig, methods: &[Method]) -> Result<Loaded<S>> {
    let layout = Layout::new(&config.out_dir);
    for m in methods {
        for stage in std::iter::once("sft").chain(m.stage()) {
            if !layout.checkpoint(stage).exists() {
                return Err(Error::MissingDependency(format!(
                    "method '{}' needs the {stage} checkpoint at {}; run train-{stage} first",
                    m.name(),
                    layout.checkpoint(stage).display()
                )));
            }
        }
    }
    let needs = |stage| methods.iter().any(|m| m.stage() == Some(stage));
    let sft = sft_policy(config, "eval")?;
    let dpo = if needs("dpo") {
        let ckpt = load_checkpoint::<S>(config, "dpo", "eval")?;
        let projection = projection(&ckpt, MAIN)?.clone();
        Some(Policy {
            model: ckpt.model,
            projection,
        })
    } else {
        None
    };
    let dcd = if needs("dcd") {
        let ckpt = load_checkpoint::<S>(config, "dcd", "eval")?;
        let positive = projection(&ckpt, "positive")?.clone();
        let trained = ProjectionPair {
            positive: positive.clone(),
            negative: projection(&ckpt, "negative")?.clone(),
        };
        let pos_only = ProjectionPair {
            positive,
            negative: projection(&ckpt, "init")?.clone(),
        };
        Some((ckpt.model, trained, pos_only))
    } else {
        None
    };
    Ok(Loaded { sft, dpo, dcd })
}

fn plain_decoder<'a, S: Scalar>(policy: &'a Policy<S>, decode: &DecodeConfig, seed: u64) -> ModelDecoder<'a, S> {
    ModelDecoder {
        model: &policy.model,
        projection: &policy.projection,
        pair: None,
        config: decode.clone(),
        seed,
    }
}

/// Runs `methods` on the eval splits and writes `reports/eval.{json,txt}`.
pub fn evaluate<S: Scalar>(config: &ExperimentConfig, methods: &[Method]) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    let loaded = load_for_methods::<S>(config, methods)?;
    let dataset = load_dataset(config)?;
    let seed = config.stage_seed("eval");
    let sft = &loaded.sft;

    let decoders: Vec<(ModelDecoder<'_, S>, &ModelParams<S>, &VisualProjection<S>)> = methods
        .iter()
        .map(|&m| {
            let decode = config.decode_for(m);
            let plain = |policy| plain_decoder(policy, &decode, seed);
            match m {
                Method::Greedy | Method::Vcd | Method::OtherImage => (plain(sft), &sft.model, &sft.projection),
                Method::Dpo => {
                    let dpo = loaded.dpo.as_ref().expect("loaded for dpo");
                    (plain(dpo), &dpo.model, &dpo.projection)
                }
                Method::DcdNeg | Method::DcdPos | Method::DcdBoth => {
                    let (model, trained, pos_only) = loaded.dcd.as_ref().expect("loaded for dcd");
                    let pair = if m == Method::DcdPos { pos_only } else { trained };
                    let positive = if m == Method::DcdNeg { &sft.projection } else { &pair.positive };
                    let decoder = ModelDecoder {
                        model,
                        projection: &sft.projection,
                        pair: Some(pair),
                        config: decode.clone(),
                        seed,
                    };
                    (decoder, model, positive)
                }
            }
        })
        .collect();
    let runs: Vec<MethodRun<'_, S>> = methods
        .iter()
        .zip(&decoders)
        .map(|(m, (decoder, model, projection))| MethodRun {
            name: m.name().to_string(),
            decoder: decoder as &dyn Decoder,
            model,
            projection,
        })
        .collect();

    let heldout = heldout(config, &dataset);
    let inputs = EvalInputs {
        world: &dataset.world,
        describe: &dataset.eval_hallucination,
        general: &dataset.eval_general,
        heldout: &heldout,
        regimes: &config.eval.regimes,
        seed,
    };
    let report = compare_methods(&runs, &inputs, dataset.config.hash()?, Some(config.hash()?), config.seeds())?;
    let layout = Layout::new(&config.out_dir);
    write_bytes(&layout.eval_json(), &report.to_json()?)?;
    write_bytes(&layout.eval_table(), report.to_table().as_bytes())?;
    Ok(report)
}

/// Renders the stored report plus a likelihood summary of each trace.
pub fn report(config: &ExperimentConfig) -> Result<String> {
    let layout = Layout::new(&config.out_dir);
    let path = layout.eval_json();
    if !path.exists() {
        return Err(Error::MissingDependency(format!("no report at {}; run eval first", path.display())));
    }
    let stored: EvalReport = serde_json::from_slice(&std::fs::read(&path)?)?;
    let mut out = stored.to_table();
    let mut traces = BTreeMap::new();
    for stage in ["sft", "dpo", "dcd"] {
        let p = layout.trace(stage);
        if p.exists() {
            traces.insert(stage, TrainTrace::from_csv(&std::fs::read_to_string(&p)?)?);
        }
    }
    if !traces.is_empty() {
        let _ = writeln!(out, "\nheld-out likelihoods over training (first -> last logged step)");
        for (stage, trace) in &traces {
            if trace.len() < 2 {
                continue;
            }
            let d = likelihood_displacement_trace(trace)?;
            let first = trace.records[0];
            let _ = writeln!(
                out,
                "{stage:<4} logp_w {:.4} -> {:.4}  logp_l {:.4} -> {:.4}  margin {:+.4}  displaced {}",
                first.logp_w,
                first.logp_w + d.delta_logp_w,
                first.logp_l,
                first.logp_l + d.delta_logp_l,
                d.delta_margin,
                if d.displaced { "yes" } else { "no" },
            );
        }
    }
    write_bytes(&layout.summary(), out.as_bytes())?;
    Ok(out)
}

/// Every stage in order, then the configured evaluation.
pub fn run_all<S: Scalar>(config: &ExperimentConfig) -> Result<EvalReport> {
    gen_data(config)?;
    train_sft::<S>(config)?;
    train_dpo_stage::<S>(config)?;
    train_dcd_stage::<S>(config)?;
    evaluate::<S>(config, &config.eval.methods)
}
