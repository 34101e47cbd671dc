use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    existence_accuracy, general_accuracy, hallucination_rate, other_image, ExistenceReport,
    GeneralReport, HallucinationReport, ProbeSet, Regime,
};
use crate::decoding::Decoder;
use crate::error::{Error, Result};
use crate::model::{sequence_log_prob, ImageFeature, ModelParams, VisualProjection};
use crate::scalar::Scalar;
use crate::world::{PreferenceSample, World};

pub const REPORT_FOOTER: &str = "Judged-quality scores have no oracle analogue here; \
every column is checked against the scene oracle.";

/// Stable column order of the text table.
pub fn table_columns(regimes: &[Regime]) -> Vec<String> {
    let mut cols: Vec<String> = ["method", "halluc_rate", "recall", "malformed"]
        .map(String::from)
        .to_vec();
    for r in regimes {
        cols.push(format!("{}_acc", r.name()));
        cols.push(format!("{}_f1", r.name()));
    }
    cols.extend(["general_acc", "logp_w", "logp_l"].map(String::from));
    cols
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub hallucination: HallucinationReport,
    pub existence: Vec<ExistenceReport>,
    pub general: GeneralReport,
    /// Mean held-out `log π(y_w)` and `log π(y_l)` under the method's positive path.
    pub heldout_logp_w: f64,
    pub heldout_logp_l: f64,
}

impl MethodReport {
    pub fn existence(&self, regime: Regime) -> Option<&ExistenceReport> {
        self.existence.iter().find(|e| e.regime == regime)
    }

    fn cells(&self) -> Vec<String> {
        let f = |x: f64| format!("{x:.4}");
        let mut cells = vec![
            self.method.clone(),
            f(self.hallucination.rate),
            f(self.hallucination.recall),
            self.hallucination.malformed.to_string(),
        ];
        for e in &self.existence {
            cells.push(f(e.accuracy));
            cells.push(f(e.f1));
        }
        cells.extend([f(self.general.accuracy), f(self.heldout_logp_w), f(self.heldout_logp_l)]);
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
    pub regimes: Vec<Regime>,
    pub dataset_config_hash: String,
    pub experiment_config_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub footer: String,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// Aligned text table; floats printed to four decimals.
    pub fn to_table(&self) -> String {
        let header = table_columns(&self.regimes);
        let rows: Vec<Vec<String>> = self.methods.iter().map(MethodReport::cells).collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, &rule);
        for r in &rows {
            line(&mut out, r);
        }
        let _ = writeln!(out, "\n{}", self.footer);
        out
    }
}

/// One method to evaluate: how it decodes, and which θ and projection
/// define its likelihoods.
pub struct MethodRun<'a, S> {
    pub name: String,
    pub decoder: &'a dyn Decoder,
    pub model: &'a ModelParams<S>,
    pub projection: &'a VisualProjection<S>,
}

/// Splits shared by every method.
pub struct EvalInputs<'a> {
    pub world: &'a World,
    /// DESCRIBE samples for the hallucination rate; their scenes also feed the probes.
    pub describe: &'a [PreferenceSample],
    pub general: &'a [PreferenceSample],
    /// Preference pairs for the held-out likelihood columns.
    pub heldout: &'a [PreferenceSample],
    pub regimes: &'a [Regime],
    pub seed: u64,
}

/// Mean `log π(y_w)` and `log π(y_l)` over `samples`.
pub fn heldout_log_likelihoods<S: Scalar>(
    model: &ModelParams<S>,
    projection: &VisualProjection<S>,
    samples: &[PreferenceSample],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let pairs: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let w = sequence_log_prob(model, projection, &s.x, &s.v, &s.y_w)?.widen();
            let l = sequence_log_prob(model, projection, &s.x, &s.v, &s.y_l)?.widen();
            Ok((w, l))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    Ok((
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

/// The probe sets every method is scored on, plus the matching other-image list.
pub fn build_probes(inputs: &EvalInputs<'_>) -> Result<Vec<(ProbeSet, Vec<ImageFeature>)>> {
    inputs
        .regimes
        .iter()
        .map(|&regime| {
            let set = ProbeSet::build(inputs.world, inputs.describe, regime, inputs.seed)?;
            let others = (0..set.probes.len())
                .map(|i| other_image(inputs.describe, i / 2, inputs.seed).clone())
                .collect();
            Ok((set, others))
        })
        .collect()
}

/// Scores a single method on the shared splits and probe sets.
pub fn evaluate_method<S: Scalar>(
    run: &MethodRun<'_, S>,
    inputs: &EvalInputs<'_>,
    probes: &[(ProbeSet, Vec<ImageFeature>)],
) -> Result<MethodReport> {
    let hallucination = hallucination_rate(run.decoder, inputs.world, inputs.describe, inputs.seed)?;
    let existence = probes
        .iter()
        .map(|(set, others)| existence_accuracy(run.decoder, inputs.world, set, others))
        .collect::<Result<Vec<_>>>()?;
    let general = general_accuracy(run.decoder, inputs.world, inputs.general, inputs.seed)?;
    let (heldout_logp_w, heldout_logp_l) = heldout_log_likelihoods(run.model, run.projection, inputs.heldout)?;
    Ok(MethodReport {
        method: run.name.clone(),
        hallucination,
        existence,
        general,
        heldout_logp_w,
        heldout_logp_l,
    })
}

/// Runs every method on identical splits and probes. Rows follow `runs`.
pub fn compare_methods<S: Scalar>(
    runs: &[MethodRun<'_, S>],
    inputs: &EvalInputs<'_>,
    dataset_config_hash: String,
    experiment_config_hash: Option<String>,
    seeds: BTreeMap<String, u64>,
) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    let probes = build_probes(inputs)?;
    let methods = runs
        .iter()
        .map(|run| evaluate_method(run, inputs, &probes))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        methods,
        regimes: inputs.regimes.to_vec(),
        dataset_config_hash,
        experiment_config_hash,
        seeds,
        footer: REPORT_FOOTER.to_string(),
    })
}
