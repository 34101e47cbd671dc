use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{DecodeRequest, Decoder};
use crate::error::{Error, Result};
use crate::model::{ImageFeature, TokenSequence};
use crate::rng::Rng;
use crate::training::TrainTrace;
use crate::world::{vocab, PreferenceSample, Scene, World};

/// Image of a different sample, chosen by a seeded draw keyed on the sample id.
pub fn other_image<'a>(samples: &'a [PreferenceSample], index: usize, seed: u64) -> &'a ImageFeature {
    if samples.len() < 2 {
        return &samples[index].v;
    }
    let mut rng = Rng::new(seed).derive_indexed("other_image", samples[index].id);
    let mut j = rng.below(samples.len() - 1);
    if j >= index {
        j += 1;
    }
    &samples[j].v
}

/// Decodes every item in parallel, keeping input order.
fn decode_all<'a, T: Sync>(
    decoder: &dyn Decoder,
    items: &'a [T],
    request: impl Fn(usize, &'a T) -> DecodeRequest<'a> + Sync,
) -> Result<Vec<TokenSequence>> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, item)| decoder.decode(&request(i, item)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    /// Fraction of responses naming at least one absent object.
    pub rate: f64,
    pub hallucinated: usize,
    /// Responses with no object or no EOS; never counted as hallucinated.
    pub malformed: usize,
    pub total: usize,
    /// Mean fraction of present objects that were named.
    pub recall: f64,
}

/// Scores DESCRIBE responses against the scenes.
pub fn score_descriptions(world: &World, scenes: &[&Scene], responses: &[TokenSequence]) -> HallucinationReport {
    let (mut hallucinated, mut malformed, mut recall) = (0usize, 0usize, 0.0f64);
    for (scene, response) in scenes.iter().zip(responses) {
        let mentions = world.parse_mentions(response);
        if mentions.malformed() {
            malformed += 1;
        } else if mentions.objects.iter().any(|&o| !scene.contains(o)) {
            hallucinated += 1;
        }
        let named = scene.objects.iter().filter(|o| mentions.objects.contains(o)).count();
        recall += named as f64 / scene.objects.len() as f64;
    }
    let total = responses.len();
    HallucinationReport {
        rate: hallucinated as f64 / total as f64,
        hallucinated,
        malformed,
        total,
        recall: recall / total as f64,
    }
}

/// Hallucination rate of `decoder` on DESCRIBE samples.
pub fn hallucination_rate(
    decoder: &dyn Decoder,
    world: &World,
    samples: &[PreferenceSample],
    seed: u64,
) -> Result<HallucinationReport> {
    if samples.is_empty() {
        return Err(Error::Config("hallucination_rate needs a non-empty eval set".into()));
    }
    let prompt = world.describe_prompt();
    let responses = decode_all(decoder, samples, |i, s| DecodeRequest {
        key: s.id,
        x: &prompt,
        v: &s.v,
        other: other_image(samples, i, seed),
    })?;
    let scenes: Vec<&Scene> = samples.iter().map(|s| &s.scene).collect();
    Ok(score_descriptions(world, &scenes, &responses))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Random,
    Popular,
    Adversarial,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Random, Regime::Popular, Regime::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Random => "random",
            Regime::Popular => "popular",
            Regime::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub sample_id: u64,
    pub scene: Scene,
    pub v: ImageFeature,
    pub object: usize,
    pub present: bool,
}

/// Existence probes: one present and one absent object per image, so the
/// set is balanced 50/50 by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub regime: Regime,
    pub probes: Vec<Probe>,
}

impl ProbeSet {
    pub fn build(world: &World, samples: &[PreferenceSample], regime: Regime, seed: u64) -> Result<Self> {
        let root = Rng::new(seed).derive(regime.name());
        let mut probes = Vec::with_capacity(samples.len() * 2);
        for s in samples {
            let mut rng = root.derive_indexed("probe", s.id);
            let scene = &s.scene;
            let present = scene.objects[rng.below(scene.objects.len())];
            let absent = match regime {
                Regime::Random => {
                    let pool = world.catalog.absent_objects(scene);
                    (!pool.is_empty()).then(|| pool[rng.below(pool.len())])
                }
                Regime::Popular => world.catalog.most_popular_absent(scene),
                Regime::Adversarial => world.catalog.most_cooccurring_absent(scene),
            }
            .ok_or_else(|| Error::Config(format!("scene {} has no absent object to probe", s.id)))?;
            for (object, is_present) in [(present, true), (absent, false)] {
                probes.push(Probe {
                    sample_id: s.id,
                    scene: scene.clone(),
                    v: s.v.clone(),
                    object,
                    present: is_present,
                });
            }
        }
        Ok(Self { regime, probes })
    }

    /// Fraction of probes whose object is present.
    pub fn balance(&self) -> f64 {
        self.probes.iter().filter(|p| p.present).count() as f64 / self.probes.len() as f64
    }
}

/// Counts with "yes" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceReport {
    pub regime: Regime,
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// Answers whose first token is neither yes nor no. Each one is scored
    /// as wrong: a false negative on a present object, a false positive on
    /// an absent one.
    pub malformed: usize,
}

pub fn score_existence(probes: &ProbeSet, responses: &[TokenSequence]) -> ExistenceReport {
    let mut c = Confusion::default();
    let mut malformed = 0;
    for (p, r) in probes.probes.iter().zip(responses) {
        let said_yes = match r.first() {
            Some(&vocab::YES) => Some(true),
            Some(&vocab::NO) => Some(false),
            _ => None,
        };
        match (p.present, said_yes) {
            (true, Some(true)) => c.tp += 1,
            (false, Some(false)) => c.tn += 1,
            (false, Some(true)) => c.fp += 1,
            (true, Some(false)) => c.fn_ += 1,
            (present, None) => {
                malformed += 1;
                if present {
                    c.fn_ += 1;
                } else {
                    c.fp += 1;
                }
            }
        }
    }
    ExistenceReport {
        regime: probes.regime,
        accuracy: c.accuracy(),
        f1: c.f1(),
        confusion: c,
        malformed,
    }
}

/// Asks the EXIST template for every probe and scores the yes/no answers.
pub fn existence_accuracy(
    decoder: &dyn Decoder,
    world: &World,
    probes: &ProbeSet,
    others: &[ImageFeature],
) -> Result<ExistenceReport> {
    if probes.probes.is_empty() {
        return Err(Error::Config("existence_accuracy needs probes".into()));
    }
    let prompts: Vec<TokenSequence> = probes.probes.iter().map(|p| world.exist_prompt(p.object)).collect();
    let responses = decode_all(decoder, &probes.probes, |i, p| DecodeRequest {
        key: p.sample_id * 2 + u64::from(!p.present),
        x: &prompts[i],
        v: &p.v,
        other: &others[i % others.len()],
    })?;
    Ok(score_existence(probes, &responses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralReport {
    pub accuracy: f64,
    pub correct: usize,
    /// Responses not starting with a digit.
    pub malformed: usize,
    pub total: usize,
}

pub fn score_general(world: &World, samples: &[PreferenceSample], responses: &[TokenSequence]) -> GeneralReport {
    let mut correct = 0;
    let mut malformed = 0;
    for (s, r) in samples.iter().zip(responses) {
        if r.first().and_then(|&t| world.vocab.token_digit(t)).is_none() {
            malformed += 1;
        } else if *r == s.y_w {
            correct += 1;
        }
    }
    GeneralReport {
        accuracy: correct as f64 / samples.len() as f64,
        correct,
        malformed,
        total: samples.len(),
    }
}

/// Exact-match accuracy on the general (COUNT) split.
pub fn general_accuracy(
    decoder: &dyn Decoder,
    world: &World,
    samples: &[PreferenceSample],
    seed: u64,
) -> Result<GeneralReport> {
    if samples.is_empty() {
        return Err(Error::Config("general_accuracy needs a non-empty split".into()));
    }
    let responses = decode_all(decoder, samples, |i, s| DecodeRequest {
        key: s.id,
        x: &s.x,
        v: &s.v,
        other: other_image(samples, i, seed),
    })?;
    Ok(score_general(world, samples, &responses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    /// `logp_w` fell while the margin grew.
    pub displaced: bool,
    pub delta_logp_w: f64,
    pub delta_logp_l: f64,
    pub delta_margin: f64,
}

/// Compares the first and last records of a training trace.
pub fn likelihood_displacement_trace(trace: &TrainTrace) -> Result<Displacement> {
    if trace.records.len() < 2 {
        return Err(Error::Config("a displacement check needs at least two trace records".into()));
    }
    let first = trace.records[0];
    let last = trace.records[trace.records.len() - 1];
    Ok(Displacement {
        displaced: last.logp_w < first.logp_w && last.margin > first.margin,
        delta_logp_w: last.logp_w - first.logp_w,
        delta_logp_l: last.logp_l - first.logp_l,
        delta_margin: last.margin - first.margin,
    })
}
