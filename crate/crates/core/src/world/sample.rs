use serde::{Deserialize, Serialize};

use super::scene::{Catalog, Scene};
use super::vocab::{self, Vocabulary, MAX_DIGIT};
use crate::error::{Error, Result};
use crate::model::{ImageFeature, Token, TokenSequence};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Describe,
    Exist,
    Count,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Describe, TaskKind::Exist, TaskKind::Count];
}

/// How the absent object of a hallucinated response is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationPolicy {
    /// Proportional to co-occurrence with the present objects.
    CoOccur,
    /// Proportional to popularity.
    Popular,
    Uniform,
}

/// One preference record `(x, v, y_w, y_l)` plus evaluation-only ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub id: u64,
    pub task: TaskKind,
    pub x: TokenSequence,
    pub v: ImageFeature,
    pub y_w: TokenSequence,
    pub y_l: TokenSequence,
    pub scene: Scene,
}

/// The part of a sample that training and decoding may see.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [Token],
    pub v: &'a ImageFeature,
    pub y_w: &'a [Token],
    pub y_l: &'a [Token],
}

impl PreferenceSample {
    pub fn example(&self) -> Example<'_> {
        Example {
            x: &self.x,
            v: &self.v,
            y_w: &self.y_w,
            y_l: &self.y_l,
        }
    }
}

pub fn examples(samples: &[PreferenceSample]) -> Vec<Example<'_>> {
    samples.iter().map(PreferenceSample::example).collect()
}

/// Everything needed to turn scenes into samples.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub vocab: Vocabulary,
    pub catalog: Catalog,
    pub feature_noise: f64,
    pub policy: HallucinationPolicy,
}

/// Parsed object list of a DESCRIBE response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectMentions {
    pub objects: Vec<usize>,
    pub terminated: bool,
}

impl ObjectMentions {
    /// No object named, or no EOS before the length limit.
    pub fn malformed(&self) -> bool {
        self.objects.is_empty() || !self.terminated
    }
}

impl World {
    pub fn describe_prompt(&self) -> TokenSequence {
        vec![vocab::BOS, vocab::ASK_DESCRIBE, vocab::QUERY]
    }

    pub fn exist_prompt(&self, object: usize) -> TokenSequence {
        vec![vocab::BOS, vocab::ASK_EXIST, self.vocab.object_token(object), vocab::QUERY]
    }

    pub fn count_prompt(&self) -> TokenSequence {
        vec![vocab::BOS, vocab::ASK_COUNT, vocab::QUERY]
    }

    /// Objects joined by separators, then EOS.
    pub fn object_list(&self, objects: &[usize]) -> TokenSequence {
        let mut out = Vec::with_capacity(objects.len() * 2);
        for (i, &o) in objects.iter().enumerate() {
            if i > 0 {
                out.push(vocab::SEP);
            }
            out.push(self.vocab.object_token(o));
        }
        out.push(vocab::EOS);
        out
    }

    pub fn parse_mentions(&self, tokens: &[Token]) -> ObjectMentions {
        let mut objects = Vec::new();
        let mut terminated = false;
        for &t in tokens {
            if t == vocab::EOS {
                terminated = true;
                break;
            }
            if let Some(o) = self.vocab.token_object(t) {
                objects.push(o);
            }
        }
        ObjectMentions {
            objects,
            terminated,
        }
    }

    /// Draws an absent object under the configured policy.
    pub fn draw_absent(&self, scene: &Scene, rng: &mut Rng) -> Option<usize> {
        let absent = self.catalog.absent_objects(scene);
        let weights: Vec<f64> = absent
            .iter()
            .map(|&o| match self.policy {
                HallucinationPolicy::CoOccur => self.catalog.cooccurrence_with(scene, o),
                HallucinationPolicy::Popular => self.catalog.popularity[o],
                HallucinationPolicy::Uniform => 1.0,
            })
            .collect();
        let pick = rng.weighted_index(&weights).or_else(|| {
            // All weights zero: fall back to uniform.
            (!absent.is_empty()).then(|| rng.below(absent.len()))
        })?;
        Some(absent[pick])
    }

    /// Builds `(x, y_w, y_l)` for `task` with exactly one injected violation
    /// in `y_l`, and renders `v` from the scene.
    pub fn make_preference_sample(
        &self,
        scene: &Scene,
        task: TaskKind,
        rng: &mut Rng,
    ) -> Result<PreferenceSample> {
        let mut render_rng = rng.derive("render");
        let v = self
            .catalog
            .render_features(scene, self.feature_noise, &mut render_rng);
        let no_absent = || {
            Error::Config(format!(
                "scene {} contains every object; no hallucination can be injected",
                scene.id
            ))
        };
        let (x, y_w, y_l) = match task {
            TaskKind::Describe => {
                let extra = self.draw_absent(scene, rng).ok_or_else(no_absent)?;
                let mut with_extra = scene.objects.clone();
                let at = with_extra.partition_point(|&o| o < extra);
                with_extra.insert(at, extra);
                (
                    self.describe_prompt(),
                    self.object_list(&scene.objects),
                    self.object_list(&with_extra),
                )
            }
            TaskKind::Exist => {
                let ask_present = rng.uniform() < 0.5;
                let (object, present) = if ask_present {
                    (scene.objects[rng.below(scene.objects.len())], true)
                } else {
                    (self.draw_absent(scene, rng).ok_or_else(no_absent)?, false)
                };
                let (right, wrong) = if present {
                    (vocab::YES, vocab::NO)
                } else {
                    (vocab::NO, vocab::YES)
                };
                (
                    self.exist_prompt(object),
                    vec![right, vocab::EOS],
                    vec![wrong, vocab::EOS],
                )
            }
            TaskKind::Count => {
                let k = scene.objects.len();
                if k > MAX_DIGIT {
                    return Err(Error::Config(format!(
                        "scene {} has {k} objects; counts above {MAX_DIGIT} have no token",
                        scene.id
                    )));
                }
                let up = rng.uniform() < 0.5;
                let wrong = if (up && k < MAX_DIGIT) || k == 0 { k + 1 } else { k - 1 };
                (
                    self.count_prompt(),
                    vec![self.vocab.digit_token(k), vocab::EOS],
                    vec![self.vocab.digit_token(wrong), vocab::EOS],
                )
            }
        };
        Ok(PreferenceSample {
            id: scene.id,
            task,
            x,
            v,
            y_w,
            y_l,
            scene: scene.clone(),
        })
    }

    /// Scene oracle: does `response` to `task` (asked with prompt `x`) state
    /// only facts that hold in `scene`? DESCRIBE must list exactly the present
    /// objects; EXIST must answer correctly; COUNT must give the object count.
    pub fn is_faithful(&self, scene: &Scene, task: TaskKind, x: &[Token], response: &[Token]) -> bool {
        match task {
            TaskKind::Describe => {
                let m = self.parse_mentions(response);
                let mut sorted = m.objects.clone();
                sorted.sort_unstable();
                sorted.dedup();
                m.terminated && sorted == scene.objects
            }
            TaskKind::Exist => match self.exist_target(x) {
                Some(o) => {
                    let want = if scene.contains(o) { vocab::YES } else { vocab::NO };
                    response.first() == Some(&want)
                }
                None => false,
            },
            TaskKind::Count => {
                response.first().and_then(|&t| self.vocab.token_digit(t)) == Some(scene.objects.len())
            }
        }
    }

    /// Does `response` contradict `scene`? For DESCRIBE this means naming an
    /// absent object; omissions are not violations.
    pub fn violates(&self, scene: &Scene, task: TaskKind, x: &[Token], response: &[Token]) -> bool {
        match task {
            TaskKind::Describe => self
                .parse_mentions(response)
                .objects
                .iter()
                .any(|&o| !scene.contains(o)),
            TaskKind::Exist | TaskKind::Count => !self.is_faithful(scene, task, x, response),
        }
    }

    pub fn exist_target(&self, x: &[Token]) -> Option<usize> {
        x.iter().find_map(|&t| self.vocab.token_object(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(policy: HallucinationPolicy) -> World {
        World {
            vocab: Vocabulary::new(12),
            catalog: Catalog::generate(12, 16, 3, 1.0, &mut Rng::new(42)),
            feature_noise: 0.1,
            policy,
        }
    }

    #[test]
    fn exist_on_present_object_prefers_yes() {
        let w = world(HallucinationPolicy::CoOccur);
        let scene = Scene { id: 1, objects: vec![2, 3, 7] };
        let mut found = false;
        for seed in 0..50 {
            let s = w.make_preference_sample(&scene, TaskKind::Exist, &mut Rng::new(seed)).unwrap();
            let target = w.exist_target(&s.x).unwrap();
            if scene.contains(target) {
                assert_eq!(s.y_w, vec![vocab::YES, vocab::EOS]);
                assert_eq!(s.y_l, vec![vocab::NO, vocab::EOS]);
                found = true;
            } else {
                assert_eq!(s.y_w, vec![vocab::NO, vocab::EOS]);
                assert_eq!(s.y_l, vec![vocab::YES, vocab::EOS]);
            }
        }
        assert!(found);
    }

    #[test]
    fn every_negative_violates_and_every_positive_is_faithful() {
        let w = world(HallucinationPolicy::CoOccur);
        let mut rng = Rng::new(5);
        for i in 0..300 {
            let k = 1 + rng.below(5);
            let scene = w.catalog.generate_scene(i, &mut rng, k).unwrap();
            for task in TaskKind::ALL {
                let s = w.make_preference_sample(&scene, task, &mut rng.derive_indexed("s", i)).unwrap();
                assert!(w.is_faithful(&scene, task, &s.x, &s.y_w), "{task:?} {s:?}");
                assert!(!w.violates(&scene, task, &s.x, &s.y_w));
                assert!(w.violates(&scene, task, &s.x, &s.y_l), "{task:?} {s:?}");
                assert_ne!(s.y_w, s.y_l);
                if task == TaskKind::Describe {
                    let named = w.parse_mentions(&s.y_l).objects;
                    assert_eq!(named.len(), scene.objects.len() + 1);
                    assert!(named.iter().any(|&o| !scene.contains(o)));
                }
            }
        }
    }

    #[test]
    fn count_negative_is_off_by_one() {
        let w = world(HallucinationPolicy::CoOccur);
        let scene = Scene { id: 0, objects: vec![1, 2] };
        for seed in 0..20 {
            let s = w.make_preference_sample(&scene, TaskKind::Count, &mut Rng::new(seed)).unwrap();
            let got = w.vocab.token_digit(s.y_l[0]).unwrap();
            assert!(got == 1 || got == 3);
        }
    }

    #[test]
    fn full_scene_cannot_be_hallucinated() {
        let w = world(HallucinationPolicy::Uniform);
        let scene = Scene { id: 0, objects: (0..12).collect() };
        assert!(w.make_preference_sample(&scene, TaskKind::Describe, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn cooccur_injections_follow_direct_sampling_oracle() {
        let w = world(HallucinationPolicy::CoOccur);
        let mut rng = Rng::new(17);
        let trials = 10_000;
        let mut counts = [0usize; 12];
        let mut expected = [0.0f64; 12];
        for i in 0..trials {
            let k = 1 + rng.below(4);
            let scene = w.catalog.generate_scene(i, &mut rng, k).unwrap();
            // Oracle: the normalized co-occurrence weights of each absent object.
            let absent = w.catalog.absent_objects(&scene);
            let total: f64 = absent.iter().map(|&o| w.catalog.cooccurrence_with(&scene, o)).sum();
            for &o in &absent {
                expected[o] += w.catalog.cooccurrence_with(&scene, o) / total;
            }
            let s = w.make_preference_sample(&scene, TaskKind::Describe, &mut rng).unwrap();
            let injected = w
                .parse_mentions(&s.y_l)
                .objects
                .into_iter()
                .find(|&o| !scene.contains(o))
                .unwrap();
            counts[injected] += 1;
        }
        for o in 0..12 {
            let freq = counts[o] as f64 / trials as f64;
            let want = expected[o] / trials as f64;
            assert!((freq - want).abs() < 0.02, "object {o}: {freq} vs {want}");
        }
    }

    #[test]
    fn malformed_describe_streams_are_detected() {
        let w = world(HallucinationPolicy::CoOccur);
        assert!(w.parse_mentions(&[vocab::YES, vocab::EOS]).malformed());
        assert!(w.parse_mentions(&[w.vocab.object_token(3), vocab::SEP]).malformed());
        assert!(!w.parse_mentions(&[w.vocab.object_token(3), vocab::EOS]).malformed());
    }
}
