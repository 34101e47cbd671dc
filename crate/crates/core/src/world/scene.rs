use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImageFeature;
use crate::rng::Rng;

/// Object statistics of the synthetic universe plus the fixed image encoder.
///
/// Popularity drives which objects appear in scenes; co-occurrence drives
/// which absent objects get hallucinated and which ones adversarial probes
/// ask about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    /// Normalized per-object sampling weights.
    pub popularity: Vec<f64>,
    /// Symmetric pair weights with a zero diagonal.
    pub cooccurrence: Vec<Vec<f64>>,
    /// `image_dim × objects` rendering matrix, row-major.
    pub encoder: Vec<f64>,
    pub image_dim: usize,
}

/// Ground truth behind one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    /// Present object ids, sorted ascending, distinct.
    pub objects: Vec<usize>,
}

impl Scene {
    pub fn contains(&self, object: usize) -> bool {
        self.objects.binary_search(&object).is_ok()
    }
}

impl Catalog {
    /// Objects come in clusters of `cluster_size` that co-occur strongly.
    pub fn generate(
        objects: usize,
        image_dim: usize,
        cluster_size: usize,
        encoder_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut pop_rng = rng.derive("popularity");
        let raw: Vec<f64> = (0..objects)
            .map(|_| (0.8 * pop_rng.normal()).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let popularity = raw.iter().map(|w| w / total).collect();

        let mut co_rng = rng.derive("cooccurrence");
        let cluster = cluster_size.max(1);
        let mut cooccurrence = vec![vec![0.0; objects]; objects];
        for i in 0..objects {
            for j in (i + 1)..objects {
                let base = if i / cluster == j / cluster { 1.0 } else { 0.05 };
                let w = base * (0.5 + co_rng.uniform());
                cooccurrence[i][j] = w;
                cooccurrence[j][i] = w;
            }
        }

        let mut enc_rng = rng.derive("encoder");
        let encoder = (0..image_dim * objects)
            .map(|_| enc_rng.normal() * encoder_std)
            .collect();
        Self {
            popularity,
            cooccurrence,
            encoder,
            image_dim,
        }
    }

    pub fn objects(&self) -> usize {
        self.popularity.len()
    }

    pub fn absent_objects(&self, scene: &Scene) -> Vec<usize> {
        (0..self.objects()).filter(|&o| !scene.contains(o)).collect()
    }

    /// Total co-occurrence weight between `object` and the scene's objects.
    pub fn cooccurrence_with(&self, scene: &Scene, object: usize) -> f64 {
        scene.objects.iter().map(|&p| self.cooccurrence[p][object]).sum()
    }

    /// Absent object with the highest popularity (lowest id on ties).
    pub fn most_popular_absent(&self, scene: &Scene) -> Option<usize> {
        argmax_by(&self.absent_objects(scene), |o| self.popularity[o])
    }

    /// Absent object with the highest co-occurrence with the scene.
    pub fn most_cooccurring_absent(&self, scene: &Scene) -> Option<usize> {
        argmax_by(&self.absent_objects(scene), |o| self.cooccurrence_with(scene, o))
    }

    /// Samples `k` distinct objects, each draw proportional to popularity
    /// among the objects not yet chosen.
    pub fn generate_scene(&self, id: u64, rng: &mut Rng, k: usize) -> Result<Scene> {
        if k == 0 || k > self.objects() {
            return Err(Error::Config(format!(
                "scene object count {k} outside 1..={}",
                self.objects()
            )));
        }
        let mut weights = self.popularity.clone();
        let mut objects = Vec::with_capacity(k);
        for _ in 0..k {
            let pick = rng
                .weighted_index(&weights)
                .expect("remaining popularity is positive");
            weights[pick] = 0.0;
            objects.push(pick);
        }
        objects.sort_unstable();
        Ok(Scene { id, objects })
    }

    pub fn multihot(&self, scene: &Scene) -> Vec<f64> {
        let mut m = vec![0.0; self.objects()];
        for &o in &scene.objects {
            m[o] = 1.0;
        }
        m
    }

    /// `v = encoder · multihot(scene) + ε` with `ε ~ N(0, noise_std²)`.
    pub fn render_features(&self, scene: &Scene, noise_std: f64, rng: &mut Rng) -> ImageFeature {
        let n = self.objects();
        let v = (0..self.image_dim)
            .map(|r| {
                let clean: f64 = scene.objects.iter().map(|&o| self.encoder[r * n + o]).sum();
                if noise_std > 0.0 {
                    clean + noise_std * rng.normal()
                } else {
                    clean
                }
            })
            .collect();
        ImageFeature(v)
    }
}

fn argmax_by(items: &[usize], key: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &o in items {
        let k = key(o);
        if best.is_none_or(|(_, b)| k > b) {
            best = Some((o, k));
        }
    }
    best.map(|(o, _)| o)
}
