//! Scenes with spatial structure: root objects placed uniformly, children
//! placed relative to their parents, and a noisy detector on top.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedScene, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinningConfig, Detection, Placement};

use super::{scene_rng, unit_interval, DetectorModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    /// Probability that a free-standing instance appears in a scene.
    pub prior: f64,
    /// Median object height in pixels.
    pub height: f64,
    /// Standard deviation of the log height.
    pub height_spread: f64,
    /// Width over height.
    pub aspect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub parent: String,
    pub child: String,
    /// Probability that a parent instance gets a child.
    pub co_occurrence: f64,
    /// Mean child offset in parent heights.
    pub offset_mean: [f64; 2],
    /// Per-axis standard deviation of the offset, in parent heights.
    pub offset_spread: f64,
    /// Mean of `ln(child height / parent height)`.
    pub log_scale_mean: f64,
    pub log_scale_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTemplate {
    pub image: ImageSize,
    pub categories: Vec<CategorySpec>,
    #[serde(default)]
    pub relations: Vec<RelationSpec>,
    pub detector: DetectorModel,
    #[serde(default)]
    pub seed: u64,
}

impl SceneTemplate {
    pub fn validate(&self) -> Result<()> {
        if !(self.image.width > 0.0 && self.image.height > 0.0) {
            return Err(Error::invalid("image size must be positive"));
        }
        if self.categories.is_empty() {
            return Err(Error::invalid("template needs at least one category"));
        }
        for (i, c) in self.categories.iter().enumerate() {
            unit_interval(&format!("prior of `{}`", c.name), c.prior)?;
            if !(c.height > 0.0 && c.aspect > 0.0 && c.height_spread >= 0.0) {
                return Err(Error::invalid(format!(
                    "category `{}` needs positive height and aspect and a non-negative spread",
                    c.name
                )));
            }
            if self.categories[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::invalid(format!("category `{}` listed twice", c.name)));
            }
        }
        for r in &self.relations {
            for name in [&r.parent, &r.child] {
                if self.category(name).is_none() {
                    return Err(Error::invalid(format!("relation refers to unknown category `{name}`")));
                }
            }
            unit_interval("co-occurrence probability", r.co_occurrence)?;
            if !(r.offset_spread >= 0.0 && r.log_scale_spread >= 0.0) {
                return Err(Error::invalid("relation spreads must be non-negative"));
            }
        }
        self.detector.validate()
    }

    pub fn category(&self, name: &str) -> Option<&CategorySpec> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    /// Default binning with unit scale factors for the template's categories.
    pub fn binning(&self) -> BinningConfig {
        BinningConfig::with_categories(self.category_names())
    }
}

/// One generated image with its ground truth and detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene: AnnotatedScene,
    pub detections: Vec<Detection>,
    /// Index of the ground-truth object behind each detection; `None` for
    /// false positives.
    pub sources: Vec<Option<usize>>,
    /// Index of the parent each ground-truth object was placed relative to.
    pub parents: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub categories: Vec<String>,
    pub scenes: Vec<SyntheticScene>,
}

impl SyntheticDataset {
    pub fn annotated_scenes(&self) -> Vec<AnnotatedScene> {
        self.scenes.iter().map(|s| s.scene.clone()).collect()
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.scenes.iter().flat_map(|s| s.detections.iter().cloned()).collect()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.scenes
            .iter()
            .flat_map(|s| s.scene.objects.iter().cloned())
            .collect()
    }
}

struct Sampled {
    objects: Vec<(String, Placement)>,
    parents: Vec<Option<usize>>,
    detections: Vec<(String, Placement, f64)>,
    sources: Vec<Option<usize>>,
}

fn normal(mean: f64, sd: f64) -> Result<Normal<f64>> {
    Normal::new(mean, sd).map_err(|e| Error::invalid(format!("normal({mean}, {sd}): {e}")))
}

fn beta(spec: &super::BetaSpec) -> Result<Beta<f64>> {
    Beta::new(spec.alpha, spec.beta).map_err(|e| Error::invalid(format!("beta distribution: {e}")))
}

fn sample_scene(t: &SceneTemplate, rng: &mut ChaCha8Rng) -> Result<Sampled> {
    let mut objects: Vec<(String, Placement)> = Vec::new();
    let mut parents = Vec::new();
    for c in &t.categories {
        if rng.random_bool(c.prior) {
            let h = c.height * normal(0.0, c.height_spread)?.sample(rng).exp();
            objects.push((
                c.name.clone(),
                Placement {
                    center: [
                        rng.random::<f64>() * t.image.width,
                        rng.random::<f64>() * t.image.height,
                    ],
                    height: h,
                    width: h * c.aspect,
                },
            ));
            parents.push(None);
        }
    }
    for r in &t.relations {
        let child = t.category(&r.child).expect("validated");
        let offset = normal(0.0, r.offset_spread)?;
        let scale = normal(r.log_scale_mean, r.log_scale_spread)?;
        let existing = objects.len();
        for pi in 0..existing {
            if objects[pi].0 != r.parent || !rng.random_bool(r.co_occurrence) {
                continue;
            }
            let parent = objects[pi].1;
            let h = parent.height * scale.sample(rng).exp();
            let center = [
                parent.center[0] + (r.offset_mean[0] + offset.sample(rng)) * parent.height,
                parent.center[1] + (r.offset_mean[1] + offset.sample(rng)) * parent.height,
            ];
            objects.push((
                child.name.clone(),
                Placement {
                    center,
                    height: h,
                    width: h * child.aspect,
                },
            ));
            parents.push(Some(pi));
        }
    }

    let d = &t.detector;
    let present = beta(&d.present)?;
    let absent = beta(&d.absent)?;
    let jitter = normal(0.0, d.localization_jitter)?;
    let mut detections = Vec::new();
    let mut sources = Vec::new();
    for (k, (cat, p)) in objects.iter().enumerate() {
        if !rng.random_bool(d.recall) {
            continue;
        }
        let placement = Placement {
            center: [
                p.center[0] + jitter.sample(rng) * p.height,
                p.center[1] + jitter.sample(rng) * p.height,
            ],
            height: p.height * jitter.sample(rng).exp(),
            width: p.width * jitter.sample(rng).exp(),
        };
        detections.push((cat.clone(), placement, present.sample(rng)));
        sources.push(Some(k));
    }
    if d.false_positives_per_image > 0.0 {
        let count = Poisson::new(d.false_positives_per_image)
            .map_err(|e| Error::invalid(format!("false-positive rate: {e}")))?;
        let n: f64 = count.sample(rng);
        for _ in 0..n as usize {
            let c = &t.categories[rng.random_range(0..t.categories.len())];
            let h = c.height * normal(0.0, c.height_spread)?.sample(rng).exp();
            let placement = Placement {
                center: [
                    rng.random::<f64>() * t.image.width,
                    rng.random::<f64>() * t.image.height,
                ],
                height: h,
                width: h * c.aspect,
            };
            detections.push((c.name.clone(), placement, absent.sample(rng)));
            sources.push(None);
        }
    }
    Ok(Sampled {
        objects,
        parents,
        detections,
        sources,
    })
}

/// Box edges on a 1/64 pixel grid, where the corner and center forms
/// convert into each other exactly.
fn quantized(p: Placement) -> Placement {
    let q = |v: f64| (v * 64.0).round() / 64.0;
    let b = p.bbox();
    Placement::from_bbox(&BBox::new(
        q(b.x),
        q(b.y),
        q(b.width).max(1.0 / 64.0),
        q(b.height).max(1.0 / 64.0),
    ))
}

/// Generates `n_scenes` images. Scene `i` draws from its own random stream,
/// so the output does not depend on thread count. Image ids start at 1;
/// object and detection ids are sequential across the dataset.
pub fn sample_dataset(template: &SceneTemplate, n_scenes: usize, seed: u64) -> Result<SyntheticDataset> {
    template.validate()?;
    if n_scenes == 0 {
        return Err(Error::invalid("at least one scene must be requested"));
    }
    let sampled = (0..n_scenes)
        .into_par_iter()
        .map(|i| sample_scene(template, &mut scene_rng(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let mut next_gt = 1u64;
    let mut next_det = 1u64;
    let scenes = sampled
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let image_id = i as u64 + 1;
            let objects = s
                .objects
                .into_iter()
                .map(|(category, placement)| {
                    next_gt += 1;
                    GroundTruth {
                        id: next_gt - 1,
                        image_id,
                        category,
                        placement: quantized(placement),
                    }
                })
                .collect();
            let detections = s
                .detections
                .into_iter()
                .map(|(category, placement, confidence)| {
                    next_det += 1;
                    Detection {
                        id: next_det - 1,
                        image_id,
                        category,
                        placement: quantized(placement),
                        confidence,
                    }
                })
                .collect();
            SyntheticScene {
                scene: AnnotatedScene {
                    image_id,
                    width: template.image.width,
                    height: template.image.height,
                    objects,
                },
                detections,
                sources: s.sources,
                parents: s.parents,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        categories: template.category_names(),
        scenes,
    })
}
