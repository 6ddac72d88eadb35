//! Synthetic scenes with known structure.
//!
//! Two template kinds exist. Spatial templates place objects in images and
//! exercise the whole pipeline from training to evaluation. Clique templates
//! draw small explicit joint distributions over presence variables, so the
//! exact posterior of every variable can be enumerated.

mod clique;
mod spatial;

pub use clique::{
    exact_posterior, run_oracle, sample_clique_scenes, CliqueScene, CliqueStructure, CliqueTemplate, ComponentWeights,
    ExactContext, OracleReport,
};
pub use spatial::{
    sample_dataset, CategorySpec, ImageSize, RelationSpec, SceneTemplate, SyntheticDataset, SyntheticScene,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::Continuous;

use crate::error::{Error, Result};

/// Largest scene the exact oracle will enumerate.
pub const MAX_ENUMERATION_VARIABLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaSpec {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        statrs::distribution::Beta::new(self.alpha, self.beta)
            .map(|b| b.pdf(x))
            .unwrap_or(f64::NAN)
    }
}

/// Detector noise shared by both template kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    /// Probability that a present object is detected.
    #[serde(default = "one")]
    pub recall: f64,
    /// Score distribution of hypotheses on present objects.
    pub present: BetaSpec,
    /// Score distribution of hypotheses on absent objects.
    pub absent: BetaSpec,
    #[serde(default)]
    pub false_positives_per_image: f64,
    /// Box noise in object heights (center) and log units (size).
    #[serde(default)]
    pub localization_jitter: f64,
}

fn one() -> f64 {
    1.0
}

impl DetectorModel {
    pub fn validate(&self) -> Result<()> {
        unit_interval("recall", self.recall)?;
        for b in [self.present, self.absent] {
            if !(b.alpha > 0.0 && b.beta > 0.0) {
                return Err(Error::invalid("beta parameters must be positive"));
            }
        }
        if !(self.false_positives_per_image >= 0.0 && self.localization_jitter >= 0.0) {
            return Err(Error::invalid("false-positive rate and jitter must be non-negative"));
        }
        Ok(())
    }

    /// `(P(score | present), P(score | absent))`
    pub fn likelihoods(&self, score: f64) -> (f64, f64) {
        (self.present.pdf(score), self.absent.pdf(score))
    }
}

pub(crate) fn unit_interval(what: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must lie in [0, 1], got {v}")))
    }
}

/// Independent random stream for scene `index`.
pub(crate) fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Template {
    Spatial(SceneTemplate),
    Clique(CliqueTemplate),
}

const BUILTIN: &[(&str, &str)] = &[
    ("benchmark", include_str!("../../templates/benchmark.json")),
    ("clique", include_str!("../../templates/clique.json")),
    (
        "clique-correlated",
        include_str!("../../templates/clique-correlated.json"),
    ),
    (
        "informative-neighbor",
        include_str!("../../templates/informative-neighbor.json"),
    ),
];

impl Template {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Template = serde_json::from_str(text).map_err(|e| Error::invalid(format!("template: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Template::Spatial(t) => t.validate(),
            Template::Clique(t) => t.validate(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Template::Spatial(t) => t.seed,
            Template::Clique(t) => t.seed,
        }
    }

    /// Templates shipped with the library.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "template",
                name: name.to_string(),
                available: Self::builtin_names().join(", "),
            })?;
        Self::from_json(text)
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn spatial(self) -> Result<SceneTemplate> {
        match self {
            Template::Spatial(t) => Ok(t),
            Template::Clique(_) => Err(Error::invalid("expected a spatial template, got a clique template")),
        }
    }

    pub fn clique(self) -> Result<CliqueTemplate> {
        match self {
            Template::Clique(t) => Ok(t),
            Template::Spatial(_) => Err(Error::invalid("expected a clique template, got a spatial template")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_templates_parse() {
        for name in Template::builtin_names() {
            Template::builtin(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(Template::builtin("nope").is_err());
    }

    #[test]
    fn detector_means_match_design() {
        let t = Template::builtin("benchmark").unwrap().spatial().unwrap();
        assert!((t.detector.present.mean() - 0.75).abs() < 1e-12);
        assert!((t.detector.absent.mean() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn scene_streams_are_independent() {
        use rand::Rng;
        let a: u64 = scene_rng(1, 0).random();
        let b: u64 = scene_rng(1, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, scene_rng(1, 0).random::<u64>());
    }
}
