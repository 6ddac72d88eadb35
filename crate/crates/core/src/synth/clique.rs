//! Small explicit joints over presence variables and their exact posterior.
//!
//! A scene is a product of independent components:
//!
//! * single: one free variable;
//! * pair: `X -> Q` with an arbitrary conditional table;
//! * triple: `X1, X2 -> Q`. In the independent structure the table is
//!   `P(Q | x1, x2) = q + d (x1 - p1)(x2 - p2)`, which keeps every pair of the
//!   three variables marginally independent while the three are jointly
//!   dependent. In the correlated structure `X2` depends on `X1` and `Q` on
//!   both, which breaks the product-of-beliefs assumption.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{ContextModel, Lookup, Neighbor, SceneContext};
use crate::error::{Error, Result};
use crate::geometry::{Detection, Placement};
use crate::inference::{Engine, InferenceConfig};

use super::{scene_rng, unit_interval, DetectorModel, MAX_ENUMERATION_VARIABLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CliqueStructure {
    Independent,
    Correlated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentWeights {
    pub single: f64,
    pub pair: f64,
    pub triple: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliqueTemplate {
    pub min_variables: usize,
    pub max_variables: usize,
    pub structure: CliqueStructure,
    /// Range of the marginal probability of free variables.
    pub prior_range: [f64; 2],
    /// Range of `P(child | parent present)`.
    pub cpt_present: [f64; 2],
    /// Range of `P(child | parent absent)`.
    pub cpt_absent: [f64; 2],
    /// Interaction strength of independent triples, as a fraction of the
    /// largest strength that keeps the table valid.
    pub interaction: [f64; 2],
    pub weights: ComponentWeights,
    pub detector: DetectorModel,
    #[serde(default)]
    pub seed: u64,
}

impl CliqueTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.min_variables == 0 || self.min_variables > self.max_variables {
            return Err(Error::invalid("need 1 <= min_variables <= max_variables"));
        }
        if self.max_variables > MAX_ENUMERATION_VARIABLES {
            return Err(Error::TooManyVariables(self.max_variables));
        }
        for (what, [lo, hi]) in [
            ("prior_range", self.prior_range),
            ("cpt_present", self.cpt_present),
            ("cpt_absent", self.cpt_absent),
            ("interaction", self.interaction),
        ] {
            unit_interval(what, lo)?;
            unit_interval(what, hi)?;
            if lo > hi {
                return Err(Error::invalid(format!("{what} is empty")));
            }
        }
        if self.prior_range[0] <= 0.0 || self.prior_range[1] >= 1.0 {
            return Err(Error::invalid("prior_range must lie strictly inside (0, 1)"));
        }
        let w = self.weights;
        if !(w.single >= 0.0 && w.pair >= 0.0 && w.triple >= 0.0 && w.single > 0.0) {
            return Err(Error::invalid("component weights must be non-negative with single > 0"));
        }
        self.detector.validate()
    }
}

/// One scene with its full joint and detector evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliqueScene {
    /// `joint[s]` is the probability of the assignment whose bit `i` is `X_i`.
    pub joint: Vec<f64>,
    pub truth: Vec<bool>,
    /// `(P(Y_i | X_i = True), P(Y_i | X_i = False))`
    pub likelihoods: Vec<(f64, f64)>,
    /// One detection per variable; confidence is `P(X_i | Y_i)`.
    pub detections: Vec<Detection>,
}

impl CliqueScene {
    /// Builds a scene from a joint and per-variable likelihoods. Detection
    /// confidences are the single-detection posteriors.
    pub fn new(joint: Vec<f64>, likelihoods: Vec<(f64, f64)>, truth: Vec<bool>, image_id: u64) -> Result<Self> {
        let n = likelihoods.len();
        if n > MAX_ENUMERATION_VARIABLES {
            return Err(Error::TooManyVariables(n));
        }
        if joint.len() != 1 << n || truth.len() != n {
            return Err(Error::invalid("joint size does not match the variable count"));
        }
        let total: f64 = joint.iter().sum();
        if joint.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "joint must be non-negative and sum to 1, sums to {total}"
            )));
        }
        let mut scene = Self {
            joint,
            truth,
            likelihoods,
            detections: Vec::with_capacity(n),
        };
        for i in 0..n {
            let prior = scene.marginal(i);
            let (l1, l0) = scene.likelihoods[i];
            let t = prior * l1;
            let z = t + (1.0 - prior) * l0;
            let c = if z > 0.0 { t / z } else { prior };
            scene.detections.push(Detection::new(
                i as u64,
                image_id,
                format!("v{i}"),
                Placement {
                    center: [100.0 * i as f64, 0.0],
                    height: 50.0,
                    width: 50.0,
                },
                c,
            )?);
        }
        Ok(scene)
    }

    pub fn variable_count(&self) -> usize {
        self.likelihoods.len()
    }

    pub fn marginal(&self, i: usize) -> f64 {
        self.joint
            .iter()
            .enumerate()
            .filter(|(s, _)| s >> i & 1 == 1)
            .map(|(_, p)| p)
            .sum()
    }

    /// `P(X_query = True | assignment)`, or `None` when the assignment has
    /// zero probability.
    pub fn conditional(&self, query: usize, assignment: &[Neighbor]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (s, p) in self.joint.iter().enumerate() {
            if assignment.iter().all(|n| (s >> n.index & 1 == 1) == n.present) {
                den += p;
                if s >> query & 1 == 1 {
                    num += p;
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }
}

/// `P(X_i = True | all detections)` by enumerating every joint assignment.
pub fn exact_posterior(scene: &CliqueScene) -> Result<Vec<f64>> {
    let n = scene.variable_count();
    if n > MAX_ENUMERATION_VARIABLES {
        return Err(Error::TooManyVariables(n));
    }
    let mut marg = vec![0.0; n];
    let mut total = 0.0;
    for (s, p) in scene.joint.iter().enumerate() {
        let mut w = *p;
        for (i, (l1, l0)) in scene.likelihoods.iter().enumerate() {
            w *= if s >> i & 1 == 1 { *l1 } else { *l0 };
        }
        total += w;
        for (i, m) in marg.iter_mut().enumerate() {
            if s >> i & 1 == 1 {
                *m += w;
            }
        }
    }
    if !(total > 0.0) {
        return Err(Error::invalid("detections have zero likelihood under the joint"));
    }
    Ok(marg.into_iter().map(|m| m / total).collect())
}

/// Context model that answers from a scene's exact joint.
#[derive(Debug, Clone, Copy)]
pub struct ExactContext<'s> {
    scene: &'s CliqueScene,
}

impl<'s> ExactContext<'s> {
    pub fn new(scene: &'s CliqueScene) -> Self {
        Self { scene }
    }
}

struct BoundExact<'s> {
    scene: &'s CliqueScene,
    priors: Vec<f64>,
}

impl ContextModel for ExactContext<'_> {
    fn knows_category(&self, _: &str) -> bool {
        true
    }

    fn bind<'a>(&'a self, detections: &'a [Detection]) -> Result<Box<dyn SceneContext + 'a>> {
        if detections.len() != self.scene.variable_count() {
            return Err(Error::invalid("exact context bound to a different detection list"));
        }
        let priors = (0..detections.len()).map(|i| self.scene.marginal(i)).collect();
        Ok(Box::new(BoundExact {
            scene: self.scene,
            priors,
        }))
    }
}

impl SceneContext for BoundExact<'_> {
    fn prior(&self, query: usize) -> f64 {
        self.priors[query]
    }

    fn lookup(&self, query: usize, neighbors: &[Neighbor], _: &[f64]) -> Result<Lookup> {
        Ok(match self.scene.conditional(query, neighbors) {
            Some(p) => Lookup::exact(p),
            None => Lookup {
                prob_true: self.priors[query],
                samples: 0,
                sparse: true,
            },
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn bern(p: f64, x: bool) -> f64 {
    if x {
        p
    } else {
        1.0 - p
    }
}

/// Local joint of one component over its own variables (bit `k` = member `k`).
fn component(t: &CliqueTemplate, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bit = |s: usize, k: usize| s >> k & 1 == 1;
    match size {
        1 => {
            let p = uniform(rng, t.prior_range);
            vec![1.0 - p, p]
        }
        2 => {
            let px = uniform(rng, t.prior_range);
            let q1 = uniform(rng, t.cpt_present);
            let q0 = uniform(rng, t.cpt_absent);
            (0..4)
                .map(|s| bern(px, bit(s, 0)) * bern(if bit(s, 0) { q1 } else { q0 }, bit(s, 1)))
                .collect()
        }
        _ => match t.structure {
            CliqueStructure::Independent => {
                let p1 = uniform(rng, t.prior_range);
                let p2 = uniform(rng, t.prior_range);
                let q = uniform(rng, t.prior_range);
                let span = p1.max(1.0 - p1) * p2.max(1.0 - p2);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let d = sign * uniform(rng, t.interaction) * q.min(1.0 - q) / span;
                (0..8)
                    .map(|s| {
                        let x1 = f64::from(u8::from(bit(s, 0)));
                        let x2 = f64::from(u8::from(bit(s, 1)));
                        let pq = q + d * (x1 - p1) * (x2 - p2);
                        bern(p1, bit(s, 0)) * bern(p2, bit(s, 1)) * bern(pq, bit(s, 2))
                    })
                    .collect()
            }
            CliqueStructure::Correlated => {
                let p1 = uniform(rng, t.prior_range);
                let x2 = [uniform(rng, t.cpt_absent), uniform(rng, t.cpt_present)];
                let mid = [t.cpt_absent[0], t.cpt_present[1]];
                let q = [
                    uniform(rng, t.cpt_absent),
                    uniform(rng, mid),
                    uniform(rng, mid),
                    uniform(rng, t.cpt_present),
                ];
                (0..8)
                    .map(|s| {
                        let a = usize::from(bit(s, 0));
                        let b = usize::from(bit(s, 1));
                        bern(p1, bit(s, 0)) * bern(x2[a], bit(s, 1)) * bern(q[a + 2 * b], bit(s, 2))
                    })
                    .collect()
            }
        },
    }
}

fn sample_one(t: &CliqueTemplate, rng: &mut ChaCha8Rng, image_id: u64) -> Result<CliqueScene> {
    let n = rng.random_range(t.min_variables..=t.max_variables);
    let mut sizes = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        let w = t.weights;
        let options = [
            (1, w.single),
            (2, if remaining >= 2 { w.pair } else { 0.0 }),
            (3, if remaining >= 3 { w.triple } else { 0.0 }),
        ];
        let total: f64 = options.iter().map(|(_, w)| w).sum();
        let mut r = rng.random::<f64>() * total;
        let mut size = 1;
        for (s, w) in options {
            if w > 0.0 && r < w {
                size = s;
                break;
            }
            r -= w;
        }
        sizes.push(size);
        remaining -= size;
    }

    // random placement of component members among the scene's variables
    let mut slots: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    let mut joint = vec![1.0; 1 << n];
    let mut offset = 0;
    for size in sizes {
        let local = component(t, size, rng);
        let members = &slots[offset..offset + size];
        for (s, p) in joint.iter_mut().enumerate() {
            let l = members
                .iter()
                .enumerate()
                .fold(0, |acc, (k, &v)| acc | (s >> v & 1) << k);
            *p *= local[l];
        }
        offset += size;
    }

    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut state = joint.len() - 1;
    for (s, p) in joint.iter().enumerate() {
        acc += p;
        if u < acc {
            state = s;
            break;
        }
    }
    let truth: Vec<bool> = (0..n).map(|i| state >> i & 1 == 1).collect();
    let present = Beta::new(t.detector.present.alpha, t.detector.present.beta)
        .map_err(|e| Error::invalid(format!("beta distribution: {e}")))?;
    let absent = Beta::new(t.detector.absent.alpha, t.detector.absent.beta)
        .map_err(|e| Error::invalid(format!("beta distribution: {e}")))?;
    let likelihoods = truth
        .iter()
        .map(|&x| {
            let y: f64 = if x { present.sample(rng) } else { absent.sample(rng) };
            t.detector.likelihoods(y.clamp(1e-12, 1.0 - 1e-12))
        })
        .collect();
    CliqueScene::new(joint, likelihoods, truth, image_id)
}

pub fn sample_clique_scenes(template: &CliqueTemplate, n_scenes: usize, seed: u64) -> Result<Vec<CliqueScene>> {
    template.validate()?;
    (0..n_scenes)
        .into_par_iter()
        .map(|i| sample_one(template, &mut scene_rng(seed, i as u64), i as u64 + 1))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub scenes: usize,
    pub variables: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
}

/// Compares one synchronous sweep of belief propagation (gating off, exact
/// context) with the enumerated posterior on freshly sampled scenes.
pub fn run_oracle(template: &CliqueTemplate, n_scenes: usize, seed: u64) -> Result<OracleReport> {
    let engine = Engine::with_builtin(InferenceConfig {
        schedule: "synchronous".into(),
        ..InferenceConfig::ungated()
    })?;
    let scenes = sample_clique_scenes(template, n_scenes, seed)?;
    let errors: Vec<Vec<f64>> = scenes
        .par_iter()
        .map(|s| {
            let bp = engine.rescore_scene(&ExactContext::new(s), &s.detections)?.beliefs();
            let exact = exact_posterior(s)?;
            Ok(bp.iter().zip(&exact).map(|(a, b)| (a - b).abs()).collect())
        })
        .collect::<Result<_>>()?;
    let all: Vec<f64> = errors.into_iter().flatten().collect();
    Ok(OracleReport {
        scenes: scenes.len(),
        variables: all.len(),
        max_abs_error: all.iter().copied().fold(0.0, f64::max),
        mean_abs_error: if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::BetaSpec;

    fn template(structure: CliqueStructure) -> CliqueTemplate {
        CliqueTemplate {
            min_variables: 2,
            max_variables: 5,
            structure,
            prior_range: [0.1, 0.6],
            cpt_present: [0.6, 0.95],
            cpt_absent: [0.02, 0.2],
            interaction: [0.5, 0.95],
            weights: ComponentWeights {
                single: 1.0,
                pair: 2.0,
                triple: 2.0,
            },
            detector: DetectorModel {
                recall: 1.0,
                present: BetaSpec { alpha: 3.0, beta: 1.0 },
                absent: BetaSpec { alpha: 1.0, beta: 4.0 },
                false_positives_per_image: 0.0,
                localization_jitter: 0.0,
            },
            seed: 0,
        }
    }

    #[test]
    fn joints_are_normalized() {
        for s in sample_clique_scenes(&template(CliqueStructure::Correlated), 50, 1).unwrap() {
            assert!((s.joint.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((2..=5).contains(&s.variable_count()));
        }
    }

    #[test]
    fn noise_free_detector_recovers_truth() {
        let joint = vec![0.1, 0.2, 0.3, 0.4];
        let s = CliqueScene::new(joint, vec![(1.0, 0.0), (0.0, 1.0)], vec![true, false], 1).unwrap();
        assert_eq!(exact_posterior(&s).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn independent_variables_get_bayes_updates() {
        // X0 ~ 0.3, X1 ~ 0.6, independent
        let joint: Vec<f64> = (0..4).map(|s| bern(0.3, s & 1 == 1) * bern(0.6, s & 2 == 2)).collect();
        let s = CliqueScene::new(joint, vec![(2.0, 0.5), (0.4, 1.2)], vec![true, false], 1).unwrap();
        let post = exact_posterior(&s).unwrap();
        let bayes = |p: f64, l1: f64, l0: f64| p * l1 / (p * l1 + (1.0 - p) * l0);
        assert!((post[0] - bayes(0.3, 2.0, 0.5)).abs() < 1e-12);
        assert!((post[1] - bayes(0.6, 0.4, 1.2)).abs() < 1e-12);
        // single-detection posteriors coincide here
        assert!((s.detections[0].confidence - post[0]).abs() < 1e-12);
    }

    #[test]
    fn enumeration_bound_is_enforced() {
        let n = MAX_ENUMERATION_VARIABLES + 1;
        assert!(matches!(
            CliqueScene::new(vec![], vec![(1.0, 1.0); n], vec![false; n], 1),
            Err(Error::TooManyVariables(_))
        ));
    }

    #[test]
    fn independent_triples_are_pairwise_independent() {
        let mut t = template(CliqueStructure::Independent);
        t.min_variables = 3;
        t.max_variables = 3;
        t.weights = ComponentWeights {
            single: 1e-9,
            pair: 0.0,
            triple: 1.0,
        };
        for s in sample_clique_scenes(&t, 20, 5).unwrap() {
            for i in 0..3 {
                for j in 0..3 {
                    if i == j {
                        continue;
                    }
                    let c = s.conditional(i, &[Neighbor::new(j, true)]).unwrap();
                    assert!((c - s.marginal(i)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn oracle_agrees_on_small_run() {
        let r = run_oracle(&template(CliqueStructure::Independent), 40, 9).unwrap();
        assert!(r.max_abs_error < 1e-6, "{r:?}");
    }
}
