//! Belief propagation over the detections of one image.
//!
//! Every detection carries a binary presence variable whose belief starts at
//! the detector confidence. A variable is updated by choosing the few
//! neighbors whose assignments move its context probability the most,
//! mixing the context conditional over all neighbor assignments weighted by
//! the neighbors' current beliefs, and normalizing against the detector
//! confidence:
//!
//! ```text
//! t = c * sum_N w(N) h(N) / p
//! f = (1 - c) * sum_N w(N) (1 - h(N)) / (1 - p)
//! belief = t / (t + f)
//! ```

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{ContextModel, Neighbor, SceneContext};
use crate::dataset::group_by_image;
use crate::error::{Error, Result};
use crate::geometry::{Detection, DetectionId, ImageId, LocationVariable};
use crate::registry::Strategies;
use crate::stability::{
    clamp_context, gated_context, normalize, posterior_at, CurveParams, GatingParams, GatingPolicy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub max_neighbors: u8,
    pub iterations: u32,
    pub gating: String,
    pub derivative_threshold: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub neighbor_search: String,
    pub schedule: String,
    /// Detections below this confidence are never used as neighbors.
    pub candidate_floor: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let g = GatingParams::default();
        Self {
            max_neighbors: 2,
            iterations: 1,
            gating: "derivative".into(),
            derivative_threshold: g.derivative_threshold,
            delta: g.delta,
            epsilon: g.epsilon,
            neighbor_search: "exhaustive".into(),
            schedule: "priority".into(),
            candidate_floor: 0.0,
        }
    }
}

impl InferenceConfig {
    /// The default configuration with gating switched off.
    pub fn ungated() -> Self {
        Self {
            gating: "none".into(),
            ..Self::default()
        }
    }

    pub fn gating_params(&self) -> GatingParams {
        GatingParams {
            derivative_threshold: self.derivative_threshold,
            delta: self.delta,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.max_neighbors) {
            return Err(Error::invalid(format!(
                "max_neighbors must be 1 or 2, got {}",
                self.max_neighbors
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(self.derivative_threshold > 0.0) {
            return Err(Error::invalid("derivative threshold must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("delta must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.candidate_floor) {
            return Err(Error::invalid("candidate floor must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Final beliefs and per-variable diagnostics for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub variables: Vec<LocationVariable>,
    pub detector_probs: Vec<f64>,
    /// Indices into the image's detection list.
    pub chosen_neighbors: Vec<Vec<usize>>,
    pub gated: Vec<bool>,
    /// Some context lookup fell back to the prior or needed clamping.
    pub sparse: Vec<bool>,
}

impl SceneState {
    pub fn beliefs(&self) -> Vec<f64> {
        self.variables.iter().map(|v| v.belief_true).collect()
    }
}

/// Posterior of a detection whose context probability is known.
pub fn combine(detector_prob: f64, context_prob: f64, prior: f64) -> Result<f64> {
    posterior_at(CurveParams::new(detector_prob, prior)?, context_prob)
}

/// Gate applied to every context lookup inside a mixture.
#[derive(Clone, Copy)]
pub struct Gate<'a> {
    pub policy: &'a dyn GatingPolicy,
    pub params: CurveParams,
    pub cfg: &'a GatingParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mixture {
    /// `sum_N w(N) P(X = True | N) / p`
    pub true_mass: f64,
    /// `sum_N w(N) P(X = False | N) / (1 - p)`
    pub false_mass: f64,
    pub gated: bool,
    pub sparse: bool,
}

fn assignments(set: &[usize], mask: u32, beliefs: &[f64]) -> (Vec<Neighbor>, f64) {
    let mut weight = 1.0;
    let neighbors = set
        .iter()
        .enumerate()
        .map(|(bit, &j)| {
            let present = mask >> bit & 1 == 1;
            weight *= if present { beliefs[j] } else { 1.0 - beliefs[j] };
            Neighbor::new(j, present)
        })
        .collect();
    (neighbors, weight)
}

/// Context ratio of `query` averaged over every assignment of `neighbors`.
pub fn context_mixture(
    ctx: &dyn SceneContext,
    query: usize,
    neighbors: &[usize],
    beliefs: &[f64],
    gate: Option<Gate<'_>>,
) -> Result<Mixture> {
    let p = ctx.prior(query);
    let mut mix = Mixture {
        true_mass: 0.0,
        false_mass: 0.0,
        gated: false,
        sparse: false,
    };
    for mask in 0..1u32 << neighbors.len() {
        let (assigned, w) = assignments(neighbors, mask, beliefs);
        let lookup = ctx.lookup(query, &assigned, beliefs)?;
        mix.sparse |= lookup.sparse;
        let mut h = lookup.prob_true;
        if let Some(g) = gate {
            let (used, fired) = gated_context(g.policy, g.params, h, lookup.samples, g.cfg);
            h = used;
            mix.gated |= fired;
        }
        let h = clamp_context(h);
        mix.true_mass += w * (h / p);
        mix.false_mass += w * ((1.0 - h) / (1.0 - p));
    }
    Ok(mix)
}

/// Expected deviation of the query's context probability from its prior
/// over assignments of `neighbors`, summed over both query values.
pub fn selection_score(ctx: &dyn SceneContext, query: usize, neighbors: &[usize], beliefs: &[f64]) -> Result<f64> {
    let p = ctx.prior(query);
    let mut score = 0.0;
    for mask in 0..1u32 << neighbors.len() {
        let (assigned, w) = assignments(neighbors, mask, beliefs);
        let h = ctx.lookup(query, &assigned, beliefs)?.prob_true;
        score += w * 2.0 * (h - p).abs();
    }
    Ok(score)
}

pub type Scorer<'a> = dyn FnMut(&[usize]) -> Result<f64> + 'a;

/// Picks the neighbor set of one variable from a candidate list.
pub trait NeighborSearch: Send + Sync {
    /// Returns a non-empty subset of `candidates` with at most `max` members
    /// whenever `candidates` is non-empty. Earlier and smaller sets win ties.
    fn select(&self, candidates: &[usize], max: usize, score: &mut Scorer<'_>) -> Result<Vec<usize>>;
}

#[derive(Debug, Default)]
pub struct ExhaustiveSearch;

impl NeighborSearch for ExhaustiveSearch {
    fn select(&self, candidates: &[usize], max: usize, score: &mut Scorer<'_>) -> Result<Vec<usize>> {
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut consider = |set: Vec<usize>, score: &mut Scorer<'_>| -> Result<()> {
            let s = score(&set)?;
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, set));
            }
            Ok(())
        };
        for &j in candidates {
            consider(vec![j], score)?;
        }
        if max >= 2 {
            for (a, &j) in candidates.iter().enumerate() {
                for &k in &candidates[a + 1..] {
                    consider(vec![j, k], score)?;
                }
            }
        }
        Ok(best.map(|(_, s)| s).unwrap_or_default())
    }
}

#[derive(Debug, Default)]
pub struct GreedySearch;

impl NeighborSearch for GreedySearch {
    fn select(&self, candidates: &[usize], max: usize, score: &mut Scorer<'_>) -> Result<Vec<usize>> {
        let mut chosen: Vec<usize> = Vec::new();
        let mut current = f64::NEG_INFINITY;
        while chosen.len() < max {
            let mut step: Option<(f64, usize)> = None;
            for &j in candidates.iter().filter(|j| !chosen.contains(j)) {
                let mut trial = chosen.clone();
                trial.push(j);
                let s = score(&trial)?;
                if step.is_none_or(|(b, _)| s > b) {
                    step = Some((s, j));
                }
            }
            match step {
                Some((s, j)) if s > current => {
                    chosen.push(j);
                    current = s;
                }
                _ => break,
            }
        }
        Ok(chosen)
    }
}

pub type Update<'a> = dyn FnMut(usize, &[f64]) -> Result<f64> + 'a;

/// Order in which variables are visited during one iteration.
pub trait Schedule: Send + Sync {
    /// Runs one sweep. `update(i, beliefs)` returns the new belief of `i`.
    fn sweep(&self, beliefs: &mut [f64], ids: &[DetectionId], update: &mut Update<'_>) -> Result<()>;
}

/// Visits the most decided variables first (largest `|belief - 0.5|`, ties
/// by detection id) and writes each new belief immediately.
#[derive(Debug, Default)]
pub struct PrioritySchedule;

impl Schedule for PrioritySchedule {
    fn sweep(&self, beliefs: &mut [f64], ids: &[DetectionId], update: &mut Update<'_>) -> Result<()> {
        let mut order: Vec<usize> = (0..beliefs.len()).collect();
        order.sort_by(|&i, &j| {
            (beliefs[j] - 0.5)
                .abs()
                .total_cmp(&(beliefs[i] - 0.5).abs())
                .then(ids[i].cmp(&ids[j]))
        });
        for i in order {
            beliefs[i] = update(i, beliefs)?;
        }
        Ok(())
    }
}

/// Computes every update from the beliefs at the start of the sweep.
#[derive(Debug, Default)]
pub struct SynchronousSchedule;

impl Schedule for SynchronousSchedule {
    fn sweep(&self, beliefs: &mut [f64], _ids: &[DetectionId], update: &mut Update<'_>) -> Result<()> {
        let snapshot = beliefs.to_vec();
        for (i, b) in beliefs.iter_mut().enumerate() {
            *b = update(i, &snapshot)?;
        }
        Ok(())
    }
}

/// An [`InferenceConfig`] with its strategies resolved.
#[derive(Clone)]
pub struct Engine {
    config: InferenceConfig,
    gating: Arc<dyn GatingPolicy>,
    search: Arc<dyn NeighborSearch>,
    schedule: Arc<dyn Schedule>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).finish()
    }
}

impl Engine {
    pub fn new(config: InferenceConfig, strategies: &Strategies) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            gating: strategies.gating.get(&config.gating)?,
            search: strategies.search.get(&config.neighbor_search)?,
            schedule: strategies.schedule.get(&config.schedule)?,
            config,
        })
    }

    pub fn with_builtin(config: InferenceConfig) -> Result<Self> {
        Self::new(config, &Strategies::builtin())
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    /// Rescores the detections of one image. Every category must be known
    /// to `model`.
    pub fn rescore_scene(&self, model: &dyn ContextModel, detections: &[Detection]) -> Result<SceneState> {
        if let Some(first) = detections.first() {
            if let Some(d) = detections.iter().find(|d| d.image_id != first.image_id) {
                return Err(Error::invalid(format!(
                    "detection {} belongs to image {}, expected {}",
                    d.id, d.image_id, first.image_id
                )));
            }
        }
        for d in detections {
            d.validate()?;
        }
        let n = detections.len();
        let detector: Vec<f64> = detections.iter().map(|d| d.confidence).collect();
        let ids: Vec<DetectionId> = detections.iter().map(|d| d.id).collect();
        let mut chosen = vec![Vec::new(); n];
        let mut gated = vec![false; n];
        let mut sparse = vec![false; n];
        let mut beliefs = detector.clone();

        if n > 1 {
            let ctx = model.bind(detections)?;
            let cfg = self.config.gating_params();
            let pool: Vec<usize> = (0..n).filter(|&j| detector[j] >= self.config.candidate_floor).collect();
            let max = self.config.max_neighbors as usize;
            let mut update = |i: usize, beliefs: &[f64]| -> Result<f64> {
                let candidates: Vec<usize> = pool.iter().copied().filter(|&j| j != i).collect();
                if candidates.is_empty() {
                    chosen[i].clear();
                    gated[i] = false;
                    return Ok(detector[i]);
                }
                let set = self.search.select(&candidates, max, &mut |s: &[usize]| {
                    selection_score(ctx.as_ref(), i, s, beliefs)
                })?;
                let params = CurveParams::new(detector[i], ctx.prior(i))?;
                let gate = Gate {
                    policy: self.gating.as_ref(),
                    params,
                    cfg: &cfg,
                };
                let mix = context_mixture(ctx.as_ref(), i, &set, beliefs, Some(gate))?;
                chosen[i] = set;
                gated[i] = mix.gated;
                sparse[i] |= mix.sparse;
                Ok(normalize(
                    detector[i] * mix.true_mass,
                    (1.0 - detector[i]) * mix.false_mass,
                ))
            };
            for _ in 0..self.config.iterations {
                self.schedule.sweep(&mut beliefs, &ids, &mut update)?;
            }
        }

        Ok(SceneState {
            variables: ids
                .iter()
                .zip(&beliefs)
                .map(|(&detection, &belief_true)| LocationVariable { detection, belief_true })
                .collect(),
            detector_probs: detector,
            chosen_neighbors: chosen,
            gated,
            sparse,
        })
    }

    /// Rescores a detection list spanning many images, processing images in
    /// parallel on `jobs` threads (0 uses the global pool). Output keeps the
    /// input order. Detections whose category the model does not know are
    /// passed through unchanged and counted.
    pub fn rescore_images(
        &self,
        model: &dyn ContextModel,
        detections: &[Detection],
        jobs: usize,
    ) -> Result<RescoreOutput> {
        let groups = group_by_image(detections);
        let run = |(image, idx): &(ImageId, Vec<usize>)| -> Result<ImageResult> {
            let known: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&i| model.knows_category(&detections[i].category))
                .collect();
            let scene: Vec<Detection> = known.iter().map(|&i| detections[i].clone()).collect();
            let state = self.rescore_scene(model, &scene)?;
            Ok(ImageResult {
                image_id: *image,
                indices: known,
                unknown: idx.len() - scene.len(),
                state,
            })
        };
        let results: Vec<ImageResult> = if jobs == 0 {
            groups.par_iter().map(run).collect::<Result<_>>()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::invalid(format!("cannot start {jobs} workers: {e}")))?;
            pool.install(|| groups.par_iter().map(run).collect::<Result<_>>())?
        };

        let mut out = detections.to_vec();
        let mut unknown = 0;
        let mut images = Vec::with_capacity(results.len());
        for r in results {
            for (k, &i) in r.indices.iter().enumerate() {
                out[i].confidence = r.state.variables[k].belief_true;
            }
            unknown += r.unknown;
            images.push(ImageDiagnostics {
                image_id: r.image_id,
                detection_ids: r.indices.iter().map(|&i| detections[i].id).collect(),
                state: r.state,
            });
        }
        Ok(RescoreOutput {
            detections: out,
            images,
            unknown_category: unknown,
        })
    }
}

struct ImageResult {
    image_id: ImageId,
    indices: Vec<usize>,
    unknown: usize,
    state: SceneState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDiagnostics {
    pub image_id: ImageId,
    /// Detection ids of the rescored variables, in variable order.
    pub detection_ids: Vec<DetectionId>,
    pub state: SceneState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescoreOutput {
    pub detections: Vec<Detection>,
    pub images: Vec<ImageDiagnostics>,
    pub unknown_category: usize,
}

/// Rescores one image with the built-in strategies.
pub fn rescore_scene(
    detections: &[Detection],
    model: &dyn ContextModel,
    config: &InferenceConfig,
) -> Result<SceneState> {
    Engine::with_builtin(config.clone())?.rescore_scene(model, detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Lookup;
    use crate::geometry::Placement;

    /// Context that answers from a closure.
    struct FnContext<F: Fn(usize, &[Neighbor]) -> f64> {
        priors: Vec<f64>,
        f: F,
    }

    impl<F: Fn(usize, &[Neighbor]) -> f64> SceneContext for FnContext<F> {
        fn prior(&self, q: usize) -> f64 {
            self.priors[q]
        }
        fn lookup(&self, q: usize, n: &[Neighbor], _: &[f64]) -> Result<Lookup> {
            Ok(Lookup::exact((self.f)(q, n)))
        }
    }

    struct FnModel<F>(Vec<f64>, F);

    impl<F> ContextModel for FnModel<F>
    where
        F: Fn(usize, &[Neighbor]) -> f64 + Send + Sync + Clone,
    {
        fn knows_category(&self, c: &str) -> bool {
            c != "unknown"
        }
        fn bind<'a>(&'a self, dets: &'a [Detection]) -> Result<Box<dyn SceneContext + 'a>> {
            Ok(Box::new(FnContext {
                priors: vec![self.0[0]; dets.len()],
                f: self.1.clone(),
            }))
        }
    }

    fn det(id: u64, c: f64) -> Detection {
        let p = Placement {
            center: [id as f64 * 10.0, 0.0],
            height: 10.0,
            width: 10.0,
        };
        Detection::new(id, 1, "x", p, c).unwrap()
    }

    #[test]
    fn worked_posterior() {
        assert!((combine(0.8, 0.01, 0.02).unwrap() - 0.6644).abs() < 5e-4);
    }

    #[test]
    fn combine_identities() {
        assert_eq!(combine(0.37, 0.02, 0.02).unwrap(), 0.37);
        assert_eq!(combine(0.02, 0.41, 0.02).unwrap(), 0.41);
        assert!(combine(0.5, 0.5, 1.0).is_err());
    }

    #[test]
    fn degenerate_weight_mixture() {
        let ctx = FnContext {
            priors: vec![0.1, 0.1],
            f: |_, n: &[Neighbor]| if n[0].present { 0.3 } else { 0.05 },
        };
        let m = context_mixture(&ctx, 0, &[1], &[0.5, 1.0], None).unwrap();
        assert!((m.true_mass - 0.3 / 0.1).abs() < 1e-12);
    }

    #[test]
    fn independent_context_mixture_is_one() {
        let ctx = FnContext {
            priors: vec![0.2; 3],
            f: |_, _: &[Neighbor]| 0.2,
        };
        let m = context_mixture(&ctx, 0, &[1, 2], &[0.5, 0.5, 0.5], None).unwrap();
        assert!((m.true_mass - 1.0).abs() < 1e-12);
        assert!((m.false_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_detection_is_unchanged() {
        let model = FnModel(vec![0.1], |_, _: &[Neighbor]| 0.9);
        let s = rescore_scene(&[det(0, 0.42)], &model, &InferenceConfig::default()).unwrap();
        assert_eq!(s.beliefs(), vec![0.42]);
        assert!(s.chosen_neighbors[0].is_empty());
    }

    #[test]
    fn independent_model_is_identity() {
        let model = FnModel(vec![0.1], |_, _: &[Neighbor]| 0.1);
        let dets: Vec<_> = [0.9, 0.3, 0.55, 0.05]
            .iter()
            .enumerate()
            .map(|(i, c)| det(i as u64, *c))
            .collect();
        let s = rescore_scene(&dets, &model, &InferenceConfig::ungated()).unwrap();
        for (b, d) in s.beliefs().iter().zip(&dets) {
            assert!((b - d.confidence).abs() < 1e-9);
        }
    }

    #[test]
    fn favorable_context_raises_and_contradiction_lowers() {
        // detection 0 is supported by any present neighbor, detection 1 is not
        let model = FnModel(vec![0.1], |q: usize, n: &[Neighbor]| {
            let any = n.iter().any(|n| n.present);
            match (q, any) {
                (0, true) => 0.6,
                (1, true) => 0.01,
                _ => 0.1,
            }
        });
        let dets = vec![det(0, 0.5), det(1, 0.5), det(2, 0.95)];
        let s = rescore_scene(&dets, &model, &InferenceConfig::ungated()).unwrap();
        let b = s.beliefs();
        assert!(b[0] > 0.5);
        assert!(b[1] < 0.5);
        assert!(s.chosen_neighbors.iter().enumerate().all(|(i, c)| !c.contains(&i)));
    }

    #[test]
    fn unknown_categories_pass_through() {
        let model = FnModel(vec![0.1], |_, _: &[Neighbor]| 0.5);
        let mut dets = vec![det(0, 0.5), det(1, 0.5), det(2, 0.7)];
        dets[2].category = "unknown".into();
        let out = Engine::with_builtin(InferenceConfig::ungated())
            .unwrap()
            .rescore_images(&model, &dets, 1)
            .unwrap();
        assert_eq!(out.unknown_category, 1);
        assert_eq!(out.detections[2].confidence, 0.7);
        assert!(out.detections[0].confidence > 0.5);
    }

    #[test]
    fn exhaustive_prefers_smaller_sets_on_ties() {
        let mut score = |s: &[usize]| Ok(if s.contains(&3) { 1.0 } else { 0.0 });
        let set = ExhaustiveSearch.select(&[1, 3, 5], 2, &mut score).unwrap();
        assert_eq!(set, vec![3]);
    }

    #[test]
    fn greedy_adds_only_on_improvement() {
        let mut score = |s: &[usize]| Ok(s.iter().map(|&j| j as f64).sum::<f64>());
        assert_eq!(GreedySearch.select(&[1, 3, 5], 2, &mut score).unwrap(), vec![5, 3]);
        let mut flat = |s: &[usize]| Ok(if s.contains(&1) { 1.0 } else { 0.5 });
        assert_eq!(GreedySearch.select(&[1, 3, 5], 2, &mut flat).unwrap(), vec![1]);
    }

    #[test]
    fn uninformative_candidate_scores_zero() {
        let ctx = FnContext {
            priors: vec![0.2; 3],
            f: |_, n: &[Neighbor]| {
                if n.iter().any(|n| n.index == 2 && n.present) {
                    0.7
                } else {
                    0.2
                }
            },
        };
        assert_eq!(selection_score(&ctx, 0, &[1], &[0.5; 3]).unwrap(), 0.0);
        assert!(selection_score(&ctx, 0, &[2], &[0.5; 3]).unwrap() > 0.0);
    }

    #[test]
    fn priority_order_visits_decided_variables_first() {
        let mut seen = Vec::new();
        let mut b = vec![0.5, 0.9, 0.05, 0.9];
        PrioritySchedule
            .sweep(&mut b, &[0, 1, 2, 3], &mut |i, bs: &[f64]| {
                seen.push(i);
                Ok(bs[i])
            })
            .unwrap();
        assert_eq!(seen, vec![2, 1, 3, 0]);
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(InferenceConfig {
            max_neighbors: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
        let bad = InferenceConfig {
            gating: "often".into(),
            ..Default::default()
        };
        assert!(Engine::with_builtin(bad).is_err());
    }
}
