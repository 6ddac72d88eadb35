//! Relation tables: counts of object configurations in scale-invariant
//! coordinates, and the context-conditional probabilities derived from them.
//!
//! For every annotated object used as a reference, the table records which
//! `(category, cell)` slots around it hold at least one other object
//! (pair counts) and, when two neighbors are modeled, which pairs of slots
//! are jointly occupied (triple counts). Objects outside the binning range
//! are outside the reference's support window and are not counted.
//!
//! Conditionals are read off these counts with additive smoothing:
//!
//! * some neighbor present: the most believed present neighbor is the
//!   reference frame; the remaining neighbor (if any) is a second slot in
//!   that frame, present or absent.
//! * all neighbors absent, query present: no frame exists, so the query is
//!   used as reference via `P(q | N) = P(k | q, N\k) P(q | N\k) / P(k | N\k)`
//!   with `k` the neighbor of lowest detection id.
//! * all absent including the query: complement of the previous case.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{ContextModel, Lookup, Neighbor, SceneContext};
use crate::dataset::AnnotatedScene;
use crate::error::{Error, Result};
use crate::geometry::{bin_feature, featurize, BinningConfig, Cell, Detection};

pub const DEFAULT_SMOOTHING: f64 = 1.0;
pub const DEFAULT_PRIOR: f64 = 0.02;
/// Below this the composed denominator is treated as zero.
pub const DENOMINATOR_FLOOR: f64 = 1e-9;

/// A category at a binned position relative to some reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub category: u32,
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationTable {
    binning: BinningConfig,
    categories: Vec<String>,
    smoothing: f64,
    max_neighbors: u8,
    pair_totals: Vec<u64>,
    pair_counts: HashMap<(u32, Slot), u64>,
    /// Keyed with the two slots in ascending order; the joint count is symmetric.
    triple_counts: HashMap<(u32, Slot, Slot), u64>,
}

impl RelationTable {
    /// Empty table over the categories listed in `binning.scale_factors`.
    pub fn empty(binning: BinningConfig, max_neighbors: u8) -> Result<Self> {
        binning.validate()?;
        if !(1..=2).contains(&max_neighbors) {
            return Err(Error::invalid(format!(
                "max_neighbors must be 1 or 2, got {max_neighbors}"
            )));
        }
        let categories: Vec<String> = binning.scale_factors.keys().cloned().collect();
        Ok(Self {
            pair_totals: vec![0; categories.len()],
            binning,
            categories,
            smoothing: DEFAULT_SMOOTHING,
            max_neighbors,
            pair_counts: HashMap::new(),
            triple_counts: HashMap::new(),
        })
    }

    pub fn with_smoothing(mut self, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("smoothing must be >= 0, got {alpha}")));
        }
        self.smoothing = alpha;
        Ok(self)
    }

    /// Rebuild a table from stored counts; used by the model loader.
    pub fn from_counts(
        binning: BinningConfig,
        max_neighbors: u8,
        smoothing: f64,
        pair_totals: Vec<u64>,
        pair_counts: impl IntoIterator<Item = ((u32, Slot), u64)>,
        triple_counts: impl IntoIterator<Item = ((u32, Slot, Slot), u64)>,
    ) -> Result<Self> {
        let mut table = Self::empty(binning, max_neighbors)?.with_smoothing(smoothing)?;
        if pair_totals.len() != table.categories.len() {
            return Err(Error::invalid("pair totals do not match the category list"));
        }
        table.pair_totals = pair_totals;
        let n = table.categories.len() as u32;
        for ((r, s), c) in pair_counts {
            if r >= n || s.category >= n {
                return Err(Error::invalid("pair count refers to an unknown category index"));
            }
            table.pair_counts.insert((r, s), c);
        }
        for ((r, a, b), c) in triple_counts {
            if r >= n || a.category >= n || b.category >= n {
                return Err(Error::invalid("triple count refers to an unknown category index"));
            }
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            table.triple_counts.insert((r, a, b), c);
        }
        Ok(table)
    }

    pub fn binning(&self) -> &BinningConfig {
        &self.binning
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn max_neighbors(&self) -> u8 {
        self.max_neighbors
    }

    pub fn category_index(&self, name: &str) -> Option<u32> {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(name))
            .ok()
            .map(|i| i as u32)
    }

    pub fn pair_totals(&self) -> &[u64] {
        &self.pair_totals
    }

    pub fn pair_total(&self, reference: u32) -> u64 {
        self.pair_totals.get(reference as usize).copied().unwrap_or(0)
    }

    pub fn pair_count(&self, reference: u32, slot: Slot) -> u64 {
        self.pair_counts.get(&(reference, slot)).copied().unwrap_or(0)
    }

    /// Number of references whose frame has both slots occupied.
    pub fn joint_count(&self, reference: u32, a: Slot, b: Slot) -> u64 {
        if a == b {
            return self.pair_count(reference, a);
        }
        let key = if a <= b { (reference, a, b) } else { (reference, b, a) };
        self.triple_counts.get(&key).copied().unwrap_or(0)
    }

    /// Pair entries in key order.
    pub fn pair_entries(&self) -> Vec<((u32, Slot), u64)> {
        let sorted: BTreeMap<_, _> = self.pair_counts.iter().map(|(k, v)| (*k, *v)).collect();
        sorted.into_iter().collect()
    }

    /// Triple entries in key order.
    pub fn triple_entries(&self) -> Vec<((u32, Slot, Slot), u64)> {
        let sorted: BTreeMap<_, _> = self.triple_counts.iter().map(|(k, v)| (*k, *v)).collect();
        sorted.into_iter().collect()
    }

    /// Laplace estimate over the cells of one reference frame: every cell
    /// holds `smoothing` pseudo-counts.
    fn estimate(&self, num: u64, den: u64) -> Option<f64> {
        let cells = self.binning.cell_count() as f64;
        (den > 0).then(|| (num as f64 + self.smoothing) / (den as f64 + self.smoothing * cells))
    }

    /// Add the counts of another table built with the same configuration.
    pub fn merge(&mut self, other: &RelationTable) -> Result<()> {
        if self.binning != other.binning
            || self.max_neighbors != other.max_neighbors
            || self.smoothing != other.smoothing
        {
            return Err(Error::invalid("cannot merge tables with different configurations"));
        }
        for (t, o) in self.pair_totals.iter_mut().zip(&other.pair_totals) {
            *t += o;
        }
        for (k, v) in &other.pair_counts {
            *self.pair_counts.entry(*k).or_default() += v;
        }
        for (k, v) in &other.triple_counts {
            *self.triple_counts.entry(*k).or_default() += v;
        }
        Ok(())
    }

    fn count_scene(&mut self, scene: &AnnotatedScene) -> Result<()> {
        let cats = scene
            .objects
            .iter()
            .map(|o| {
                self.category_index(&o.category)
                    .ok_or_else(|| Error::MissingScaleFactor(o.category.clone()))
            })
            .collect::<Result<Vec<u32>>>()?;
        let mut slots: Vec<Slot> = Vec::new();
        for (ri, reference) in scene.objects.iter().enumerate() {
            let rc = cats[ri];
            self.pair_totals[rc as usize] += 1;
            slots.clear();
            for (oi, other) in scene.objects.iter().enumerate() {
                if oi == ri {
                    continue;
                }
                let f = featurize(
                    &other.placement,
                    &reference.placement,
                    &reference.category,
                    &self.binning,
                )?;
                if self.binning.in_window(&f) {
                    slots.push(Slot {
                        category: cats[oi],
                        cell: bin_feature(&f, &self.binning),
                    });
                }
            }
            // presence per slot, not multiplicity
            slots.sort_unstable();
            slots.dedup();
            for s in &slots {
                *self.pair_counts.entry((rc, *s)).or_default() += 1;
            }
            if self.max_neighbors >= 2 {
                for (i, a) in slots.iter().enumerate() {
                    for b in &slots[i + 1..] {
                        *self.triple_counts.entry((rc, *a, *b)).or_default() += 1;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Count object configurations over annotated scenes.
///
/// Scenes are counted in parallel shards whose tables are summed, so the
/// result does not depend on scene order.
pub fn fit_relations(scenes: &[AnnotatedScene], binning: BinningConfig, max_neighbors: u8) -> Result<RelationTable> {
    if scenes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let base = RelationTable::empty(binning, max_neighbors)?;
    let shard = scenes.len().div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
    let shards = scenes
        .par_chunks(shard)
        .map(|chunk| {
            let mut t = base.clone();
            for s in chunk {
                t.count_scene(s)?;
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = base;
    for s in &shards {
        table.merge(s)?;
    }
    Ok(table)
}

/// Per-category `P(X = True)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorTable(BTreeMap<String, f64>);

impl PriorTable {
    pub fn uniform<I, S>(categories: I, value: f64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut t = Self::default();
        for c in categories {
            t.set(c, value)?;
        }
        Ok(t)
    }

    pub fn set(&mut self, category: impl Into<String>, value: f64) -> Result<()> {
        if !(value > 0.0 && value < 1.0) {
            return Err(Error::invalid(format!("prior must lie in (0, 1), got {value}")));
        }
        self.0.insert(category.into(), value);
        Ok(())
    }

    pub fn get(&self, category: &str) -> Result<f64> {
        self.0
            .get(category)
            .copied()
            .ok_or_else(|| Error::UnknownCategory(category.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn validate(&self) -> Result<()> {
        match self.0.iter().find(|(_, v)| !(**v > 0.0 && **v < 1.0)) {
            Some((k, v)) => Err(Error::invalid(format!("prior for `{k}` is {v}, outside (0, 1)"))),
            None => Ok(()),
        }
    }
}

/// A trained relation table together with its category priors.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel {
    pub table: RelationTable,
    pub priors: PriorTable,
}

impl RelationModel {
    pub fn new(table: RelationTable, priors: PriorTable) -> Result<Self> {
        priors.validate()?;
        Ok(Self { table, priors })
    }

    /// Priors default to [`DEFAULT_PRIOR`] for every category.
    pub fn with_default_priors(table: RelationTable) -> Result<Self> {
        let priors = PriorTable::uniform(table.categories().iter().cloned(), DEFAULT_PRIOR)?;
        Self::new(table, priors)
    }
}

impl ContextModel for RelationModel {
    fn knows_category(&self, category: &str) -> bool {
        self.table.category_index(category).is_some() && self.priors.get(category).is_ok()
    }

    fn bind<'a>(&'a self, detections: &'a [Detection]) -> Result<Box<dyn SceneContext + 'a>> {
        Ok(Box::new(BoundRelations::new(self, detections)?))
    }
}

/// A relation model bound to one image: category indices, priors and the
/// pairwise cells are resolved once.
pub struct BoundRelations<'a> {
    table: &'a RelationTable,
    detections: &'a [Detection],
    categories: Vec<u32>,
    priors: Vec<f64>,
    /// `cells[q * n + r]` is the cell of `q` in the frame of `r`.
    cells: Vec<Cell>,
}

impl<'a> BoundRelations<'a> {
    pub fn new(model: &'a RelationModel, detections: &'a [Detection]) -> Result<Self> {
        let table = &model.table;
        let mut categories = Vec::with_capacity(detections.len());
        let mut priors = Vec::with_capacity(detections.len());
        for d in detections {
            let c = table
                .category_index(&d.category)
                .ok_or_else(|| Error::UnknownCategory(d.category.clone()))?;
            categories.push(c);
            priors.push(model.priors.get(&d.category)?);
        }
        let n = detections.len();
        let mut cells = Vec::with_capacity(n * n);
        for q in detections {
            for r in detections {
                let f = featurize(&q.placement, &r.placement, &r.category, &table.binning)?;
                cells.push(bin_feature(&f, &table.binning));
            }
        }
        Ok(Self {
            table,
            detections,
            categories,
            priors,
            cells,
        })
    }

    fn slot(&self, q: usize, r: usize) -> Slot {
        Slot {
            category: self.categories[q],
            cell: self.cells[q * self.detections.len() + r],
        }
    }

    fn fallback(&self, q: usize, samples: u64) -> Lookup {
        Lookup {
            prob_true: self.priors[q],
            samples,
            sparse: true,
        }
    }

    /// Most believed present neighbor; ties go to the lower detection id.
    fn reference(&self, neighbors: &[Neighbor], beliefs: &[f64]) -> Option<usize> {
        neighbors
            .iter()
            .enumerate()
            .filter(|(_, n)| n.present)
            .max_by(|(_, a), (_, b)| {
                beliefs[a.index]
                    .total_cmp(&beliefs[b.index])
                    .then(self.detections[b.index].id.cmp(&self.detections[a.index].id))
            })
            .map(|(i, _)| i)
    }

    fn conditional(&self, q: usize, neighbors: &[Neighbor], beliefs: &[f64]) -> Result<Lookup> {
        if neighbors.is_empty() {
            return Ok(Lookup::exact(self.priors[q]));
        }
        if neighbors.len() > self.table.max_neighbors as usize {
            return Err(Error::invalid(format!(
                "{} neighbors requested but the table models at most {}",
                neighbors.len(),
                self.table.max_neighbors
            )));
        }
        match self.reference(neighbors, beliefs) {
            Some(pos) => {
                let other = neighbors.iter().enumerate().find(|(i, _)| *i != pos).map(|(_, n)| *n);
                Ok(self.anchored(q, neighbors[pos].index, other))
            }
            None => self.all_absent(q, neighbors, beliefs),
        }
    }

    /// Conditional in the frame of the present neighbor `r`.
    fn anchored(&self, q: usize, r: usize, other: Option<Neighbor>) -> Lookup {
        let t = self.table;
        let rc = self.categories[r];
        let total = t.pair_total(rc);
        let qs = self.slot(q, r);
        let (num, den) = match other {
            None => (t.pair_count(rc, qs), total),
            Some(k) => {
                let ks = self.slot(k.index, r);
                let joint = t.joint_count(rc, ks, qs);
                let k_count = t.pair_count(rc, ks);
                if k.present {
                    (joint, k_count)
                } else {
                    (
                        t.pair_count(rc, qs).saturating_sub(joint),
                        total.saturating_sub(k_count),
                    )
                }
            }
        };
        match t.estimate(num, den) {
            Some(p) => Lookup {
                prob_true: p,
                samples: den,
                sparse: false,
            },
            None => self.fallback(q, 0),
        }
    }

    /// All neighbors absent: use the query as reference frame.
    fn all_absent(&self, q: usize, neighbors: &[Neighbor], beliefs: &[f64]) -> Result<Lookup> {
        let kpos = (0..neighbors.len())
            .min_by_key(|&i| self.detections[neighbors[i].index].id)
            .unwrap_or(0);
        let k = neighbors[kpos].index;
        let rest: Vec<Neighbor> = neighbors
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != kpos)
            .map(|(_, n)| *n)
            .collect();
        let mut with_query = rest.clone();
        with_query.push(Neighbor::new(q, true));

        let k_given_q = self.conditional(k, &with_query, beliefs)?;
        let q_given_rest = self.conditional(q, &rest, beliefs)?;
        let k_given_rest = self.conditional(k, &rest, beliefs)?;

        let samples = k_given_q.samples.min(q_given_rest.samples).min(k_given_rest.samples);
        let mut sparse = k_given_q.sparse || q_given_rest.sparse || k_given_rest.sparse;

        let den = 1.0 - k_given_rest.prob_true;
        if den < DENOMINATOR_FLOOR {
            return Ok(self.fallback(q, samples));
        }
        let mut p = (1.0 - k_given_q.prob_true) * q_given_rest.prob_true / den;
        if p > 1.0 {
            // the complementary (all-absent) assignment would go negative
            p = 1.0;
            sparse = true;
        }
        Ok(Lookup {
            prob_true: p,
            samples,
            sparse,
        })
    }
}

impl SceneContext for BoundRelations<'_> {
    fn prior(&self, query: usize) -> f64 {
        self.priors[query]
    }

    fn lookup(&self, query: usize, neighbors: &[Neighbor], beliefs: &[f64]) -> Result<Lookup> {
        self.conditional(query, neighbors, beliefs)
    }
}

fn standalone_lookup(model: &RelationModel, query: &Detection, neighbors: &[(Detection, bool)]) -> Result<Lookup> {
    let mut dets = Vec::with_capacity(neighbors.len() + 1);
    dets.push(query.clone());
    dets.extend(neighbors.iter().map(|(d, _)| d.clone()));
    let beliefs: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    let assigned: Vec<Neighbor> = neighbors
        .iter()
        .enumerate()
        .map(|(i, (_, present))| Neighbor::new(i + 1, *present))
        .collect();
    BoundRelations::new(model, &dets)?.conditional(0, &assigned, &beliefs)
}

/// `P(query = query_assignment | neighbors)`; neighbor confidences act as
/// beliefs when choosing the reference frame.
pub fn context_conditional(
    model: &RelationModel,
    query: &Detection,
    neighbors: &[(Detection, bool)],
    query_assignment: bool,
) -> Result<f64> {
    Ok(standalone_lookup(model, query, neighbors)?.prob(query_assignment))
}

/// Training observations behind [`context_conditional`]'s estimate.
pub fn observed_samples(model: &RelationModel, query: &Detection, neighbors: &[(Detection, bool)]) -> Result<u64> {
    Ok(standalone_lookup(model, query, neighbors)?.samples)
}
