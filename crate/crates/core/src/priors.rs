//! Per-category prior search.

use crate::dataset::{AnnotatedScene, GroundTruth};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ApIntegrator};
use crate::geometry::Detection;
use crate::inference::Engine;
use crate::relation::{PriorTable, RelationModel};

pub const DEFAULT_PRIOR_GRID: [f64; 6] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05];

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSearch {
    pub priors: PriorTable,
    /// `(category, grid value, AP)` for every evaluated point.
    pub trace: Vec<(String, f64, f64)>,
}

/// One coordinate-wise pass over the categories in table order. Each
/// category takes the grid value that maximizes its own AP on the rescored
/// training detections while the others stay at their current values; ties
/// go to the smaller prior. Categories without ground truth keep their prior.
pub fn fit_priors(
    model: &RelationModel,
    train_scenes: &[AnnotatedScene],
    train_detections: &[Detection],
    engine: &Engine,
    grid: &[f64],
    iou_threshold: f64,
    ap_mode: &dyn ApIntegrator,
) -> Result<PriorSearch> {
    if grid.is_empty() {
        return Err(Error::invalid("prior grid is empty"));
    }
    if let Some(v) = grid.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::invalid(format!("prior grid value {v} outside (0, 1)")));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let truth: Vec<GroundTruth> = train_scenes.iter().flat_map(|s| s.objects.iter().cloned()).collect();
    let mut current = model.clone();
    let mut trace = Vec::new();
    for category in model.table.categories() {
        if !truth.iter().any(|g| &g.category == category) {
            continue;
        }
        let mut best: Option<(f64, f64)> = None;
        for &v in &grid {
            current.priors.set(category.clone(), v)?;
            let rescored = engine.rescore_images(&current, train_detections, 0)?.detections;
            let ap = evaluate(&rescored, &truth, iou_threshold, ap_mode)?
                .ap(category)
                .unwrap_or(0.0);
            trace.push((category.clone(), v, ap));
            if best.is_none_or(|(b, _)| ap > b) {
                best = Some((ap, v));
            }
        }
        if let Some((_, v)) = best {
            current.priors.set(category.clone(), v)?;
        }
    }
    Ok(PriorSearch {
        priors: current.priors,
        trace,
    })
}
