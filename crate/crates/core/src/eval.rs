//! Detection matching and average precision.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, ImageId};

pub const DEFAULT_IOU: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::invalid("IoU needs boxes with positive width and height"));
    }
    let ix = (a.x + a.width).min(b.x + b.width) - a.x.max(b.x);
    let iy = (a.y + a.height).min(b.y + b.height) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return Ok(0.0);
    }
    let inter = ix * iy;
    Ok(inter / (a.area() + b.area() - inter))
}

/// Ranked TP/FP labels of one category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMatch {
    pub gt_count: usize,
    /// `(confidence, is_true_positive)` in ranking order.
    pub ranked: Vec<(f64, bool)>,
}

impl CategoryMatch {
    pub fn true_positives(&self) -> usize {
        self.ranked.iter().filter(|(_, tp)| *tp).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub categories: BTreeMap<String, CategoryMatch>,
}

/// Greedy matching: detections in descending confidence (ties by id) each
/// take the unmatched ground truth of the same image and category with the
/// highest IoU, provided it reaches `iou_threshold`.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    iou_threshold: f64,
) -> Result<MatchResult> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    let mut gts: HashMap<(ImageId, &str), Vec<BBox>> = HashMap::new();
    let mut result = MatchResult::default();
    for g in ground_truth {
        gts.entry((g.image_id, g.category.as_str()))
            .or_default()
            .push(g.placement.bbox());
        result.categories.entry(g.category.clone()).or_default().gt_count += 1;
    }
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
    let mut used: HashMap<(ImageId, &str), Vec<bool>> = HashMap::new();
    for d in order {
        let key = (d.image_id, d.category.as_str());
        let bbox = d.placement.bbox();
        let mut hit = None;
        if let Some(boxes) = gts.get(&key) {
            let taken = used.entry(key).or_insert_with(|| vec![false; boxes.len()]);
            let mut best = iou_threshold;
            for (k, g) in boxes.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                let o = iou(&bbox, g)?;
                if o >= best && hit.is_none_or(|(_, b)| o > b) {
                    best = o;
                    hit = Some((k, o));
                }
            }
            if let Some((k, _)) = hit {
                taken[k] = true;
            }
        }
        result
            .categories
            .entry(d.category.clone())
            .or_default()
            .ranked
            .push((d.confidence, hit.is_some()));
    }
    Ok(result)
}

/// Area under a precision-recall curve.
pub trait ApIntegrator: Send + Sync {
    /// `recall` is non-decreasing; both slices have one entry per ranked
    /// detection.
    fn integrate(&self, recall: &[f64], precision: &[f64]) -> f64;
}

/// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
#[derive(Debug, Default)]
pub struct ElevenPoint;

impl ApIntegrator for ElevenPoint {
    fn integrate(&self, recall: &[f64], precision: &[f64]) -> f64 {
        (0..=10)
            .map(|t| {
                let r = t as f64 / 10.0;
                recall
                    .iter()
                    .zip(precision)
                    .filter(|(rc, _)| **rc >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 11.0
    }
}

/// Exact area under the monotone precision envelope.
#[derive(Debug, Default)]
pub struct AllPoints;

impl ApIntegrator for AllPoints {
    fn integrate(&self, recall: &[f64], precision: &[f64]) -> f64 {
        let mut envelope = precision.to_vec();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut area = 0.0;
        let mut prev = 0.0;
        for (r, p) in recall.iter().zip(&envelope) {
            area += (r - prev) * p;
            prev = *r;
        }
        area
    }
}

pub fn average_precision(m: &CategoryMatch, mode: &dyn ApIntegrator) -> Result<f64> {
    if m.gt_count == 0 {
        return Err(Error::UndefinedMetric("AP with zero ground-truth objects".into()));
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(m.ranked.len());
    let mut precision = Vec::with_capacity(m.ranked.len());
    for (k, (_, hit)) in m.ranked.iter().enumerate() {
        tp += usize::from(*hit);
        recall.push(tp as f64 / m.gt_count as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    Ok(mode.integrate(&recall, &precision))
}

/// Unweighted mean; `None` entries (categories without ground truth) are skipped.
pub fn mean_average_precision<'a>(aps: impl IntoIterator<Item = &'a Option<f64>>) -> Result<f64> {
    let defined: Vec<f64> = aps.into_iter().filter_map(|a| *a).collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("mAP over no category with ground truth".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub ground_truth: usize,
    pub detections: usize,
    pub true_positives: usize,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryReport>,
    pub map: f64,
}

impl EvalReport {
    pub fn ap(&self, category: &str) -> Option<f64> {
        self.categories
            .iter()
            .find(|c| c.category == category)
            .and_then(|c| c.ap)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,ground_truth,detections,true_positives,ap\n");
        for c in &self.categories {
            let ap = c.ap.map(|a| format!("{a:.9}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&c.category),
                c.ground_truth,
                c.detections,
                c.true_positives,
                ap
            ));
        }
        s.push_str(&format!("mAP,,,,{:.9}\n", self.map));
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .categories
            .iter()
            .map(|c| c.category.chars().count())
            .max()
            .unwrap_or(0)
            .max(8);
        writeln!(
            f,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8}",
            "category", "gt", "dets", "tp", "AP"
        )?;
        for c in &self.categories {
            let ap = c.ap.map(|a| format!("{:.4}", a)).unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8}",
                c.category, c.ground_truth, c.detections, c.true_positives, ap
            )?;
        }
        write!(
            f,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8.4}",
            "mAP", "", "", "", self.map
        )
    }
}

/// Matches, integrates and averages in one step.
pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    iou_threshold: f64,
    mode: &dyn ApIntegrator,
) -> Result<EvalReport> {
    let matched = match_detections(detections, ground_truth, iou_threshold)?;
    let names: BTreeSet<&String> = matched.categories.keys().collect();
    let mut categories = Vec::with_capacity(names.len());
    for name in names {
        let m = &matched.categories[name];
        categories.push(CategoryReport {
            category: name.clone(),
            ground_truth: m.gt_count,
            detections: m.ranked.len(),
            true_positives: m.true_positives(),
            ap: (m.gt_count > 0).then(|| average_precision(m, mode)).transpose()?,
        });
    }
    let map = mean_average_precision(categories.iter().map(|c| &c.ap))?;
    Ok(EvalReport { categories, map })
}
