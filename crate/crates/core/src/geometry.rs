//! Detections, location variables and the scale-invariant relative features
//! used to index relation tables.
//!
//! A feature describes a query object relative to a reference object: the
//! center offset in units of the reference height (times a per-category
//! scale factor) and the log ratio of heights. Both are unchanged by a
//! uniform rescale of the image, and the offset is unchanged by translation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ImageId = u64;
pub type DetectionId = u64;

/// Axis-aligned box with a top-left origin, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self { x, y, width, height }
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x + self.width / 2.0, self.y + self.height / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0.0 && self.height > 0.0 && self.x.is_finite() && self.y.is_finite()
    }
}

/// Where an object is and how big it is. Shared by detections and
/// ground-truth annotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub center: [f64; 2],
    pub height: f64,
    pub width: f64,
}

impl Placement {
    pub fn from_bbox(b: &BBox) -> Self {
        Self {
            center: b.center(),
            height: b.height,
            width: b.width,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            x: self.center[0] - self.width / 2.0,
            y: self.center[1] - self.height / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    /// Uniform rescale about the image origin.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            center: [self.center[0] * k, self.center[1] * k],
            height: self.height * k,
            width: self.width * k,
        }
    }

    pub fn translated(&self, d: [f64; 2]) -> Self {
        Self {
            center: [self.center[0] + d[0], self.center[1] + d[1]],
            ..*self
        }
    }
}

/// One detector hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: DetectionId,
    pub image_id: ImageId,
    pub category: String,
    pub placement: Placement,
    pub confidence: f64,
}

impl Detection {
    pub fn new(
        id: DetectionId,
        image_id: ImageId,
        category: impl Into<String>,
        placement: Placement,
        confidence: f64,
    ) -> Result<Self> {
        let det = Self {
            id,
            image_id,
            category: category.into(),
            placement,
            confidence,
        };
        det.validate()?;
        Ok(det)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::invalid(format!(
                "detection {}: confidence {} outside [0, 1]",
                self.id, self.confidence
            )));
        }
        if !(self.placement.height > 0.0 && self.placement.width > 0.0) {
            return Err(Error::invalid(format!(
                "detection {}: box must have positive width and height",
                self.id
            )));
        }
        Ok(())
    }
}

/// Binary presence variable attached to a detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationVariable {
    pub detection: DetectionId,
    pub belief_true: f64,
}

impl LocationVariable {
    pub fn belief_false(&self) -> f64 {
        1.0 - self.belief_true
    }

    pub fn belief(&self, present: bool) -> f64 {
        if present {
            self.belief_true
        } else {
            self.belief_false()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeFeature {
    pub offset: [f64; 2],
    pub scale_ratio: f64,
}

/// Index of a binned relative feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: u16,
    pub y: u16,
    pub scale: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverflowPolicy {
    #[default]
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    /// `[[x_min, x_max], [y_min, y_max]]` in reference heights.
    pub offset_range: [[f64; 2]; 2],
    pub offset_bins: [u16; 2],
    pub scale_range: [f64; 2],
    pub scale_bins: u16,
    #[serde(default)]
    pub overflow: OverflowPolicy,
    pub scale_factors: BTreeMap<String, f64>,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            offset_range: [[-4.0, 4.0], [-4.0, 4.0]],
            offset_bins: [16, 16],
            scale_range: [-2.0, 2.0],
            scale_bins: 8,
            overflow: OverflowPolicy::Clamp,
            scale_factors: BTreeMap::new(),
        }
    }
}

impl BinningConfig {
    /// Default geometry with `f(t) = 1` for every listed category.
    pub fn with_categories<I, S>(categories: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut cfg = Self::default();
        for c in categories {
            cfg.scale_factors.insert(c.into(), 1.0);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.offset_range[0], self.offset_range[1], self.scale_range];
        if ranges
            .iter()
            .any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return Err(Error::invalid("binning ranges must be finite and non-degenerate"));
        }
        if self.offset_bins.contains(&0) || self.scale_bins == 0 {
            return Err(Error::invalid("bin counts must be at least 1"));
        }
        if let Some((name, f)) = self.scale_factors.iter().find(|(_, f)| !(f.is_finite() && **f > 0.0)) {
            return Err(Error::invalid(format!(
                "scale factor for `{name}` must be positive, got {f}"
            )));
        }
        Ok(())
    }

    pub fn scale_factor(&self, category: &str) -> Result<f64> {
        self.scale_factors
            .get(category)
            .copied()
            .ok_or_else(|| Error::MissingScaleFactor(category.to_string()))
    }

    pub fn cell_count(&self) -> usize {
        self.offset_bins[0] as usize * self.offset_bins[1] as usize * self.scale_bins as usize
    }

    /// True when every component lies inside the configured ranges. Relation
    /// counting only uses pairs inside this support window.
    pub fn in_window(&self, f: &RelativeFeature) -> bool {
        let inside = |v: f64, [lo, hi]: [f64; 2]| v >= lo && v <= hi;
        inside(f.offset[0], self.offset_range[0])
            && inside(f.offset[1], self.offset_range[1])
            && inside(f.scale_ratio, self.scale_range)
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `(query - reference) / (reference_height * scale_factor)`, componentwise.
pub fn relative_location(
    query_center: [f64; 2],
    ref_center: [f64; 2],
    ref_height: f64,
    ref_scale_factor: f64,
) -> Result<[f64; 2]> {
    positive("reference height", ref_height)?;
    positive("reference scale factor", ref_scale_factor)?;
    let unit = ref_height * ref_scale_factor;
    Ok([
        (query_center[0] - ref_center[0]) / unit,
        (query_center[1] - ref_center[1]) / unit,
    ])
}

/// Natural log of the height ratio.
pub fn relative_scale(query_height: f64, ref_height: f64) -> Result<f64> {
    positive("query height", query_height)?;
    positive("reference height", ref_height)?;
    Ok((query_height / ref_height).ln())
}

pub fn featurize(
    query: &Placement,
    reference: &Placement,
    reference_category: &str,
    config: &BinningConfig,
) -> Result<RelativeFeature> {
    let factor = config.scale_factor(reference_category)?;
    Ok(RelativeFeature {
        offset: relative_location(query.center, reference.center, reference.height, factor)?,
        scale_ratio: relative_scale(query.height, reference.height)?,
    })
}

fn bin_axis(v: f64, [lo, hi]: [f64; 2], bins: u16) -> u16 {
    let width = (hi - lo) / bins as f64;
    let idx = ((v - lo) / width).floor();
    // NaN casts to 0; infinities saturate and are clamped below.
    (idx.max(0.0) as u64).min(bins as u64 - 1) as u16
}

/// Uniform binning; anything outside the ranges lands in the nearest edge bin.
pub fn bin_feature(feature: &RelativeFeature, config: &BinningConfig) -> Cell {
    Cell {
        x: bin_axis(feature.offset[0], config.offset_range[0], config.offset_bins[0]),
        y: bin_axis(feature.offset[1], config.offset_range[1], config.offset_bins[1]),
        scale: bin_axis(feature.scale_ratio, config.scale_range, config.scale_bins),
    }
}
