//! The interface between the inference engine and whatever supplies
//! context-conditional probabilities.
//!
//! A [`ContextModel`] is bound to the detections of one image, producing a
//! [`SceneContext`] that answers queries by variable index. Learned relation
//! tables and the exact synthetic joint both implement it.

use crate::error::Result;
use crate::geometry::Detection;

/// One neighbor variable and the value it is assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub index: usize,
    pub present: bool,
}

impl Neighbor {
    pub fn new(index: usize, present: bool) -> Self {
        Self { index, present }
    }
}

/// Answer to a context query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup {
    /// `P(query = True | neighbor assignment)`, in `[0, 1]`.
    pub prob_true: f64,
    /// Training observations behind the estimate; `u64::MAX` when exact.
    pub samples: u64,
    /// Set when the estimate needed clamping or a prior fallback.
    pub sparse: bool,
}

impl Lookup {
    pub fn exact(prob_true: f64) -> Self {
        Self {
            prob_true,
            samples: u64::MAX,
            sparse: false,
        }
    }

    pub fn prob(&self, query_present: bool) -> f64 {
        if query_present {
            self.prob_true
        } else {
            1.0 - self.prob_true
        }
    }
}

pub trait ContextModel: Send + Sync {
    /// Whether detections of this category can take part in inference.
    fn knows_category(&self, category: &str) -> bool;

    fn bind<'a>(&'a self, detections: &'a [Detection]) -> Result<Box<dyn SceneContext + 'a>>;
}

pub trait SceneContext {
    /// `P(X = True)` for the variable at `query`.
    fn prior(&self, query: usize) -> f64;

    /// `beliefs` holds the current `P(X = True)` of every variable; models
    /// use it to pick a reference frame among several present neighbors.
    fn lookup(&self, query: usize, neighbors: &[Neighbor], beliefs: &[f64]) -> Result<Lookup>;
}
