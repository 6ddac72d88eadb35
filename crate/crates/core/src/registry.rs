//! Named strategies selected at runtime.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::eval::{AllPoints, ApIntegrator, ElevenPoint};
use crate::inference::{
    ExhaustiveSearch, GreedySearch, NeighborSearch, PrioritySchedule, Schedule, SynchronousSchedule,
};
use crate::stability::{CombinedGating, DerivativeGating, GatingPolicy, NoGating, SampleCountGating};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `strategy` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, strategy: Arc<T>) -> &mut Self {
        self.entries.insert(name.into(), strategy);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }
}

impl<T: ?Sized> Clone for Registry<T> {
    fn clone(&self) -> Self {
        Self {
            kind: self.kind,
            entries: self.entries.clone(),
        }
    }
}

impl<T: ?Sized> std::fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}

/// Every pluggable piece of the pipeline, looked up by the names stored in
/// [`InferenceConfig`](crate::inference::InferenceConfig) and the CLI flags.
#[derive(Clone, Debug)]
pub struct Strategies {
    pub gating: Registry<dyn GatingPolicy>,
    pub search: Registry<dyn NeighborSearch>,
    pub schedule: Registry<dyn Schedule>,
    pub ap: Registry<dyn ApIntegrator>,
}

impl Strategies {
    pub fn builtin() -> Self {
        let mut gating: Registry<dyn GatingPolicy> = Registry::new("gating");
        gating
            .register("none", Arc::new(NoGating))
            .register("derivative", Arc::new(DerivativeGating))
            .register("sample-count", Arc::new(SampleCountGating))
            .register("both", Arc::new(CombinedGating));

        let mut search: Registry<dyn NeighborSearch> = Registry::new("neighbor-search");
        search
            .register("exhaustive", Arc::new(ExhaustiveSearch))
            .register("greedy", Arc::new(GreedySearch));

        let mut schedule: Registry<dyn Schedule> = Registry::new("schedule");
        schedule
            .register("priority", Arc::new(PrioritySchedule))
            .register("synchronous", Arc::new(SynchronousSchedule));

        let mut ap: Registry<dyn ApIntegrator> = Registry::new("ap-mode");
        ap.register("eleven-point", Arc::new(ElevenPoint))
            .register("all-points", Arc::new(AllPoints));

        Self {
            gating,
            search,
            schedule,
            ap,
        }
    }
}

impl Default for Strategies {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_lists_alternatives() {
        let s = Strategies::builtin();
        let err = s.gating.get("sometimes").err().unwrap().to_string();
        assert!(err.contains("sometimes"));
        assert!(err.contains("both, derivative, none, sample-count"));
    }

    #[test]
    fn builtins_resolve() {
        let s = Strategies::builtin();
        assert_eq!(s.gating.get("derivative").unwrap().name(), "derivative");
        assert!(s.search.contains("greedy"));
        assert!(s.schedule.contains("synchronous"));
        assert!(s.ap.contains("all-points"));
    }

    #[test]
    fn custom_strategy_can_be_registered() {
        let mut s = Strategies::builtin();
        s.gating.register("never", Arc::new(NoGating));
        assert_eq!(s.gating.get("never").unwrap().name(), "none");
    }
}
