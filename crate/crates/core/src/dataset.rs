//! Ground truth and detections grouped per image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Detection, ImageId, Placement};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: u64,
    pub image_id: ImageId,
    pub category: String,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedScene {
    pub image_id: ImageId,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<GroundTruth>,
}

/// Bidirectional map between numeric category ids used in files and the
/// category names used everywhere else.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap {
    by_id: BTreeMap<u64, String>,
}

impl CategoryMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut map = Self::new();
        for (i, n) in names.into_iter().enumerate() {
            map.by_id.insert(i as u64 + 1, n.into());
        }
        map
    }

    pub fn insert(&mut self, id: u64, name: impl Into<String>) -> Result<()> {
        let name = name.into();
        if let Some(prev) = self.by_id.get(&id) {
            if *prev != name {
                return Err(Error::invalid(format!(
                    "category id {id} mapped to both `{prev}` and `{name}`"
                )));
            }
        }
        if self.by_id.iter().any(|(k, v)| *v == name && *k != id) {
            return Err(Error::invalid(format!("category `{name}` has two ids")));
        }
        self.by_id.insert(id, name);
        Ok(())
    }

    pub fn name(&self, id: u64) -> Option<&str> {
        self.by_id.get(&id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u64> {
        self.by_id.iter().find(|(_, v)| *v == name).map(|(k, _)| *k)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &str)> {
        self.by_id.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn names(&self) -> Vec<String> {
        self.by_id.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Split detections by image, keeping the input order inside each image and
/// ordering images by first appearance.
pub fn group_by_image(detections: &[Detection]) -> Vec<(ImageId, Vec<usize>)> {
    let mut order: Vec<ImageId> = Vec::new();
    let mut groups: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        groups
            .entry(d.image_id)
            .or_insert_with(|| {
                order.push(d.image_id);
                Vec::new()
            })
            .push(i);
    }
    order
        .into_iter()
        .map(|img| {
            let idx = groups.remove(&img).unwrap_or_default();
            (img, idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_map_is_bijective() {
        let mut m = CategoryMap::from_names(["a", "b"]);
        assert_eq!(m.id("b"), Some(2));
        assert_eq!(m.name(1), Some("a"));
        assert!(m.insert(1, "c").is_err());
        assert!(m.insert(7, "a").is_err());
        m.insert(7, "c").unwrap();
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn grouping_preserves_order() {
        let p = Placement {
            center: [0.0, 0.0],
            height: 1.0,
            width: 1.0,
        };
        let dets: Vec<Detection> = [5u64, 3, 5, 9, 3]
            .iter()
            .enumerate()
            .map(|(i, img)| Detection::new(i as u64, *img, "x", p, 0.5).unwrap())
            .collect();
        let g = group_by_image(&dets);
        assert_eq!(g, vec![(5, vec![0, 2]), (3, vec![1, 4]), (9, vec![3])]);
    }
}
