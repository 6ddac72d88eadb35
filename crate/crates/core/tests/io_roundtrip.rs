use std::path::Path;

use fnm_core::io::{
    annotations_to_json, detection_records, load_model, model_to_json, parse_annotations, parse_detections,
    parse_model, save_model, to_canonical_json, AnnotationSet, ModelBundle,
};
use fnm_core::synth::{sample_dataset, Template};
use fnm_core::{
    fit_relations, AnnotatedScene, BBox, CategoryMap, Detection, Error, GroundTruth, Placement, PriorTable,
    RelationModel,
};
use proptest::prelude::*;

fn grid_box() -> impl Strategy<Value = BBox> {
    (0u32..64 * 500, 0u32..64 * 500, 1u32..64 * 200, 1u32..64 * 200)
        .prop_map(|(x, y, w, h)| BBox::new(x as f64 / 64.0, y as f64 / 64.0, w as f64 / 64.0, h as f64 / 64.0))
}

fn names() -> impl Strategy<Value = Vec<String>> {
    prop::collection::btree_set("\\PC{1,12}", 1..5).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn detections_survive_a_round_trip(
        cats in names(),
        raw in prop::collection::vec((1u64..20, any::<prop::sample::Index>(), grid_box(), 0u32..=1_000_000), 0..40),
    ) {
        let map = CategoryMap::from_names(cats.clone());
        let dets: Vec<Detection> = raw
            .iter()
            .enumerate()
            .map(|(i, (img, c, b, s))| {
                Detection::new(i as u64 * 3, *img, c.get(&cats).clone(), Placement::from_bbox(b), *s as f64 / 1e6).unwrap()
            })
            .collect();
        let text = to_canonical_json(&detection_records(&dets, &map).unwrap()).unwrap();
        let back = parse_detections(&text, &map, Path::new("d.json")).unwrap();
        prop_assert_eq!(&back, &dets);
        let again = to_canonical_json(&detection_records(&back, &map).unwrap()).unwrap();
        prop_assert_eq!(again, text);
    }

    #[test]
    fn annotations_survive_a_round_trip(
        cats in names(),
        images in prop::collection::vec((1u32..64 * 2000, 1u32..64 * 2000, prop::collection::vec((any::<prop::sample::Index>(), grid_box()), 0..6)), 0..8),
    ) {
        let categories = CategoryMap::from_names(cats.clone());
        let mut next = 0;
        let scenes: Vec<AnnotatedScene> = images
            .iter()
            .enumerate()
            .map(|(k, (w, h, objs))| AnnotatedScene {
                image_id: 100 + k as u64,
                width: *w as f64 / 64.0,
                height: *h as f64 / 64.0,
                objects: objs
                    .iter()
                    .map(|(c, b)| {
                        next += 1;
                        GroundTruth {
                            id: next,
                            image_id: 100 + k as u64,
                            category: c.get(&cats).clone(),
                            placement: Placement::from_bbox(b),
                        }
                    })
                    .collect(),
            })
            .collect();
        let set = AnnotationSet { categories, scenes, warnings: Vec::new() };
        let text = annotations_to_json(&set).unwrap();
        let back = parse_annotations(&text, Path::new("a.json")).unwrap();
        prop_assert_eq!(&back.scenes, &set.scenes);
        prop_assert_eq!(&back.categories, &set.categories);
        prop_assert_eq!(annotations_to_json(&back).unwrap(), text);
    }
}

fn bundle(seed: u64, smoothing: f64, prior_milli: &[u32]) -> ModelBundle {
    let t = Template::builtin("benchmark").unwrap().spatial().unwrap();
    let ds = sample_dataset(&t, 30, seed).unwrap();
    let table = fit_relations(&ds.annotated_scenes(), t.binning(), 2)
        .unwrap()
        .with_smoothing(smoothing)
        .unwrap();
    let mut priors = PriorTable::uniform(table.categories().to_vec(), 0.02).unwrap();
    for (c, v) in table.categories().to_vec().iter().zip(prior_milli) {
        priors.set(c.clone(), *v as f64 / 1000.0).unwrap();
    }
    ModelBundle {
        model: RelationModel::new(table, priors).unwrap(),
        category_ids: CategoryMap::from_names(ds.categories.clone()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_survives_a_round_trip(
        seed in any::<u64>(),
        smoothing in (0u32..16).prop_map(|k| k as f64 / 4.0),
        priors in prop::collection::vec(1u32..999, 3),
    ) {
        let b = bundle(seed, smoothing, &priors);
        let text = model_to_json(&b).unwrap();
        let back = parse_model(&text, Path::new("m.json")).unwrap();
        prop_assert_eq!(&back, &b);
        prop_assert_eq!(model_to_json(&back).unwrap(), text);
    }
}

#[test]
fn newer_schema_is_rejected() {
    let text = model_to_json(&bundle(1, 1.0, &[20, 20, 20])).unwrap();
    assert!(text.contains("\"schema_version\": 1,"));
    let bumped = text.replace("\"schema_version\": 1,", "\"schema_version\": 2,");
    match parse_model(&bumped, Path::new("m.json")) {
        Err(Error::SchemaVersion { found: 2, expected: 1 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn saved_model_reloads_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.json");
    let second = dir.path().join("b.json");
    save_model(&bundle(9, 1.0, &[5, 10, 50]), &first).unwrap();
    save_model(&load_model(&first).unwrap(), &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}
