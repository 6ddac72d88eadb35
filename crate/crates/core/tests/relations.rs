use fnm_core::geometry::{bin_feature, featurize, Placement};
use fnm_core::relation::{context_conditional, observed_samples, Slot};
use fnm_core::synth::{sample_dataset, BetaSpec, CategorySpec, DetectorModel, ImageSize, RelationSpec, SceneTemplate};
use fnm_core::{fit_relations, Detection, RelationModel};

/// Desk always present; a lamp sits at a fixed offset (the middle of a cell)
/// with probability `co`.
fn template(co: f64) -> SceneTemplate {
    SceneTemplate {
        image: ImageSize {
            width: 800.0,
            height: 600.0,
        },
        categories: vec![
            CategorySpec {
                name: "desk".into(),
                prior: 1.0,
                height: 100.0,
                height_spread: 0.3,
                aspect: 1.5,
            },
            CategorySpec {
                name: "lamp".into(),
                prior: 0.0,
                height: 30.0,
                height_spread: 0.0,
                aspect: 0.5,
            },
        ],
        relations: vec![RelationSpec {
            parent: "desk".into(),
            child: "lamp".into(),
            co_occurrence: co,
            offset_mean: [0.75, -1.25],
            offset_spread: 0.0,
            log_scale_mean: -1.25,
            log_scale_spread: 0.0,
        }],
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

fn det(id: u64, cat: &str, p: Placement) -> Detection {
    Detection::new(id, 1, cat, p, 0.9).unwrap()
}

#[test]
fn learned_conditional_converges_to_generator() {
    let co = 0.7;
    let t = template(co);
    let ds = sample_dataset(&t, 100, 21).unwrap();
    let table = fit_relations(&ds.annotated_scenes(), t.binning(), 2)
        .unwrap()
        .with_smoothing(0.0)
        .unwrap();
    let model = RelationModel::with_default_priors(table).unwrap();
    let desk = Placement {
        center: [400.0, 300.0],
        height: 100.0,
        width: 150.0,
    };
    let lamp = Placement {
        center: [475.0, 175.0],
        height: 100.0 * (-1.25f64).exp(),
        width: 10.0,
    };
    let p = context_conditional(&model, &det(1, "lamp", lamp), &[(det(0, "desk", desk), true)], true).unwrap();
    let sigma = (co * (1.0 - co) / 100.0).sqrt();
    assert!((p - co).abs() < 3.0 * sigma, "{p} vs {co}");
}

#[test]
fn sampled_co_occurrence_matches_template() {
    let co = 0.35;
    let ds = sample_dataset(&template(co), 10_000, 5).unwrap();
    let with_child = ds
        .scenes
        .iter()
        .filter(|s| s.parents.iter().any(Option::is_some))
        .count();
    let freq = with_child as f64 / 10_000.0;
    let sigma = (co * (1.0 - co) / 10_000.0).sqrt();
    assert!((freq - co).abs() < 3.0 * sigma, "{freq}");
}

#[test]
fn samples_count_the_cell() {
    let t = template(1.0);
    let ds = sample_dataset(&t, 37, 2).unwrap();
    let binning = t.binning();
    let table = fit_relations(&ds.annotated_scenes(), binning.clone(), 1).unwrap();
    let s = &ds.scenes[0].scene.objects;
    let f = featurize(&s[1].placement, &s[0].placement, "desk", &binning).unwrap();
    let slot = Slot {
        category: table.category_index("lamp").unwrap(),
        cell: bin_feature(&f, &binning),
    };
    assert_eq!(table.pair_count(table.category_index("desk").unwrap(), slot), 37);

    let model = RelationModel::with_default_priors(table).unwrap();
    let q = det(1, "lamp", s[1].placement);
    let r = det(0, "desk", s[0].placement);
    assert_eq!(observed_samples(&model, &q, &[(r.clone(), true)]).unwrap(), 37);
    // absent desk: the recursion uses the lamp frame and the priors
    assert_eq!(observed_samples(&model, &q, &[(r, false)]).unwrap(), 37);
}
