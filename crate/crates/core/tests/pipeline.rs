use fnm_core::eval::{evaluate, ElevenPoint};
use fnm_core::priors::fit_priors;
use fnm_core::relation::RelationTable;
use fnm_core::synth::{sample_dataset, SyntheticDataset, Template};
use fnm_core::{fit_relations, Detection, Engine, InferenceConfig, PriorTable, RelationModel};

fn benchmark(train: usize, test: usize) -> (RelationModel, SyntheticDataset, SyntheticDataset) {
    let t = Template::builtin("benchmark").unwrap().spatial().unwrap();
    let tr = sample_dataset(&t, train, 11).unwrap();
    let te = sample_dataset(&t, test, 12).unwrap();
    let table = fit_relations(&tr.annotated_scenes(), t.binning(), 2).unwrap();
    (RelationModel::with_default_priors(table).unwrap(), tr, te)
}

fn confidences(dets: &[Detection]) -> Vec<f64> {
    dets.iter().map(|d| d.confidence).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "detection {i}: {x} vs {y}");
    }
}

#[test]
fn rescoring_ignores_scale_and_translation() {
    let (model, _, te) = benchmark(300, 60);
    let engine = Engine::with_builtin(InferenceConfig::default()).unwrap();
    let dets = te.detections();
    let base = confidences(&engine.rescore_images(&model, &dets, 1).unwrap().detections);
    for k in [0.5, 3.0] {
        let moved: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                placement: d.placement.scaled(k),
                ..d.clone()
            })
            .collect();
        let out = confidences(&engine.rescore_images(&model, &moved, 1).unwrap().detections);
        assert_close(&base, &out, 1e-9);
    }
    let shifted: Vec<Detection> = dets
        .iter()
        .map(|d| Detection {
            placement: d.placement.translated([137.0, -58.5]),
            ..d.clone()
        })
        .collect();
    let out = confidences(&engine.rescore_images(&model, &shifted, 1).unwrap().detections);
    assert_close(&base, &out, 1e-9);
}

#[test]
fn worker_count_does_not_change_output() {
    let (model, _, te) = benchmark(300, 120);
    let engine = Engine::with_builtin(InferenceConfig::default()).unwrap();
    let dets = te.detections();
    let one = engine.rescore_images(&model, &dets, 1).unwrap();
    let eight = engine.rescore_images(&model, &dets, 8).unwrap();
    let bits = |o: &[Detection]| o.iter().map(|d| d.confidence.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&one.detections), bits(&eight.detections));
    assert_eq!(one.images, eight.images);
}

#[test]
fn model_without_observations_is_identity() {
    let t = Template::builtin("benchmark").unwrap().spatial().unwrap();
    let table = RelationTable::empty(t.binning(), 2).unwrap();
    let model = RelationModel::with_default_priors(table).unwrap();
    let dets = sample_dataset(&t, 40, 3).unwrap().detections();
    for gating in ["none", "derivative"] {
        let cfg = InferenceConfig {
            gating: gating.into(),
            ..InferenceConfig::default()
        };
        let out = Engine::with_builtin(cfg)
            .unwrap()
            .rescore_images(&model, &dets, 0)
            .unwrap();
        assert_eq!(confidences(&out.detections), confidences(&dets));
    }
}

#[test]
fn single_value_grid_sets_every_prior() {
    let (model, tr, _) = benchmark(60, 1);
    let engine = Engine::with_builtin(InferenceConfig::default()).unwrap();
    let fit = fit_priors(
        &model,
        &tr.annotated_scenes(),
        &tr.detections(),
        &engine,
        &[0.01],
        0.5,
        &ElevenPoint,
    )
    .unwrap();
    for (_, v) in fit.priors.iter() {
        assert_eq!(v, 0.01);
    }
}

#[test]
fn prior_search_matches_brute_force() {
    let (model, tr, _) = benchmark(150, 1);
    let engine = Engine::with_builtin(InferenceConfig::default()).unwrap();
    let grid = [0.05, 0.005, 0.02];
    let dets = tr.detections();
    let truth = tr.ground_truth();
    let fit = fit_priors(&model, &tr.annotated_scenes(), &dets, &engine, &grid, 0.5, &ElevenPoint).unwrap();

    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut priors: PriorTable = model.priors.clone();
    for cat in model.table.categories() {
        let aps: Vec<f64> = sorted
            .iter()
            .map(|&v| {
                let mut p = priors.clone();
                p.set(cat.clone(), v).unwrap();
                let m = RelationModel::new(model.table.clone(), p).unwrap();
                let out = engine.rescore_images(&m, &dets, 1).unwrap().detections;
                evaluate(&out, &truth, 0.5, &ElevenPoint).unwrap().ap(cat).unwrap()
            })
            .collect();
        let best = aps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pick = aps.iter().position(|a| *a == best).unwrap();
        priors.set(cat.clone(), sorted[pick]).unwrap();
    }
    assert_eq!(fit.priors, priors);
    assert_eq!(fit.trace.len(), sorted.len() * model.table.categories().len());
}
