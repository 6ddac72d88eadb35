use fnm_core::eval::{evaluate, match_detections, AllPoints, ApIntegrator, ElevenPoint};
use fnm_core::synth::{sample_dataset, Template};
use fnm_core::{BBox, Detection, GroundTruth, Placement};
use proptest::prelude::*;

fn gt(id: u64, image: u64, cat: &str, b: BBox) -> GroundTruth {
    GroundTruth {
        id,
        image_id: image,
        category: cat.into(),
        placement: Placement::from_bbox(&b),
    }
}

fn det(id: u64, image: u64, cat: &str, b: BBox, c: f64) -> Detection {
    Detection::new(id, image, cat, Placement::from_bbox(&b), c).unwrap()
}

fn plain_iou(a: &BBox, b: &BBox) -> f64 {
    let w = ((a.x + a.width).min(b.x + b.width) - a.x.max(b.x)).max(0.0);
    let h = ((a.y + a.height).min(b.y + b.height) - a.y.max(b.y)).max(0.0);
    let i = w * h;
    i / (a.width * a.height + b.width * b.height - i)
}

/// All one-to-one assignments of ranked detections to ground truth with
/// overlap at least `thr`; returns the IoU vector that is lexicographically
/// largest in ranking order (0 for an unmatched detection).
fn lexicographic_best(iou: &[Vec<f64>], thr: f64) -> Vec<f64> {
    fn go(i: usize, iou: &[Vec<f64>], thr: f64, used: &mut Vec<bool>, cur: &mut Vec<f64>, best: &mut Vec<f64>) {
        if i == iou.len() {
            if cur
                .iter()
                .zip(best.iter())
                .find(|(a, b)| a != b)
                .is_some_and(|(a, b)| a > b)
            {
                *best = cur.clone();
            }
            return;
        }
        cur.push(0.0);
        go(i + 1, iou, thr, used, cur, best);
        cur.pop();
        for k in 0..used.len() {
            if !used[k] && iou[i][k] >= thr {
                used[k] = true;
                cur.push(iou[i][k]);
                go(i + 1, iou, thr, used, cur, best);
                cur.pop();
                used[k] = false;
            }
        }
    }
    let n_gt = iou.first().map_or(0, Vec::len);
    let mut best = vec![0.0; iou.len()];
    go(0, iou, thr, &mut vec![false; n_gt], &mut Vec::new(), &mut best);
    best
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..10.0f64, 0.0..10.0f64, 2.0..6.0f64, 2.0..6.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn greedy_matching_is_lexicographically_best(
        gts in prop::collection::vec(arb_box(), 0..5),
        dets in prop::collection::vec(arb_box(), 0..6),
        thr in 0.1..0.6f64,
    ) {
        let truth: Vec<GroundTruth> = gts.iter().enumerate().map(|(i, b)| gt(i as u64, 1, "a", *b)).collect();
        // strictly decreasing confidences keep the ranking equal to input order
        let ds: Vec<Detection> = dets
            .iter()
            .enumerate()
            .map(|(i, b)| det(i as u64, 1, "a", *b, 0.9 - 0.1 * i as f64))
            .collect();
        let m = match_detections(&ds, &truth, thr).unwrap();
        let iou: Vec<Vec<f64>> = dets.iter().map(|d| gts.iter().map(|g| plain_iou(d, g)).collect()).collect();
        let best = lexicographic_best(&iou, thr);
        let flags: Vec<bool> = m.categories.get("a").map(|c| c.ranked.iter().map(|r| r.1).collect()).unwrap_or_default();
        let expected: Vec<bool> = best.iter().map(|v| *v > 0.0).collect();
        prop_assert_eq!(flags, expected);
    }

    #[test]
    fn ap_ignores_monotone_rescaling(
        labels in prop::collection::vec((0.0..1.0f64, any::<bool>()), 1..30),
        power in 0.2..5.0f64,
    ) {
        let (ds, truth) = ranked_case(&labels);
        let warped: Vec<Detection> = ds
            .iter()
            .map(|d| Detection { confidence: d.confidence.powf(power), ..d.clone() })
            .collect();
        for mode in [&ElevenPoint as &dyn ApIntegrator, &AllPoints] {
            let a = evaluate(&ds, &truth, 0.5, mode).unwrap().map;
            let b = evaluate(&warped, &truth, 0.5, mode).unwrap().map;
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn trailing_false_positive_never_helps(
        labels in prop::collection::vec((0.01..1.0f64, any::<bool>()), 1..30),
    ) {
        let (mut ds, truth) = ranked_case(&labels);
        for mode in [&ElevenPoint as &dyn ApIntegrator, &AllPoints] {
            let before = evaluate(&ds, &truth, 0.5, mode).unwrap().map;
            ds.push(det(999, 1, "a", BBox::new(500.0, 500.0, 5.0, 5.0), 0.001));
            let after = evaluate(&ds, &truth, 0.5, mode).unwrap().map;
            ds.pop();
            prop_assert!(after <= before + 1e-15, "{after} > {before}");
        }
    }
}

/// Detections on disjoint slots; a `true` label puts a ground-truth box under
/// the detection, and one extra object is never detected.
fn ranked_case(labels: &[(f64, bool)]) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut ds = Vec::new();
    let mut truth = vec![gt(1000, 1, "a", BBox::new(-100.0, -100.0, 5.0, 5.0))];
    for (i, (c, hit)) in labels.iter().enumerate() {
        let b = BBox::new(10.0 * i as f64, 0.0, 5.0, 5.0);
        ds.push(det(i as u64, 1, "a", b, *c));
        if *hit {
            truth.push(gt(i as u64, 1, "a", b));
        }
    }
    (ds, truth)
}

/// Stand-alone evaluation written directly from the definitions.
fn reference_map(dets: &[Detection], truth: &[GroundTruth], thr: f64, eleven: bool) -> f64 {
    let mut cats: Vec<&str> = truth.iter().map(|g| g.category.as_str()).collect();
    cats.sort();
    cats.dedup();
    let mut total = 0.0;
    for cat in &cats {
        let gts: Vec<&GroundTruth> = truth.iter().filter(|g| g.category == *cat).collect();
        let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.category == *cat).collect();
        ds.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap().then(a.id.cmp(&b.id)));
        let mut taken = vec![false; gts.len()];
        let (mut tp, mut rec, mut prec) = (0.0, Vec::new(), Vec::new());
        for (k, d) in ds.iter().enumerate() {
            let db = d.placement.bbox();
            let mut pick: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.image_id != d.image_id {
                    continue;
                }
                let o = plain_iou(&db, &g.placement.bbox());
                if o >= thr && pick.is_none_or(|(_, b)| o > b) {
                    pick = Some((j, o));
                }
            }
            if let Some((j, _)) = pick {
                taken[j] = true;
                tp += 1.0;
            }
            rec.push(tp / gts.len() as f64);
            prec.push(tp / (k + 1) as f64);
        }
        let ap = if eleven {
            (0..11)
                .map(|t| {
                    let r = t as f64 * 0.1;
                    (0..rec.len())
                        .filter(|&i| rec[i] >= r - 1e-12)
                        .map(|i| prec[i])
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        } else {
            let mut mrec = vec![0.0];
            mrec.extend(&rec);
            let mut mpre = vec![0.0];
            mpre.extend(&prec);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
        };
        total += ap;
    }
    total / cats.len() as f64
}

#[test]
fn map_agrees_with_reference_implementation() {
    let t = Template::builtin("benchmark").unwrap().spatial().unwrap();
    for seed in [1, 2, 3] {
        let ds = sample_dataset(&t, 200, seed).unwrap();
        let dets = ds.detections();
        let truth = ds.ground_truth();
        for thr in [0.3, 0.5, 0.7] {
            let a = evaluate(&dets, &truth, thr, &ElevenPoint).unwrap().map;
            let b = reference_map(&dets, &truth, thr, true);
            assert!((a - b).abs() < 1e-9, "11-point {a} vs {b}");
            let a = evaluate(&dets, &truth, thr, &AllPoints).unwrap().map;
            let b = reference_map(&dets, &truth, thr, false);
            assert!((a - b).abs() < 1e-9, "all-points {a} vs {b}");
        }
    }
}
