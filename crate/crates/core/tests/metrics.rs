// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sgg_core::dataset::{HbtPartition, TripletRegistry};
use sgg_core::geometry::BBox;
use sgg_core::metrics::*;
use sgg_core::scene::{EntityRef, Triplet};
use sgg_core::CoreError;
use sgg_tensor::seeded_rng;

const UPS: usize = 4;

/// Corner-form IoU in f64, written without the library's geometry helpers.
fn iou_ref(a: BBox, b: BBox) -> f64 {
    let c = |x: BBox| {
        let (cx, cy, w, h) = (x.cx as f64, x.cy as f64, x.w as f64, x.h as f64);
        (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    };
    let (a, b) = (c(a), c(b));
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    inter / ((a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter)
}

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4))
}

fn jitter(rng: &mut ChaCha8Rng, b: BBox) -> BBox {
    BBox::new(b.cx + rng.gen_range(-0.05..0.05), b.cy + rng.gen_range(-0.05..0.05), b.w * rng.gen_range(0.8..1.2), b.h * rng.gen_range(0.8..1.2))
}

fn rand_scene(rng: &mut ChaCha8Rng) -> (Vec<Triplet>, Vec<RankedTriplet>) {
    let ent = |rng: &mut ChaCha8Rng| EntityRef { class_id: rng.gen_range(0..2), bbox: rand_box(rng) };
    let gt: Vec<Triplet> = (0..rng.gen_range(0..6)).map(|_| Triplet::new(ent(rng), ent(rng), rng.gen_range(0..UPS))).collect();
    let mut preds = Vec::new();
    for _ in 0..rng.gen_range(0..12) {
        let p = if !gt.is_empty() && rng.gen_bool(0.7) {
            let g = gt[rng.gen_range(0..gt.len())];
            RankedTriplet {
                subject: EntityRef { class_id: g.subject.class_id, bbox: jitter(rng, g.subject.bbox) },
                object: EntityRef { class_id: g.object.class_id, bbox: jitter(rng, g.object.bbox) },
                predicate: if rng.gen_bool(0.8) { g.predicate_class } else { rng.gen_range(0..UPS) },
                score: 0.0,
            }
        } else {
            RankedTriplet { subject: ent(rng), object: ent(rng), predicate: rng.gen_range(0..UPS), score: 0.0 }
        };
        preds.push(p);
    }
    (gt, preds)
}

fn greedy_reference(gt: &[Triplet], preds: &[RankedTriplet]) -> Vec<bool> {
    let mut taken = vec![false; gt.len()];
    for p in preds {
        for (i, g) in gt.iter().enumerate() {
            let ok = !taken[i]
                && g.subject.class_id == p.subject.class_id
                && g.object.class_id == p.object.class_id
                && g.predicate_class == p.predicate
                && iou_ref(g.subject.bbox, p.subject.bbox) >= 0.5
                && iou_ref(g.object.bbox, p.object.bbox) >= 0.5;
            if ok {
                taken[i] = true;
                break;
            }
        }
    }
    taken
}

fn part() -> HbtPartition {
    HbtPartition { head: vec![0], body: vec![1, 2], tail: vec![3] }
}

#[test]
fn matching_agrees_with_independent_greedy() {
    let mut rng = seeded_rng(1);
    let mut hits = 0;
    for _ in 0..500 {
        let (gt, preds) = rand_scene(&mut rng);
        let m = match_triplets(&gt, &preds, MATCH_IOU);
        assert_eq!(m, greedy_reference(&gt, &preds));
        hits += m.iter().filter(|&&x| x).count();
    }
    assert!(hits > 200, "oracle exercised only {hits} matches");
}

#[test]
fn recall_is_monotone_in_k() {
    let mut rng = seeded_rng(2);
    let scenes: Vec<_> = (0..200).map(|_| rand_scene(&mut rng)).collect();
    let gts: Vec<&[Triplet]> = scenes.iter().map(|s| s.0.as_slice()).collect();
    let preds: Vec<Vec<RankedTriplet>> = scenes.iter().map(|s| s.1.clone()).collect();
    let ks = [1, 2, 3, 5, 8, 13, 50];
    let rep = evaluate(&gts, &preds, &ks, UPS, None, &part()).unwrap();
    for w in rep.windows(2) {
        assert!(w[1].r >= w[0].r && w[1].mr >= w[0].mr);
        for c in 0..UPS {
            assert!(w[1].per_class[c].unwrap_or(0.0) >= w[0].per_class[c].unwrap_or(0.0));
        }
    }
    for k in &rep {
        assert!(k.hr <= k.r.max(k.mr) + 1e-12 && k.hr >= k.r.min(k.mr) - 1e-12);
        assert!(k.hr <= (k.r + k.mr) / 2.0 + 1e-12);
    }
}

proptest! {
    #[test]
    fn duplicates_never_lower_recall(seed in any::<u64>(), dup in 0usize..12, at in 0usize..13) {
        let mut rng = seeded_rng(seed);
        let (gt, preds) = rand_scene(&mut rng);
        prop_assume!(!gt.is_empty() && !preds.is_empty());
        let mut more = preds.clone();
        more.insert(at.min(more.len()), preds[dup % preds.len()]);
        let count = |p: &[RankedTriplet]| match_triplets(&gt, p, MATCH_IOU).iter().filter(|&&x| x).count();
        prop_assert!(count(&more) >= count(&preds));
        let k = more.len();
        let a = SceneMatch::new(&gt, &preds, k);
        let b = SceneMatch::new(&gt, &more, k);
        prop_assert!(recall_at_k(&[b.clone()]).unwrap() >= recall_at_k(&[a.clone()]).unwrap());
        prop_assert!(mean_recall_at_k(&[b], UPS).0 >= mean_recall_at_k(&[a], UPS).0);
    }

    #[test]
    fn harmonic_recall_bounds(mr in 0.0f64..1.0, r in 0.0f64..1.0) {
        let h = harmonic_recall(mr, r);
        prop_assert!(h >= mr.min(r) - 1e-12 && h <= mr.max(r) + 1e-12);
        prop_assert!((harmonic_recall(r, mr) - h).abs() < 1e-15);
    }
}

#[test]
fn mean_recall_averages_per_scene_then_per_class() {
    let a = SceneMatch { triples: vec![(0, 0, 1), (0, 0, 1), (1, 3, 0)], matched: vec![true, false, true] };
    let b = SceneMatch { triples: vec![(0, 0, 1)], matched: vec![true] };
    let c = SceneMatch { triples: vec![], matched: vec![] };
    let scenes = [a, b, c];
    assert!((recall_at_k(&scenes).unwrap() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    let (mr, per) = mean_recall_at_k(&scenes, UPS);
    assert_eq!(per, vec![Some(0.75), None, None, Some(1.0)]);
    assert!((mr - 0.875).abs() < 1e-12);
    let h = hbt_report(&per, &part());
    assert_eq!((h.head, h.body, h.tail), (Some(0.75), None, Some(1.0)));
    assert!(matches!(recall_at_k(&scenes[2..]), Err(CoreError::NoGroundTruth)));
}

#[test]
fn zero_shot_recall_constructions() {
    let reg = TripletRegistry::from_triples([(0, 0, 1), (1, 2, 1)]);
    let seen_only = SceneMatch { triples: vec![(0, 0, 1)], matched: vec![false] };
    assert_eq!(zero_shot_recall(&[seen_only.clone()], &reg), (None, 0));
    let hit = SceneMatch { triples: vec![(0, 0, 1), (1, 1, 1)], matched: vec![false, true] };
    assert_eq!(zero_shot_recall(&[hit.clone()], &reg), (Some(1.0), 1));
    let miss = SceneMatch { triples: vec![(1, 1, 1), (0, 3, 0)], matched: vec![false, true] };
    assert_eq!(zero_shot_recall(&[miss.clone()], &reg), (Some(0.5), 2));
    assert_eq!(zero_shot_recall(&[hit, miss, seen_only], &reg), (Some(0.75), 3));
}

#[test]
fn ranking_cut_and_report_fields() {
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let e = |c| EntityRef { class_id: c, bbox: b };
    let gt = [Triplet::new(e(0), e(1), 2)];
    let wrong = RankedTriplet { subject: e(0), object: e(1), predicate: 1, score: 0.9 };
    let right = RankedTriplet { subject: e(0), object: e(1), predicate: 2, score: 0.5 };
    let preds = vec![vec![wrong, right]];
    let gts: Vec<&[Triplet]> = vec![&gt];
    let reg = TripletRegistry::from_triples([(0, 2, 1)]);
    let rep = evaluate(&gts, &preds, &[1, 2], UPS, Some(&reg), &part()).unwrap();
    assert_eq!((rep[0].r, rep[1].r), (0.0, 1.0));
    assert_eq!((rep[1].zsr, rep[1].zs_count), (None, 0));
    assert_eq!(rep[1].hbt.body, Some(1.0));
    let report = RecallReport { layer: 2, top_m: 1, per_k: rep, config: serde_json::Value::Null };
    assert_eq!(report.at(2).unwrap().r, 1.0);
    let table = format_table(&[report]);
    assert!(table.contains("R@1/2") && table.contains("0.0 / 100.0"), "{table}");
    // a box just under the IoU threshold misses
    let off = RankedTriplet { subject: EntityRef { class_id: 0, bbox: BBox::new(0.5 + 0.2 / 3.0 + 1e-3, 0.5, 0.2, 0.2) }, ..right };
    assert_eq!(match_triplets(&gt, &[off], MATCH_IOU), vec![false]);
}
