// SPDX-License-Identifier: Apache-2.0

//! Recall-family metrics over ranked triplet predictions.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::assembly::AssembledGraph;
use crate::dataset::{HbtPartition, TripletRegistry};
use crate::error::{CoreError, Result};
use crate::geometry::{iou, BBox};
use crate::scene::{EntityRef, Triplet};

pub const MATCH_IOU: f64 = 0.5;
pub const DEFAULT_KS: [usize; 3] = [10, 20, 50];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTriplet {
    pub subject: EntityRef,
    pub object: EntityRef,
    pub predicate: usize,
    pub score: f64,
}

impl RankedTriplet {
    pub fn class_triple(&self) -> (usize, usize, usize) {
        (self.subject.class_id, self.predicate, self.object.class_id)
    }
}

/// Edges of an assembled graph as triplets, in the graph's score order.
pub fn ranked_from_graph(g: &AssembledGraph) -> Vec<RankedTriplet> {
    let ent = |k: usize| EntityRef { class_id: g.nodes[k].class_id, bbox: g.nodes[k].bbox };
    g.edges
        .iter()
        .map(|e| RankedTriplet { subject: ent(e.subject), object: ent(e.object), predicate: e.predicate, score: e.score })
        .collect()
}

fn overlaps(a: BBox, b: BBox, thr: f64) -> bool {
    iou(a, b).map_or(false, |v| v >= thr)
}

/// Greedy top-down matching; `preds` must already be ranked. Each prediction
/// claims the first unmatched ground truth it qualifies for.
pub fn match_triplets(gt: &[Triplet], preds: &[RankedTriplet], iou_thr: f64) -> Vec<bool> {
    let mut matched = vec![false; gt.len()];
    for p in preds {
        let hit = gt.iter().enumerate().position(|(i, g)| {
            !matched[i]
                && g.class_triple() == p.class_triple()
                && overlaps(g.subject.bbox, p.subject.bbox, iou_thr)
                && overlaps(g.object.bbox, p.object.bbox, iou_thr)
        });
        if let Some(i) = hit {
            matched[i] = true;
        }
    }
    matched
}

/// Ground-truth class triples of one scene with their match flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneMatch {
    pub triples: Vec<(usize, usize, usize)>,
    pub matched: Vec<bool>,
}

impl SceneMatch {
    pub fn new(gt: &[Triplet], preds: &[RankedTriplet], k: usize) -> Self {
        let top = &preds[..k.min(preds.len())];
        Self { triples: gt.iter().map(Triplet::class_triple).collect(), matched: match_triplets(gt, top, MATCH_IOU) }
    }
}

/// Mean over scenes of the matched fraction; scenes without ground truth are skipped.
pub fn recall_at_k(scenes: &[SceneMatch]) -> Result<f64> {
    let per: Vec<f64> = scenes
        .iter()
        .filter(|s| !s.triples.is_empty())
        .map(|s| s.matched.iter().filter(|&&m| m).count() as f64 / s.triples.len() as f64)
        .collect();
    if per.is_empty() {
        return Err(CoreError::NoGroundTruth);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-class recall averaged over the scenes containing the class, then
/// averaged over classes present. Returns `(mR, per-class recall)`.
pub fn mean_recall_at_k(scenes: &[SceneMatch], upsilon: usize) -> (f64, Vec<Option<f64>>) {
    let mut sum = vec![0.0; upsilon];
    let mut seen = vec![0usize; upsilon];
    for s in scenes {
        let mut hit = vec![0usize; upsilon];
        let mut tot = vec![0usize; upsilon];
        for (&(_, p, _), &m) in s.triples.iter().zip(&s.matched) {
            tot[p] += 1;
            hit[p] += m as usize;
        }
        for c in 0..upsilon {
            if tot[c] > 0 {
                sum[c] += hit[c] as f64 / tot[c] as f64;
                seen[c] += 1;
            }
        }
    }
    let per: Vec<Option<f64>> = (0..upsilon).map(|c| (seen[c] > 0).then(|| sum[c] / seen[c] as f64)).collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mr = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (mr, per)
}

pub fn harmonic_recall(mr: f64, r: f64) -> f64 {
    if mr + r == 0.0 {
        0.0
    } else {
        2.0 * mr * r / (mr + r)
    }
}

/// Recall restricted to ground truth whose class triple is absent from the
/// registry. Returns the metric (if defined) and the number of such triplets.
pub fn zero_shot_recall(scenes: &[SceneMatch], registry: &TripletRegistry) -> (Option<f64>, usize) {
    let mut per = Vec::new();
    let mut count = 0;
    for s in scenes {
        let (mut hit, mut tot) = (0usize, 0usize);
        for (&t, &m) in s.triples.iter().zip(&s.matched) {
            if !registry.contains(t) {
                tot += 1;
                hit += m as usize;
            }
        }
        if tot > 0 {
            per.push(hit as f64 / tot as f64);
            count += tot;
        }
    }
    let v = (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64);
    (v, count)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HbtReport {
    pub head: Option<f64>,
    pub body: Option<f64>,
    pub tail: Option<f64>,
}

/// Mean of the defined per-class recalls within each subset.
pub fn hbt_report(per_class: &[Option<f64>], part: &HbtPartition) -> HbtReport {
    let mean = |set: &[usize]| {
        let v: Vec<f64> = set.iter().filter_map(|&c| per_class.get(c).copied().flatten()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    HbtReport { head: mean(&part.head), body: mean(&part.body), tail: mean(&part.tail) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KReport {
    pub k: usize,
    pub r: f64,
    pub mr: f64,
    pub hr: f64,
    pub zsr: Option<f64>,
    pub zs_count: usize,
    pub per_class: Vec<Option<f64>>,
    pub hbt: HbtReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// 1-based decoder layer the predictions came from.
    pub layer: usize,
    pub top_m: usize,
    pub per_k: Vec<KReport>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<&KReport> {
        self.per_k.iter().find(|r| r.k == k)
    }
}

/// Evaluates ranked predictions against ground truth at every `K`.
pub fn evaluate(
    gts: &[&[Triplet]],
    preds: &[Vec<RankedTriplet>],
    ks: &[usize],
    upsilon: usize,
    registry: Option<&TripletRegistry>,
    partition: &HbtPartition,
) -> Result<Vec<KReport>> {
    ks.iter()
        .map(|&k| {
            let scenes: Vec<SceneMatch> = gts.iter().zip(preds).map(|(g, p)| SceneMatch::new(g, p, k)).collect();
            let r = recall_at_k(&scenes)?;
            let (mr, per_class) = mean_recall_at_k(&scenes, upsilon);
            let (zsr, zs_count) = registry.map_or((None, 0), |reg| zero_shot_recall(&scenes, reg));
            Ok(KReport { k, r, mr, hr: harmonic_recall(mr, r), zsr, zs_count, hbt: hbt_report(&per_class, partition), per_class })
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Plain-text table: mR@K / R@K / hR@K columns followed by head, body, tail
/// and zero-shot recall at the largest K.
pub fn format_table(reports: &[RecallReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else { return out };
    let ks: Vec<String> = first.per_k.iter().map(|r| r.k.to_string()).collect();
    let ks = ks.join("/");
    let _ = writeln!(out, "{:>3} | {:>18} | {:>18} | {:>18} | {:>5} | {:>5} | {:>5} | {:>5}", "t", format!("mR@{ks}"), format!("R@{ks}"), format!("hR@{ks}"), "head", "body", "tail", "zsR");
    for rep in reports {
        let col = |f: &dyn Fn(&KReport) -> f64| rep.per_k.iter().map(|r| format!("{:.1}", 100.0 * f(r))).collect::<Vec<_>>().join(" / ");
        let last = rep.per_k.last();
        let _ = writeln!(
            out,
            "{:>3} | {:>18} | {:>18} | {:>18} | {:>5} | {:>5} | {:>5} | {:>5}",
            rep.layer,
            col(&|r| r.mr),
            col(&|r| r.r),
            col(&|r| r.hr),
            pct(last.and_then(|r| r.hbt.head)),
            pct(last.and_then(|r| r.hbt.body)),
            pct(last.and_then(|r| r.hbt.tail)),
            pct(last.and_then(|r| r.zsr)),
        );
    }
    out
}
