// SPDX-License-Identifier: Apache-2.0

//! Grouping per-slot triplet hypotheses into an entity-level graph.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::decoder::TripletHypothesis;
use crate::error::{CoreError, Result};
use crate::geometry::{iou, BBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    pub nms_iou: f64,
    pub score_floor: f64,
    pub top_m: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self { nms_iou: 0.5, score_floor: 0.05, top_m: 1 }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(CoreError::Config(format!("nms_iou {} outside (0, 1)", self.nms_iou)));
        }
        if self.top_m == 0 {
            return Err(CoreError::Config("top_m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssembledGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

fn overlap(a: BBox, b: BBox) -> f64 {
    iou(a, b).unwrap_or(0.0)
}

/// Descending score, ascending index on ties.
fn rank(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

/// Greedy NMS within each class. Returns kept indices by descending score.
pub fn nms_per_class(boxes: &[(usize, BBox, f64)], iou_thr: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in rank(boxes.iter().map(|b| b.2)) {
        let (c, b, _) = boxes[i];
        if kept.iter().all(|&k| boxes[k].0 != c || overlap(boxes[k].1, b) <= iou_thr) {
            kept.push(i);
        }
    }
    kept
}

/// Index of the same-class node with maximum IoU, if any overlaps at all.
pub fn best_node(nodes: &[Node], class_id: usize, b: BBox) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, n) in nodes.iter().enumerate() {
        if n.class_id != class_id {
            continue;
        }
        let v = overlap(n.bbox, b);
        if v > 0.0 && best.map_or(true, |(_, bv)| v > bv) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Maps each `(class, box, score)` role to a node, appending singletons for
/// entries that overlap no node of their class.
pub fn assign_entities(nodes: &mut Vec<Node>, entries: &[(usize, BBox, f64)]) -> Vec<usize> {
    entries
        .iter()
        .map(|&(c, b, score)| match best_node(nodes, c, b) {
            Some(k) => k,
            None => {
                nodes.push(Node { class_id: c, bbox: b, score });
                nodes.len() - 1
            }
        })
        .collect()
}

/// `(argmax class, probability)` over the non-null classes; `None` when the
/// null class (last index) wins.
pub fn argmax_class(dist: &[f32]) -> Option<(usize, f64)> {
    let mut best = 0;
    for (k, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = k;
        }
    }
    (best + 1 != dist.len()).then(|| (best, dist[best] as f64))
}

/// Non-null classes by descending probability.
pub fn top_classes(dist: &[f32], m: usize) -> Vec<(usize, f64)> {
    let real = &dist[..dist.len() - 1];
    rank(real.iter().map(|&p| p as f64)).into_iter().take(m).map(|k| (k, real[k] as f64)).collect()
}

/// Slots surviving the null-argmax and score-floor filters, with their
/// `(subject, object, predicate)` argmax classes and probabilities.
pub struct Surviving {
    pub slot: usize,
    pub s: (usize, f64),
    pub o: (usize, f64),
    pub p: (usize, f64),
}

pub fn surviving_slots(hyps: &[TripletHypothesis], score_floor: f64) -> Vec<Surviving> {
    hyps.iter()
        .enumerate()
        .filter_map(|(slot, h)| {
            let (s, o, p) = (argmax_class(&h.s_dist)?, argmax_class(&h.o_dist)?, argmax_class(&h.p_dist)?);
            (s.1 * o.1 * p.1 >= score_floor).then_some(Surviving { slot, s, o, p })
        })
        .collect()
}

/// Nodes after NMS and assignment, and every top-M expanded edge before
/// per-pair deduplication, in slot order.
pub fn candidates(hyps: &[TripletHypothesis], cfg: &AssemblyConfig) -> (Vec<Node>, Vec<Edge>) {
    let alive = surviving_slots(hyps, cfg.score_floor);
    let mut roles = Vec::with_capacity(2 * alive.len());
    for a in &alive {
        let h = &hyps[a.slot];
        roles.push((a.s.0, h.s_box, a.s.1));
        roles.push((a.o.0, h.o_box, a.o.1));
    }
    let mut nodes: Vec<Node> = nms_per_class(&roles, cfg.nms_iou)
        .into_iter()
        .map(|k| Node { class_id: roles[k].0, bbox: roles[k].1, score: roles[k].2 })
        .collect();
    let ids = assign_entities(&mut nodes, &roles);
    let mut edges = Vec::new();
    for (a, pair) in alive.iter().zip(ids.chunks_exact(2)) {
        for (p, pp) in top_classes(&hyps[a.slot].p_dist, cfg.top_m) {
            edges.push(Edge { subject: pair[0], object: pair[1], predicate: p, score: a.s.1 * a.o.1 * pp });
        }
    }
    (nodes, edges)
}

pub fn assemble(hyps: &[TripletHypothesis], cfg: &AssemblyConfig) -> AssembledGraph {
    let (nodes, cands) = candidates(hyps, cfg);
    // best score per (subject, object, predicate); first occurrence wins ties
    let mut best: BTreeMap<(usize, usize, usize), (f64, usize)> = BTreeMap::new();
    for (order, e) in cands.iter().enumerate() {
        let slot = best.entry((e.subject, e.object, e.predicate)).or_insert((f64::NEG_INFINITY, order));
        if e.score > slot.0 {
            *slot = (e.score, order);
        }
    }
    let mut edges: Vec<(Edge, usize)> = best
        .into_iter()
        .map(|((s, o, p), (score, ord))| (Edge { subject: s, object: o, predicate: p, score }, ord))
        .collect();
    edges.sort_by(|a, b| b.0.score.total_cmp(&a.0.score).then(a.1.cmp(&b.1)));
    let mut per_pair: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let edges = edges
        .into_iter()
        .filter(|(e, _)| {
            let c = per_pair.entry((e.subject, e.object)).or_insert(0);
            *c += 1;
            *c <= cfg.top_m
        })
        .map(|(e, _)| e)
        .collect();
    AssembledGraph { nodes, edges }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl AssembledGraph {
    /// Graphviz rendering. `layer` is 1-based.
    pub fn to_dot(&self, name: &str, layer: usize, entity_names: &dyn Fn(usize) -> String, predicate_names: &dyn Fn(usize) -> String) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph {} {{", quote(name));
        for (k, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(out, "  n{k} [label={}];", quote(&format!("{}@{layer}", entity_names(n.class_id))));
        }
        for e in &self.edges {
            let label = format!("{} {:.3}", predicate_names(e.predicate), e.score);
            let _ = writeln!(out, "  n{} -> n{} [label={}];", e.subject, e.object, quote(&label));
        }
        out.push_str("}\n");
        out
    }
}
