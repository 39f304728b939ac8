// SPDX-License-Identifier: Apache-2.0

//! Scene graphs as sets of localized relation triplets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::geometry::{predicate_box_of, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityRef {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: EntityRef,
    pub object: EntityRef,
    pub predicate_class: usize,
    pub predicate_box: BBox,
}

impl Triplet {
    pub fn new(subject: EntityRef, object: EntityRef, predicate_class: usize) -> Self {
        Self { subject, object, predicate_class, predicate_box: predicate_box_of(subject.bbox, object.bbox) }
    }

    /// `(subject class, predicate class, object class)`.
    pub fn class_triple(&self) -> (usize, usize, usize) {
        (self.subject.class_id, self.predicate_class, self.object.class_id)
    }
}

/// Node table backing a graph's triplets: `links[k]` holds the subject and
/// object node of triplet `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityInstances {
    pub nodes: Vec<EntityRef>,
    pub links: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub scene_id: String,
    pub triplets: Vec<Triplet>,
    pub instances: Option<EntityInstances>,
}

impl SceneGraph {
    /// Builds triplets from a node table and `(subject, object, predicate)` edges.
    pub fn from_nodes(scene_id: impl Into<String>, nodes: Vec<EntityRef>, edges: &[(usize, usize, usize)]) -> Self {
        let triplets = edges.iter().map(|&(s, o, p)| Triplet::new(nodes[s], nodes[o], p)).collect();
        let links = edges.iter().map(|&(s, o, _)| (s, o)).collect();
        Self { scene_id: scene_id.into(), triplets, instances: Some(EntityInstances { nodes, links }) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    EntityClass { triplet: usize, class_id: usize },
    PredicateClass { triplet: usize, class_id: usize },
    BoxRange { triplet: usize, role: &'static str },
    DegenerateEntity { triplet: usize, role: &'static str },
    PredicateBox { triplet: usize },
    LinkCount { links: usize, triplets: usize },
    NodeIndex { triplet: usize, node: usize },
    NodeMismatch { triplet: usize, role: &'static str },
    Duplicate { triplet: usize, subject: usize, object: usize, predicate: usize },
}

/// Checks every structural invariant and reports all violations found.
pub fn validate_graph(g: &SceneGraph, eta: usize, upsilon: usize) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    for (k, t) in g.triplets.iter().enumerate() {
        for (role, e) in [("subject", t.subject), ("object", t.object)] {
            if e.class_id >= eta {
                out.push(Violation::EntityClass { triplet: k, class_id: e.class_id });
            }
            if !e.bbox.is_valid() {
                out.push(Violation::BoxRange { triplet: k, role });
            } else if !(e.bbox.w > 0.0 && e.bbox.h > 0.0) {
                out.push(Violation::DegenerateEntity { triplet: k, role });
            }
        }
        if t.predicate_class >= upsilon {
            out.push(Violation::PredicateClass { triplet: k, class_id: t.predicate_class });
        }
        if !t.predicate_box.is_valid() {
            out.push(Violation::BoxRange { triplet: k, role: "predicate" });
        }
        if predicate_box_of(t.subject.bbox, t.object.bbox) != t.predicate_box {
            out.push(Violation::PredicateBox { triplet: k });
        }
    }
    if let Some(inst) = &g.instances {
        if inst.links.len() != g.triplets.len() {
            out.push(Violation::LinkCount { links: inst.links.len(), triplets: g.triplets.len() });
        }
        let mut seen = BTreeSet::new();
        for (k, (t, &(s, o))) in g.triplets.iter().zip(&inst.links).enumerate() {
            let mut in_range = true;
            for node in [s, o] {
                if node >= inst.nodes.len() {
                    out.push(Violation::NodeIndex { triplet: k, node });
                    in_range = false;
                }
            }
            if in_range {
                if inst.nodes[s] != t.subject {
                    out.push(Violation::NodeMismatch { triplet: k, role: "subject" });
                }
                if inst.nodes[o] != t.object {
                    out.push(Violation::NodeMismatch { triplet: k, role: "object" });
                }
            }
            if !seen.insert((s, o, t.predicate_class)) {
                out.push(Violation::Duplicate { triplet: k, subject: s, object: o, predicate: t.predicate_class });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
