// SPDX-License-Identifier: Apache-2.0

//! Bipartite matching of padded targets to prediction slots and the
//! per-layer set-prediction losses.

use serde::{Deserialize, Serialize};
use sgg_tensor::{nn, Graph, Scalar, Var};

use crate::dataset::FrequencyTable;
use crate::decoder::{LayerOut, PredictionSet, Role, TripletHypothesis};
use crate::error::{CoreError, Result};
use crate::geometry::{giou, BBox};
use crate::scene::Triplet;

pub const LAMBDA_L1: f64 = 5.0;
pub const LAMBDA_GIOU: f64 = 2.0;
pub const EOS_COEF: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

/// `w_c = max((alpha / f_c)^beta, 1)` with `f_c` the training fraction.
pub fn class_weights(freq: &FrequencyTable, alpha: f64, beta: f64) -> Result<ClassWeights> {
    if !(alpha >= 0.0) {
        return Err(CoreError::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    if alpha > 0.0 && !(beta > 0.0) {
        return Err(CoreError::Config(format!("beta must be positive when alpha > 0, got {beta}")));
    }
    let w = freq
        .fractions
        .iter()
        .map(|&f| if alpha == 0.0 { 1.0 } else { (alpha / f).powf(beta).max(1.0) })
        .collect();
    Ok(ClassWeights { w, alpha, beta })
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self { w: vec![1.0; classes], alpha: 0.0, beta: 0.0 }
    }
}

/// `n` target slots: the ground-truth triplets followed by no-relation padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedTargets {
    pub n: usize,
    pub triplets: Vec<Triplet>,
}

impl PaddedTargets {
    pub fn new(triplets: &[Triplet], n: usize) -> Result<Self> {
        if triplets.len() > n {
            return Err(CoreError::Config(format!("{} targets exceed {n} query slots", triplets.len())));
        }
        Ok(Self { n, triplets: triplets.to_vec() })
    }

    pub fn get(&self, i: usize) -> Option<&Triplet> {
        self.triplets.get(i)
    }
}

/// Permutation of slots: `sigma[i]` is the slot matched to target `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub sigma: Vec<usize>,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self { sigma: (0..n).collect() }
    }

    /// Slot -> target index.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.sigma.len()];
        for (i, &j) in self.sigma.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }

    pub fn total_cost(&self, cost: &[f64]) -> f64 {
        let n = self.sigma.len();
        self.sigma.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
    }
}

fn target_box(t: &Triplet, r: Role) -> BBox {
    match r {
        Role::Subject => t.subject.bbox,
        Role::Object => t.object.bbox,
        Role::Predicate => t.predicate_box,
    }
}

fn target_class(t: &Triplet, r: Role) -> usize {
    match r {
        Role::Subject => t.subject.class_id,
        Role::Object => t.object.class_id,
        Role::Predicate => t.predicate_class,
    }
}

pub fn l1_box(a: BBox, b: BBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (*x as f64 - y as f64).abs()).sum()
}

/// `L_box = lambda_l1 * L1 + lambda_giou * (1 - GIoU)`.
pub fn box_loss(pred: BBox, target: BBox) -> Result<f64> {
    Ok(LAMBDA_L1 * l1_box(pred, target) + LAMBDA_GIOU * (1.0 - giou(pred, target)?))
}

/// Pair-wise relation cost; zero for no-relation targets.
pub fn rel_cost(target: Option<&Triplet>, hyp: &TripletHypothesis) -> Result<f64> {
    let Some(t) = target else { return Ok(0.0) };
    let mut acc = 0.0;
    for r in Role::ALL {
        acc += hyp.dist(r)[target_class(t, r)] as f64 - box_loss(hyp.bbox(r), target_box(t, r))?;
    }
    Ok(-acc)
}

/// Row-major `n x n` matrix of `rel_cost(target i, slot j)`.
pub fn cost_matrix(targets: &PaddedTargets, hyps: &[TripletHypothesis], layer: usize) -> Result<Vec<f64>> {
    let n = targets.n;
    if hyps.len() != n {
        return Err(CoreError::Config(format!("layer {layer} has {} slots, expected {n}", hyps.len())));
    }
    let mut c = vec![0.0; n * n];
    for i in 0..targets.triplets.len() {
        for j in 0..n {
            let v = rel_cost(targets.get(i), &hyps[j]).unwrap_or(f64::NAN);
            if !v.is_finite() {
                return Err(CoreError::NonFiniteCost { layer, row: i, col: j });
            }
            c[i * n + j] = v;
        }
    }
    Ok(c)
}

/// Exact minimum-cost assignment on a square row-major matrix via shortest
/// augmenting paths with potentials. Ties resolve toward lower column index.
pub fn hungarian(cost: &[f64], n: usize) -> Assignment {
    assert_eq!(cost.len(), n * n, "square cost matrix");
    if n == 0 {
        return Assignment { sigma: vec![] };
    }
    // 1-based arrays, column 0 is the virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        sigma[row_of[j] - 1] = j - 1;
    }
    Assignment { sigma }
}

/// One assignment minimizing the cost summed over every layer.
pub fn joint_match(targets: &PaddedTargets, preds: &PredictionSet) -> Result<Assignment> {
    let n = targets.n;
    let mut total = vec![0.0; n * n];
    for (t, layer) in preds.per_layer.iter().enumerate() {
        for (a, c) in total.iter_mut().zip(cost_matrix(targets, layer, t)?) {
            *a += c;
        }
    }
    Ok(hungarian(&total, n))
}

/// Independent assignment per layer.
pub fn per_layer_match(targets: &PaddedTargets, preds: &PredictionSet) -> Result<Vec<Assignment>> {
    preds
        .per_layer
        .iter()
        .enumerate()
        .map(|(t, layer)| Ok(hungarian(&cost_matrix(targets, layer, t)?, targets.n)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub layer: usize,
    pub component: Role,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossEntry {
    pub fn weighted(&self) -> f64 {
        self.class + LAMBDA_L1 * self.l1 + LAMBDA_GIOU * self.giou
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub entries: Vec<LossEntry>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn push(&mut self, e: LossEntry) {
        self.total += e.weighted();
        self.entries.push(e);
    }

    pub fn layer_total(&self, t: usize) -> f64 {
        self.entries.iter().filter(|e| e.layer == t).map(LossEntry::weighted).sum()
    }
}

/// Per-slot class targets and weights for one component under `sigma`.
fn slot_targets(
    targets: &PaddedTargets,
    sigma: &Assignment,
    r: Role,
    null_class: usize,
    weights: &ClassWeights,
    eos_coef: f64,
) -> (Vec<usize>, Vec<f64>) {
    let n = targets.n;
    let mut cls = vec![null_class; n];
    let mut w = vec![eos_coef; n];
    for (i, t) in targets.triplets.iter().enumerate() {
        let j = sigma.sigma[i];
        cls[j] = target_class(t, r);
        w[j] = if r == Role::Predicate { weights.w[cls[j]] } else { 1.0 };
    }
    (cls, w)
}

fn null_class(r: Role, eta: usize, upsilon: usize) -> usize {
    if r == Role::Predicate {
        upsilon
    } else {
        eta
    }
}

/// Loss from hypothesis values alone; the reference for the graph version.
pub fn layer_losses(
    targets: &PaddedTargets,
    preds: &PredictionSet,
    sigmas: &[Assignment],
    weights: &ClassWeights,
    eos_coef: f64,
    eta: usize,
    upsilon: usize,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    for (t, layer) in preds.per_layer.iter().enumerate() {
        let sigma = &sigmas[t.min(sigmas.len() - 1)];
        for r in Role::ALL {
            let (cls, w) = slot_targets(targets, sigma, r, null_class(r, eta, upsilon), weights, eos_coef);
            let mut class = 0.0;
            for j in 0..targets.n {
                let p = layer[j].dist(r)[cls[j]] as f64;
                let term = -w[j] * p.ln();
                if !term.is_finite() {
                    return Err(CoreError::NonFiniteLoss {
                        layer: t,
                        component: r.tag(),
                        term: "class",
                        detail: format!("slot {j}, class {}, probability {p}, weight {}", cls[j], w[j]),
                    });
                }
                class += term;
            }
            let (mut l1, mut gl) = (0.0, 0.0);
            for (i, tr) in targets.triplets.iter().enumerate() {
                let pb = layer[sigma.sigma[i]].bbox(r);
                l1 += l1_box(pb, target_box(tr, r));
                gl += 1.0 - giou(pb, target_box(tr, r))?;
            }
            out.push(LossEntry { layer: t, component: r, class, l1, giou: gl });
        }
    }
    Ok(out)
}

/// Differentiable loss of one layer's outputs under a fixed assignment.
/// Returns the scalar node and its breakdown entries.
#[allow(clippy::too_many_arguments)]
pub fn layer_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    layer_idx: usize,
    out: &LayerOut,
    targets: &PaddedTargets,
    sigma: &Assignment,
    weights: &ClassWeights,
    eos_coef: f64,
    eta: usize,
    upsilon: usize,
) -> Result<(Var, Vec<LossEntry>)> {
    let mut parts = Vec::new();
    let mut entries = Vec::new();
    let matched: Vec<usize> = sigma.sigma[..targets.triplets.len()].to_vec();
    for r in Role::ALL {
        let b = out.branch(r);
        let (cls, w) = slot_targets(targets, sigma, r, null_class(r, eta, upsilon), weights, eos_coef);
        let w: Vec<T> = w.iter().map(|&x| T::of(x)).collect();
        let class = nn_class(g, b.logp, &cls, &w)?;
        let cv = scalar_of(g, class);
        if !cv.is_finite() {
            let lp = g.value(b.logp);
            let worst = (0..targets.n)
                .map(|j| (j, lp.get2(j, cls[j]).to_f64().unwrap_or(f64::NAN)))
                .find(|(_, v)| !v.is_finite())
                .map_or_else(|| "overflow in weighted sum".to_string(), |(j, v)| format!("slot {j}, log-probability {v}"));
            return Err(CoreError::NonFiniteLoss { layer: layer_idx, component: r.tag(), term: "class", detail: worst });
        }
        parts.push(class);
        let (mut l1v, mut gv) = (0.0, 0.0);
        if !matched.is_empty() {
            let boxes = g.gather_rows(b.boxes, &matched)?;
            let tb: Vec<T> =
                targets.triplets.iter().flat_map(|t| target_box(t, r).to_array()).map(|x| T::of(x as f64)).collect();
            let l1 = nn::l1(g, boxes, &tb)?;
            let gl = nn::giou_loss(g, boxes, &tb)?;
            l1v = scalar_of(g, l1);
            gv = scalar_of(g, gl);
            parts.push(g.scale(l1, LAMBDA_L1));
            parts.push(g.scale(gl, LAMBDA_GIOU));
        }
        entries.push(LossEntry { layer: layer_idx, component: r, class: cv, l1: l1v, giou: gv });
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok((total, entries))
}

fn nn_class<T: Scalar>(g: &mut Graph<T>, logp: Var, cls: &[usize], w: &[T]) -> Result<Var> {
    let picked = g.pick(logp, cls)?;
    let neg: Vec<T> = w.iter().map(|&x| -x).collect();
    Ok(g.weighted_sum(picked, &neg)?)
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}
