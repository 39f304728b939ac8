// SPDX-License-Identifier: Apache-2.0

//! Stand-in for a frozen two-stage detector: ground-truth entities with label
//! noise and box jitter, plus pooled region and union features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sgg_tensor::Tensor;

use crate::dataset::{scene_rng, FreqPrior, Scene};
use crate::geometry::{BBox, Corners};
use crate::metrics::RankedTriplet;
use crate::scene::EntityRef;

/// Fixed seed of the feature projections, shared by every detector instance.
const PROJECTION_SEED: u64 = 0x5eed_f00d;
/// Offset separating detector streams from scene generation streams.
const STREAM_OFFSET: u64 = 0xd37e_c70a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub label_noise: f64,
    pub box_jitter: f64,
    pub feature_dim: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { label_noise: 0.1, box_jitter: 0.05, feature_dim: 32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    /// Ground-truth entity index of each detection, detections ordered left
    /// to right by box center.
    pub source: Vec<usize>,
    pub boxes: Vec<BBox>,
    /// `(N, eta)` label distributions.
    pub labels: Tensor<f32>,
    /// `(N, d_r)` region features.
    pub roi: Tensor<f32>,
    /// All ordered pairs `(i, j)`, `i != j`, over detection indices.
    pub pairs: Vec<(usize, usize)>,
    /// `(|pairs|, d_r)` union-box features.
    pub union: Tensor<f32>,
}

impl DetectorOutput {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `(label, confidence)` of detection `i`.
    pub fn top_label(&self, i: usize) -> (usize, f64) {
        let row = self.labels.row(i);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        (best, row[best] as f64)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDetector {
    pub cfg: DetectorConfig,
    eta: usize,
    roi_proj: Vec<f32>,
    union_proj: Vec<f32>,
    roi_in: usize,
    union_in: usize,
}

fn projection(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let scale = (3.0 / rows as f64).sqrt();
    (0..rows * cols).map(|_| (rng.gen_range(-1.0..1.0) * scale) as f32).collect()
}

fn project(x: &[f32], w: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += xi * wv;
        }
    }
    out.into_iter().map(f32::tanh).collect()
}

/// Coverage-weighted channel means over the cells a box overlaps.
fn pool(scene: &Scene, b: BBox) -> Vec<f32> {
    let (c, gh, gw) = (scene.grid.channels(), scene.grid.height(), scene.grid.width());
    let k = b.to_corners();
    let cells = scene.grid.cells.data();
    let mut acc = vec![0.0f64; c];
    let mut total = 0.0;
    for y in 0..gh {
        for x in 0..gw {
            let cell = Corners::new(x as f32 / gw as f32, y as f32 / gh as f32, (x + 1) as f32 / gw as f32, (y + 1) as f32 / gh as f32);
            let iw = (k.x2.min(cell.x2) - k.x1.max(cell.x1)).max(0.0) as f64;
            let ih = (k.y2.min(cell.y2) - k.y1.max(cell.y1)).max(0.0) as f64;
            let wgt = iw * ih;
            if wgt > 0.0 {
                total += wgt;
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a += wgt * cells[ch * gh * gw + y * gw + x] as f64;
                }
            }
        }
    }
    acc.into_iter().map(|v| if total > 0.0 { (v / total) as f32 } else { 0.0 }).collect()
}

fn union_box(a: BBox, b: BBox) -> BBox {
    let (p, q) = (a.to_corners(), b.to_corners());
    let u = Corners::new(p.x1.min(q.x1), p.y1.min(q.y1), p.x2.max(q.x2), p.y2.max(q.y2));
    BBox::new(0.5 * (u.x1 + u.x2), 0.5 * (u.y1 + u.y2), u.x2 - u.x1, u.y2 - u.y1)
}

impl SyntheticDetector {
    pub fn new(cfg: DetectorConfig, eta: usize, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let roi_in = channels + 4;
        let union_in = channels + 12;
        Self {
            roi_proj: projection(roi_in, cfg.feature_dim, &mut rng),
            union_proj: projection(union_in, cfg.feature_dim, &mut rng),
            cfg,
            eta,
            roi_in,
            union_in,
        }
    }

    fn jitter(&self, b: BBox, rng: &mut ChaCha8Rng) -> BBox {
        let j = self.cfg.box_jitter as f32;
        let mut u = || rng.gen_range(-1.0f32..=1.0);
        let w = (b.w * (1.0 + j * u())).clamp(1e-3, 1.0);
        let h = (b.h * (1.0 + j * u())).clamp(1e-3, 1.0);
        let cx = (b.cx + j * b.w * u()).clamp(0.5 * w, 1.0 - 0.5 * w);
        let cy = (b.cy + j * b.h * u()).clamp(0.5 * h, 1.0 - 0.5 * h);
        BBox::new(cx, cy, w, h)
    }

    /// Deterministic detections for scene `index` of `split`.
    pub fn detect(&self, scene: &Scene, seed: u64, split: usize, index: usize) -> DetectorOutput {
        let mut rng = scene_rng(seed ^ STREAM_OFFSET, split, index);
        let ents = scene.entities();
        let mut dets: Vec<(usize, BBox, usize, f32)> = ents
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let b = self.jitter(e.bbox, &mut rng);
                let label = if rng.gen_bool(self.cfg.label_noise) {
                    (e.class_id + rng.gen_range(1..self.eta)) % self.eta
                } else {
                    e.class_id
                };
                (k, b, label, rng.gen_range(0.6f32..1.0))
            })
            .collect();
        dets.sort_by(|a, b| a.1.cx.total_cmp(&b.1.cx).then(a.0.cmp(&b.0)));
        let n = dets.len();
        let mut labels = vec![0.0f32; n * self.eta];
        let mut roi = Vec::with_capacity(n * self.cfg.feature_dim);
        for (i, &(_, b, label, conf)) in dets.iter().enumerate() {
            let rest = (1.0 - conf) / (self.eta - 1) as f32;
            for k in 0..self.eta {
                labels[i * self.eta + k] = if k == label { conf } else { rest };
            }
            let mut x = pool(scene, b);
            x.extend_from_slice(&b.to_array());
            debug_assert_eq!(x.len(), self.roi_in);
            roi.extend(project(&x, &self.roi_proj, self.cfg.feature_dim));
        }
        let mut pairs = Vec::new();
        let mut union = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (a, b) = (dets[i].1, dets[j].1);
                let mut x = pool(scene, union_box(a, b));
                x.extend_from_slice(&a.to_array());
                x.extend_from_slice(&b.to_array());
                x.extend_from_slice(&[b.cx - a.cx, b.cy - a.cy, (b.w / a.w).ln(), (b.h / a.h).ln()]);
                debug_assert_eq!(x.len(), self.union_in);
                union.extend(project(&x, &self.union_proj, self.cfg.feature_dim));
                pairs.push((i, j));
            }
        }
        let d = self.cfg.feature_dim;
        DetectorOutput {
            source: dets.iter().map(|d| d.0).collect(),
            boxes: dets.iter().map(|d| d.1).collect(),
            labels: Tensor::matrix(n, self.eta, labels).expect("label shape"),
            roi: Tensor::matrix(n, d, roi).expect("roi shape"),
            union: Tensor::matrix(pairs.len(), d, union).expect("union shape"),
            pairs,
        }
    }
}

/// Frequency baseline: detector labels plus the `top_m` most frequent
/// predicates for each ordered pair's class pair.
pub fn freq_prior_predictions(prior: &FreqPrior, det: &DetectorOutput, top_m: usize) -> Vec<RankedTriplet> {
    let mut out = Vec::new();
    for &(i, j) in &det.pairs {
        let (ls, cs) = det.top_label(i);
        let (lo, co) = det.top_label(j);
        let dist = prior.predict(ls, lo);
        let mut order: Vec<usize> = (0..dist.len()).collect();
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        for &p in order.iter().take(top_m) {
            out.push(RankedTriplet {
                subject: EntityRef { class_id: ls, bbox: det.boxes[i] },
                object: EntityRef { class_id: lo, bbox: det.boxes[j] },
                predicate: p,
                score: cs * co * dist[p],
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}
