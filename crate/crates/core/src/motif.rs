// SPDX-License-Identifier: Apache-2.0

//! Recurrent two-stage baseline over detector outputs, augmented with
//! per-step refinement: across-step conditioning of the region and union
//! features and residual updates of the entity and pair representations.

use serde::{Deserialize, Serialize};
use sgg_tensor::nn::{AttentionSpec, Builder, Linear, LstmCell};
use sgg_tensor::{nn, ChaCha8Rng, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::assembly::top_classes;
use crate::decoder::CondBlock;
use crate::detector::DetectorOutput;
use crate::error::{CoreError, Result};
use crate::matching::ClassWeights;
use crate::metrics::RankedTriplet;
use crate::scene::EntityRef;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifConfig {
    pub eta: usize,
    pub upsilon: usize,
    /// Width of region/union features and recurrent states.
    pub d_r: usize,
    pub label_dim: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_steps: usize,
    pub enable_cas: bool,
}

impl MotifConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(CoreError::Config("motif needs at least one step".into()));
        }
        if self.d_r % 2 != 0 {
            return Err(CoreError::Config("d_r must be even for the bidirectional halves".into()));
        }
        AttentionSpec::new(self.d_r, self.n_heads)?;
        Ok(())
    }
}

/// Forward and backward cells; position `i` concatenates both hidden states.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    fn new(b: &mut Builder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fwd: LstmCell::new(&mut b.scope("fwd"), d_in, d_out / 2)?,
            bwd: LstmCell::new(&mut b.scope("bwd"), d_in, d_out / 2)?,
        })
    }

    /// `x: (N, d_in)` -> `(N, d_out)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        if n == 0 {
            return Err(CoreError::Empty("entity sequence"));
        }
        let rows: Vec<Var> = (0..n).map(|i| g.slice_rows(x, i, 1)).collect::<std::result::Result<_, _>>()?;
        let mut fw = Vec::with_capacity(n);
        let mut state = self.fwd.zero_state(g);
        for &r in &rows {
            state = self.fwd.step(g, s, r, state)?;
            fw.push(state.0);
        }
        let mut bw = vec![fw[0]; n];
        let mut state = self.bwd.zero_state(g);
        for i in (0..n).rev() {
            state = self.bwd.step(g, s, rows[i], state)?;
            bw[i] = state.0;
        }
        let both: Vec<Var> = (0..n).map(|i| g.concat_cols(&[fw[i], bw[i]])).collect::<std::result::Result<_, _>>()?;
        Ok(g.concat_rows(&both)?)
    }
}

/// Networks instantiated once per refinement step.
#[derive(Clone, Debug)]
pub struct StepNets {
    pub entity_ctx: BiLstm,
    pub decoder: LstmCell,
    /// Previous-label embedding for the decoder; row `eta` is the begin token.
    pub prev_embed: ParamId,
    pub pred_ctx: BiLstm,
    /// Label embedding for the predicate context.
    pub label_embed: ParamId,
    pub w_h: Linear,
    pub w_b: Linear,
}

/// Across-step conditioning blocks: three for the region features keyed on
/// `h`, `g`, `u` and three for the union features keyed on `h`, `g`, `z`.
#[derive(Clone, Debug)]
pub struct CasNets {
    pub z: [CondBlock; 3],
    pub u: [CondBlock; 3],
}

#[derive(Clone, Debug)]
pub struct MotifModel {
    pub cfg: MotifConfig,
    pub steps: Vec<StepNets>,
    /// Entry `t - 1` conditions the inputs of step `t`.
    pub cas: Vec<CasNets>,
    pub w_e: Linear,
    pub w_p: Linear,
}

pub const MOTIF_CAS_PREFIX: &str = "motif.cas.";

/// Parameter prefix of step `t` (0-based); steps `t >= 1` are refinements.
pub fn refinement_prefix(t: usize) -> String {
    format!("motif.step{t}.")
}

#[derive(Clone, Copy, Debug)]
pub struct MotifStepOut {
    /// `(N, eta)` entity logits.
    pub ent_logits: Var,
    /// `(|pairs|, upsilon + 1)` predicate logits; last column is no relation.
    pub pred_logits: Var,
    pub h: Var,
    pub g: Var,
    pub z: Var,
    pub u: Var,
}

impl MotifModel {
    pub fn new(cfg: &MotifConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, le) = (cfg.d_r, cfg.label_dim);
        let spec = AttentionSpec::new(d, cfg.n_heads)?;
        let mut b = Builder::new(store, rng);
        let mut root = b.scope("motif");
        let mut steps = Vec::new();
        for t in 0..cfg.n_steps {
            let mut b = root.scope(&format!("step{t}"));
            steps.push(StepNets {
                entity_ctx: BiLstm::new(&mut b.scope("ectx"), d + cfg.eta, d)?,
                decoder: LstmCell::new(&mut b.scope("dec"), d + le, d)?,
                prev_embed: b.param("prev_embed", &[cfg.eta + 1, le], Init::Uniform(0.5))?,
                pred_ctx: BiLstm::new(&mut b.scope("pctx"), d + le, d)?,
                label_embed: b.param("label_embed", &[cfg.eta, le], Init::Uniform(0.5))?,
                w_h: Linear::new(&mut b.scope("w_h"), d, d)?,
                w_b: Linear::new(&mut b.scope("w_b"), d, d)?,
            });
        }
        let mut cas = Vec::new();
        for t in 1..cfg.n_steps {
            let mut b = root.scope(&format!("cas.s{t}"));
            let mut blk = |name: &str| CondBlock::new(&mut b.scope(name), spec, cfg.ffn_hidden);
            cas.push(CasNets {
                z: [blk("z_h")?, blk("z_g")?, blk("z_u")?],
                u: [blk("u_h")?, blk("u_g")?, blk("u_z")?],
            });
        }
        let w_e = Linear::new(&mut root.scope("w_e"), d, cfg.eta)?;
        let w_p = Linear::new(&mut root.scope("w_p"), d, cfg.upsilon + 1)?;
        Ok(Self { cfg: cfg.clone(), steps, cas, w_e, w_p })
    }

    /// Contextual entity representations from region features and labels.
    pub fn entity_context<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, t: usize, z: Var, labels: Var) -> Result<Var> {
        let x = g.concat_cols(&[z, labels])?;
        self.steps[t].entity_ctx.forward(g, s, x)
    }

    /// Sequential label decoding. Adds each decoder output to `h_prev` (if
    /// any) before reading out the label; the previous label comes from
    /// `teacher` when given, from the running argmax otherwise.
    pub fn entity_decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        t: usize,
        ctx: Var,
        h_prev: Option<Var>,
        teacher: Option<&[usize]>,
    ) -> Result<(Var, Var, Vec<usize>)> {
        let net = &self.steps[t];
        let n = g.value(ctx).rows();
        let emb = g.param(s, net.prev_embed);
        let mut state = net.decoder.zero_state(g);
        let mut prev_label = self.cfg.eta;
        let mut hs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let ci = g.slice_rows(ctx, i, 1)?;
            let e = g.gather_rows(emb, &[prev_label])?;
            let x = g.concat_cols(&[ci, e])?;
            state = net.decoder.step(g, s, x, state)?;
            let h = match h_prev {
                Some(hp) => {
                    let r = g.slice_rows(hp, i, 1)?;
                    g.add(r, state.0)?
                }
                None => state.0,
            };
            let logits = self.w_e.forward(g, s, h)?;
            let pred = argmax(g.value(logits).row(0));
            labels.push(pred);
            prev_label = teacher.map_or(pred, |tl| tl[i]);
            hs.push(h);
        }
        let h = g.concat_rows(&hs)?;
        let logits = self.w_e.forward(g, s, h)?;
        Ok((h, logits, labels))
    }

    /// Pair representations `(W_h c_i) * (W_b c_j) * u_ij`, before any residual.
    pub fn pair_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        t: usize,
        ctx: Var,
        labels: &[usize],
        u: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let net = &self.steps[t];
        let emb = g.param(s, net.label_embed);
        let le = g.gather_rows(emb, labels)?;
        let x = g.concat_cols(&[ctx, le])?;
        let cp = net.pred_ctx.forward(g, s, x)?;
        let hh = net.w_h.forward(g, s, cp)?;
        let hb = net.w_b.forward(g, s, cp)?;
        let si: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let oi: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = g.gather_rows(hh, &si)?;
        let b = g.gather_rows(hb, &oi)?;
        let ab = g.mul(a, b)?;
        Ok(g.mul(ab, u)?)
    }

    /// Conditioned inputs of step `t >= 1` (0-based) from step `t - 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn cas_update<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        t: usize,
        z: Var,
        u: Var,
        h: Var,
        pg: Var,
    ) -> Result<(Var, Var)> {
        let c = &self.cas[t - 1];
        let z1 = c.z[0].forward(g, s, z, z, h, h)?;
        let z2 = c.z[1].forward(g, s, z1, z1, pg, pg)?;
        let z3 = c.z[2].forward(g, s, z2, z2, u, u)?;
        let u1 = c.u[0].forward(g, s, u, u, h, h)?;
        let u2 = c.u[1].forward(g, s, u1, u1, pg, pg)?;
        let u3 = c.u[2].forward(g, s, u2, u2, z, z)?;
        Ok((z3, u3))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        det: &DetectorOutput,
        teacher: Option<&[usize]>,
    ) -> Result<Vec<MotifStepOut>> {
        if det.len() < 2 {
            return Err(CoreError::Empty("motif needs at least two detections"));
        }
        let labels = g.constant(det.labels.cast());
        let mut z = g.constant(det.roi.cast());
        let mut u = g.constant(det.union.cast());
        let mut out: Vec<MotifStepOut> = Vec::with_capacity(self.cfg.n_steps);
        for t in 0..self.cfg.n_steps {
            let prev = out.last().copied();
            if let (Some(p), true) = (prev, self.cfg.enable_cas) {
                (z, u) = self.cas_update(g, s, t, p.z, p.u, p.h, p.g)?;
            }
            let ctx = self.entity_context(g, s, t, z, labels)?;
            let (h, ent_logits, predicted) = self.entity_decode(g, s, t, ctx, prev.map(|p| p.h), teacher)?;
            let lab = teacher.map_or(predicted, <[usize]>::to_vec);
            let inc = self.pair_features(g, s, t, ctx, &lab, u, &det.pairs)?;
            let pg = match prev {
                Some(p) => g.add(p.g, inc)?,
                None => inc,
            };
            let pred_logits = self.w_p.forward(g, s, pg)?;
            out.push(MotifStepOut { ent_logits, pred_logits, h, g: pg, z, u });
        }
        Ok(out)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Entity and predicate targets of one detector output.
#[derive(Clone, Debug, PartialEq)]
pub struct MotifTargets {
    pub labels: Vec<usize>,
    /// Per pair: predicate class, or `upsilon` for no relation.
    pub predicates: Vec<usize>,
}

impl MotifTargets {
    pub fn new(det: &DetectorOutput, entities: &[EntityRef], edges: &[(usize, usize, usize)], upsilon: usize) -> Self {
        let labels = det.source.iter().map(|&k| entities[k].class_id).collect();
        let predicates = det
            .pairs
            .iter()
            .map(|&(i, j)| {
                let (si, oj) = (det.source[i], det.source[j]);
                edges.iter().find(|e| e.0 == si && e.1 == oj).map_or(upsilon, |e| e.2)
            })
            .collect();
        Self { labels, predicates }
    }
}

/// Summed entity and weighted predicate cross-entropy over every step.
pub fn motif_loss<T: Scalar>(
    g: &mut Graph<T>,
    steps: &[MotifStepOut],
    targets: &MotifTargets,
    weights: &ClassWeights,
) -> Result<(Var, Vec<f64>)> {
    let ew = vec![T::one(); targets.labels.len()];
    let pw: Vec<T> = targets.predicates.iter().map(|&p| T::of(weights.w.get(p).copied().unwrap_or(1.0))).collect();
    let mut total: Option<Var> = None;
    let mut per_step = Vec::with_capacity(steps.len());
    for st in steps {
        let le = nn::cross_entropy_logits(g, st.ent_logits, &targets.labels, &ew)?;
        let lp = nn::cross_entropy_logits(g, st.pred_logits, &targets.predicates, &pw)?;
        let l = g.add(le, lp)?;
        per_step.push(g.value(l).data()[0].to_f64().unwrap_or(f64::NAN));
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or(CoreError::Empty("motif steps"))?;
    if !g.value(total).all_finite() {
        return Err(CoreError::NonFiniteLoss { layer: steps.len(), component: "motif", term: "class", detail: format!("{per_step:?}") });
    }
    Ok((total, per_step))
}

/// Per-step ranked triplets over the detector's boxes.
pub fn motif_predictions(g: &Graph<f32>, steps: &[MotifStepOut], det: &DetectorOutput, top_m: usize) -> Vec<Vec<RankedTriplet>> {
    steps
        .iter()
        .map(|st| {
            let ent = softmax_rows(g.value(st.ent_logits));
            let pred = softmax_rows(g.value(st.pred_logits));
            let best: Vec<(usize, f64)> = ent
                .iter()
                .map(|row| {
                    let k = argmax(row);
                    (k, row[k])
                })
                .collect();
            let mut out = Vec::new();
            for (pi, &(i, j)) in det.pairs.iter().enumerate() {
                let dist: Vec<f32> = pred[pi].iter().map(|&v| v as f32).collect();
                for (p, pp) in top_classes(&dist, top_m) {
                    out.push(RankedTriplet {
                        subject: EntityRef { class_id: best[i].0, bbox: det.boxes[i] },
                        object: EntityRef { class_id: best[j].0, bbox: det.boxes[j] },
                        predicate: p,
                        score: best[i].1 * best[j].1 * pp,
                    });
                }
            }
            out.sort_by(|a, b| b.score.total_cmp(&a.score));
            out
        })
        .collect()
}

fn softmax_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}
