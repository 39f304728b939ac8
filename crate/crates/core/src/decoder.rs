// SPDX-License-Identifier: Apache-2.0

//! Three synchronized decoders (subject, object, predicate) with conditioning
//! within a step on the positional encodings and across steps on the queries.

use serde::{Deserialize, Serialize};
use sgg_tensor::nn::{AttentionSpec, Builder, Ffn, LayerNorm, Linear, MultiHeadAttention};
use sgg_tensor::{ChaCha8Rng, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_queries: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub enable_cws: bool,
    pub enable_cas: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n_queries: 16, n_layers: 3, d_model: 32, n_heads: 4, ffn_hidden: 64, enable_cws: true, enable_cas: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub eta: usize,
    pub upsilon: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decoder.n_layers == 0 {
            return Err(CoreError::Config("decoder needs at least one layer".into()));
        }
        if self.decoder.n_queries == 0 {
            return Err(CoreError::Config("decoder needs at least one query".into()));
        }
        if self.encoder.d_model != self.decoder.d_model {
            return Err(CoreError::Config("encoder and decoder widths differ".into()));
        }
        AttentionSpec::new(self.decoder.d_model, self.decoder.n_heads)?;
        AttentionSpec::new(self.encoder.d_model, self.encoder.n_heads)?;
        Ok(())
    }
}

/// Which of the three decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Subject,
    Object,
    Predicate,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Subject, Role::Object, Role::Predicate];

    pub fn tag(self) -> &'static str {
        match self {
            Role::Subject => "s",
            Role::Object => "o",
            Role::Predicate => "p",
        }
    }
}

/// `base + FFN(MultiHead(query, keys, values))`.
#[derive(Clone, Debug)]
pub struct CondBlock {
    pub attn: MultiHeadAttention,
    pub ffn: Ffn,
}

impl CondBlock {
    pub fn new(b: &mut Builder<'_>, spec: AttentionSpec, hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut b.scope("attn"), spec)?,
            ffn: Ffn::new(&mut b.scope("ffn"), spec.d_model, hidden)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        base: Var,
        query: Var,
        keys: Var,
        values: Var,
    ) -> Result<Var> {
        let a = self.attn.forward(g, s, query, keys, values)?;
        let f = self.ffn.forward(g, s, a)?;
        Ok(g.add(base, f)?)
    }
}

/// Pre-norm block: self-attention, cross-attention into the encoder output,
/// then a feed forward network, each with a residual connection.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: Ffn,
}

impl DecoderLayer {
    fn new(b: &mut Builder<'_>, spec: AttentionSpec, hidden: usize) -> Result<Self> {
        let d = spec.d_model;
        Ok(Self {
            ln1: LayerNorm::new(&mut b.scope("ln1"), d)?,
            self_attn: MultiHeadAttention::new(&mut b.scope("sa"), spec)?,
            ln2: LayerNorm::new(&mut b.scope("ln2"), d)?,
            cross_attn: MultiHeadAttention::new(&mut b.scope("ca"), spec)?,
            ln3: LayerNorm::new(&mut b.scope("ln3"), d)?,
            ffn: Ffn::new(&mut b.scope("ffn"), d, hidden)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, q: Var, pos: Var, z: Var) -> Result<Var> {
        let h = self.ln1.forward(g, s, q)?;
        let qk = g.add(h, pos)?;
        let a = self.self_attn.forward(g, s, qk, qk, h)?;
        let q = g.add(q, a)?;
        let h = self.ln2.forward(g, s, q)?;
        let qc = g.add(h, pos)?;
        let a = self.cross_attn.forward(g, s, qc, z, z)?;
        let q = g.add(q, a)?;
        let h = self.ln3.forward(g, s, q)?;
        let f = self.ffn.forward(g, s, h)?;
        Ok(g.add(q, f)?)
    }
}

/// Class and box heads, shared across layers of one decoder.
#[derive(Clone, Debug)]
pub struct Heads {
    ln: LayerNorm,
    class: Linear,
    box1: Linear,
    box2: Linear,
    box3: Linear,
}

impl Heads {
    fn new(b: &mut Builder<'_>, d: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&mut b.scope("ln"), d)?,
            class: Linear::new(&mut b.scope("cls"), d, classes)?,
            box1: Linear::new(&mut b.scope("box1"), d, d)?,
            box2: Linear::new(&mut b.scope("box2"), d, d)?,
            box3: Linear::new(&mut b.scope("box3"), d, 4)?,
        })
    }

    /// Returns `(log class probabilities, boxes in (0,1))`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, q: Var) -> Result<(Var, Var)> {
        let h = self.ln.forward(g, s, q)?;
        let logits = self.class.forward(g, s, h)?;
        let logp = g.log_softmax(logits)?;
        let b = self.box1.forward(g, s, h)?;
        let b = g.gelu(b);
        let b = self.box2.forward(g, s, b)?;
        let b = g.gelu(b);
        let b = self.box3.forward(g, s, b)?;
        Ok((logp, g.sigmoid(b)))
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub heads: Heads,
}

/// Graph handles for one layer's outputs.
#[derive(Clone, Copy, Debug)]
pub struct BranchOut {
    pub logp: Var,
    pub boxes: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerOut {
    pub s: BranchOut,
    pub o: BranchOut,
    pub p: BranchOut,
    pub queries: [Var; 3],
}

impl LayerOut {
    pub fn branch(&self, r: Role) -> BranchOut {
        match r {
            Role::Subject => self.s,
            Role::Object => self.o,
            Role::Predicate => self.p,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    pub enable_cws: bool,
    pub enable_cas: bool,
}

/// Conditional positional encodings of one step. The subject branch is
/// always the unmodified `p_s`.
#[derive(Clone, Copy, Debug)]
pub struct CondPositions {
    pub s: Var,
    pub o: Var,
    pub p: Var,
}

#[derive(Clone, Debug)]
pub struct TripleDecoderModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub branches: [Branch; 3],
    /// Within-step conditioning of object and predicate positions, per layer.
    pub cws_o: Vec<CondBlock>,
    pub cws_p: Vec<CondBlock>,
    /// Across-step conditioning of each branch's queries, per layer.
    pub cas: Vec<[CondBlock; 3]>,
}

pub const CWS_PREFIX: &str = "cws.";
pub const CAS_PREFIX: &str = "cas.";

impl TripleDecoderModel {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let dc = &cfg.decoder;
        let spec = AttentionSpec::new(dc.d_model, dc.n_heads)?;
        let mut b = Builder::new(store, rng);
        let encoder = Encoder::new(&mut b.scope("enc"), &cfg.encoder, cfg.channels, cfg.grid_h, cfg.grid_w)?;
        let make_branch = |b: &mut Builder<'_>, r: Role, classes: usize| -> Result<Branch> {
            let mut b = b.scope(&format!("dec.{}", r.tag()));
            let pos = b.param("pos", &[dc.n_queries, dc.d_model], Init::Uniform(0.5))?;
            let layers =
                (0..dc.n_layers).map(|t| DecoderLayer::new(&mut b.scope(&format!("l{t}")), spec, dc.ffn_hidden)).collect::<Result<_>>()?;
            let heads = Heads::new(&mut b.scope("head"), dc.d_model, classes)?;
            Ok(Branch { pos, layers, heads })
        };
        let branches = [
            make_branch(&mut b, Role::Subject, cfg.eta + 1)?,
            make_branch(&mut b, Role::Object, cfg.eta + 1)?,
            make_branch(&mut b, Role::Predicate, cfg.upsilon + 1)?,
        ];
        let mut cws_o = Vec::new();
        let mut cws_p = Vec::new();
        let mut cas = Vec::new();
        for t in 0..dc.n_layers {
            cws_o.push(CondBlock::new(&mut b.scope(&format!("cws.o.l{t}")), spec, dc.ffn_hidden)?);
            cws_p.push(CondBlock::new(&mut b.scope(&format!("cws.p.l{t}")), spec, dc.ffn_hidden)?);
            let mut blk = |r: Role| CondBlock::new(&mut b.scope(&format!("cas.{}.l{t}", r.tag())), spec, dc.ffn_hidden);
            cas.push([blk(Role::Subject)?, blk(Role::Object)?, blk(Role::Predicate)?]);
        }
        Ok(Self { cfg: cfg.clone(), encoder, branches, cws_o, cws_p, cas })
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.decoder.n_layers
    }

    pub fn default_opts(&self) -> ForwardOpts {
        ForwardOpts { enable_cws: self.cfg.decoder.enable_cws, enable_cas: self.cfg.decoder.enable_cas }
    }

    /// Learned positional encodings `[p_s, p_o, p_p]` as graph nodes.
    pub fn positions<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>) -> [Var; 3] {
        [g.param(s, self.branches[0].pos), g.param(s, self.branches[1].pos), g.param(s, self.branches[2].pos)]
    }

    /// Object-branch positions conditioned on the current subject queries.
    pub fn cond_pos_object<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        t: usize,
        pos: &[Var; 3],
        q_s: Var,
    ) -> Result<Var> {
        let keys = g.add(q_s, pos[0])?;
        self.cws_o[t].forward(g, s, pos[1], pos[1], keys, q_s)
    }

    /// Predicate-branch positions conditioned on subject and object queries.
    pub fn cond_pos_predicate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        t: usize,
        pos: &[Var; 3],
        q_s: Var,
        q_o: Var,
    ) -> Result<Var> {
        let ks = g.add(q_s, pos[0])?;
        let ko = g.add(q_o, pos[1])?;
        let keys = g.concat_rows(&[ks, ko])?;
        let values = g.concat_rows(&[q_s, q_o])?;
        self.cws_p[t].forward(g, s, pos[2], pos[2], keys, values)
    }

    /// Queries for layer `t` conditioned on all three previous outputs.
    pub fn cond_queries<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        t: usize,
        pos: &[Var; 3],
        prev: &[Var; 3],
    ) -> Result<[Var; 3]> {
        let aware = [g.add(prev[0], pos[0])?, g.add(prev[1], pos[1])?, g.add(prev[2], pos[2])?];
        let keys = g.concat_rows(&aware)?;
        let values = g.concat_rows(prev)?;
        let mut out = [prev[0]; 3];
        for x in 0..3 {
            out[x] = self.cas[t][x].forward(g, s, prev[x], aware[x], keys, values)?;
        }
        Ok(out)
    }

    /// Runs encoder and all decoder layers on `(h*w, c)` grid tokens.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        tokens: &Tensor<f32>,
        opts: ForwardOpts,
    ) -> Result<Vec<LayerOut>> {
        let tok = g.constant(tokens.cast());
        let z = self.encoder.forward(g, s, tok)?;
        let (n, d) = (self.cfg.decoder.n_queries, self.cfg.decoder.d_model);
        let pos = self.positions(g, s);
        let zero = g.constant(Tensor::zeros(&[n, d]));
        let mut prev = [zero; 3];
        let mut out = Vec::with_capacity(self.n_layers());
        for t in 0..self.n_layers() {
            let q_hat = if opts.enable_cas { self.cond_queries(g, s, t, &pos, &prev)? } else { prev };
            let cp_s = pos[0];
            let q_s = self.branches[0].layers[t].forward(g, s, q_hat[0], cp_s, z)?;
            let cp_o = if opts.enable_cws { self.cond_pos_object(g, s, t, &pos, q_s)? } else { pos[1] };
            let q_o = self.branches[1].layers[t].forward(g, s, q_hat[1], cp_o, z)?;
            let cp_p = if opts.enable_cws { self.cond_pos_predicate(g, s, t, &pos, q_s, q_o)? } else { pos[2] };
            let q_p = self.branches[2].layers[t].forward(g, s, q_hat[2], cp_p, z)?;
            let heads = |g: &mut Graph<T>, x: usize, q: Var| -> Result<BranchOut> {
                let (logp, boxes) = self.branches[x].heads.forward(g, s, q)?;
                Ok(BranchOut { logp, boxes })
            };
            let layer = LayerOut { s: heads(g, 0, q_s)?, o: heads(g, 1, q_o)?, p: heads(g, 2, q_p)?, queries: [q_s, q_o, q_p] };
            out.push(layer);
            prev = [q_s, q_o, q_p];
        }
        Ok(out)
    }

    /// Inference helper returning the per-layer hypotheses.
    pub fn predict(&self, s: &ParamStore<f32>, tokens: &Tensor<f32>, opts: ForwardOpts) -> Result<PredictionSet> {
        let mut g = Graph::new();
        let outs = self.forward(&mut g, s, tokens, opts)?;
        Ok(PredictionSet::from_graph(&g, &outs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletHypothesis {
    pub s_dist: Vec<f32>,
    pub o_dist: Vec<f32>,
    pub p_dist: Vec<f32>,
    pub s_box: BBox,
    pub o_box: BBox,
    pub p_box: BBox,
}

impl TripletHypothesis {
    pub fn dist(&self, r: Role) -> &[f32] {
        match r {
            Role::Subject => &self.s_dist,
            Role::Object => &self.o_dist,
            Role::Predicate => &self.p_dist,
        }
    }

    pub fn bbox(&self, r: Role) -> BBox {
        match r {
            Role::Subject => self.s_box,
            Role::Object => self.o_box,
            Role::Predicate => self.p_box,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub per_layer: Vec<Vec<TripletHypothesis>>,
}

fn dists<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f32>> {
    (0..t.rows())
        .map(|r| {
            let row: Vec<f64> = t.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN).exp()).collect();
            let z: f64 = row.iter().sum();
            row.iter().map(|v| (v / z) as f32).collect()
        })
        .collect()
}

fn boxes<T: Scalar>(t: &Tensor<T>) -> Vec<BBox> {
    (0..t.rows())
        .map(|r| {
            let v: Vec<f32> = t.row(r).iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect();
            BBox::new(v[0], v[1], v[2], v[3])
        })
        .collect()
}

impl PredictionSet {
    pub fn from_graph<T: Scalar>(g: &Graph<T>, outs: &[LayerOut]) -> Self {
        let per_layer = outs
            .iter()
            .map(|l| {
                let [sd, od, pd] = [l.s, l.o, l.p].map(|b| dists(g.value(b.logp)));
                let [sb, ob, pb] = [l.s, l.o, l.p].map(|b| boxes(g.value(b.boxes)));
                (0..sd.len())
                    .map(|i| TripletHypothesis {
                        s_dist: sd[i].clone(),
                        o_dist: od[i].clone(),
                        p_dist: pd[i].clone(),
                        s_box: sb[i],
                        o_box: ob[i],
                        p_box: pb[i],
                    })
                    .collect()
            })
            .collect();
        Self { per_layer }
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn layer(&self, t: usize) -> Result<&[TripletHypothesis]> {
        self.per_layer.get(t).map(Vec::as_slice).ok_or(CoreError::LayerOutOfRange { requested: t + 1, available: self.per_layer.len() })
    }
}
