// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use rand::Rng;
use sgg_core::decoder::*;
use sgg_core::encoder::{sinusoidal_2d, EncoderConfig};
use sgg_tensor::gradcheck::grad_check_params;
use sgg_tensor::{seeded_rng, Graph, ParamStore, Tensor};

const GH: usize = 3;
const GW: usize = 4;
const C: usize = 5;
const N: usize = 4;
const D: usize = 8;
const H: usize = 2;

fn config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        channels: C,
        grid_h: GH,
        grid_w: GW,
        eta: 4,
        upsilon: 5,
        encoder: EncoderConfig { d_model: D, n_layers: 1, n_heads: H, ffn_hidden: 16 },
        decoder: DecoderConfig {
            n_queries: N,
            n_layers,
            d_model: D,
            n_heads: H,
            ffn_hidden: 16,
            enable_cws: true,
            enable_cas: true,
        },
    }
}

fn build(n_layers: usize, seed: u64) -> (TripleDecoderModel, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let model = TripleDecoderModel::new(&config(n_layers), &mut store, &mut seeded_rng(seed)).unwrap();
    // perturb zero-initialised biases so every path carries signal
    let mut rng = seeded_rng(seed ^ 77);
    for p in store.iter_mut() {
        if p.name.ends_with(".b") || p.name.ends_with(".bias") {
            p.tensor.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.2..0.2));
        }
    }
    (model, store)
}

fn tokens(seed: u64) -> Tensor<f32> {
    let mut rng = seeded_rng(seed);
    Tensor::matrix(GH * GW, C, (0..GH * GW * C).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

const OPTS: [ForwardOpts; 4] = [
    ForwardOpts { enable_cws: true, enable_cas: true },
    ForwardOpts { enable_cws: true, enable_cas: false },
    ForwardOpts { enable_cws: false, enable_cas: true },
    ForwardOpts { enable_cws: false, enable_cas: false },
];

fn concat(parts: &[&Mat]) -> Mat {
    parts.iter().flat_map(|m| m.iter().cloned()).collect()
}

fn ref_layer(s: &ParamStore<f64>, p: &str, q: &Mat, pos: &Mat, z: &Mat) -> Mat {
    let h = layer_norm(s, &format!("{p}.ln1"), q);
    let qk = add(&h, pos);
    let q = add(q, &mha(s, &format!("{p}.sa"), H, &qk, &qk, &h));
    let h = layer_norm(s, &format!("{p}.ln2"), &q);
    let q = add(&q, &mha(s, &format!("{p}.ca"), H, &add(&h, pos), z, z));
    let h = layer_norm(s, &format!("{p}.ln3"), &q);
    add(&q, &ffn(s, &format!("{p}.ffn"), &h))
}

fn ref_heads(s: &ParamStore<f64>, tag: &str, q: &Mat) -> (Mat, Mat) {
    let p = format!("dec.{tag}.head");
    let h = layer_norm(s, &format!("{p}.ln"), q);
    let logits = linear(s, &format!("{p}.cls"), &h);
    let logp = logits
        .iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lz = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            r.iter().map(|x| x - lz).collect()
        })
        .collect();
    let g = |m: Mat| -> Mat { m.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect() };
    let b = g(linear(s, &format!("{p}.box1"), &h));
    let b = g(linear(s, &format!("{p}.box2"), &b));
    let b = linear(s, &format!("{p}.box3"), &b);
    (logp, b.into_iter().map(|r| r.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()).collect())
}

/// Reference forward: per layer, `[(logp, boxes); 3]`.
fn reference(s: &ParamStore<f64>, n_layers: usize, tok: &Tensor<f32>, opts: ForwardOpts) -> Vec<[(Mat, Mat); 3]> {
    let tok = mat_of(&tok.cast());
    let mut z = add(&linear(s, "enc.embed", &tok), &mat_of(&sinusoidal_2d(GH, GW, D).unwrap()));
    let h = layer_norm(s, "enc.l0.ln1", &z);
    z = add(&z, &mha(s, "enc.l0.attn", H, &h, &h, &h));
    let h = layer_norm(s, "enc.l0.ln2", &z);
    z = add(&z, &ffn(s, "enc.l0.ffn", &h));
    let z = layer_norm(s, "enc.ln_out", &z);

    let pos: Vec<Mat> = ["s", "o", "p"].iter().map(|t| mat_of(param(s, &format!("dec.{t}.pos")))).collect();
    let mut prev = vec![vec![vec![0.0; D]; N]; 3];
    let mut out = Vec::new();
    for t in 0..n_layers {
        let qhat = if opts.enable_cas {
            let aware: Vec<Mat> = (0..3).map(|x| add(&prev[x], &pos[x])).collect();
            let keys = concat(&[&aware[0], &aware[1], &aware[2]]);
            let values = concat(&[&prev[0], &prev[1], &prev[2]]);
            ["s", "o", "p"]
                .iter()
                .enumerate()
                .map(|(x, tag)| cond_block(s, &format!("cas.{tag}.l{t}"), H, &prev[x], &aware[x], &keys, &values))
                .collect()
        } else {
            prev.clone()
        };
        let q_s = ref_layer(s, &format!("dec.s.l{t}"), &qhat[0], &pos[0], &z);
        let cp_o = if opts.enable_cws {
            cond_block(s, &format!("cws.o.l{t}"), H, &pos[1], &pos[1], &add(&q_s, &pos[0]), &q_s)
        } else {
            pos[1].clone()
        };
        let q_o = ref_layer(s, &format!("dec.o.l{t}"), &qhat[1], &cp_o, &z);
        let cp_p = if opts.enable_cws {
            let keys = concat(&[&add(&q_s, &pos[0]), &add(&q_o, &pos[1])]);
            cond_block(s, &format!("cws.p.l{t}"), H, &pos[2], &pos[2], &keys, &concat(&[&q_s, &q_o]))
        } else {
            pos[2].clone()
        };
        let q_p = ref_layer(s, &format!("dec.p.l{t}"), &qhat[2], &cp_p, &z);
        out.push([ref_heads(s, "s", &q_s), ref_heads(s, "o", &q_o), ref_heads(s, "p", &q_p)]);
        prev = vec![q_s, q_o, q_p];
    }
    out
}

#[test]
fn forward_matches_reference_under_every_flag_setting() {
    let (model, store) = build(3, 1);
    let s: ParamStore<f64> = store.cast();
    let tok = tokens(2);
    for opts in OPTS {
        let mut g = Graph::<f64>::new();
        let outs = model.forward(&mut g, &s, &tok, opts).unwrap();
        let r = reference(&s, 3, &tok, opts);
        assert_eq!(outs.len(), 3);
        for (t, (l, rl)) in outs.iter().zip(&r).enumerate() {
            for (x, role) in Role::ALL.into_iter().enumerate() {
                let b = l.branch(role);
                assert!(max_abs_diff(&rl[x].0, g.value(b.logp)) < 1e-9, "{opts:?} t={t} {role:?}");
                assert!(max_abs_diff(&rl[x].1, g.value(b.boxes)) < 1e-9, "{opts:?} t={t} {role:?}");
            }
        }
    }
}

#[test]
fn conditioning_changes_outputs_when_weights_are_live() {
    let (model, store) = build(2, 3);
    let tok = tokens(4);
    let preds: Vec<_> = OPTS.iter().map(|&o| model.predict(&store, &tok, o).unwrap()).collect();
    for i in 0..4 {
        for j in 0..i {
            assert_ne!(preds[i].per_layer[1], preds[j].per_layer[1]);
        }
    }
}

#[test]
fn zeroed_conditioning_is_bit_identical_to_disabled() {
    let (model, mut store) = build(3, 5);
    assert!(store.zero_prefix(CWS_PREFIX) > 0);
    assert!(store.zero_prefix(CAS_PREFIX) > 0);
    let tok = tokens(6);
    let off = model.predict(&store, &tok, OPTS[3]).unwrap();
    for opts in OPTS {
        assert_eq!(model.predict(&store, &tok, opts).unwrap(), off, "{opts:?}");
    }
}

#[test]
fn f32_and_f64_paths_agree() {
    let (model, store) = build(2, 7);
    let tok = tokens(8);
    let p32 = model.predict(&store, &tok, OPTS[0]).unwrap();
    let mut g = Graph::<f64>::new();
    let outs = model.forward(&mut g, &store.cast(), &tok, OPTS[0]).unwrap();
    let p64 = PredictionSet::from_graph(&g, &outs);
    for (a, b) in p32.per_layer.iter().flatten().zip(p64.per_layer.iter().flatten()) {
        for r in Role::ALL {
            for (x, y) in a.dist(r).iter().zip(b.dist(r)) {
                assert!((x - y).abs() < 1e-4);
            }
            assert!((a.bbox(r).cx - b.bbox(r).cx).abs() < 1e-4);
        }
    }
}

#[test]
fn prediction_set_shape_and_head_ranges() {
    let (model, store) = build(3, 9);
    let p = model.predict(&store, &tokens(10), model.default_opts()).unwrap();
    assert_eq!(p.n_layers(), 3);
    assert!(p.layer(3).is_err());
    for layer in &p.per_layer {
        assert_eq!(layer.len(), N);
        for h in layer {
            assert_eq!((h.s_dist.len(), h.o_dist.len(), h.p_dist.len()), (5, 5, 6));
            for r in Role::ALL {
                let sum: f64 = h.dist(r).iter().map(|&x| x as f64).sum();
                assert!((sum - 1.0).abs() < 1e-5);
                let b = h.bbox(r);
                for v in [b.cx, b.cy, b.w, b.h] {
                    assert!(v > 0.0 && v < 1.0);
                }
            }
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (model, store) = build(2, 11);
    let s: ParamStore<f64> = store.cast();
    let tok = tokens(12);
    let mut rng = seeded_rng(13);
    let mut weights: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 * 3 {
        weights.push((0..N * 6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        weights.push((0..N * 4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let r = grad_check_params(
        &s,
        |g, s| {
            let outs = model.forward(g, s, &tok, OPTS[0]).map_err(tensor_err)?;
            let mut terms = Vec::new();
            let mut k = 0;
            for l in &outs {
                for r in Role::ALL {
                    let b = l.branch(r);
                    let n = g.value(b.logp).len();
                    terms.push(g.weighted_sum(b.logp, &weights[k][..n])?);
                    terms.push(g.weighted_sum(b.boxes, &weights[k + 1])?);
                    k += 2;
                }
            }
            let all = g.concat_rows(&terms)?;
            Ok(g.sum(all))
        },
        1e-5,
        1,
    )
    .unwrap();
    assert!(r.checked > 5000, "{}", r.checked);
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn config_validation() {
    let mut c = config(0);
    assert!(c.validate().is_err());
    c.decoder.n_layers = 2;
    assert!(c.validate().is_ok());
    c.decoder.n_queries = 0;
    assert!(c.validate().is_err());
    let mut c = config(2);
    c.encoder.d_model = 12;
    assert!(c.validate().is_err());
    let mut c = config(2);
    c.decoder.n_heads = 3;
    assert!(c.validate().is_err());
}
