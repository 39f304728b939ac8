// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use rand::Rng;
use sgg_core::encoder::{sinusoidal_2d, Encoder, EncoderConfig};
use sgg_tensor::gradcheck::{grad_check, grad_check_params};
use sgg_tensor::nn::Builder;
use sgg_tensor::{seeded_rng, Graph, ParamStore, Tensor};

const GH: usize = 3;
const GW: usize = 4;
const C: usize = 5;

fn build(cfg: &EncoderConfig, seed: u64) -> (Encoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let enc = Encoder::new(&mut Builder::new(&mut store, &mut rng).scope("enc"), cfg, C, GH, GW).unwrap();
    let mut s64: ParamStore<f64> = store.cast();
    // non-trivial norms and biases
    let mut rng = seeded_rng(seed + 100);
    for p in s64.iter_mut() {
        if p.name.ends_with(".gain") || p.name.ends_with(".bias") || p.name.ends_with(".b") {
            p.tensor.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
        }
    }
    (enc, s64)
}

fn tokens(seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    Tensor::matrix(GH * GW, C, (0..GH * GW * C).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn small(n_layers: usize) -> EncoderConfig {
    EncoderConfig { d_model: 8, n_layers, n_heads: 2, ffn_hidden: 16 }
}

fn reference(s: &ParamStore<f64>, cfg: &EncoderConfig, tok: &Tensor<f64>) -> Mat {
    let pos = mat_of(&sinusoidal_2d(GH, GW, cfg.d_model).unwrap());
    let mut x = add(&linear(s, "enc.embed", &mat_of(tok)), &pos);
    for l in 0..cfg.n_layers {
        let p = format!("enc.l{l}");
        let h = layer_norm(s, &format!("{p}.ln1"), &x);
        x = add(&x, &mha(s, &format!("{p}.attn"), cfg.n_heads, &h, &h, &h));
        let h = layer_norm(s, &format!("{p}.ln2"), &x);
        x = add(&x, &ffn(s, &format!("{p}.ffn"), &h));
    }
    if cfg.n_layers > 0 {
        x = layer_norm(s, "enc.ln_out", &x);
    }
    x
}

fn run(enc: &Encoder, s: &ParamStore<f64>, tok: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let t = g.constant(tok.clone());
    let y = enc.forward(&mut g, s, t).unwrap();
    g.value(y).clone()
}

#[test]
fn sinusoidal_positions_layout() {
    let p = sinusoidal_2d(GH, GW, 8).unwrap();
    assert_eq!(p.shape(), &[GH * GW, 8]);
    // cell (0, 0): sin 0, cos 0 pairs
    assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    // cell (y=2, x=1): first half row, second half column
    let r = p.row(2 * GW + 1);
    assert!((r[0] - 2f64.sin()).abs() < 1e-12 && (r[1] - 2f64.cos()).abs() < 1e-12);
    assert!((r[2] - (2.0 / 10.0f64).sin()).abs() < 1e-12);
    assert!((r[4] - 1f64.sin()).abs() < 1e-12 && (r[7] - (0.1f64).cos()).abs() < 1e-12);
    for a in 0..p.rows() {
        for b in 0..a {
            assert_ne!(p.row(a), p.row(b));
        }
    }
    assert!(sinusoidal_2d(GH, GW, 6).is_err());
}

#[test]
fn forward_matches_reference() {
    for n_layers in [0, 1, 2] {
        let cfg = small(n_layers);
        let (enc, s) = build(&cfg, 3);
        let tok = tokens(4);
        let y = run(&enc, &s, &tok);
        assert_eq!(y.shape(), &[GH * GW, 8]);
        assert!(max_abs_diff(&reference(&s, &cfg, &tok), &y) < 1e-10, "layers {n_layers}");
    }
}

#[test]
fn zero_grid_gives_bias_plus_positions() {
    let cfg = small(0);
    let (enc, s) = build(&cfg, 1);
    let y = run(&enc, &s, &Tensor::zeros(&[GH * GW, C]));
    let pos = sinusoidal_2d(GH, GW, 8).unwrap();
    let b = param(&s, "enc.embed.b").data();
    for r in 0..GH * GW {
        for j in 0..8 {
            assert!((y.get2(r, j) - (pos.get2(r, j) + b[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_is_per_cell() {
    let cfg = small(0);
    let (enc, s) = build(&cfg, 2);
    let tok = tokens(5);
    let base = run(&enc, &s, &tok);
    let mut bumped = tok.clone();
    let cell = 7;
    bumped.data_mut()[cell * C + 2] += 1.0;
    let y = run(&enc, &s, &bumped);
    for r in 0..GH * GW {
        assert_eq!(y.row(r) == base.row(r), r != cell, "row {r}");
    }
}

#[test]
fn zero_layers_is_identity() {
    let (enc, s) = build(&small(0), 2);
    let mut g = Graph::new();
    let e = g.constant(Tensor::matrix(GH * GW, 8, (0..GH * GW * 8).map(|i| i as f64 * 0.01).collect()).unwrap());
    let z = enc.encode(&mut g, &s, e).unwrap();
    assert_eq!(g.value(z).data(), g.value(e).data());
    let bad = g.constant(Tensor::zeros(&[GH * GW, C + 1]));
    assert!(enc.embed_grid(&mut g, &s, bad).is_err());
}

#[test]
fn attention_stack_is_permutation_equivariant() {
    let cfg = small(2);
    let (enc, s) = build(&cfg, 6);
    let mut rng = seeded_rng(7);
    let n = GH * GW;
    let x = Tensor::matrix(n, 8, (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.rotate_left(5);
    perm.swap(0, 3);
    let px = Tensor::matrix(n, 8, perm.iter().flat_map(|&r| x.row(r).to_vec()).collect()).unwrap();
    let mut g = Graph::new();
    let a = g.constant(x);
    let b = g.constant(px);
    let ya = enc.encode(&mut g, &s, a).unwrap();
    let yb = enc.encode(&mut g, &s, b).unwrap();
    for (i, &r) in perm.iter().enumerate() {
        for j in 0..8 {
            assert!((g.value(yb).get2(i, j) - g.value(ya).get2(r, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = small(1);
    let (enc, s) = build(&cfg, 8);
    let tok = tokens(10);
    let w: Vec<f64> = {
        let mut rng = seeded_rng(11);
        (0..GH * GW * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let r = grad_check_params(
        &s,
        |g, s| {
            let t = g.constant(tok.clone());
            let y = enc.forward(g, s, t).map_err(tensor_err)?;
            g.weighted_sum(y, &w)
        },
        1e-5,
        1,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
    let r = grad_check(
        &tok,
        |g, t| {
            let y = enc.forward(g, &s, t).map_err(tensor_err)?;
            g.weighted_sum(y, &w)
        },
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}
