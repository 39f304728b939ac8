// SPDX-License-Identifier: Apache-2.0

//! Plain-loop f64 reference for the transformer pieces, reading weights from
//! a parameter store by name.

#![allow(dead_code)]

use sgg_core::CoreError;
use sgg_tensor::{ParamStore, Tensor, TensorError};

pub type Mat = Vec<Vec<f64>>;

pub fn mat_of(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn param<'a>(s: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    let id = s.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    &s.get(id).tensor
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn linear(s: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
    let w = param(s, &format!("{prefix}.w"));
    let b = param(s, &format!("{prefix}.b")).data();
    let (din, dout) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout).map(|j| b[j] + (0..din).map(|i| row[i] * w.get2(i, j)).sum::<f64>()).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn layer_norm(s: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
    let g = param(s, &format!("{prefix}.gain")).data();
    let b = param(s, &format!("{prefix}.bias")).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn ffn(s: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
    let h = linear(s, &format!("{prefix}.l1"), x);
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(s, &format!("{prefix}.l2"), &h)
}

pub fn mha(s: &ParamStore<f64>, prefix: &str, heads: usize, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let q = linear(s, &format!("{prefix}.q"), q);
    let k = linear(s, &format!("{prefix}.k"), k);
    let v = linear(s, &format!("{prefix}.v"), v);
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> =
                k.iter().map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (hd as f64).sqrt()).collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum();
            }
        }
    }
    linear(s, &format!("{prefix}.out"), &out)
}

pub fn cond_block(s: &ParamStore<f64>, prefix: &str, heads: usize, base: &Mat, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let a = mha(s, &format!("{prefix}.attn"), heads, q, k, v);
    add(base, &ffn(s, &format!("{prefix}.ffn"), &a))
}

pub fn max_abs_diff(a: &Mat, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.len(), b.rows());
    a.iter().enumerate().flat_map(|(r, row)| row.iter().zip(b.row(r)).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
}

pub fn tensor_err(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}
