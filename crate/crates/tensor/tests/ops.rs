// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sgg_tensor::gradcheck::{grad_check, grad_check_params};
use sgg_tensor::nn::{self, AttentionSpec, Builder, Ffn, LayerNorm, Linear, LstmCell, MultiHeadAttention};
use sgg_tensor::optim::{Adam, StepDecay};
use sgg_tensor::{checkpoint, seeded_rng, Graph, ParamStore, Tensor, TensorError};

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Fixed random projection so that every op's output reduces to a scalar with
/// non-trivial upstream gradients.
fn project(g: &mut Graph<f64>, y: sgg_tensor::Var, seed: u64) -> Result<sgg_tensor::Var, TensorError> {
    let n = g.value(y).len();
    let mut rng = seeded_rng(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.weighted_sum(y, &w)
}

const TOL: f64 = 1e-3;

#[test]
fn linear_identity_and_zero_input() {
    let mut g = Graph::<f32>::new();
    let eye: Vec<f32> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let x = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let w = g.constant(Tensor::matrix(3, 3, eye).unwrap());
    let b0 = g.constant(Tensor::zeros(&[3]));
    let y = nn::linear(&mut g, x, w, b0).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4., 5., 6.]);

    let z = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = nn::linear(&mut g, z, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn linear_shape_mismatch_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 3]));
    assert!(matches!(g.matmul(x, w), Err(TensorError::ShapeMismatch(_))));
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let mut rng = seeded_rng(1);
    let w = rand_tensor(&mut rng, 8, 8);
    let b = rand_tensor(&mut rng, 1, 8);
    let r = grad_check(
        &rand_tensor(&mut rng, 3, 8),
        |g, x| {
            let w = g.input(w.clone());
            let b = g.input(b.clone());
            let y = nn::linear(g, x, w, b)?;
            project(g, y, 2)
        },
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn elementwise_ops_pass_grad_check() {
    type Op = fn(&mut Graph<f64>, sgg_tensor::Var) -> Result<sgg_tensor::Var, TensorError>;
    let ops: Vec<(&str, Op)> = vec![
        ("gelu", |g, x| Ok(g.gelu(x))),
        ("sigmoid", |g, x| Ok(g.sigmoid(x))),
        ("tanh", |g, x| Ok(g.tanh(x))),
        ("scale", |g, x| Ok(g.scale(x, -2.5))),
        ("softmax", |g, x| g.softmax(x)),
        ("log_softmax", |g, x| g.log_softmax(x)),
        ("mul_self", |g, x| g.mul(x, x)),
        ("sub", |g, x| {
            let y = g.scale(x, 0.3);
            g.sub(x, y)
        }),
        ("slice_cols", |g, x| g.slice_cols(x, 2, 5)),
        ("slice_rows", |g, x| g.slice_rows(x, 1, 2)),
        ("gather_rows", |g, x| g.gather_rows(x, &[2, 0, 2, 3])),
        ("concat_rows", |g, x| {
            let y = g.tanh(x);
            g.concat_rows(&[x, y])
        }),
        ("concat_cols", |g, x| {
            let y = g.sigmoid(x);
            g.concat_cols(&[y, x])
        }),
        ("pick_log", |g, x| {
            let p = g.softmax(x)?;
            let q = g.pick(p, &[0, 3, 7, 1])?;
            Ok(g.log(q))
        }),
    ];
    let mut rng = seeded_rng(3);
    for (name, op) in ops {
        let point = rand_tensor(&mut rng, 4, 8);
        let r = grad_check(&point, |g, x| {
            let y = op(g, x)?;
            project(g, y, 9)
        }, 1e-5)
        .unwrap();
        assert!(r.max_rel_error < TOL, "{name}: {r:?}");
    }
}

#[test]
fn layer_norm_and_ffn_pass_grad_check() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(4);
    let (ln, ffn) = {
        let mut b = Builder::new(&mut store, &mut rng);
        (LayerNorm::new(&mut b.scope("ln"), 16).unwrap(), Ffn::new(&mut b.scope("ffn"), 16, 16).unwrap())
    };
    // perturb gains away from 1 so their gradient is exercised
    let mut s64 = store.cast::<f64>();
    for p in s64.iter_mut() {
        for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
            *x += 0.05 * ((i % 7) as f64 - 3.0);
        }
    }
    let mut drng = seeded_rng(5);
    let x = rand_tensor(&mut drng, 3, 16);
    let r = grad_check_params(
        &s64,
        |g, s| {
            let xi = g.constant(x.clone());
            let h = ln.forward(g, s, xi)?;
            let y = ffn.forward(g, s, h)?;
            project(g, y, 11)
        },
        1e-5,
        1,
    )
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
    let r = grad_check(&x, |g, xi| {
        let h = ln.forward(g, &s64, xi)?;
        project(g, h, 12)
    }, 1e-5)
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn attention_ffn_layernorm_block_passes_grad_check() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(6);
    let spec = AttentionSpec::new(8, 2).unwrap();
    let (mha, ffn, ln) = {
        let mut b = Builder::new(&mut store, &mut rng);
        (
            MultiHeadAttention::new(&mut b.scope("attn"), spec).unwrap(),
            Ffn::new(&mut b.scope("ffn"), 8, 16).unwrap(),
            LayerNorm::new(&mut b.scope("ln"), 8).unwrap(),
        )
    };
    let s64 = store.cast::<f64>();
    let mut drng = seeded_rng(7);
    let q = rand_tensor(&mut drng, 3, 8);
    let kv = rand_tensor(&mut drng, 5, 8);
    let block = |g: &mut Graph<f64>, s: &ParamStore<f64>, qv: sgg_tensor::Var| {
        let kvv = g.constant(kv.clone());
        let h = ln.forward(g, s, qv)?;
        let a = mha.forward(g, s, h, kvv, kvv)?;
        let x = g.add(qv, a)?;
        let f = ffn.forward(g, s, x)?;
        let y = g.add(x, f)?;
        project(g, y, 13)
    };
    let r = grad_check_params(&s64, |g, s| {
        let qv = g.constant(q.clone());
        block(g, s, qv)
    }, 1e-5, 1)
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
    let r = grad_check(&q, |g, qv| block(g, &s64, qv), 1e-5).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn raw_attention_gradients_wrt_q_k_v() {
    let mut rng = seeded_rng(8);
    let k = rand_tensor(&mut rng, 6, 8);
    let v = rand_tensor(&mut rng, 6, 8);
    let q = rand_tensor(&mut rng, 4, 8);
    for which in 0..3 {
        let point = [&q, &k, &v][which].clone();
        let r = grad_check(&point, |g, x| {
            let mut vars = [g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())];
            vars[which] = x;
            let y = g.attention(vars[0], vars[1], vars[2], 4)?;
            project(g, y, 14)
        }, 1e-5)
        .unwrap();
        assert!(r.max_rel_error < TOL, "input {which}: {r:?}");
    }
}

#[test]
fn box_losses_and_cross_entropy_pass_grad_check() {
    // predicted boxes overlapping the targets partially, in several configurations
    let pred = Tensor::matrix(3, 4, vec![0.4, 0.5, 0.3, 0.2, 0.2, 0.2, 0.1, 0.15, 0.7, 0.6, 0.2, 0.4]).unwrap();
    let target = [0.47, 0.56, 0.2, 0.3, 0.6, 0.7, 0.2, 0.1, 0.72, 0.55, 0.3, 0.2];
    let r = grad_check(&pred, |g, x| nn::giou_loss(g, x, &target), 1e-6).unwrap();
    assert!(r.max_rel_error < TOL, "giou {r:?}");
    let r = grad_check(&pred, |g, x| nn::l1(g, x, &target), 1e-6).unwrap();
    assert!(r.max_rel_error < TOL, "l1 {r:?}");

    let mut rng = seeded_rng(9);
    let logits = rand_tensor(&mut rng, 4, 6);
    let targets = [0, 5, 2, 2];
    let weights = [1.0, 0.1, 8.0, 1.0];
    let r = grad_check(&logits, |g, x| nn::cross_entropy_logits(g, x, &targets, &weights), 1e-5).unwrap();
    assert!(r.max_rel_error < TOL, "ce logits {r:?}");
    let r = grad_check(&logits, |g, x| {
        let p = g.softmax(x)?;
        nn::cross_entropy(g, p, &targets, &weights)
    }, 1e-5)
    .unwrap();
    assert!(r.max_rel_error < TOL, "ce probs {r:?}");
}

#[test]
fn lstm_cell_passes_grad_check() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(10);
    let cell = LstmCell::new(&mut Builder::new(&mut store, &mut rng).scope("lstm"), 5, 4).unwrap();
    let s64 = store.cast::<f64>();
    let mut drng = seeded_rng(11);
    let xs = rand_tensor(&mut drng, 3, 5);
    let r = grad_check_params(&s64, |g, s| {
        let x = g.constant(xs.clone());
        let mut state = cell.zero_state(g);
        let mut outs = Vec::new();
        for t in 0..3 {
            let xt = g.slice_rows(x, t, 1)?;
            state = cell.step(g, s, xt, state)?;
            outs.push(state.0);
        }
        let y = g.concat_rows(&outs)?;
        project(g, y, 15)
    }, 1e-5, 1)
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn grad_check_trivial_cases() {
    let ones = Tensor::full(&[1, 6], 1.0f64);
    let r = grad_check(&ones, |g, x| {
        let sq = g.mul(x, x)?;
        Ok(g.sum(sq))
    }, 1e-3)
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");

    let mut g = Graph::<f64>::new();
    let x = g.input(ones.clone());
    let zero = g.scale(x, 0.0);
    let y = g.sum(zero);
    let grads = g.backward(y).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.7));
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-6));
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::matrix(1, 2, vec![f32::NAN, 0.0]).unwrap());
    assert!(g.softmax(x).is_err());
}

#[test]
fn cross_entropy_correct_one_hot_is_zero() {
    let mut g = Graph::<f32>::new();
    let p = g.constant(Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
    let l = nn::cross_entropy(&mut g, p, &[1, 0], &[1.0, 1.0]).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-6);
    assert!(matches!(nn::cross_entropy(&mut g, p, &[1, 3], &[1.0, 1.0]), Err(TensorError::OutOfRange(_))));
}

fn attn_fixture(seed: u64) -> (ParamStore<f32>, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, &mut rng), AttentionSpec::new(8, 4).unwrap()).unwrap();
    (store, mha)
}

#[test]
fn attention_identical_keys_give_query_independent_output() {
    let (store, mha) = attn_fixture(20);
    let mut rng = seeded_rng(21);
    let row: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let kv = Tensor::from_rows(&vec![row; 5]).unwrap();
    let q: Vec<f32> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut g = Graph::new();
    let qv = g.constant(Tensor::matrix(3, 8, q).unwrap());
    let kvv = g.constant(kv);
    let y = mha.forward(&mut g, &store, qv, kvv, kvv).unwrap();
    let out = g.value(y);
    for r in 1..3 {
        for (a, b) in out.row(0).iter().zip(out.row(r)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_single_key_returns_projected_value() {
    let (store, mha) = attn_fixture(22);
    let mut g = Graph::new();
    let q = g.constant(Tensor::matrix(2, 8, (0..16).map(|i| i as f32 * 0.3 - 2.0).collect()).unwrap());
    let k = g.constant(Tensor::matrix(1, 8, vec![0.5; 8]).unwrap());
    let v = g.constant(Tensor::matrix(1, 8, (0..8).map(|i| i as f32 * 0.1).collect()).unwrap());
    let y = mha.forward(&mut g, &store, q, k, v).unwrap();
    let vp = mha.v.forward(&mut g, &store, v).unwrap();
    let expect = mha.out.forward(&mut g, &store, vp).unwrap();
    for r in 0..2 {
        for (a, b) in g.value(y).row(r).iter().zip(g.value(expect).row(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_rejects_empty_keys() {
    let mut g = Graph::<f32>::new();
    let q = g.constant(Tensor::zeros(&[2, 8]));
    let k = g.constant(Tensor::zeros(&[0, 8]));
    assert!(g.attention(q, k, k, 2).is_err());
}

#[test]
fn attention_is_invariant_to_joint_key_value_permutation() {
    let (store, mha) = attn_fixture(23);
    let mut rng = seeded_rng(24);
    for _ in 0..100 {
        let nk = rng.gen_range(1..7);
        let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<Vec<f32>> = (0..nk).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let v: Vec<Vec<f32>> = (0..nk).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..nk).collect();
        for i in (1..nk).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let kp: Vec<_> = perm.iter().map(|&i| k[i].clone()).collect();
        let vp: Vec<_> = perm.iter().map(|&i| v[i].clone()).collect();
        let run = |k: &[Vec<f32>], v: &[Vec<f32>]| {
            let mut g = Graph::new();
            let qv = g.constant(Tensor::matrix(2, 8, q.clone()).unwrap());
            let kv = g.constant(Tensor::from_rows(k).unwrap());
            let vv = g.constant(Tensor::from_rows(v).unwrap());
            let y = mha.forward(&mut g, &store, qv, kv, vv).unwrap();
            g.value(y).data().to_vec()
        };
        for (a, b) in run(&k, &v).iter().zip(run(&kp, &vp)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let (store, mha) = attn_fixture(25);
    let run = || {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(3, 8, (0..24).map(|i| (i as f32).sin()).collect()).unwrap());
        let y = mha.forward(&mut g, &store, q, q, q).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f32..30.0, 12)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
        let y = g.softmax(x).unwrap();
        for r in 0..3 {
            let s: f32 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

fn quadratic_store(x0: &[f32]) -> (ParamStore<f32>, sgg_tensor::ParamId) {
    let mut store = ParamStore::new();
    let id = store.insert("x", Tensor::new(vec![x0.len()], x0.to_vec()).unwrap()).unwrap();
    (store, id)
}

fn quadratic_grad(store: &mut ParamStore<f32>, id: sgg_tensor::ParamId) -> f32 {
    store.zero_grads();
    let mut g = Graph::new();
    let x = g.param(store, id);
    let sq = g.mul(x, x).unwrap();
    let y = g.sum(sq);
    let grads = g.backward(y).unwrap();
    store.accumulate(&grads, 1.0);
    g.value(y).data()[0]
}

#[test]
fn adam_zero_gradient_leaves_params_unchanged() {
    let (mut store, id) = quadratic_store(&[0.3, -0.7]);
    let before = store.get(id).tensor.clone();
    store.zero_grads();
    Adam::default().step(&mut store, 1e-2);
    assert_eq!(store.get(id).tensor, before);
}

#[test]
fn adam_single_step_decreases_quadratic() {
    let (mut store, id) = quadratic_store(&[1.0]);
    let f0 = quadratic_grad(&mut store, id);
    Adam::default().step(&mut store, 1e-2);
    let f1 = quadratic_grad(&mut store, id);
    assert!(f1 < f0);
}

#[test]
fn adam_converges_on_2d_quadratic() {
    let (mut store, id) = quadratic_store(&[1.0, -0.8]);
    let mut adam = Adam::default();
    let sched = StepDecay { base_lr: 0.1, every_epochs: 50, gamma: 0.5 };
    for step in 0..200 {
        quadratic_grad(&mut store, id);
        adam.step(&mut store, sched.lr(step));
    }
    let x = store.get(id).tensor.data();
    let norm = (x[0] * x[0] + x[1] * x[1]).sqrt();
    assert!(norm < 1e-2, "{x:?}");
}

#[test]
fn step_decay_schedule() {
    let s = StepDecay { base_lr: 1e-3, every_epochs: 5, gamma: 0.1 };
    assert_eq!(s.lr(0), 1e-3);
    assert!((s.lr(5) - 1e-4).abs() < 1e-12);
    assert!((s.lr(12) - 1e-5).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_and_length_validation() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(30);
    Linear::new(&mut Builder::new(&mut store, &mut rng).scope("lin"), 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&store, dir.path(), serde_json::json!({"run": 1})).unwrap();

    let mut fresh = ParamStore::new();
    let mut rng2 = seeded_rng(99);
    Linear::new(&mut Builder::new(&mut fresh, &mut rng2).scope("lin"), 3, 2).unwrap();
    let m = checkpoint::load_into(&mut fresh, dir.path()).unwrap();
    assert_eq!(m.config["run"], 1);
    assert_eq!(m.total_len, 8);
    for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
        assert_eq!(a.tensor, b.tensor);
    }

    let blob = dir.path().join(checkpoint::BLOB_FILE);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(checkpoint::load_into(&mut fresh, dir.path()), Err(TensorError::Checkpoint(_))));
}
