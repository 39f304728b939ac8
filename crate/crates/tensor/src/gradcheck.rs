// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference checks of reverse-mode gradients.
//!
//! Checks run in `f64`; the relative error of a component is
//! `|analytic - numeric| / max(|analytic|, |numeric|, DENOM_FLOOR)`.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const DENOM_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst component, as `(parameter or "input", flat index)`.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = Some((name.to_string(), idx));
        }
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64, TensorError> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TensorError::ShapeMismatch(format!("objective must be scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Checks `d f / d x` at `point` for a scalar function of one input tensor.
pub fn grad_check<F>(point: &Tensor<f64>, f: F, step: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let zeros = vec![0.0; point.len()];
    let analytic = grads.get(x).unwrap_or(&zeros).to_vec();

    let eval = |p: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.input(p.clone());
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut report = GradCheckReport::default();
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record("input", i, analytic[i], (up - down) / (2.0 * step));
    }
    Ok(report)
}

/// Checks the gradient of a scalar objective with respect to every trainable
/// parameter in `store`. `stride` > 1 samples every `stride`-th component of
/// each parameter (always including the first).
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    step: f64,
    stride: usize,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    let grads = g.backward(y)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
    for (id, gr) in grads.params() {
        for (a, &x) in analytic[id.index()].iter_mut().zip(gr) {
            *a += x;
        }
    }
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let len = store.get(id).tensor.len();
        for i in (0..len).step_by(stride.max(1)) {
            let orig = probe.get(id).tensor.data()[i];
            probe.get_mut(id).tensor.data_mut()[i] = orig + step;
            let mut g = Graph::new();
            let y = f(&mut g, &probe)?;
            let up = scalar_of(&g, y)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig - step;
            let mut g = Graph::new();
            let y = f(&mut g, &probe)?;
            let down = scalar_of(&g, y)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig;
            report.record(&name, i, analytic[id.index()][i], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}
