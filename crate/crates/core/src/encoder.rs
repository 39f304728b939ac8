// SPDX-License-Identifier: Apache-2.0

//! Per-cell grid embedding with fixed 2D sinusoidal positions, followed by a
//! stack of pre-norm self-attention blocks.

use serde::{Deserialize, Serialize};
use sgg_tensor::nn::{AttentionSpec, Builder, Ffn, LayerNorm, Linear, MultiHeadAttention};
use sgg_tensor::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};

const POS_TEMPERATURE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 32, n_layers: 2, n_heads: 4, ffn_hidden: 64 }
    }
}

/// Fixed `(h*w, d)` encoding: the first half of the features encodes the row,
/// the second half the column, as interleaved sin/cos pairs.
pub fn sinusoidal_2d(grid_h: usize, grid_w: usize, d: usize) -> Result<Tensor<f64>> {
    if d % 4 != 0 {
        return Err(CoreError::Config(format!("d_model {d} must be divisible by 4 for 2D positions")));
    }
    let half = d / 2;
    let mut data = vec![0.0; grid_h * grid_w * d];
    for y in 0..grid_h {
        for x in 0..grid_w {
            let row = &mut data[(y * grid_w + x) * d..][..d];
            for (offset, pos) in [(0, y as f64), (half, x as f64)] {
                for k in 0..half / 2 {
                    let freq = POS_TEMPERATURE.powf(-((2 * k) as f64) / half as f64);
                    row[offset + 2 * k] = (pos * freq).sin();
                    row[offset + 2 * k + 1] = (pos * freq).cos();
                }
            }
        }
    }
    Ok(Tensor::matrix(grid_h * grid_w, d, data)?)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: Ffn,
}

impl EncoderLayer {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        Ok(g.add(x, f)?)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub channels: usize,
    embed: Linear,
    layers: Vec<EncoderLayer>,
    final_ln: Option<LayerNorm>,
    pos: Tensor<f64>,
}

impl Encoder {
    pub fn new(b: &mut Builder<'_>, cfg: &EncoderConfig, channels: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        let spec = AttentionSpec::new(cfg.d_model, cfg.n_heads)?;
        let embed = Linear::new(&mut b.scope("embed"), channels, cfg.d_model)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut b = b.scope(&format!("l{l}"));
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(&mut b.scope("ln1"), cfg.d_model)?,
                attn: MultiHeadAttention::new(&mut b.scope("attn"), spec)?,
                ln2: LayerNorm::new(&mut b.scope("ln2"), cfg.d_model)?,
                ffn: Ffn::new(&mut b.scope("ffn"), cfg.d_model, cfg.ffn_hidden)?,
            });
        }
        let final_ln = if cfg.n_layers > 0 { Some(LayerNorm::new(&mut b.scope("ln_out"), cfg.d_model)?) } else { None };
        Ok(Self { cfg: cfg.clone(), channels, embed, layers, final_ln, pos: sinusoidal_2d(grid_h, grid_w, cfg.d_model)? })
    }

    pub fn positions(&self) -> &Tensor<f64> {
        &self.pos
    }

    /// `tokens: (h*w, c)` -> `(h*w, d)` embedding plus positions.
    pub fn embed_grid<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let shape = g.value(tokens).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.channels || shape[0] != self.pos.rows() {
            return Err(CoreError::Tensor(sgg_tensor::TensorError::ShapeMismatch(format!(
                "grid tokens {shape:?}, expected [{}, {}]",
                self.pos.rows(),
                self.channels
            ))));
        }
        let e = self.embed.forward(g, s, tokens)?;
        let pos = g.constant(self.pos.cast());
        Ok(g.add(e, pos)?)
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, embedded: Var) -> Result<Var> {
        let mut x = embedded;
        for layer in &self.layers {
            x = layer.forward(g, s, x)?;
        }
        match &self.final_ln {
            Some(ln) => Ok(ln.forward(g, s, x)?),
            None => Ok(x),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let e = self.embed_grid(g, s, tokens)?;
        self.encode(g, s, e)
    }
}
