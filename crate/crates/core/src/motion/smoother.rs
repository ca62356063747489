//! Bidirectional LSTM over the per-frame latent sequence.
//!
//! Output `z̃_t = [z_t, h→_t, h←_t] W + b`. The merge starts as `[I; 0]`, so a
//! fresh smoother passes latents through unchanged.

use cardio_autodiff::{Module, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmootherConfig {
    pub hidden: usize,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

/// One direction: gates `[i, f, g, o] = x Wx + h Wh + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input_weight: Tensor,
    pub hidden_weight: Tensor,
    pub bias: Tensor,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            input_weight: Tensor::uniform(&[input, 4 * hidden], bound, rng),
            hidden_weight: Tensor::uniform(&[hidden, 4 * hidden], bound, rng),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalSmoother {
    pub forward: LstmCell,
    pub backward: LstmCell,
    /// `[L + 2h, L]`.
    pub merge_weight: Tensor,
    pub merge_bias: Tensor,
}

impl TemporalSmoother {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, config: &SmootherConfig, rng: &mut R) -> Result<Self> {
        if latent_dim == 0 || config.hidden == 0 {
            return Err(CoreError::Config("smoother dimensions must be positive".into()));
        }
        let h = config.hidden;
        let mut merge = vec![0.0; (latent_dim + 2 * h) * latent_dim];
        for i in 0..latent_dim {
            merge[i * latent_dim + i] = 1.0;
        }
        Ok(Self {
            forward: LstmCell::new(latent_dim, h, rng),
            backward: LstmCell::new(latent_dim, h, rng),
            merge_weight: Tensor::from_vec(&[latent_dim + 2 * h, latent_dim], merge),
            merge_bias: Tensor::zeros(&[latent_dim]),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.merge_bias.len()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SmootherVars {
        let cell = |tape: &mut Tape, c: &LstmCell| CellVars {
            input_weight: tape.param(&c.input_weight, trainable),
            hidden_weight: tape.param(&c.hidden_weight, trainable),
            bias: tape.param(&c.bias, trainable),
            hidden: c.hidden(),
        };
        SmootherVars {
            forward: cell(tape, &self.forward),
            backward: cell(tape, &self.backward),
            merge_weight: tape.param(&self.merge_weight, trainable),
            merge_bias: tape.param(&self.merge_bias, trainable),
        }
    }

    /// Smoothed copy of `latents` (one row per frame).
    pub fn smooth(&self, latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if latents.is_empty() {
            return Err(CoreError::Empty("latent sequence"));
        }
        let l = self.latent_dim();
        if let Some(bad) = latents.iter().find(|z| z.len() != l) {
            return Err(CoreError::ShapeMismatch(format!("latent has {} entries, smoother expects {l}", bad.len())));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let z = tape.constant(Tensor::from_vec(&[latents.len(), l], latents.concat()));
        let out = vars.forward(&mut tape, z);
        Ok(tape.value(out).data().chunks(l).map(<[f64]>::to_vec).collect())
    }
}

impl Module for TemporalSmoother {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (dir, c) in [("forward", &self.forward), ("backward", &self.backward)] {
            out.push((format!("{dir}.input_weight"), &c.input_weight));
            out.push((format!("{dir}.hidden_weight"), &c.hidden_weight));
            out.push((format!("{dir}.bias"), &c.bias));
        }
        out.push(("merge.weight".into(), &self.merge_weight));
        out.push(("merge.bias".into(), &self.merge_bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.forward.input_weight,
            &mut self.forward.hidden_weight,
            &mut self.forward.bias,
            &mut self.backward.input_weight,
            &mut self.backward.hidden_weight,
            &mut self.backward.bias,
            &mut self.merge_weight,
            &mut self.merge_bias,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub input_weight: Var,
    pub hidden_weight: Var,
    pub bias: Var,
    hidden: usize,
}

impl CellVars {
    /// Hidden states for the rows of `xs`, visited in the given order.
    fn run(&self, tape: &mut Tape, xs: &[Var]) -> Vec<Var> {
        let h = self.hidden;
        let mut hs = tape.constant(Tensor::zeros(&[1, h]));
        let mut cs = tape.constant(Tensor::zeros(&[1, h]));
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let a = tape.matmul(x, self.input_weight);
            let b = tape.matmul(hs, self.hidden_weight);
            let g = tape.add(a, b);
            let g = tape.add_row(g, self.bias);
            let i = tape.slice_cols(g, 0, h);
            let f = tape.slice_cols(g, h, h);
            let c_in = tape.slice_cols(g, 2 * h, h);
            let o = tape.slice_cols(g, 3 * h, h);
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let c_in = tape.tanh(c_in);
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, cs);
            let write = tape.mul(i, c_in);
            cs = tape.add(keep, write);
            let tc = tape.tanh(cs);
            hs = tape.mul(o, tc);
            out.push(hs);
        }
        out
    }

    pub fn leaves(&self) -> [Var; 3] {
        [self.input_weight, self.hidden_weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SmootherVars {
    pub forward: CellVars,
    pub backward: CellVars,
    pub merge_weight: Var,
    pub merge_bias: Var,
}

impl SmootherVars {
    /// `z: [T, L]` to smoothed `[T, L]`.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Var {
        let t = tape.value(z).rows();
        let rows: Vec<Var> = (0..t).map(|i| tape.slice_rows(z, i, 1)).collect();
        let fwd = self.forward.run(tape, &rows);
        let rev: Vec<Var> = rows.iter().rev().copied().collect();
        let mut bwd = self.backward.run(tape, &rev);
        bwd.reverse();
        let merged: Vec<Var> = (0..t).map(|i| tape.concat_cols(&[rows[i], fwd[i], bwd[i]])).collect();
        let stacked = tape.concat_rows(&merged);
        let out = tape.matmul(stacked, self.merge_weight);
        tape.add_row(out, self.merge_bias)
    }

    pub fn leaves(&self) -> Vec<Var> {
        let mut v = self.forward.leaves().to_vec();
        v.extend(self.backward.leaves());
        v.push(self.merge_weight);
        v.push(self.merge_bias);
        v
    }
}
