use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Sinusoidal encoding with frequencies `2^i * pi`, `i < num_frequencies`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PosEncConfig {
    pub fn new(num_frequencies: usize, include_input: bool) -> Self {
        assert!(num_frequencies > 0, "positional encoding needs at least one frequency");
        Self {
            num_frequencies,
            include_input,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.num_frequencies + usize::from(self.include_input))
    }

    pub fn frequency(&self, i: usize) -> f64 {
        (1u64 << i) as f64 * PI
    }
}

/// Per coordinate: `[x?, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{k-1} pi x), cos(2^{k-1} pi x)]`.
pub fn positional_encode(x: &[f64], cfg: PosEncConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.output_dim(x.len()));
    for &v in x {
        if cfg.include_input {
            out.push(v);
        }
        for i in 0..cfg.num_frequencies {
            let (s, c) = (cfg.frequency(i) * v).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}
