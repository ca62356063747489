//! Conditional SDF decoder `f(z, x) = δ · tanh(MLP([z, γ(x)]) / δ)`.

use cardio_autodiff::{Activation, Linear, MlpParams, MlpVars, Module, PosEncConfig, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::Vec3;

/// Points per forward pass when evaluating large point sets.
const CHUNK: usize = 8192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsdfConfig {
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Frequencies of the encoding applied to `x`; `None` feeds raw coordinates.
    pub posenc_frequencies: Option<usize>,
    /// Output clamp: `f ∈ (−δ, δ)`.
    pub delta: f64,
    /// Latent codes are projected back into this L2 ball after every update.
    pub latent_cap: f64,
}

impl Default for CsdfConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden_width: 64,
            hidden_layers: 4,
            posenc_frequencies: Some(2),
            delta: 0.2,
            latent_cap: 2.0,
        }
    }
}

impl CsdfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(CoreError::Config("decoder dimensions must be positive".into()));
        }
        if self.posenc_frequencies == Some(0) {
            return Err(CoreError::Config("positional encoding needs at least one frequency".into()));
        }
        if !(self.delta > 0.0) || !(self.latent_cap > 0.0) {
            return Err(CoreError::Config("delta and latent_cap must be positive".into()));
        }
        Ok(())
    }

    pub fn posenc(&self) -> Option<PosEncConfig> {
        self.posenc_frequencies.map(|k| PosEncConfig::new(k, true))
    }

    /// Width of the encoded point features.
    pub fn point_dim(&self) -> usize {
        self.posenc().map_or(3, |p| p.output_dim(3))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsdfModel {
    pub config: CsdfConfig,
    /// First layer rows `0..L` act on the latent, the rest on the point features.
    pub mlp: MlpParams,
}

impl CsdfModel {
    pub fn new<R: Rng + ?Sized>(config: CsdfConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.latent_dim + config.point_dim()];
        dims.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
        dims.push(1);
        let mut mlp = MlpParams::new(&dims, Activation::Relu, rng);
        // Start close to a zero field so early updates are well scaled.
        let last = mlp.layers.last_mut().expect("at least one layer");
        last.weight = last.weight.map(|w| 0.1 * w);
        Ok(Self { config, mlp })
    }

    /// Same architecture with a zero final layer whose bias is `b`.
    pub fn constant<R: Rng + ?Sized>(config: CsdfConfig, b: f64, rng: &mut R) -> Result<Self> {
        let mut m = Self::new(config, rng)?;
        let last = m.mlp.layers.last_mut().expect("at least one layer");
        *last = Linear::zeros(last.input_dim(), 1);
        last.bias.data_mut()[0] = b;
        Ok(m)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(CoreError::ShapeMismatch(format!(
                "latent has {} entries, model expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CsdfVars {
        CsdfVars {
            mlp: self.mlp.bind(tape, trainable),
            latent_dim: self.config.latent_dim,
            posenc: self.config.posenc(),
            delta: self.config.delta,
        }
    }

    /// Signed distance at a single point.
    pub fn eval(&self, z: &[f64], x: Vec3) -> f64 {
        self.eval_many(z, &[x])[0]
    }

    /// Signed distances at many points, without recording gradients.
    pub fn eval_many(&self, z: &[f64], points: &[Vec3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let zv = tape.constant(Tensor::from_vec(&[1, z.len()], z.to_vec()));
            let bias = vars.latent_bias(&mut tape, zv);
            let xv = tape.constant(points_tensor(chunk));
            let f = vars.forward(&mut tape, bias, xv);
            out.extend_from_slice(tape.value(f).data());
        }
        out
    }

    /// Values and exact spatial gradients `∇ₓ f` at many points.
    pub fn eval_with_grad(&self, z: &[f64], points: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
        let mut values = Vec::with_capacity(points.len());
        let mut grads = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let zv = tape.constant(Tensor::from_vec(&[1, z.len()], z.to_vec()));
            let bias = vars.latent_bias(&mut tape, zv);
            let xv = tape.leaf(points_tensor(chunk));
            let f = vars.forward(&mut tape, bias, xv);
            let total = tape.sum(f);
            tape.backward(total).expect("scalar sum is a valid loss");
            values.extend_from_slice(tape.value(f).data());
            let g = tape.grad_or_zeros(xv);
            grads.extend(g.data().chunks(3).map(|c| [c[0], c[1], c[2]]));
        }
        (values, grads)
    }

    pub fn spatial_grad(&self, z: &[f64], x: Vec3) -> Vec3 {
        self.eval_with_grad(z, &[x]).1[0]
    }
}

impl Module for CsdfModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

pub fn points_tensor(points: &[Vec3]) -> Tensor {
    Tensor::from_vec(&[points.len(), 3], points.iter().flatten().copied().collect())
}

/// Decoder parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct CsdfVars {
    pub mlp: MlpVars,
    latent_dim: usize,
    posenc: Option<PosEncConfig>,
    delta: f64,
}

impl CsdfVars {
    /// First-layer pre-activation contributed by latents `z: [B, L]`
    /// (including the first bias), shape `[B, H]`. Computed once per shape
    /// and shared by all its points.
    pub fn latent_bias(&self, tape: &mut Tape, z: Var) -> Var {
        let (w0, b0) = self.mlp.layers[0];
        let wz = tape.slice_rows(w0, 0, self.latent_dim);
        let h = tape.matmul(z, wz);
        tape.add_row(h, b0)
    }

    /// Signed distances `[N, 1]` for points `x: [N, 3]`. `bias` is either a
    /// single `[1, H]` row shared by all points or one row per point.
    pub fn forward(&self, tape: &mut Tape, bias: Var, x: Var) -> Var {
        let feats = match self.posenc {
            Some(cfg) => tape.posenc(x, cfg),
            None => x,
        };
        let (w0, _) = self.mlp.layers[0];
        let rows = tape.value(w0).rows();
        let wx = tape.slice_rows(w0, self.latent_dim, rows - self.latent_dim);
        let mut h = tape.matmul(feats, wx);
        h = if tape.value(bias).rows() == 1 {
            let width = tape.value(bias).cols();
            let b = tape.reshape(bias, &[width]);
            tape.add_row(h, b)
        } else {
            tape.add(h, bias)
        };
        for &(w, b) in &self.mlp.layers[1..] {
            h = self.mlp.activation.apply(tape, h);
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
        }
        let scaled = tape.scale(h, 1.0 / self.delta);
        let t = tape.tanh(scaled);
        tape.scale(t, self.delta)
    }

    pub fn leaves(&self) -> Vec<Var> {
        self.mlp.leaves()
    }
}
