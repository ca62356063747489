//! Time-conditioned velocity field `v = MLP([γ(x), γ(t)])`.

use cardio_autodiff::{positional_encode, Activation, MlpParams, MlpVars, Module, PosEncConfig, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csdf::points_tensor;
use crate::error::{CoreError, Result};
use crate::geom::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VelocityConfig {
    pub hidden_width: usize,
    /// Hidden layers; the network has one more linear layer than this.
    pub hidden_layers: usize,
    pub space_frequencies: usize,
    pub time_frequencies: usize,
    /// Multiplier on the random init of the output layer; 0 starts from a
    /// zero field.
    pub output_init_scale: f64,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            hidden_layers: 3,
            space_frequencies: 6,
            time_frequencies: 4,
            output_init_scale: 0.0,
        }
    }
}

impl VelocityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(CoreError::Config("velocity field dimensions must be positive".into()));
        }
        if self.space_frequencies == 0 || self.time_frequencies == 0 {
            return Err(CoreError::Config("velocity encodings need at least one frequency".into()));
        }
        Ok(())
    }

    fn space_enc(&self) -> PosEncConfig {
        PosEncConfig::new(self.space_frequencies, true)
    }

    fn time_enc(&self) -> PosEncConfig {
        PosEncConfig::new(self.time_frequencies, true)
    }

    pub fn input_dim(&self) -> usize {
        self.space_enc().output_dim(3) + self.time_enc().output_dim(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub config: VelocityConfig,
    pub mlp: MlpParams,
}

impl VelocityField {
    pub fn new<R: Rng + ?Sized>(config: VelocityConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim()];
        dims.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
        dims.push(3);
        let mut mlp = MlpParams::new(&dims, Activation::Relu, rng);
        let last = mlp.layers.last_mut().expect("at least one layer");
        last.weight = last.weight.map(|w| w * config.output_init_scale);
        Ok(Self { config, mlp })
    }

    /// The field with every output negated.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        let last = out.mlp.layers.last_mut().expect("at least one layer");
        last.weight = last.weight.map(|w| -w);
        last.bias = last.bias.map(|b| -b);
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> VelocityVars {
        VelocityVars {
            mlp: self.mlp.bind(tape, trainable),
            config: self.config.clone(),
        }
    }

    pub fn eval(&self, x: Vec3, t: f64) -> Vec3 {
        self.eval_many(&[x], t)[0]
    }

    pub fn eval_many(&self, points: &[Vec3], t: f64) -> Vec<Vec3> {
        if points.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(points_tensor(points));
        let v = vars.forward(&mut tape, x, t);
        tape.value(v).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }
}

impl Module for VelocityField {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

#[derive(Clone, Debug)]
pub struct VelocityVars {
    pub mlp: MlpVars,
    config: VelocityConfig,
}

impl VelocityVars {
    /// Velocities `[N, 3]` at points `x: [N, 3]`, all at time `t`.
    pub fn forward(&self, tape: &mut Tape, x: Var, t: f64) -> Var {
        let n = tape.value(x).rows();
        let fx = tape.posenc(x, self.config.space_enc());
        let ft = positional_encode(&[t], self.config.time_enc());
        let width = ft.len();
        let ft = tape.constant(Tensor::from_vec(&[n, width], ft.repeat(n)));
        let input = tape.concat_cols(&[fx, ft]);
        self.mlp.forward(tape, input).expect("layer widths fixed at construction")
    }

    pub fn leaves(&self) -> Vec<Var> {
        self.mlp.leaves()
    }
}
