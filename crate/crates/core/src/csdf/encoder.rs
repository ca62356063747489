//! Multi-view mask encoder: shared strided CNN per view, column-window
//! attention from the anchor view into the auxiliary views, then a fusion
//! CNN, global average pooling and an MLP head producing a latent code.

use cardio_autodiff::{Activation, Conv2dParams, ConvVars, MlpParams, MlpVars, Module, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::shapegen::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcaConfig {
    /// Half-height of the same-column window in feature pixels; `None` uses
    /// one eighth of the feature-map height.
    pub radius: Option<usize>,
    pub temperature: f64,
    /// Position of the anchor among the given views.
    pub anchor: usize,
}

impl Default for EcaConfig {
    fn default() -> Self {
        Self {
            radius: None,
            temperature: 8.0,
            anchor: 0,
        }
    }
}

impl EcaConfig {
    pub fn radius_for(&self, feature_height: usize) -> Result<usize> {
        let r = self.radius.unwrap_or(feature_height / 8);
        if r >= feature_height {
            return Err(CoreError::Config(format!(
                "attention radius {r} must be below the feature height {feature_height}"
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CoreError::Config("attention temperature must be positive".into()));
        }
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output channels of the two backbone and the two fusion convolutions.
    pub channels: [usize; 4],
    pub head_hidden: usize,
    pub resolution: usize,
    pub eca: EcaConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [64, 128, 256, 512],
            head_hidden: 256,
            resolution: 64,
            eca: EcaConfig::default(),
        }
    }
}

impl EncoderConfig {
    /// Narrow variant for CPU-bound training runs.
    pub fn desk() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            head_hidden: 128,
            ..Self::default()
        }
    }

    pub fn feature_size(&self) -> usize {
        self.resolution / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(CoreError::Config(format!(
                "encoder resolution {} must be a positive multiple of 16",
                self.resolution
            )));
        }
        if self.channels.contains(&0) || self.head_hidden == 0 {
            return Err(CoreError::Config("encoder widths must be positive".into()));
        }
        self.eca.radius_for(self.feature_size()).map(|_| ())
    }
}

/// Query/key/value 1×1 projections of the attention stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EcaProjections {
    pub query: Conv2dParams,
    pub key: Conv2dParams,
    pub value: Conv2dParams,
}

impl EcaProjections {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            query: Conv2dParams::new(channels, channels, 1, 1, 0, rng),
            key: Conv2dParams::new(channels, channels, 1, 1, 0, rng),
            value: Conv2dParams::new(channels, channels, 1, 1, 0, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EcaVars {
        EcaVars {
            query: self.query.bind(tape, trainable),
            key: self.key.bind(tape, trainable),
            value: self.value.bind(tape, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EcaVars {
    pub query: ConvVars,
    pub key: ConvVars,
    pub value: ConvVars,
}

/// Fuse auxiliary feature maps into the anchor: every anchor pixel attends
/// over its window in each auxiliary view separately (softmax per view) and
/// the attended values of all views are added to the anchor features.
/// `anchor` is `[1, C, H, W]`, each entry of `aux` the same shape.
pub fn eca_attend(tape: &mut Tape, proj: &EcaVars, anchor: Var, aux: &[Var], cfg: &EcaConfig) -> Result<Var> {
    let shape = tape.value(anchor).shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(CoreError::ShapeMismatch(format!(
            "anchor features must be [1, C, H, W], got {shape:?}"
        )));
    }
    if aux.is_empty() {
        return Ok(anchor);
    }
    for &a in aux {
        if tape.value(a).shape() != shape.as_slice() {
            return Err(CoreError::ShapeMismatch(format!(
                "auxiliary features {:?} differ from anchor {shape:?}",
                tape.value(a).shape()
            )));
        }
    }
    let radius = cfg.radius_for(shape[2])?;
    let n = aux.len();
    let flat = shape[1] * shape[2] * shape[3];
    let mut batch_shape = shape.clone();
    batch_shape[0] = n;

    let rows: Vec<Var> = aux.iter().map(|&a| tape.reshape(a, &[1, flat])).collect();
    let stacked = tape.concat_rows(&rows);
    let stacked = tape.reshape(stacked, &batch_shape);
    let q = proj.query.forward(tape, anchor);
    let q = tape.reshape(q, &[1, flat]);
    let q = tape.gather_rows(q, &vec![0; n]);
    let q = tape.reshape(q, &batch_shape);
    let k = proj.key.forward(tape, stacked);
    let v = proj.value.forward(tape, stacked);
    let attended = tape.window_attention(q, k, v, radius, cfg.temperature);
    let attended = tape.reshape(attended, &[n, flat]);
    let ones = tape.constant(Tensor::full(&[1, n], 1.0));
    let summed = tape.matmul(ones, attended);
    let summed = tape.reshape(summed, &shape);
    Ok(tape.add(anchor, summed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskEncoder {
    pub config: EncoderConfig,
    pub backbone: [Conv2dParams; 2],
    pub attention: EcaProjections,
    pub fusion: [Conv2dParams; 2],
    pub head: MlpParams,
}

impl MaskEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, latent_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3, c4] = config.channels;
        let mut head = MlpParams::new(&[c4, config.head_hidden, latent_dim], Activation::Relu, rng);
        let last = head.layers.last_mut().expect("two layers");
        last.weight = last.weight.map(|w| 0.1 * w);
        Ok(Self {
            backbone: [
                Conv2dParams::new(1, c1, 3, 2, 1, rng),
                Conv2dParams::new(c1, c2, 3, 2, 1, rng),
            ],
            attention: EcaProjections::new(c2, rng),
            fusion: [
                Conv2dParams::new(c2, c3, 3, 2, 1, rng),
                Conv2dParams::new(c3, c4, 3, 2, 1, rng),
            ],
            head,
            config,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            backbone: [
                self.backbone[0].bind(tape, trainable),
                self.backbone[1].bind(tape, trainable),
            ],
            attention: self.attention.bind(tape, trainable),
            fusion: [
                self.fusion[0].bind(tape, trainable),
                self.fusion[1].bind(tape, trainable),
            ],
            head: self.head.bind(tape, trainable),
            config: self.config.clone(),
        }
    }

    /// Latent code for a set of views of one subject.
    pub fn encode_masks(&self, masks: &[&Mask]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let z = vars.forward(&mut tape, masks)?;
        Ok(tape.value(z).data().to_vec())
    }
}

impl Module for MaskEncoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let parts: [(&str, &dyn Module); 8] = [
            ("backbone.0", &self.backbone[0]),
            ("backbone.1", &self.backbone[1]),
            ("attention.query", &self.attention.query),
            ("attention.key", &self.attention.key),
            ("attention.value", &self.attention.value),
            ("fusion.0", &self.fusion[0]),
            ("fusion.1", &self.fusion[1]),
            ("head", &self.head),
        ];
        parts
            .into_iter()
            .flat_map(|(prefix, m)| {
                m.named_params()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in self.backbone.iter_mut() {
            out.extend(c.params_mut());
        }
        out.extend(self.attention.query.params_mut());
        out.extend(self.attention.key.params_mut());
        out.extend(self.attention.value.params_mut());
        for c in self.fusion.iter_mut() {
            out.extend(c.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub backbone: [ConvVars; 2],
    pub attention: EcaVars,
    pub fusion: [ConvVars; 2],
    pub head: MlpVars,
    config: EncoderConfig,
}

impl EncoderVars {
    /// `[1, L]` latent for the given views; the view at `config.eca.anchor`
    /// is the anchor, the others are auxiliary.
    pub fn forward(&self, tape: &mut Tape, masks: &[&Mask]) -> Result<Var> {
        let res = self.config.resolution;
        if masks.is_empty() {
            return Err(CoreError::Empty("mask views"));
        }
        if let Some(m) = masks.iter().find(|m| m.height != res || m.width != res) {
            return Err(CoreError::ShapeMismatch(format!(
                "mask {}x{} does not match encoder resolution {res}",
                m.height, m.width
            )));
        }
        let anchor_idx = self.config.eca.anchor;
        if anchor_idx >= masks.len() {
            return Err(CoreError::Config(format!(
                "anchor view {anchor_idx} not among {} views",
                masks.len()
            )));
        }
        let v = masks.len();
        let pixels: Vec<f64> = masks
            .iter()
            .flat_map(|m| m.data.iter().map(|&b| if b != 0 { 1.0 } else { -1.0 }))
            .collect();
        let x = tape.constant(Tensor::from_vec(&[v, 1, res, res], pixels));
        let mut f = self.backbone[0].forward(tape, x);
        f = tape.relu(f);
        f = self.backbone[1].forward(tape, f);
        f = tape.relu(f);

        let shape = tape.value(f).shape().to_vec();
        let flat = shape[1] * shape[2] * shape[3];
        let one = [1, shape[1], shape[2], shape[3]];
        let rows = tape.reshape(f, &[v, flat]);
        let pick = |tape: &mut Tape, i: usize| {
            let r = tape.slice_rows(rows, i, 1);
            tape.reshape(r, &one)
        };
        let anchor = pick(tape, anchor_idx);
        let aux: Vec<Var> = (0..v).filter(|&i| i != anchor_idx).map(|i| pick(tape, i)).collect();
        let fused = eca_attend(tape, &self.attention, anchor, &aux, &self.config.eca)?;

        let mut g = self.fusion[0].forward(tape, fused);
        g = tape.relu(g);
        g = self.fusion[1].forward(tape, g);
        g = tape.relu(g);
        let pooled = tape.spatial_mean(g);
        Ok(self.head.forward(tape, pooled)?)
    }

    pub fn leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in &self.backbone {
            out.extend(c.leaves());
        }
        out.extend(self.attention.query.leaves());
        out.extend(self.attention.key.leaves());
        out.extend(self.attention.value.leaves());
        for c in &self.fusion {
            out.extend(c.leaves());
        }
        out.extend(self.head.leaves());
        out
    }
}
