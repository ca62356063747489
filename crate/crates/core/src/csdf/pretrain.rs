//! Shape-prior pretraining: L1 to clamped ground-truth distances plus an L2
//! penalty on the latent codes.
//!
//! Two stages: the decoder is trained jointly with free per-shape codes
//! (auto-decoder), then the mask encoder is trained to produce codes that the
//! frozen decoder turns into the right distances.

use std::io::Write;

use cardio_autodiff::{AdamConfig, AdamState, Checkpoint, Tape, Tensor, Var};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoder::MaskEncoder;
use super::model::{points_tensor, CsdfModel, CsdfVars};
use crate::error::{CoreError, Result};
use crate::shapegen::{SdfSample, ShapeRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub decoder_steps: usize,
    pub encoder_steps: usize,
    pub shapes_per_batch: usize,
    pub points_per_shape: usize,
    pub decoder_lr: f64,
    pub latent_lr: f64,
    pub encoder_lr: f64,
    /// Weight of the mean squared latent norm.
    pub latent_reg: f64,
    pub latent_init_std: f64,
    /// Training L1 the run is expected to reach; reported, not enforced.
    pub l1_target: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            decoder_steps: 3000,
            encoder_steps: 2000,
            shapes_per_batch: 8,
            points_per_shape: 512,
            decoder_lr: 1e-3,
            latent_lr: 1e-3,
            encoder_lr: 5e-4,
            latent_reg: 1e-4,
            latent_init_std: 0.01,
            l1_target: 0.01,
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes_per_batch == 0 || self.points_per_shape == 0 {
            return Err(CoreError::Config("batch sizes must be positive".into()));
        }
        for (name, lr) in [
            ("decoder_lr", self.decoder_lr),
            ("latent_lr", self.latent_lr),
            ("encoder_lr", self.encoder_lr),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.latent_reg >= 0.0) {
            return Err(CoreError::Config("latent_reg must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the training log. `total == l1 + reg`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub step: usize,
    pub l1: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn write_log_csv<W: Write>(rows: &[LossTerms], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,l1,reg,total")?;
    for r in rows {
        writeln!(w, "{},{:.10e},{:.10e},{:.10e}", r.step, r.l1, r.reg, r.total)?;
    }
    Ok(())
}

/// Random point subset of one shape: `[P, 3]` points and clamped targets.
fn draw_points<R: Rng + ?Sized>(samples: &[SdfSample], n: usize, delta: f64, rng: &mut R) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut pts = Vec::with_capacity(n);
    let mut tgt = Vec::with_capacity(n);
    for _ in 0..n {
        let s = &samples[rng.gen_range(0..samples.len())];
        pts.push(s.point);
        tgt.push(s.distance.clamp(-delta, delta));
    }
    (pts, tgt)
}

/// `mean |f − target|` for `f: [N, 1]`.
fn l1_term(tape: &mut Tape, f: Var, targets: Vec<f64>) -> Var {
    let n = targets.len();
    let t = tape.constant(Tensor::from_vec(&[n, 1], targets));
    let d = tape.sub(f, t);
    let a = tape.abs(d);
    tape.mean(a)
}

/// `λ · mean_b ‖z_b‖²` for `z: [B, L]`.
fn reg_term(tape: &mut Tape, z: Var, lambda: f64) -> Var {
    let b = tape.value(z).rows() as f64;
    let sq = tape.square(z);
    let s = tape.sum(sq);
    tape.scale(s, lambda / b)
}

fn finite_or_abort(terms: &LossTerms) -> Result<()> {
    if terms.total.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Numerical(format!(
            "pretraining diverged at step {}: l1 = {}, reg = {}",
            terms.step, terms.l1, terms.reg
        )))
    }
}

/// Project every row of `codes: [N, L]` into the L2 ball of radius `cap`.
pub fn cap_rows(codes: &mut Tensor, cap: f64) {
    let l = codes.cols();
    for row in codes.data_mut().chunks_mut(l) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > cap {
            row.iter_mut().for_each(|v| *v *= cap / n);
        }
    }
}

/// Decoder plus free per-shape codes, trained jointly.
#[derive(Clone, Debug)]
pub struct DecoderTrainer {
    pub model: CsdfModel,
    /// `[num_shapes, L]`
    pub codes: Tensor,
    pub step: usize,
    adam_model: AdamState,
    adam_codes: AdamState,
}

impl DecoderTrainer {
    pub fn new<R: Rng + ?Sized>(model: CsdfModel, num_shapes: usize, init_std: f64, rng: &mut R) -> Result<Self> {
        if num_shapes == 0 {
            return Err(CoreError::Empty("pretraining shapes"));
        }
        let l = model.latent_dim();
        let normal = Normal::new(0.0, init_std.max(0.0)).map_err(|e| CoreError::Config(e.to_string()))?;
        let codes = Tensor::from_vec(&[num_shapes, l], (0..num_shapes * l).map(|_| normal.sample(rng)).collect());
        Ok(Self {
            model,
            codes,
            step: 0,
            adam_model: AdamState::new(AdamConfig::default()),
            adam_codes: AdamState::new(AdamConfig::default()),
        })
    }

    pub fn code(&self, i: usize) -> &[f64] {
        self.codes.row(i)
    }

    /// One optimization step on a random batch of `records` (which must be
    /// indexed like the code table).
    pub fn train_step<R: Rng + ?Sized>(&mut self, records: &[&ShapeRecord], cfg: &PretrainConfig, rng: &mut R) -> Result<LossTerms> {
        if records.len() != self.codes.rows() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} records for {} codes",
                records.len(),
                self.codes.rows()
            )));
        }
        let b = cfg.shapes_per_batch.min(records.len());
        let batch = index::sample(rng, records.len(), b).into_vec();
        let delta = self.model.config.delta;
        let mut pts = Vec::with_capacity(b * cfg.points_per_shape);
        let mut tgt = Vec::with_capacity(b * cfg.points_per_shape);
        let mut owner = Vec::with_capacity(b * cfg.points_per_shape);
        for (slot, &i) in batch.iter().enumerate() {
            let (p, t) = draw_points(&records[i].samples, cfg.points_per_shape, delta, rng);
            pts.extend(p);
            tgt.extend(t);
            owner.extend(std::iter::repeat(slot).take(cfg.points_per_shape));
        }

        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let codes = tape.leaf(self.codes.clone());
        let z = tape.gather_rows(codes, &batch);
        let bias = vars.latent_bias(&mut tape, z);
        let bias = tape.gather_rows(bias, &owner);
        let x = tape.constant(points_tensor(&pts));
        let f = vars.forward(&mut tape, bias, x);
        let l1 = l1_term(&mut tape, f, tgt);
        let reg = reg_term(&mut tape, z, cfg.latent_reg);
        let total = tape.add(l1, reg);
        let terms = LossTerms {
            step: self.step,
            l1: tape.value(l1).item(),
            reg: tape.value(reg).item(),
            total: tape.value(total).item(),
        };
        finite_or_abort(&terms)?;
        tape.backward(total)?;

        let grads: Vec<Tensor> = vars.leaves().iter().map(|&v| tape.grad_or_zeros(v)).collect();
        self.adam_model.step_module(&mut self.model, &grads, cfg.decoder_lr)?;
        let g = tape.grad_or_zeros(codes);
        self.adam_codes.step_module(&mut self.codes, &[g], cfg.latent_lr)?;
        cap_rows(&mut self.codes, self.model.config.latent_cap);
        self.step += 1;
        Ok(terms)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.push_module("decoder", &self.model);
        ck.push("codes", self.codes.clone());
        ck.push("trainer.step", Tensor::scalar(self.step as f64));
        self.adam_model.save_into(ck, "adam.decoder");
        self.adam_codes.save_into(ck, "adam.codes");
    }

    /// Restore a trainer written by [`DecoderTrainer::save_into`]; `model`
    /// supplies the architecture.
    pub fn load_from(ck: &Checkpoint, mut model: CsdfModel) -> Result<Self> {
        ck.load_module("decoder", &mut model)?;
        let missing = |n: &str| CoreError::Config(format!("checkpoint lacks `{n}`"));
        let codes = ck.get("codes").ok_or_else(|| missing("codes"))?.clone();
        if codes.cols() != model.latent_dim() {
            return Err(CoreError::ShapeMismatch(format!(
                "checkpoint codes have {} entries, model expects {}",
                codes.cols(),
                model.latent_dim()
            )));
        }
        let step = ck.get("trainer.step").ok_or_else(|| missing("trainer.step"))?.item() as usize;
        Ok(Self {
            model,
            codes,
            step,
            adam_model: AdamState::load_from(ck, "adam.decoder", AdamConfig::default())?,
            adam_codes: AdamState::load_from(ck, "adam.codes", AdamConfig::default())?,
        })
    }
}

/// Encoder trained through a frozen decoder.
#[derive(Clone, Debug)]
pub struct EncoderTrainer {
    pub encoder: MaskEncoder,
    pub step: usize,
    adam: AdamState,
}

impl EncoderTrainer {
    pub fn new(encoder: MaskEncoder) -> Self {
        Self {
            encoder,
            step: 0,
            adam: AdamState::new(AdamConfig::default()),
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.push_module("encoder", &self.encoder);
        ck.push("encoder_trainer.step", Tensor::scalar(self.step as f64));
        self.adam.save_into(ck, "adam.encoder");
    }

    /// Restore a trainer written by [`EncoderTrainer::save_into`].
    pub fn load_from(ck: &Checkpoint, mut encoder: MaskEncoder) -> Result<Self> {
        ck.load_module("encoder", &mut encoder)?;
        let step = ck
            .get("encoder_trainer.step")
            .ok_or_else(|| CoreError::Config("checkpoint lacks `encoder_trainer.step`".into()))?
            .item() as usize;
        Ok(Self {
            encoder,
            step,
            adam: AdamState::load_from(ck, "adam.encoder", AdamConfig::default())?,
        })
    }

    /// One step on a random batch; each shape sees a random non-empty,
    /// randomly ordered subset of its views (the first one is the anchor).
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        decoder: &CsdfModel,
        records: &[&ShapeRecord],
        cfg: &PretrainConfig,
        rng: &mut R,
    ) -> Result<LossTerms> {
        if records.is_empty() {
            return Err(CoreError::Empty("pretraining shapes"));
        }
        let b = cfg.shapes_per_batch.min(records.len());
        let batch = index::sample(rng, records.len(), b).into_vec();
        let delta = decoder.config.delta;
        let mut tape = Tape::new();
        let dec = decoder.bind(&mut tape, false);
        let enc = self.encoder.bind(&mut tape, true);
        let mut codes = Vec::with_capacity(b);
        let mut pts = Vec::new();
        let mut tgt = Vec::new();
        let mut owner = Vec::new();
        for (slot, &i) in batch.iter().enumerate() {
            let r = records[i];
            let mut order: Vec<usize> = (0..r.masks.len()).collect();
            order.shuffle(rng);
            order.truncate(rng.gen_range(1..=r.masks.len()));
            let masks: Vec<_> = order.iter().map(|&v| &r.masks[v]).collect();
            codes.push(enc.forward(&mut tape, &masks)?);
            let (p, t) = draw_points(&r.samples, cfg.points_per_shape, delta, rng);
            pts.extend(p);
            tgt.extend(t);
            owner.extend(std::iter::repeat(slot).take(cfg.points_per_shape));
        }
        let z = tape.concat_rows(&codes);
        let terms = self.loss(&mut tape, &dec, z, &owner, &pts, tgt, cfg.latent_reg)?;
        let grads: Vec<Tensor> = enc.leaves().iter().map(|&v| tape.grad_or_zeros(v)).collect();
        self.adam.step_module(&mut self.encoder, &grads, cfg.encoder_lr)?;
        self.step += 1;
        Ok(terms)
    }

    #[allow(clippy::too_many_arguments)]
    fn loss(
        &self,
        tape: &mut Tape,
        dec: &CsdfVars,
        z: Var,
        owner: &[usize],
        pts: &[[f64; 3]],
        tgt: Vec<f64>,
        lambda: f64,
    ) -> Result<LossTerms> {
        let bias = dec.latent_bias(tape, z);
        let bias = tape.gather_rows(bias, owner);
        let x = tape.constant(points_tensor(pts));
        let f = dec.forward(tape, bias, x);
        let l1 = l1_term(tape, f, tgt);
        let reg = reg_term(tape, z, lambda);
        let total = tape.add(l1, reg);
        let terms = LossTerms {
            step: self.step,
            l1: tape.value(l1).item(),
            reg: tape.value(reg).item(),
            total: tape.value(total).item(),
        };
        finite_or_abort(&terms)?;
        tape.backward(total)?;
        Ok(terms)
    }
}

/// Result of a full two-stage run.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: CsdfModel,
    /// Learned code per training record, in input order.
    pub codes: Vec<Vec<f64>>,
    pub encoder: Option<MaskEncoder>,
    pub decoder_log: Vec<LossTerms>,
    pub encoder_log: Vec<LossTerms>,
}

impl Pretrained {
    /// Mean of the training codes.
    pub fn mean_code(&self) -> Vec<f64> {
        mean_rows(&self.codes)
    }
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let l = rows.first().map_or(0, Vec::len);
    let mut out = vec![0.0; l];
    for r in rows {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v / rows.len() as f64);
    }
    out
}

/// Run both stages. The encoder stage is skipped when `encoder` is `None`.
pub fn pretrain<R: Rng + ?Sized>(
    model: CsdfModel,
    encoder: Option<MaskEncoder>,
    records: &[&ShapeRecord],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Pretrained> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(CoreError::Empty("pretraining shapes"));
    }
    let mut trainer = DecoderTrainer::new(model, records.len(), cfg.latent_init_std, rng)?;
    let mut decoder_log = Vec::with_capacity(cfg.decoder_steps);
    for _ in 0..cfg.decoder_steps {
        decoder_log.push(trainer.train_step(records, cfg, rng)?);
    }
    let mut encoder_log = Vec::with_capacity(cfg.encoder_steps);
    let encoder = match encoder {
        Some(enc) => {
            let mut et = EncoderTrainer::new(enc);
            for _ in 0..cfg.encoder_steps {
                encoder_log.push(et.train_step(&trainer.model, records, cfg, rng)?);
            }
            Some(et.encoder)
        }
        None => None,
    };
    let codes = (0..records.len()).map(|i| trainer.code(i).to_vec()).collect();
    Ok(Pretrained {
        model: trainer.model,
        codes,
        encoder,
        decoder_log,
        encoder_log,
    })
}

/// Mean `|f − clamp(s, ±δ)|` over `samples`.
pub fn sdf_l1(model: &CsdfModel, z: &[f64], samples: &[SdfSample]) -> f64 {
    let delta = model.config.delta;
    let pts: Vec<_> = samples.iter().map(|s| s.point).collect();
    let f = model.eval_many(z, &pts);
    f.iter()
        .zip(samples)
        .map(|(f, s)| (f - s.distance.clamp(-delta, delta)).abs())
        .sum::<f64>()
        / samples.len().max(1) as f64
}

/// Fit a code for an unseen shape against its SDF samples with the decoder frozen.
pub fn infer_latent<R: Rng + ?Sized>(
    model: &CsdfModel,
    samples: &[SdfSample],
    init: &[f64],
    steps: usize,
    lr: f64,
    latent_reg: f64,
    points_per_step: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    model.check_latent(init)?;
    if samples.is_empty() {
        return Err(CoreError::Empty("SDF samples"));
    }
    let l = init.len();
    let mut z = Tensor::from_vec(&[1, l], init.to_vec());
    let mut adam = AdamState::new(AdamConfig::default());
    for step in 0..steps {
        let (pts, tgt) = draw_points(samples, points_per_step, model.config.delta, rng);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let zv = tape.leaf(z.clone());
        let bias = vars.latent_bias(&mut tape, zv);
        let x = tape.constant(points_tensor(&pts));
        let f = vars.forward(&mut tape, bias, x);
        let l1 = l1_term(&mut tape, f, tgt);
        let reg = reg_term(&mut tape, zv, latent_reg);
        let total = tape.add(l1, reg);
        finite_or_abort(&LossTerms {
            step,
            l1: tape.value(l1).item(),
            reg: tape.value(reg).item(),
            total: tape.value(total).item(),
        })?;
        tape.backward(total)?;
        let g = tape.grad_or_zeros(zv);
        adam.step_module(&mut z, &[g], lr)?;
        cap_rows(&mut z, model.config.latent_cap);
    }
    Ok(z.into_data())
}
