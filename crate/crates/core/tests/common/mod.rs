//! Shared helpers for the integration tests: finite-difference checks and
//! trained-model fixtures that are expensive enough to cache on disk.
#![allow(dead_code)]

pub mod gradients;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::sync::OnceLock;

use cardio_autodiff::gradcheck::{probe, GradCheckSummary};
use cardio_autodiff::{Checkpoint, Module, Tensor};
use cardio_core::csdf::pretrain::DecoderTrainer;
use cardio_core::csdf::{pretrain, CsdfConfig, CsdfModel, EncoderConfig, MaskEncoder, PretrainConfig};
use cardio_core::shapegen::dataset::{draw_weight_table, make_record, split_assignment};
use cardio_core::shapegen::{AnalyticShape, DatasetConfig, FamilyConfig, ModeWeights, ShapeRecord, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

/// Probe `count` random parameter entries of `module` against central
/// differences of `loss`. `grads` holds one tensor per parameter, in
/// `params_mut` order.
pub fn check_module<M: Module + Clone>(
    module: &M,
    grads: &[Tensor],
    count: usize,
    seed: u64,
    loss: impl Fn(&M) -> f64,
) -> GradCheckSummary {
    let sizes: Vec<usize> = module.clone().params_mut().iter().map(|t| t.len()).collect();
    assert_eq!(sizes.len(), grads.len(), "one gradient per parameter");
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary::default();
    for _ in 0..count {
        let mut k = rng.gen_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let analytic = grads[which].data()[k];
        let p = probe(
            |d| {
                let mut m = module.clone();
                m.params_mut()[which].data_mut()[k] += d;
                loss(&m)
            },
            analytic,
            FD_STEP,
        );
        summary.record(p);
    }
    summary
}

/// Probe `count` random coordinates of `x` (with replacement when `count`
/// exceeds its length).
pub fn check_vector(x: &[f64], grad: &[f64], count: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> GradCheckSummary {
    assert_eq!(x.len(), grad.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary::default();
    for i in 0..count {
        let k = if count <= x.len() { i } else { rng.gen_range(0..x.len()) };
        let p = probe(
            |d| {
                let mut y = x.to_vec();
                y[k] += d;
                f(&y)
            },
            grad[k],
            FD_STEP,
        );
        summary.record(p);
    }
    summary
}

pub fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("fixtures");
    std::fs::create_dir_all(&dir).expect("fixture cache dir");
    dir
}

/// Changes whenever code that shapes a trained fixture changes.
fn source_fingerprint(extra: &str) -> String {
    let sources = [
        include_str!("../../src/csdf/model.rs"),
        include_str!("../../src/csdf/encoder.rs"),
        include_str!("../../src/csdf/pretrain.rs"),
        include_str!("../../src/shapegen/dataset.rs"),
        include_str!("../../src/shapegen/sampling.rs"),
        include_str!("../../src/shapegen/shape.rs"),
        include_str!("../../src/shapegen/view.rs"),
        include_str!("../../../autodiff/src/tape.rs"),
        include_str!("../../../autodiff/src/kernels.rs"),
        include_str!("../../../autodiff/src/nn.rs"),
        include_str!("../../../autodiff/src/adam.rs"),
    ];
    let mut h = DefaultHasher::new();
    sources.hash(&mut h);
    extra.hash(&mut h);
    format!("{:016x}", h.finish())
}

/// Decoder overfit to one sphere of radius [`SPHERE_RADIUS`].
pub struct SphereFixture {
    pub model: CsdfModel,
    pub z: Vec<f64>,
    pub shape: AnalyticShape,
    /// Training L1 per step.
    pub l1: Vec<f64>,
}

pub const SPHERE_RADIUS: f64 = 0.8;
pub const SPHERE_STEPS: usize = 500;

pub fn sphere_record(samples: usize) -> (ShapeRecord, AnalyticShape) {
    let cfg = DatasetConfig {
        count: 1,
        family: FamilyConfig::sphere(SPHERE_RADIUS, 1),
        samples_per_shape: samples,
        ..DatasetConfig::default()
    };
    make_record(&cfg, 0, ModeWeights::zeros(1)).expect("sphere record")
}

pub fn sphere() -> &'static SphereFixture {
    static CELL: OnceLock<SphereFixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let (record, shape) = sphere_record(5000);
        let cfg = PretrainConfig {
            shapes_per_batch: 1,
            points_per_shape: 4096,
            decoder_lr: 5e-3,
            latent_lr: 5e-3,
            ..PretrainConfig::default()
        };
        let path = cache_dir().join(format!("sphere-{}.ckpt", source_fingerprint(&format!("{cfg:?}"))));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = CsdfModel::new(CsdfConfig::default(), &mut rng).unwrap();
        if let Ok(ck) = Checkpoint::load(&path) {
            let trainer = DecoderTrainer::load_from(&ck, model).unwrap();
            let l1 = ck.get("log.l1").unwrap().data().to_vec();
            return SphereFixture {
                z: trainer.code(0).to_vec(),
                model: trainer.model,
                shape,
                l1,
            };
        }
        let mut trainer = DecoderTrainer::new(model, 1, cfg.latent_init_std, &mut rng).unwrap();
        let mut l1 = Vec::with_capacity(SPHERE_STEPS);
        for _ in 0..SPHERE_STEPS {
            l1.push(trainer.train_step(&[&record], &cfg, &mut rng).unwrap().l1);
        }
        let mut ck = Checkpoint::new("sphere fixture");
        trainer.save_into(&mut ck);
        ck.push("log.l1", Tensor::from_vec(&[l1.len()], l1.clone()));
        ck.save(&path).unwrap();
        SphereFixture {
            z: trainer.code(0).to_vec(),
            model: trainer.model,
            shape,
            l1,
        }
    })
}

/// Decoder, per-shape codes and mask encoder pretrained on the default
/// 200-shape family.
pub struct FamilyFixture {
    pub dataset: DatasetConfig,
    pub records: Vec<ShapeRecord>,
    pub shapes: Vec<AnalyticShape>,
    pub split: Vec<Split>,
    pub model: CsdfModel,
    pub encoder: MaskEncoder,
    /// Codes of the training records, in `train()` order.
    pub codes: Vec<Vec<f64>>,
    pub pretrain: PretrainConfig,
}

impl FamilyFixture {
    pub fn train(&self) -> Vec<&ShapeRecord> {
        self.by_split(Split::Train)
    }

    pub fn test(&self) -> Vec<&ShapeRecord> {
        self.by_split(Split::Test)
    }

    fn by_split(&self, split: Split) -> Vec<&ShapeRecord> {
        self.records.iter().zip(&self.split).filter(|(_, s)| **s == split).map(|(r, _)| r).collect()
    }

    pub fn shape(&self, record: &ShapeRecord) -> &AnalyticShape {
        &self.shapes[record.id as usize]
    }

    pub fn mean_code(&self) -> Vec<f64> {
        pretrain::mean_rows(&self.codes)
    }
}

pub fn family_pretrain_config() -> PretrainConfig {
    PretrainConfig {
        decoder_steps: 1500,
        encoder_steps: 600,
        ..PretrainConfig::default()
    }
}

pub fn family() -> &'static FamilyFixture {
    static CELL: OnceLock<FamilyFixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dataset = DatasetConfig::default();
        let table = draw_weight_table(dataset.family.modes, dataset.count, dataset.seed);
        let (records, shapes): (Vec<_>, Vec<_>) = table
            .into_iter()
            .enumerate()
            .map(|(i, w)| make_record(&dataset, i, w).unwrap())
            .unzip();
        let split = split_assignment(&dataset);
        let cfg = family_pretrain_config();
        let key = source_fingerprint(&format!("{cfg:?}{dataset:?}"));
        let path = cache_dir().join(format!("family-{key}.ckpt"));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = CsdfModel::new(CsdfConfig::default(), &mut rng).unwrap();
        let mut encoder = MaskEncoder::new(EncoderConfig::desk(), model.latent_dim(), &mut rng).unwrap();
        let mut fixture = FamilyFixture {
            dataset,
            records,
            shapes,
            split,
            model: model.clone(),
            encoder: encoder.clone(),
            codes: Vec::new(),
            pretrain: cfg.clone(),
        };
        if let Ok(ck) = Checkpoint::load(&path) {
            ck.load_module("decoder", &mut model).unwrap();
            ck.load_module("encoder", &mut encoder).unwrap();
            let codes = ck.get("codes").unwrap();
            fixture.codes = (0..codes.rows()).map(|i| codes.row(i).to_vec()).collect();
            fixture.model = model;
            fixture.encoder = encoder;
            return fixture;
        }
        let train = fixture.train();
        let out = pretrain::pretrain(model, Some(encoder), &train, &cfg, &mut rng).unwrap();
        let mut ck = Checkpoint::new("family fixture");
        ck.push_module("decoder", &out.model);
        let encoder = out.encoder.expect("encoder stage ran");
        ck.push_module("encoder", &encoder);
        let l = out.model.latent_dim();
        ck.push(
            "codes",
            Tensor::from_vec(&[out.codes.len(), l], out.codes.iter().flatten().copied().collect()),
        );
        ck.save(&path).unwrap();
        fixture.model = out.model;
        fixture.encoder = encoder;
        fixture.codes = out.codes;
        fixture
    })
}

/// Decoder trained on spheres whose radii cover `0.8 ± 0.1` and beyond.
pub struct PulseFixture {
    pub model: CsdfModel,
    pub codes: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
}

pub const PULSE_SHAPES: usize = 13;
pub const PULSE_STEPS: usize = 1500;

/// Radius of the pulsating sphere at normalized time `t`.
pub fn pulse_radius(t: f64) -> f64 {
    0.8 + 0.1 * (2.0 * std::f64::consts::PI * t).sin()
}

pub fn pulse() -> &'static PulseFixture {
    static CELL: OnceLock<PulseFixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dataset = DatasetConfig {
            count: PULSE_SHAPES,
            family: FamilyConfig::sphere(0.8, 1),
            ..DatasetConfig::default()
        };
        let (records, shapes): (Vec<_>, Vec<_>) = (0..PULSE_SHAPES)
            .map(|i| {
                let w = -3.0 + 6.0 * i as f64 / (PULSE_SHAPES - 1) as f64;
                make_record(&dataset, i, ModeWeights(vec![w])).unwrap()
            })
            .unzip();
        let radii = shapes.iter().map(|s| s.axes[0]).collect();
        let cfg = PretrainConfig {
            shapes_per_batch: 4,
            points_per_shape: 2048,
            decoder_lr: 2e-3,
            latent_lr: 5e-3,
            ..PretrainConfig::default()
        };
        let key = source_fingerprint(&format!("{cfg:?}{dataset:?}{PULSE_STEPS}"));
        let path = cache_dir().join(format!("pulse-{key}.ckpt"));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = CsdfModel::new(CsdfConfig::default(), &mut rng).unwrap();
        let trainer = match Checkpoint::load(&path) {
            Ok(ck) => DecoderTrainer::load_from(&ck, model).unwrap(),
            Err(_) => {
                let mut trainer = DecoderTrainer::new(model, PULSE_SHAPES, cfg.latent_init_std, &mut rng).unwrap();
                let refs: Vec<&ShapeRecord> = records.iter().collect();
                for _ in 0..PULSE_STEPS {
                    trainer.train_step(&refs, &cfg, &mut rng).unwrap();
                }
                let mut ck = Checkpoint::new("pulse fixture");
                trainer.save_into(&mut ck);
                ck.save(&path).unwrap();
                trainer
            }
        };
        PulseFixture {
            codes: (0..PULSE_SHAPES).map(|i| trainer.code(i).to_vec()).collect(),
            model: trainer.model,
            radii,
        }
    })
}
