//! On-disk synthetic dataset.
//!
//! A dataset directory holds `manifest.json` plus one `shape_XXXXX.bin` per
//! shape. Record layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "CARDIOSH"
//! version    u32      1
//! id         u32
//! modes      u32      then `modes` x f64 weights
//! samples    u32      then `samples` x (f64 x, f64 y, f64 z, f64 sdf)
//! views      u32      then per view:
//!                       f64[9] rotation (row-major), f64[3] translation, f64 scale,
//!                       u32 height, u32 width, height*width bytes of 0/1 mask
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::sampling::{sample_sdf, SamplingStrategy, SdfSample};
use super::shape::{generate_shape, AnalyticShape, FamilyConfig, ModeWeights, WEIGHT_LIMIT};
use super::view::{slice_to_mask, Mask, ProbeView};
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"CARDIOSH";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub family: FamilyConfig,
    pub samples_per_shape: usize,
    pub sampling: SamplingStrategy,
    pub view_angles_deg: Vec<f64>,
    pub resolution: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 200,
            family: FamilyConfig::default(),
            samples_per_shape: 8192,
            sampling: SamplingStrategy::default(),
            view_angles_deg: vec![0.0, 60.0, 90.0],
            resolution: 64,
            train_fraction: 0.9,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(CoreError::Config("dataset count must be at least 1".into()));
        }
        if self.samples_per_shape == 0 {
            return Err(CoreError::Config("samples_per_shape must be positive".into()));
        }
        if self.view_angles_deg.is_empty() {
            return Err(CoreError::Config("at least one view angle is required".into()));
        }
        if self.resolution < 8 {
            return Err(CoreError::Config("resolution must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(CoreError::Config("train_fraction must be in [0, 1]".into()));
        }
        self.family.validate()
    }

    pub fn views(&self) -> Vec<ProbeView> {
        ProbeView::standard_set(&self.view_angles_deg)
    }

    /// Number of training records; the rest form the test split.
    pub fn train_count(&self) -> usize {
        ((self.count as f64) * self.train_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub id: u32,
    pub weights: ModeWeights,
    pub samples: Vec<SdfSample>,
    pub views: Vec<ProbeView>,
    pub masks: Vec<Mask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    pub file: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub build: String,
    pub config: DatasetConfig,
    pub views: Vec<ProbeView>,
    pub train_count: usize,
    pub test_count: usize,
    pub records: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<u32> {
        self.records
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }
}

/// Independent random stream for shape `index` under `seed`.
pub fn shape_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Standard-normal weights clamped to the allowed range.
pub fn draw_weights(modes: usize, rng: &mut ChaCha8Rng) -> ModeWeights {
    ModeWeights(
        (0..modes)
            .map(|_| {
                let w: f64 = StandardNormal.sample(rng);
                w.clamp(-WEIGHT_LIMIT, WEIGHT_LIMIT)
            })
            .collect(),
    )
}

/// Latin-hypercube draw of `count` weight vectors: for every mode the
/// `count` equal-probability strata of N(0, 1) are each hit once, in a
/// seeded random order. Each weight is still marginally standard normal.
pub fn draw_weight_table(modes: usize, count: usize, seed: u64) -> Vec<ModeWeights> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = shape_rng(seed, u64::MAX - 2);
    let mut table = vec![ModeWeights(Vec::with_capacity(modes)); count];
    for _ in 0..modes {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(&mut rng);
        for (row, &k) in table.iter_mut().zip(&strata) {
            let u = (k as f64 + rng.gen_range(f64::EPSILON..1.0)) / count as f64;
            let w = normal.inverse_cdf(u.min(1.0 - f64::EPSILON));
            row.0.push(w.clamp(-WEIGHT_LIMIT, WEIGHT_LIMIT));
        }
    }
    table
}

/// Build record `index` with the given mode weights.
pub fn make_record(cfg: &DatasetConfig, index: usize, weights: ModeWeights) -> Result<(ShapeRecord, AnalyticShape)> {
    let mut rng = shape_rng(cfg.seed, index as u64);
    let shape = generate_shape(&weights, &cfg.family)?;
    let samples = sample_sdf(&shape, cfg.samples_per_shape, cfg.sampling, &mut rng);
    let views = cfg.views();
    let masks = views
        .iter()
        .map(|v| slice_to_mask(&shape, v, cfg.resolution, cfg.resolution))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        ShapeRecord {
            id: index as u32,
            weights,
            samples,
            views,
            masks,
        },
        shape,
    ))
}

/// Seed-deterministic train/test assignment, indexed by record id.
pub fn split_assignment(cfg: &DatasetConfig) -> Vec<Split> {
    let mut order: Vec<usize> = (0..cfg.count).collect();
    order.shuffle(&mut shape_rng(cfg.seed, u64::MAX - 1));
    let mut split = vec![Split::Test; cfg.count];
    for &i in &order[..cfg.train_count()] {
        split[i] = Split::Train;
    }
    split
}

fn record_file(id: u32) -> String {
    format!("shape_{id:05}.bin")
}

/// Generate all records into `dir` (created if needed) and write the manifest.
/// Shapes are built on all available cores; output is identical regardless of
/// the thread count.
pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path, build: &str) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cfg.count);
    let table = draw_weight_table(cfg.family.modes, cfg.count, cfg.seed);
    let table = &table;
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || -> Result<()> {
                    for index in (w..cfg.count).step_by(workers) {
                        let (record, _) = make_record(cfg, index, table[index].clone())?;
                        write_record(&dir.join(record_file(record.id)), &record)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("dataset worker panicked")?;
        }
        Ok(())
    })?;
    let split = split_assignment(cfg);
    let records: Vec<ManifestEntry> = (0..cfg.count)
        .map(|i| ManifestEntry {
            id: i as u32,
            file: record_file(i as u32),
            split: split[i],
        })
        .collect();
    let manifest = Manifest {
        format_version: VERSION,
        build: build.to_string(),
        config: cfg.clone(),
        views: cfg.views(),
        train_count: cfg.train_count(),
        test_count: cfg.count - cfg.train_count(),
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

/// Write one PGM per view mask into `dir`.
pub fn export_masks_pgm(record: &ShapeRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (view, mask) in record.views.iter().zip(&record.masks) {
        let path = dir.join(format!("shape_{:05}_{}.pgm", record.id, view.name));
        mask.write_pgm(std::io::BufWriter::new(fs::File::create(&path)?))?;
        out.push(path);
    }
    Ok(out)
}

pub fn write_record(path: &Path, record: &ShapeRecord) -> Result<()> {
    let mut buf = Vec::new();
    encode_record(record, &mut buf);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<ShapeRecord> {
    let bytes = fs::read(path)?;
    decode_record(&bytes).map_err(|reason| CoreError::Format {
        path: path.display().to_string(),
        reason,
    })
}

fn encode_record(r: &ShapeRecord, out: &mut Vec<u8>) {
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let f64le = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(MAGIC);
    u32le(out, VERSION as usize);
    u32le(out, r.id as usize);
    u32le(out, r.weights.0.len());
    r.weights.0.iter().for_each(|&w| f64le(out, w));
    u32le(out, r.samples.len());
    for s in &r.samples {
        s.point.iter().for_each(|&v| f64le(out, v));
        f64le(out, s.distance);
    }
    u32le(out, r.views.len());
    for (v, m) in r.views.iter().zip(&r.masks) {
        v.rotation.iter().for_each(|&x| f64le(out, x));
        v.translation.iter().for_each(|&x| f64le(out, x));
        f64le(out, v.scale);
        u32le(out, m.height);
        u32le(out, m.width);
        out.extend_from_slice(&m.data);
    }
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.0.len() < n {
            return Err("unexpected end of record".into());
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s<const N: usize>(&mut self) -> std::result::Result<[f64; N], String> {
        let mut out = [0.0; N];
        for v in out.iter_mut() {
            *v = self.f64()?;
        }
        Ok(out)
    }
}

fn decode_record(bytes: &[u8]) -> std::result::Result<ShapeRecord, String> {
    let mut c = Cursor(bytes);
    if c.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let id = c.u32()? as u32;
    let modes = c.u32()?;
    let weights = (0..modes).map(|_| c.f64()).collect::<std::result::Result<_, _>>()?;
    let n = c.u32()?;
    let mut samples = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let [x, y, z, d] = c.f64s::<4>()?;
        samples.push(SdfSample {
            point: [x, y, z],
            distance: d,
        });
    }
    let nv = c.u32()?;
    let (mut views, mut masks) = (Vec::new(), Vec::new());
    for i in 0..nv {
        let rotation = c.f64s::<9>()?;
        let translation = c.f64s::<3>()?;
        let scale = c.f64()?;
        let (height, width) = (c.u32()?, c.u32()?);
        let data = c.take(height * width)?.to_vec();
        views.push(ProbeView {
            name: format!("view{i}"),
            rotation,
            translation,
            scale,
        });
        masks.push(Mask { height, width, data });
    }
    if !c.0.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(ShapeRecord {
        id,
        weights: ModeWeights(weights),
        samples,
        views,
        masks,
    })
}

/// A loaded dataset: manifest plus every record, in id order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<ShapeRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            CoreError::Config(format!("cannot read dataset manifest {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut records = Vec::with_capacity(manifest.records.len());
        for entry in &manifest.records {
            let mut r = read_record(&dir.join(&entry.file))?;
            for (v, named) in r.views.iter_mut().zip(&manifest.views) {
                v.name = named.name.clone();
            }
            records.push(r);
        }
        Ok(Self { manifest, records })
    }

    pub fn split(&self, split: Split) -> Vec<&ShapeRecord> {
        self.manifest
            .records
            .iter()
            .zip(&self.records)
            .filter(|(e, _)| e.split == split)
            .map(|(_, r)| r)
            .collect()
    }

    /// Rebuild the analytic shape behind a record.
    pub fn shape(&self, record: &ShapeRecord) -> Result<AnalyticShape> {
        generate_shape(&record.weights, &self.manifest.config.family)
    }
}
