use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::shape::AnalyticShape;
use crate::geom::{self, Vec3};

/// Noise levels for near-surface samples, in normalized units (the cube
/// `[-1, 1]³` has size 2, so these are 0.25% and 2.5% of it).
pub const NEAR_SIGMAS: [f64; 2] = [0.005, 0.05];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdfSample {
    pub point: Vec3,
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SamplingStrategy {
    NearSurface,
    Uniform,
    /// `near_fraction` of the points near the surface, the rest uniform.
    Mixed { near_fraction: f64 },
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy::Mixed { near_fraction: 0.8 }
    }
}

pub fn uniform_in_cube<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ]
}

pub fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = geom::norm(v);
        if n > 1e-12 {
            return geom::scale(v, 1.0 / n);
        }
    }
}

/// Random surface point, drawn by casting from the center in a uniform direction.
pub fn surface_point<R: Rng + ?Sized>(shape: &AnalyticShape, rng: &mut R) -> Vec3 {
    shape.boundary_along(random_direction(rng))
}

pub fn sample_sdf<R: Rng + ?Sized>(
    shape: &AnalyticShape,
    n: usize,
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Vec<SdfSample> {
    let near = match strategy {
        SamplingStrategy::NearSurface => n,
        SamplingStrategy::Uniform => 0,
        SamplingStrategy::Mixed { near_fraction } => {
            ((n as f64) * near_fraction.clamp(0.0, 1.0)).round() as usize
        }
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let point = if i < near {
            let sigma = NEAR_SIGMAS[i % 2];
            let noise = Normal::new(0.0, sigma).expect("positive sigma");
            let s = surface_point(shape, rng);
            [
                s[0] + noise.sample(rng),
                s[1] + noise.sample(rng),
                s[2] + noise.sample(rng),
            ]
        } else {
            uniform_in_cube(rng)
        };
        out.push(SdfSample {
            point,
            distance: shape.sdf(point),
        });
    }
    out
}
