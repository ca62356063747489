//! Analytic LV-like shape family: a prolate ellipsoid truncated by a basal
//! cap plane, deformed by a small set of parametric modes.

use serde::{Deserialize, Serialize};

use super::ellipsoid;
use crate::error::{CoreError, Result};
use crate::geom::{self, Mat3, Vec3};

/// Largest supported mode count.
pub const MAX_MODES: usize = 8;
/// Mode weights are clamped to this many standard deviations.
pub const WEIGHT_LIMIT: f64 = 3.0;

/// Mean geometry of a family before any mode is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseShape {
    pub center: Vec3,
    /// Semi-axes `(a, b, c)`; `c` runs along the long (z) axis.
    pub axes: Vec3,
    /// Height of the cap plane above the center as a fraction of `c`;
    /// `None` keeps the full ellipsoid.
    pub cap_ratio: Option<f64>,
}

impl BaseShape {
    pub fn ventricle() -> Self {
        Self {
            center: [0.0, 0.0, 0.175],
            axes: [0.4, 0.4, 0.7],
            cap_ratio: Some(0.5),
        }
    }

    pub fn sphere(radius: f64) -> Self {
        Self {
            center: [0.0; 3],
            axes: [radius; 3],
            cap_ratio: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyConfig {
    pub base: BaseShape,
    pub modes: usize,
    /// Physical size of one normalized unit.
    pub mm_per_unit: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            base: BaseShape::ventricle(),
            modes: 6,
            mm_per_unit: 60.0,
        }
    }
}

impl FamilyConfig {
    pub fn sphere(radius: f64, modes: usize) -> Self {
        Self {
            base: BaseShape::sphere(radius),
            modes,
            mm_per_unit: 60.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.modes > MAX_MODES {
            return Err(CoreError::Config(format!(
                "mode count {} not in 1..={MAX_MODES}",
                self.modes
            )));
        }
        if self.base.axes.iter().any(|&a| !(a > 0.0)) {
            return Err(CoreError::Config("semi-axes must be positive".into()));
        }
        if let Some(r) = self.base.cap_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(CoreError::Config(format!("cap ratio {r} not in [0, 1)")));
            }
        }
        if !(self.mm_per_unit > 0.0) {
            return Err(CoreError::Config("mm_per_unit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeWeights(pub Vec<f64>);

impl ModeWeights {
    pub fn zeros(m: usize) -> Self {
        Self(vec![0.0; m])
    }

    pub fn validate(&self, modes: usize) -> Result<()> {
        if self.0.len() != modes {
            return Err(CoreError::Config(format!(
                "expected {modes} mode weights, got {}",
                self.0.len()
            )));
        }
        for (index, &value) in self.0.iter().enumerate() {
            if !value.is_finite() || value.abs() > WEIGHT_LIMIT {
                return Err(CoreError::WeightOutOfRange {
                    index,
                    value,
                    limit: WEIGHT_LIMIT,
                });
            }
        }
        Ok(())
    }
}

/// Closed convex solid `{ x : local(x) in ellipsoid, local(x).z <= cap }`
/// where `local(x) = Rᵀ (x − center)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticShape {
    pub center: Vec3,
    pub axes: Vec3,
    /// Local-frame height of the cap plane, `0 <= cap < axes[2]`.
    pub cap: Option<f64>,
    pub rotation: Mat3,
    pub mm_per_unit: f64,
}

/// Apply the first `weights.len()` family modes to the base geometry.
///
/// Modes, in order: overall size, long-axis length, short-axis width,
/// cross-section ellipticity, cap height, tilt about y, tilt about x,
/// shift along the long axis.
pub fn generate_shape(weights: &ModeWeights, family: &FamilyConfig) -> Result<AnalyticShape> {
    family.validate()?;
    weights.validate(family.modes)?;
    let w = |i: usize| weights.0.get(i).copied().unwrap_or(0.0);
    let base = &family.base;
    let size = (0.05 * w(0)).exp();
    let long = (0.06 * w(1)).exp();
    let short = (0.06 * w(2)).exp();
    let ellip = (0.05 * w(3)).exp();
    let axes = [
        base.axes[0] * size * short * ellip,
        base.axes[1] * size * short / ellip,
        base.axes[2] * size * long,
    ];
    let cap = base
        .cap_ratio
        .map(|r| (r + 0.05 * w(4)).clamp(0.0, 0.95) * axes[2]);
    let rotation = geom::mat_mul(&geom::rot_y(0.05 * w(5)), &geom::rot_x(0.05 * w(6)));
    let center = geom::add(base.center, [0.0, 0.0, 0.03 * w(7)]);
    Ok(AnalyticShape {
        center,
        axes,
        cap,
        rotation,
        mm_per_unit: family.mm_per_unit,
    })
}

impl AnalyticShape {
    pub fn sphere(radius: f64) -> Self {
        Self {
            center: [0.0; 3],
            axes: [radius; 3],
            cap: None,
            rotation: geom::IDENTITY,
            mm_per_unit: 60.0,
        }
    }

    pub fn to_local(&self, p: Vec3) -> Vec3 {
        geom::mat_t_vec(&self.rotation, geom::sub(p, self.center))
    }

    pub fn to_world(&self, l: Vec3) -> Vec3 {
        geom::add(geom::mat_vec(&self.rotation, l), self.center)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let l = self.to_local(p);
        ellipsoid::contains(self.axes, l) && self.cap.map_or(true, |h| l[2] <= h)
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        self.closest_point(p).1
    }

    /// Nearest boundary point and the exact signed distance (negative inside).
    pub fn closest_point(&self, p: Vec3) -> (Vec3, f64) {
        let l = self.to_local(p);
        let foot = ellipsoid::closest_point(self.axes, l);
        let d_ell = geom::norm(geom::sub(l, foot));
        let in_ell = ellipsoid::contains(self.axes, l);
        let Some(h) = self.cap else {
            return (self.to_world(foot), if in_ell { -d_ell } else { d_ell });
        };
        let above = l[2] - h;
        if in_ell && above <= 0.0 {
            return if d_ell <= -above {
                (self.to_world(foot), -d_ell)
            } else {
                (self.to_world([l[0], l[1], h]), above)
            };
        }
        // Outside the convex solid: the nearest point is the ellipsoid foot
        // (if below the cap), the plane projection (if inside the cap disk),
        // or a point on the rim ellipse.
        let shrink = (1.0 - (h / self.axes[2]).powi(2)).sqrt();
        let rim_axes = [self.axes[0] * shrink, self.axes[1] * shrink];
        let rim2 = ellipsoid::closest_point(rim_axes, [l[0], l[1]]);
        let rim = [rim2[0], rim2[1], h];
        let mut best = (rim, geom::norm(geom::sub(l, rim)));
        if !in_ell && foot[2] <= h && d_ell < best.1 {
            best = (foot, d_ell);
        }
        if ellipsoid::contains(rim_axes, [l[0], l[1]]) && above.abs() < best.1 {
            best = ([l[0], l[1], h], above.abs());
        }
        (self.to_world(best.0), best.1)
    }

    /// Unit outward direction of steepest SDF ascent; `None` on the surface.
    pub fn gradient(&self, p: Vec3) -> Option<Vec3> {
        let (q, d) = self.closest_point(p);
        (d != 0.0).then(|| geom::scale(geom::sub(p, q), 1.0 / d))
    }

    /// Nearest point on the zero-level set.
    pub fn project_to_surface(&self, p: Vec3) -> Vec3 {
        self.closest_point(p).0
    }

    pub fn volume(&self) -> f64 {
        let [a, b, c] = self.axes;
        match self.cap {
            None => 4.0 / 3.0 * std::f64::consts::PI * a * b * c,
            Some(h) => std::f64::consts::PI * a * b * ((h + c) - (h.powi(3) + c.powi(3)) / (3.0 * c * c)),
        }
    }

    /// Point where a ray from the center along unit `dir` leaves the solid.
    pub fn boundary_along(&self, dir: Vec3) -> Vec3 {
        let d = geom::mat_t_vec(&self.rotation, dir);
        let k: f64 = (0..3).map(|i| (d[i] / self.axes[i]).powi(2)).sum();
        let mut t = 1.0 / k.sqrt();
        if let Some(h) = self.cap {
            if d[2] > 0.0 {
                t = t.min(h / d[2]);
            }
        }
        geom::add(self.center, geom::scale(dir, t))
    }
}
