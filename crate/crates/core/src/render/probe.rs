//! Learnable probe-plane transform `x = s · R(ω) [u, v, 0]ᵀ + t` with an
//! axis-angle rotation and a log-parameterized scale.

use cardio_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::geom::{self, Mat3, Vec3};
use crate::shapegen::ProbeView;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub name: String,
    /// Axis-angle vector; its norm is the rotation angle in radians.
    pub rotation: Vec3,
    pub translation: Vec3,
    pub log_scale: f64,
    pub trainable: bool,
}

impl ProbeParams {
    pub fn identity(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            rotation: [0.0; 3],
            translation: [0.0; 3],
            log_scale: 0.0,
            trainable: true,
        }
    }

    pub fn from_view(view: &ProbeView) -> Self {
        Self {
            name: view.name.clone(),
            rotation: log_map(&view.rotation),
            translation: view.translation,
            log_scale: view.scale.ln(),
            trainable: true,
        }
    }

    pub fn to_view(&self) -> ProbeView {
        ProbeView {
            name: self.name.clone(),
            rotation: self.matrix(),
            translation: self.translation,
            scale: self.scale(),
        }
    }

    pub fn matrix(&self) -> Mat3 {
        cardio_autodiff::rodrigues(self.rotation)
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// Map normalized plane coordinates to 3-D.
    pub fn pixel_to_3d(&self, p: [f64; 2]) -> Vec3 {
        let r = geom::mat_vec(&self.matrix(), [p[0], p[1], 0.0]);
        geom::add(geom::scale(r, self.scale()), self.translation)
    }

    /// Apply an extra rotation `delta` (world frame, left-multiplied) and a
    /// translation offset.
    pub fn perturbed(&self, delta: Vec3, shift: Vec3) -> Self {
        let r = geom::mat_mul(&cardio_autodiff::rodrigues(delta), &self.matrix());
        Self {
            rotation: log_map(&r),
            translation: geom::add(self.translation, shift),
            ..self.clone()
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ProbeVars {
        let trainable = trainable && self.trainable;
        ProbeVars {
            rotation: tape.param(&Tensor::from_vec(&[3], self.rotation.to_vec()), trainable),
            translation: tape.param(&Tensor::from_vec(&[3], self.translation.to_vec()), trainable),
            log_scale: tape.param(&Tensor::from_vec(&[1], vec![self.log_scale]), trainable),
        }
    }

    /// Copy optimized values back from flat parameter tensors.
    pub fn set_from(&mut self, rotation: &Tensor, translation: &Tensor, log_scale: &Tensor) {
        let (r, t) = (rotation.data(), translation.data());
        self.rotation = [r[0], r[1], r[2]];
        self.translation = [t[0], t[1], t[2]];
        self.log_scale = log_scale.data()[0];
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeVars {
    pub rotation: Var,
    pub translation: Var,
    pub log_scale: Var,
}

impl ProbeVars {
    /// `[N, 3]` world points for `pixels: [N, 2]` plane coordinates.
    pub fn points(&self, tape: &mut Tape, pixels: &[[f64; 2]]) -> Var {
        let n = pixels.len();
        let pbar: Vec<f64> = pixels.iter().flat_map(|p| [p[0], p[1], 0.0]).collect();
        let pbar = tape.constant(Tensor::from_vec(&[n, 3], pbar));
        let r = tape.rodrigues(self.rotation);
        let rt = tape.transpose(r);
        let x = tape.matmul(pbar, rt);
        let s = tape.exp(self.log_scale);
        let x = tape.mul_scalar(x, s);
        tape.add_row(x, self.translation)
    }

    pub fn leaves(&self) -> [Var; 3] {
        [self.rotation, self.translation, self.log_scale]
    }
}

/// Axis-angle vector of a rotation matrix, with angle in `[0, π]`.
pub fn log_map(r: &Mat3) -> Vec3 {
    let cos = ((r[0] + r[4] + r[8] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let vee = [r[7] - r[5], r[2] - r[6], r[3] - r[1]];
    if angle < 1e-6 {
        // sin θ ≈ θ: first-order inverse of the exponential map.
        return geom::scale(vee, 0.5);
    }
    if std::f64::consts::PI - angle < 1e-6 {
        // R ≈ 2 a aᵀ − I: read the axis off the largest diagonal entry.
        let diag = [r[0], r[4], r[8]];
        let k = (0..3).max_by(|&a, &b| diag[a].total_cmp(&diag[b])).unwrap_or(0);
        let mut axis = [0.0; 3];
        axis[k] = ((diag[k] + 1.0) / 2.0).max(0.0).sqrt();
        for j in 0..3 {
            if j != k {
                axis[j] = (r[k * 3 + j] + r[j * 3 + k]) / (4.0 * axis[k]);
            }
        }
        return geom::scale(geom::normalize(axis), angle);
    }
    geom::scale(vee, angle / (2.0 * angle.sin()))
}
