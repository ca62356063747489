use std::io::Write;

use serde::{Deserialize, Serialize};

use super::shape::AnalyticShape;
use crate::error::{CoreError, Result};
use crate::geom::{self, Mat3, Vec3};

/// Imaging plane placement: `x = scale · R [u, v, 0]ᵀ + translation`, with
/// `(u, v)` in `[-1, 1]²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeView {
    pub name: String,
    /// Row-major rotation; column 0 is the image u axis, column 1 the v axis.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl ProbeView {
    /// Plane containing the long (z) axis, rotated `angle_deg` about it.
    /// Image u runs horizontally in the plane, v along +z.
    pub fn apical(name: impl Into<String>, angle_deg: f64) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let e1 = [c, s, 0.0];
        let e2 = [0.0, 0.0, 1.0];
        let e3 = geom::cross(e1, e2);
        Self {
            name: name.into(),
            rotation: [e1[0], e2[0], e3[0], e1[1], e2[1], e3[1], e1[2], e2[2], e3[2]],
            translation: [0.0; 3],
            scale: 1.0,
        }
    }

    /// The default three apical analogs at 0°, 60° and 90°.
    pub fn standard_set(angles_deg: &[f64]) -> Vec<Self> {
        const NAMES: [&str; 3] = ["a4c", "a2c", "a3c"];
        angles_deg
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let name = NAMES.get(i).map_or_else(|| format!("view{i}"), |n| n.to_string());
                Self::apical(name, a)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(CoreError::DegenerateView(format!(
                "view {} has scale {}",
                self.name, self.scale
            )));
        }
        if geom::orthonormality_error(&self.rotation) > 1e-9 || (geom::det(&self.rotation) - 1.0).abs() > 1e-9 {
            return Err(CoreError::DegenerateView(format!(
                "view {} rotation is not a proper rotation",
                self.name
            )));
        }
        Ok(())
    }

    pub fn to_3d(&self, u: f64, v: f64) -> Vec3 {
        let p = geom::mat_vec(&self.rotation, [u, v, 0.0]);
        geom::add(geom::scale(p, self.scale), self.translation)
    }
}

/// Normalized plane coordinates of the center of pixel `(row, col)`; row 0
/// is the top of the image (largest v).
pub fn pixel_center(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    let u = -1.0 + (col as f64 + 0.5) * 2.0 / width as f64;
    let v = 1.0 - (row as f64 + 0.5) * 2.0 / height as f64;
    (u, v)
}

/// Binary image stored row-major as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// 2×2 block vote; a tie counts as foreground.
    pub fn downsample2(&self) -> Self {
        let (h, w) = (self.height / 2, self.width / 2);
        Self::from_fn(h, w, |r, c| {
            let votes = self.get(2 * r, 2 * c) as u8
                + self.get(2 * r + 1, 2 * c) as u8
                + self.get(2 * r, 2 * c + 1) as u8
                + self.get(2 * r + 1, 2 * c + 1) as u8;
            votes >= 2
        })
    }

    /// Pixels that are foreground with a background 4-neighbour or vice versa.
    pub fn boundary(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(r, c);
                let edge = (r > 0 && self.get(r - 1, c) != v)
                    || (r + 1 < self.height && self.get(r + 1, c) != v)
                    || (c > 0 && self.get(r, c - 1) != v)
                    || (c + 1 < self.width && self.get(r, c + 1) != v);
                if edge {
                    out.push(r * self.width + c);
                }
            }
        }
        out
    }

    /// Binary PGM (P5) with foreground white.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        w.write_all(&bytes)
    }

    /// Parses a binary (P5) or ASCII (P2) 8-bit PGM; nonzero pixels are set.
    pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("unexpected end of header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let num = |t: String| t.parse::<usize>().map_err(|_| format!("bad header field `{t}`"));
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
            return Err(format!("unsupported PGM {width}x{height} maxval {maxval}"));
        }
        let n = width * height;
        let data: Vec<u8> = match magic.as_str() {
            "P5" => {
                let body = &bytes[(pos + 1).min(bytes.len())..];
                if body.len() < n {
                    return Err(format!("expected {n} pixels, found {}", body.len()));
                }
                body[..n].iter().map(|&v| u8::from(v != 0)).collect()
            }
            "P2" => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    out.push(u8::from(num(token()?)? != 0));
                }
                out
            }
            other => return Err(format!("unsupported magic `{other}`")),
        };
        Ok(Self { height, width, data })
    }

    pub fn read_pgm(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::parse_pgm(&bytes).map_err(|reason| CoreError::Format {
            path: path.display().to_string(),
            reason,
        })
    }
}

/// Rasterize the cross-section of `shape` on `view`: a pixel is set iff its
/// 3-D point lies strictly inside the shape.
pub fn slice_to_mask(shape: &AnalyticShape, view: &ProbeView, height: usize, width: usize) -> Result<Mask> {
    view.validate()?;
    if height < 8 || width < 8 {
        return Err(CoreError::Config(format!(
            "mask resolution {height}x{width} is below 8x8"
        )));
    }
    Ok(Mask::from_fn(height, width, |r, c| {
        let (u, v) = pixel_center(r, c, height, width);
        shape.sdf(view.to_3d(u, v)) < 0.0
    }))
}
