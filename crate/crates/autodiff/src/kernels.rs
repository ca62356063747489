//! Dense kernels shared by the forward and backward passes.

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a_t` / `b_t` mark operands stored transposed (row-major `k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one `cin x h x w` image into a `(cin*k*k) x (ho*wo)` matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            img[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image gradient.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        img[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// Column-window attention geometry: rows `[y - r, y + r]` clipped to the image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct WindowGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub radius: usize,
    pub tau: f64,
}

impl WindowGeom {
    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    fn window(&self, y: usize) -> (usize, usize) {
        (y.saturating_sub(self.radius), (y + self.radius).min(self.h - 1))
    }

    /// Softmax weights over the window of pixel `(n, y, x)`, written into `weights`.
    fn weights(&self, q: &[f64], k: &[f64], n: usize, y: usize, x: usize, weights: &mut Vec<f64>) {
        let (y0, y1) = self.window(y);
        weights.clear();
        for j in y0..=y1 {
            let mut s = 0.0;
            for c in 0..self.c {
                s += q[self.idx(n, c, y, x)] * k[self.idx(n, c, j, x)];
            }
            weights.push(s / self.tau);
        }
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in weights.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in weights.iter_mut() {
            *s /= total;
        }
    }
}

pub(crate) fn window_attention_forward(g: &WindowGeom, q: &[f64], k: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    let mut a = Vec::with_capacity(2 * g.radius + 1);
    for n in 0..g.n {
        for y in 0..g.h {
            let (y0, _) = g.window(y);
            for x in 0..g.w {
                g.weights(q, k, n, y, x, &mut a);
                for c in 0..g.c {
                    let mut acc = 0.0;
                    for (off, &aj) in a.iter().enumerate() {
                        acc += aj * v[g.idx(n, c, y0 + off, x)];
                    }
                    out[g.idx(n, c, y, x)] = acc;
                }
            }
        }
    }
    out
}

/// Returns `(dq, dk, dv)`; only the requested buffers are filled.
pub(crate) fn window_attention_backward(
    g: &WindowGeom,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    grad: &[f64],
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let mut a = Vec::with_capacity(2 * g.radius + 1);
    let mut da = Vec::with_capacity(2 * g.radius + 1);
    for n in 0..g.n {
        for y in 0..g.h {
            let (y0, _) = g.window(y);
            for x in 0..g.w {
                g.weights(q, k, n, y, x, &mut a);
                da.clear();
                for off in 0..a.len() {
                    let mut s = 0.0;
                    for c in 0..g.c {
                        s += grad[g.idx(n, c, y, x)] * v[g.idx(n, c, y0 + off, x)];
                    }
                    da.push(s);
                }
                if let Some(dv) = dv.as_deref_mut() {
                    for (off, &aj) in a.iter().enumerate() {
                        for c in 0..g.c {
                            dv[g.idx(n, c, y0 + off, x)] += aj * grad[g.idx(n, c, y, x)];
                        }
                    }
                }
                let dot: f64 = a.iter().zip(&da).map(|(ai, di)| ai * di).sum();
                for (off, &aj) in a.iter().enumerate() {
                    let ds = aj * (da[off] - dot) / g.tau;
                    if ds == 0.0 {
                        continue;
                    }
                    let j = y0 + off;
                    for c in 0..g.c {
                        if let Some(dq) = dq.as_deref_mut() {
                            dq[g.idx(n, c, y, x)] += ds * k[g.idx(n, c, j, x)];
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            dk[g.idx(n, c, j, x)] += ds * q[g.idx(n, c, y, x)];
                        }
                    }
                }
            }
        }
    }
}

/// Coefficients of the exponential map `R = I + a[w] + b[w]^2` and their
/// derivatives divided by the angle, with series forms near zero.
fn exp_map_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-4 {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

fn skew(w: &[f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|p| a[i][p] * b[p][j]).sum();
        }
    }
    out
}

/// Axis-angle vector to a row-major rotation matrix.
pub fn rodrigues(w: [f64; 3]) -> [f64; 9] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, _, _) = exp_map_coeffs(theta);
    let k = skew(&w);
    let k2 = mat3_mul(&k, &k);
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            r[i * 3 + j] = id + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

pub(crate) fn rodrigues_backward(w: [f64; 3], grad: &[f64]) -> [f64; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, c, d) = exp_map_coeffs(theta);
    let k = skew(&w);
    let k2 = mat3_mul(&k, &k);
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = skew(&e);
        let ek = mat3_mul(&ei, &k);
        let ke = mat3_mul(&k, &ei);
        let mut acc = 0.0;
        for r in 0..3 {
            for s in 0..3 {
                let dr = c * w[i] * k[r][s]
                    + a * ei[r][s]
                    + d * w[i] * k2[r][s]
                    + b * (ek[r][s] + ke[r][s]);
                acc += grad[r * 3 + s] * dr;
            }
        }
        *o = acc;
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
