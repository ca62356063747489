//! Define-by-run tape.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in reverse, propagating
//! adjoints only through nodes that (transitively) depend on a trainable
//! leaf, and accumulates the result into the leaves' gradient buffers.
//!
//! Shape errors inside individual ops are programming errors and panic with
//! the op name; fallible entry points (MLP forward, backward, optimizer) return
//! [`AutodiffError`].

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom, WindowGeom};
use crate::posenc::PosEncConfig;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Sin,
    Cos,
    Softplus,
    Abs,
    Square,
    Sqrt,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Softplus => kernels::softplus(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Abs => x.signum() * (x != 0.0) as u8 as f64,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    MulScalar(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Rodrigues(Var),
    PosEnc(Var, PosEncConfig),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        radius: usize,
        tau: f64,
    },
    SpatialMean(Var),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) {
    if a.shape() != b.shape() {
        panic!(
            "{}",
            AutodiffError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec()
            }
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: &Tensor, trainable: bool) -> Var {
        self.push(value.clone(), Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, zeros when it never received one.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Fails when any entry of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite(what.to_string()))
        }
    }

    // ----- linear algebra -------------------------------------------------

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        if bv.ndim() != 2 || bv.shape()[0] != k {
            panic!(
                "{}",
                AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec()
                }
            );
        }
        let m = bv.shape()[1];
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, k, m, av.data(), false, bv.data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[n, m], out), Op::MatMul(a, b), rg)
    }

    /// Adds the vector `b` (shape `[m]` or `[1, m]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = av.cols();
        if bv.len() != m {
            panic!(
                "{}",
                AutodiffError::ShapeMismatch {
                    op: "add_row",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec()
                }
            );
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "transpose expects a 2-D tensor");
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[c, r], out), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "add", |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "sub", |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "mul", |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "div", |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), 1, "mul_scalar expects a single-element scale");
        let c = sv.data()[0];
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    pub fn unary(&mut self, a: Var, op: Unary) -> Var {
        let out = self.value(a).map(|x| op.apply(x));
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, op), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: f64 = av.data().iter().sum::<f64>() / av.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `[n, c, h, w] -> [n, c]` average over the spatial axes.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 4, "spatial_mean expects NCHW");
        let (n, c, hw) = (av.shape()[0], av.shape()[1], av.shape()[2] * av.shape()[3]);
        let data = av
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[n, c], data), Op::SpatialMean(a), rg)
    }

    // ----- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols: row count mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&[rows, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[rows, len], out), Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows: column count mismatch");
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&[rows, cols], out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let out = av.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[len, cols], out), Op::SliceRows(a, start), rg)
    }

    /// Row gather: output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of {rows}");
            out.extend_from_slice(&av.data()[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::from_vec(&[idx.len(), cols], out),
            Op::GatherRows(a, idx.to_vec()),
            rg,
        )
    }

    // ----- fused domain ops -----------------------------------------------

    /// Axis-angle `[3]` to rotation matrix `[3, 3]`.
    pub fn rodrigues(&mut self, w: Var) -> Var {
        let wv = self.value(w);
        assert_eq!(wv.len(), 3, "rodrigues expects 3 entries");
        let r = kernels::rodrigues([wv.data()[0], wv.data()[1], wv.data()[2]]);
        let rg = self.rg(w);
        self.push(Tensor::from_vec(&[3, 3], r.to_vec()), Op::Rodrigues(w), rg)
    }

    /// Row-wise sinusoidal encoding, see [`crate::posenc::positional_encode`].
    pub fn posenc(&mut self, a: Var, cfg: PosEncConfig) -> Var {
        let av = self.value(a);
        let (rows, d) = (av.rows(), av.cols());
        let width = cfg.output_dim(d);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend(crate::posenc::positional_encode(av.row(r), cfg));
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[rows, width], out), Op::PosEnc(a, cfg), rg)
    }

    /// 2-D convolution. `x: [n, ci, h, w]`, `w: [co, ci, k, k]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.ndim(), 4, "conv2d input must be NCHW");
        assert_eq!(wv.ndim(), 4, "conv2d weight must be [co, ci, k, k]");
        let (n, ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, k) = (wv.shape()[0], wv.shape()[2]);
        if wv.shape()[1] != ci || bv.len() != co {
            panic!(
                "{}",
                AutodiffError::ShapeMismatch {
                    op: "conv2d",
                    lhs: xv.shape().to_vec(),
                    rhs: wv.shape().to_vec()
                }
            );
        }
        let g = ConvGeom::new(ci, h, wd, k, stride, pad);
        let (img_len, out_len) = (ci * h * wd, co * g.col_cols());
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        let mut out = vec![0.0; n * out_len];
        for i in 0..n {
            kernels::im2col(&xv.data()[i * img_len..(i + 1) * img_len], &g, &mut cols);
            let dst = &mut out[i * out_len..(i + 1) * out_len];
            for (c, row) in dst.chunks_mut(g.col_cols()).enumerate() {
                row.iter_mut().for_each(|v| *v = bv.data()[c]);
            }
            kernels::gemm(co, g.col_rows(), g.col_cols(), wv.data(), false, &cols, false, dst, 1.0);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::from_vec(&[n, co, g.ho, g.wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Softmax attention of each query pixel over the keys in the same
    /// column, rows `y - radius ..= y + radius`. All inputs `[n, c, h, w]`.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, radius: usize, tau: f64) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        same_shape("window_attention", qv, kv);
        same_shape("window_attention", qv, vv);
        assert_eq!(qv.ndim(), 4, "window_attention expects NCHW");
        let s = qv.shape();
        let g = WindowGeom {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            radius,
            tau,
        };
        let out = kernels::window_attention_forward(&g, qv.data(), kv.data(), vv.data());
        let shape = s.to_vec();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::WindowAttention {
                q,
                k,
                v,
                radius,
                tau,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// evaluated in the overflow-free softplus form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "bce_with_logits length mismatch");
        let n = targets.len() as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&u, &y)| kernels::softplus(u) - y * u)
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, targets.to_vec()),
            rg,
        )
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.data()[0].is_finite() {
            return Err(AutodiffError::NonFinite("loss".into()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::from_vec(node.value.shape(), g)),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        macro_rules! with_slot {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = slot(nodes, adj, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| &nodes[v.0].value;

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.shape()[1]);
                with_slot!(*a, |da| kernels::gemm(n, m, k, g, false, bv.data(), true, da, 1.0));
                with_slot!(*b, |db| kernels::gemm(k, n, m, av.data(), true, g, false, db, 1.0));
            }
            Op::AddRow(a, b) => {
                with_slot!(*a, |da| add_into(da, g));
                with_slot!(*b, |db| {
                    let m = db.len();
                    for row in g.chunks(m) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                with_slot!(*a, |da| add_into(da, g));
                with_slot!(*b, |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |da| add_into(da, g));
                with_slot!(*b, |db| db.iter_mut().zip(g).for_each(|(d, gg)| *d -= gg));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                with_slot!(*a, |da| {
                    for ((d, gg), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                });
                with_slot!(*b, |db| {
                    for ((d, gg), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gg * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                with_slot!(*a, |da| {
                    for ((d, gg), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gg / y;
                    }
                });
                with_slot!(*b, |db| {
                    for (((d, gg), x), y) in db.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= gg * x / (y * y);
                    }
                });
            }
            Op::Scale(a, c) => {
                with_slot!(*a, |da| da.iter_mut().zip(g).for_each(|(d, gg)| *d += gg * c));
            }
            Op::AddScalar(a) => with_slot!(*a, |da| add_into(da, g)),
            Op::Unary(a, op) => {
                let x = val(*a).data();
                let y = out.data();
                with_slot!(*a, |da| {
                    for j in 0..da.len() {
                        da[j] += g[j] * op.derivative(x[j], y[j]);
                    }
                });
            }
            Op::Sum(a) => with_slot!(*a, |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let s = g[0] / val(*a).len() as f64;
                with_slot!(*a, |da| da.iter_mut().for_each(|d| *d += s));
            }
            Op::SpatialMean(a) => {
                let s = val(*a).shape();
                let hw = s[2] * s[3];
                with_slot!(*a, |da| {
                    for (ch, &gg) in da.chunks_mut(hw).zip(g) {
                        ch.iter_mut().for_each(|d| *d += gg / hw as f64);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    with_slot!(p, |dp| {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, len) = (out.rows(), out.cols());
                let cols = val(*a).cols();
                with_slot!(*a, |da| {
                    for r in 0..rows {
                        add_into(
                            &mut da[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    with_slot!(p, |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = out.cols();
                with_slot!(*a, |da| add_into(&mut da[start * cols..start * cols + g.len()], g));
            }
            Op::GatherRows(a, idx) => {
                let cols = out.cols();
                with_slot!(*a, |da| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut da[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let c = val(*s).data()[0];
                with_slot!(*a, |da| da.iter_mut().zip(g).for_each(|(d, gg)| *d += gg * c));
                with_slot!(*s, |ds| {
                    ds[0] += g.iter().zip(val(*a).data()).map(|(gg, x)| gg * x).sum::<f64>();
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                with_slot!(*a, |da| {
                    for ii in 0..r {
                        for jj in 0..c {
                            da[ii * c + jj] += g[jj * r + ii];
                        }
                    }
                });
            }
            Op::Reshape(a) => with_slot!(*a, |da| add_into(da, g)),
            Op::Rodrigues(w) => {
                let wv = val(*w).data();
                let dw = kernels::rodrigues_backward([wv[0], wv[1], wv[2]], g);
                with_slot!(*w, |d| add_into(d, &dw));
            }
            Op::PosEnc(a, cfg) => {
                let av = val(*a);
                let (rows, d) = (av.rows(), av.cols());
                let per = cfg.output_dim(1);
                let skip = usize::from(cfg.include_input);
                with_slot!(*a, |da| {
                    for r in 0..rows {
                        for c in 0..d {
                            let x = av.data()[r * d + c];
                            let base = (r * d + c) * per;
                            let mut acc = if cfg.include_input { g[base] } else { 0.0 };
                            for f in 0..cfg.num_frequencies {
                                let freq = cfg.frequency(f);
                                let (s, co) = (freq * x).sin_cos();
                                acc += freq * co * g[base + skip + 2 * f];
                                acc -= freq * s * g[base + skip + 2 * f + 1];
                            }
                            da[r * d + c] += acc;
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (co, k) = (wv.shape()[0], wv.shape()[2]);
                let geo = ConvGeom::new(ci, h, wd, k, *stride, *pad);
                let (img_len, out_len) = (ci * h * wd, co * geo.col_cols());
                let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
                let need_w = nodes[w.0].requires_grad;
                let need_x = nodes[x.0].requires_grad;
                with_slot!(*b, |db| {
                    for gi in g.chunks(out_len) {
                        for (c, row) in gi.chunks(geo.col_cols()).enumerate() {
                            db[c] += row.iter().sum::<f64>();
                        }
                    }
                });
                if need_w {
                    with_slot!(*w, |dw| {
                        for img in 0..n {
                            kernels::im2col(&xv.data()[img * img_len..(img + 1) * img_len], &geo, &mut cols);
                            let gi = &g[img * out_len..(img + 1) * out_len];
                            kernels::gemm(co, geo.col_cols(), geo.col_rows(), gi, false, &cols, true, dw, 1.0);
                        }
                    });
                }
                if need_x {
                    with_slot!(*x, |dx| {
                        for img in 0..n {
                            let gi = &g[img * out_len..(img + 1) * out_len];
                            kernels::gemm(geo.col_rows(), co, geo.col_cols(), wv.data(), true, gi, false, &mut cols, 0.0);
                            kernels::col2im(&cols, &geo, &mut dx[img * img_len..(img + 1) * img_len]);
                        }
                    });
                }
            }
            Op::WindowAttention {
                q,
                k,
                v,
                radius,
                tau,
            } => {
                let s = val(*q).shape();
                let geo = WindowGeom {
                    n: s[0],
                    c: s[1],
                    h: s[2],
                    w: s[3],
                    radius: *radius,
                    tau: *tau,
                };
                let local = |v: Var| nodes[v.0].requires_grad.then(|| vec![0.0; nodes[v.0].value.len()]);
                let (mut dq, mut dk, mut dv) = (local(*q), local(*k), local(*v));
                kernels::window_attention_backward(
                    &geo,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let (Some(local), Some(buf)) = (local, slot(nodes, adj, var)) {
                        add_into(buf, &local);
                    }
                }
            }
            Op::BceWithLogits(logits, targets) => {
                let u = val(*logits).data();
                let scale = g[0] / targets.len() as f64;
                with_slot!(*logits, |du| {
                    for j in 0..du.len() {
                        du[j] += scale * (kernels::sigmoid(u[j]) - targets[j]);
                    }
                });
            }
        }
    }
}

/// Adjoint buffer of `v`, or `None` when `v` is not on a trainable path.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
