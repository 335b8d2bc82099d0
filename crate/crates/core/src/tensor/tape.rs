use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::gemm::gemm;
use super::registry::{ParamId, ParameterRegistry};
use super::{Tensor, TensorError};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dropout behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

enum Op<S> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Dropout { a: Var, mask: Vec<S> },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<S> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Select { a: Var, axis: usize, index: usize },
    Patchify { a: Var, patch: usize },
    MeanLast { a: Var },
    AvgPool2 { a: Var },
    Sum { a: Var },
    Broadcast { a: Var },
    SoftCrossEntropy { logits: Var, targets: Vec<S>, probs: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a plain reverse sweep is a valid topological order.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require a gradient or does not influence the loss.
    pub fn of(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::from_f64(3.0) * a * x * x)
}

/// Strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `shape`) into the axis order `perm`.
fn permute_data<S: Copy>(src: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf that collects a gradient but is not a registered parameter.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// Records a parameter; it requires a gradient only when trainable.
    pub fn param(&mut self, registry: &ParameterRegistry<S>, id: ParamId) -> Var {
        let p = registry.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// `a · b` with `a: [.., k]` (leading axes flattened) and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![S::zero(); m * n];
        gemm(false, false, m, n, k, self.data(a), self.data(b), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Batched product of `[t, m, k]` and `[t, k, n]` (or `[t, n, k]` with
    /// `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (t, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let mut out = vec![S::zero(); t * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..t {
            gemm(
                false,
                trans_b,
                m,
                n,
                k,
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(&[t, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`
    /// (bias vectors and positional tables broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let shape = sa.to_vec();
        let inner = self.value(b).len();
        let db = self.data(b);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + db[i % inner])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let shape = self.shape(a).to_vec();
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu { a }, rg)
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("softmax on a scalar");
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| mismatch("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).len() / d;
        let mut xhat = vec![S::zero(); rows * d];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        let (g, b) = (self.data(gamma), self.data(beta));
        let dn = S::from_usize(d);
        for (r, row) in self.data(x).chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout: in training, zero with probability `p` and scale
    /// survivors by `1/(1-p)`; identity in evaluation.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, mode: Mode, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        if mode == Mode::Eval || p == 0.0 {
            return a;
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::Dropout { a, mask }, rg)
    }

    /// Cross-correlation of `x: [B, C, H, W]` (or `[C, H, W]`) with
    /// `w: [O, C, kh, kw]`, optional per-channel `bias: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let unbatched = sx.len() == 3;
        let (batch, c_in, h, wd) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2]),
            4 => (sx[0], sx[1], sx[2], sx[3]),
            _ => return Err(mismatch("conv2d", &sx, &sw)),
        };
        if sw.len() != 4 || sw[1] != c_in || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh
            || wd + 2 * pad < kw
            || (h + 2 * pad - kh) % stride != 0
            || (wd + 2 * pad - kw) % stride != 0
        {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(mismatch("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        };
        let (pl, op) = (geom.patch_len(), geom.out_pixels());
        let mut cols = vec![S::zero(); batch * pl * op];
        let xin = self.data(x);
        for b in 0..batch {
            im2col(
                &geom,
                &xin[b * c_in * h * wd..(b + 1) * c_in * h * wd],
                &mut cols[b * pl * op..(b + 1) * pl * op],
            );
        }
        let mut out = vec![S::zero(); batch * c_out * op];
        let wdata = self.data(w);
        for b in 0..batch {
            let o = &mut out[b * c_out * op..(b + 1) * c_out * op];
            gemm(false, false, c_out, op, pl, wdata, &cols[b * pl * op..(b + 1) * pl * op], o, false);
            if let Some(bv) = bias {
                let bd = self.data(bv);
                for (ch, plane) in o.chunks_mut(op).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bd[ch]);
                }
            }
        }
        let shape = if unbatched {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", &shape, perm));
        }
        let (out_shape, out) = permute_data(self.data(a), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * tail;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(mismatch("select", &shape, &[axis, index]));
        }
        let outer: usize = shape[..axis].iter().product();
        let tail: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * tail);
        for o in 0..outer {
            let base = (o * shape[axis] + index) * tail;
            out.extend_from_slice(&src[base..base + tail]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::Select { a, axis, index },
            rg,
        ))
    }

    /// `[B, C, H, W]` to `[B, N, C·p·p]` non-overlapping patches in row-major
    /// grid order; each patch is flattened channel-major.
    pub fn patchify(&mut self, a: Var, patch: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
            return Err(mismatch("patchify", &s, &[patch]));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (gh, gw) = (h / patch, w / patch);
        let feat = c * patch * patch;
        let src = self.data(a);
        let mut out = vec![S::zero(); b * gh * gw * feat];
        for (dst, src_idx) in patch_index_pairs(b, c, h, w, patch) {
            out[dst] = src[src_idx];
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(&[b, gh * gw, feat], out)?,
            Op::Patchify { a, patch },
            rg,
        ))
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("mean_last on a scalar");
        let dn = S::from_usize(d);
        let out: Vec<S> = self
            .data(a)
            .chunks(d)
            .map(|r| r.iter().copied().sum::<S>() / dn)
            .collect();
        let rg = self.rg(a);
        self.push(
            Tensor::from_vec(&shape[..shape.len() - 1], out).unwrap(),
            Op::MeanLast { a },
            rg,
        )
    }

    /// 2×2 average pooling with stride 2 over `[B, C, H, W]` (even H, W).
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(mismatch("avg_pool2", &s, &[2, 2]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = S::from_f64(0.25);
        let src = self.data(a);
        let mut out = vec![S::zero(); planes * ho * wo];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for x in 0..wo {
                    let i = 2 * y * w + 2 * x;
                    out[(p * ho + y) * wo + x] = (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(&[s[0], s[1], ho, wo], out)?,
            Op::AvgPool2 { a },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Repeats `a` along a new leading axis of length `batch`.
    pub fn broadcast(&mut self, a: Var, batch: usize) -> Var {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(a));
        let src = self.data(a);
        let mut out = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::Broadcast { a }, rg)
    }

    /// Mean over the batch of `-Σ_k y_k log softmax(z)_k` for logits `[B, K]`
    /// and probability targets `[B, K]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<S>) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(mismatch("soft_cross_entropy", &s, targets.shape()));
        }
        let (b, k) = (s[0], s[1]);
        for (row, t) in targets.data().chunks(k).enumerate() {
            let sum = t.iter().copied().sum::<S>().to_f64();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(TensorError::TargetNotDistribution { row, sum });
            }
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = S::zero();
        for (z, t) in self.data(logits).chunks(k).zip(targets.data().chunks(k)) {
            let max = z.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for j in 0..k {
                if t[j] != S::zero() {
                    total -= t[j] * (z[j] - lse);
                }
            }
        }
        for row in probs.chunks_mut(k) {
            softmax_in_place(row);
        }
        let loss = total / S::from_usize(b);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `registry` (they accumulate until [`ParameterRegistry::zero_grad`]).
    pub fn backward(
        &self,
        loss: Var,
        registry: &mut ParameterRegistry<S>,
    ) -> Result<Gradients<S>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, registry);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
        registry: &mut ParameterRegistry<S>,
    ) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if self.rg(v) {
                let n = self.value(v).len();
                let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
                f(slot);
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let p = registry.get_mut(*id);
                for (pg, &gv) in p.grad.data_mut().iter_mut().zip(g) {
                    *pg += gv;
                }
            }
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| gemm(false, true, m, k, n, g, db, ga, true));
                acc(*b, &mut |gb| gemm(true, false, k, n, m, da, g, gb, true));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (t, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for s in 0..t {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &db[s * k * n..(s + 1) * k * n];
                        let out = &mut ga[s * m * k..(s + 1) * m * k];
                        // trans_b: dA = dC·B, else dA = dC·Bᵀ
                        gemm(false, !*trans_b, m, k, n, gs, bs, out, true);
                    }
                });
                acc(*b, &mut |gb| {
                    for s in 0..t {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &da[s * m * k..(s + 1) * m * k];
                        let out = &mut gb[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            // dB [n,k] = dCᵀ·A
                            gemm(true, false, n, k, m, gs, as_, out, true);
                        } else {
                            // dB [k,n] = Aᵀ·dC
                            gemm(true, false, k, n, m, as_, gs, out, true);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let inner = self.value(*b).len();
                acc(*b, &mut |gb| {
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % inner] += y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * db[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * da[j];
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *factor));
            }
            Op::Relu { a } => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        if da[j] > S::zero() {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * gelu_grad(da[j]);
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for ((gr, yr), gar) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: S = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for j in 0..d {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gm = self.data(*gamma);
                let dn = S::from_usize(d);
                acc(*x, &mut |gx| {
                    for (r, ((gr, xr), gxr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            gxr[j] += rstd[r] * (gr[j] * gm[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * mask[j];
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let (pl, op) = (geom.patch_len(), geom.out_pixels());
                let per_out = geom.c_out * op;
                let per_in = geom.c_in * geom.h * geom.w;
                acc(*w, &mut |gw| {
                    for b in 0..geom.batch {
                        gemm(
                            false,
                            true,
                            geom.c_out,
                            pl,
                            op,
                            &g[b * per_out..(b + 1) * per_out],
                            &cols[b * pl * op..(b + 1) * pl * op],
                            gw,
                            true,
                        );
                    }
                });
                if let Some(bv) = bias {
                    acc(*bv, &mut |gb| {
                        for b in 0..geom.batch {
                            for (ch, plane) in g[b * per_out..(b + 1) * per_out].chunks(op).enumerate() {
                                gb[ch] += plane.iter().copied().sum::<S>();
                            }
                        }
                    });
                }
                let wd = self.data(*w);
                acc(*x, &mut |gx| {
                    let mut dcols = vec![S::zero(); pl * op];
                    for b in 0..geom.batch {
                        gemm(
                            true,
                            false,
                            pl,
                            op,
                            geom.c_out,
                            wd,
                            &g[b * per_out..(b + 1) * per_out],
                            &mut dcols,
                            false,
                        );
                        col2im(geom, &dcols, &mut gx[b * per_in..(b + 1) * per_in]);
                    }
                });
            }
            Op::Reshape { a } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inverse);
                acc(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let tail: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * tail;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * tail;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (x, &y) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Select { a, axis, index } => {
                let shape = self.shape(*a);
                let outer: usize = shape[..*axis].iter().product();
                let tail: usize = shape[axis + 1..].iter().product();
                let extent = shape[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let base = (o * extent + index) * tail;
                        for t in 0..tail {
                            ga[base + t] += g[o * tail + t];
                        }
                    }
                });
            }
            Op::Patchify { a, patch } => {
                let s = self.shape(*a);
                let pairs = patch_index_pairs(s[0], s[1], s[2], s[3], *patch);
                acc(*a, &mut |ga| {
                    for &(dst, src) in &pairs {
                        ga[src] += g[dst];
                    }
                });
            }
            Op::MeanLast { a } => {
                let d = *self.shape(*a).last().unwrap();
                let dn = S::from_usize(d);
                acc(*a, &mut |ga| {
                    for (r, row) in ga.chunks_mut(d).enumerate() {
                        let v = g[r] / dn;
                        row.iter_mut().for_each(|x| *x += v);
                    }
                });
            }
            Op::AvgPool2 { a } => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = S::from_f64(0.25);
                acc(*a, &mut |ga| {
                    for p in 0..planes {
                        for y in 0..ho {
                            for x in 0..wo {
                                let v = g[(p * ho + y) * wo + x] * quarter;
                                let i = p * h * w + 2 * y * w + 2 * x;
                                ga[i] += v;
                                ga[i + 1] += v;
                                ga[i + w] += v;
                                ga[i + w + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Broadcast { a } => {
                acc(*a, &mut |ga| {
                    let n = ga.len();
                    for chunk in g.chunks(n) {
                        ga.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = self.shape(*logits)[0];
                let scale = g[0] / S::from_usize(b);
                acc(*logits, &mut |gl| {
                    for j in 0..gl.len() {
                        gl[j] += (probs[j] - targets[j]) * scale;
                    }
                });
            }
        }
    }
}

/// Stable in-place softmax of one row.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn patch_index_pairs(b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<(usize, usize)> {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    let mut pairs = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let token = gy * gw + gx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            let dst = (bi * gh * gw + token) * feat + (ci * p + py) * p + px;
                            let src = ((bi * c + ci) * h + gy * p + py) * w + gx * p + px;
                            pairs.push((dst, src));
                        }
                    }
                }
            }
        }
    }
    pairs
}

fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], cols: &mut [S]) {
    let op = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * op..(row + 1) * op];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.w_out + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], dx: &mut [S]) {
    let op = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * op..(row + 1) * op];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}
