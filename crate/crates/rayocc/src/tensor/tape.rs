//! Wengert tape: ops record themselves in execution order, `backward`
//! replays them once in reverse. Inputs always precede the ops that
//! consume them, so a single reverse sweep visits each op exactly once.

use super::kernels;
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Sum { a: Var },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    RsqrtEps { a: Var, eps: T },
    Concat { parts: Vec<Var>, axis: usize },
    Flatten { a: Var },
    BilinearUp { a: Var, c: usize, h: usize, w: usize, factor: usize },
    BilinearSample { map: Var, d: usize, h: usize, w: usize, points: Vec<[f64; 2]> },
    MeanRows { a: Var, t: usize, d: usize },
    VarRows { a: Var, t: usize, d: usize },
    AffineRows { x: Var, scale: Var, shift: Var, t: usize, d: usize },
    Gap { a: Var, c: usize, h: usize, w: usize },
    Fc { x: Var, w: Var, b: Var, t: usize, k: usize, n: usize },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        ic: usize,
        h: usize,
        wd: usize,
        oc: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    RepeatRows { a: Var, t: usize, d: usize },
    BceLogits { logits: Var, targets: Vec<T>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            flops: 0,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap())
    }

    /// Estimated floating-point operation count of everything recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(&mut self, op_name: &str, out: Tensor<T>, requires_grad: bool, op: Op<T>, flops: u64) -> Result<Var> {
        if !out.all_finite() {
            return Err(Error::NonFinite { op: op_name.into() });
        }
        self.flops += flops;
        // Recording is only needed when a gradient will flow through.
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(out, requires_grad, op))
    }

    fn shape_err(op: &str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::ShapeMismatch {
            op: op.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    // ── element-wise ────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Self::shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        let n = out.numel() as u64;
        self.finish(name, out, rg, op, n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, name: &str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a]);
        let n = out.numel() as u64;
        self.finish(name, out, rg, op, n)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, stable_sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh { a })
    }

    /// 1 / sqrt(x + eps), elementwise. The eps keeps variance
    /// normalization away from the pole.
    pub fn rsqrt_eps(&mut self, a: Var, eps: T) -> Result<Var> {
        self.unary("rsqrt_eps", a, |x| (x + eps).sqrt().recip(), Op::RsqrtEps { a, eps })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut acc = T::zero();
        for &x in va.data() {
            acc += x;
        }
        let rg = self.needs_grad(&[a]);
        let n = va.numel() as u64;
        self.finish("sum", Tensor::scalar(acc), rg, Op::Sum { a }, n)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(va.data(), vb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.needs_grad(&[a, b]);
        self.finish("matmul", out, rg, Op::Matmul { a, b, m, k, n }, (2 * m * k * n) as u64)
    }

    /// x[t,k] @ w[k,n] + b broadcast over rows.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Self::shape_err("fully_connected", sx, sw));
        }
        let (t, k, n) = (sx[0], sx[1], sw[1]);
        if vb.numel() != n {
            return Err(Self::shape_err("fully_connected(bias)", sw, vb.shape()));
        }
        let mut data = kernels::matmul(vx.data(), vw.data(), t, k, n);
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![t, n], data)?;
        let rg = self.needs_grad(&[x, w, b]);
        self.finish(
            "fully_connected",
            out,
            rg,
            Op::Fc { x, w, b, t, k, n },
            (2 * t * k * n + t * n) as u64,
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(Self::shape_err("conv2d", sx, sw));
        }
        let (ic, h, wd) = (sx[0], sx[1], sx[2]);
        let (oc, kh, kw) = (sw[0], sw[2], sw[3]);
        if vb.numel() != oc {
            return Err(Self::shape_err("conv2d(bias)", sw, vb.shape()));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid(format!(
                "conv2d: kernel {}x{} stride {} pad {} does not fit input {}x{}",
                kh, kw, stride, pad, h, wd
            )));
        }
        let data = kernels::conv2d(vx.data(), vw.data(), vb.data(), ic, h, wd, oc, kh, kw, stride, pad);
        let (oh, ow) = kernels::conv2d_out_hw(h, wd, kh, kw, stride, pad);
        let out = Tensor::new(vec![oc, oh, ow], data)?;
        let rg = self.needs_grad(&[x, w, b]);
        let fl = (2 * oc * ic * kh * kw * oh * ow) as u64;
        self.finish(
            "conv2d",
            out,
            rg,
            Op::Conv2d { x, w, b, ic, h, wd, oc, kh, kw, stride, pad },
            fl,
        )
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat: axis {} out of rank {}", axis, first.len())));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Self::shape_err("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![T::zero(); outer * total_axis * inner];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let ax = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * ax * inner..(o + 1) * ax * inner];
                let dst_start = (o * total_axis + offset) * inner;
                data[dst_start..dst_start + ax * inner].copy_from_slice(src);
            }
            offset += ax;
        }
        let out = Tensor::new(out_shape, data)?;
        let rg = self.needs_grad(parts);
        let n = out.numel() as u64;
        self.finish("concat", out, rg, Op::Concat { parts: parts.to_vec(), axis }, n)
    }

    /// Reshape without moving data (the `flatten` op kind).
    pub fn flatten(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let out = va.clone().reshaped(new_shape)?;
        let rg = self.needs_grad(&[a]);
        self.finish("flatten", out, rg, Op::Flatten { a }, 0)
    }

    pub fn repeat_rows(&mut self, a: Var, t: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 2 || s[0] != 1 {
            return Err(Self::shape_err("repeat_rows", s, &[1, 0]));
        }
        let d = s[1];
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t {
            data.extend_from_slice(va.data());
        }
        let out = Tensor::new(vec![t, d], data)?;
        let rg = self.needs_grad(&[a]);
        self.finish("repeat_rows", out, rg, Op::RepeatRows { a, t, d }, (t * d) as u64)
    }

    // ── image ops ───────────────────────────────────────────────────

    pub fn bilinear_upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 {
            return Err(Self::shape_err("bilinear_upsample", s, &[0, 0, 0]));
        }
        if factor == 0 {
            return Err(Error::invalid("bilinear_upsample: factor must be >= 1"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let data = kernels::bilinear_upsample(va.data(), c, h, w, factor);
        let out = Tensor::new(vec![c, h * factor, w * factor], data)?;
        let rg = self.needs_grad(&[a]);
        let n = out.numel() as u64;
        self.finish("bilinear_upsample", out, rg, Op::BilinearUp { a, c, h, w, factor }, 8 * n)
    }

    /// Sample map [d,h,w] at per-point (column, row) index coordinates,
    /// border-clamped; output [t,d]. Points do not carry gradients.
    pub fn bilinear_sample(&mut self, map: Var, points: &[[f64; 2]]) -> Result<Var> {
        let vm = self.value(map);
        let s = vm.shape();
        if s.len() != 3 {
            return Err(Self::shape_err("bilinear_sample", s, &[0, 0, 0]));
        }
        let (d, h, w) = (s[0], s[1], s[2]);
        let data = kernels::bilinear_sample(vm.data(), d, h, w, points);
        let out = Tensor::new(vec![points.len(), d], data)?;
        let rg = self.needs_grad(&[map]);
        let n = out.numel() as u64;
        self.finish(
            "bilinear_sample",
            out,
            rg,
            Op::BilinearSample { map, d, h, w, points: points.to_vec() },
            8 * n,
        )
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 {
            return Err(Self::shape_err("global_avg_pool", s, &[0, 0, 0]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut data = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for &x in &va.data()[ch * h * w..(ch + 1) * h * w] {
                acc += x;
            }
            data[ch] = acc * inv;
        }
        let out = Tensor::new(vec![1, c], data)?;
        let rg = self.needs_grad(&[a]);
        self.finish("global_avg_pool", out, rg, Op::Gap { a, c, h, w }, va.numel() as u64)
    }

    // ── batch statistics ────────────────────────────────────────────

    fn rows_of(&self, name: &str, a: Var) -> Result<(usize, usize)> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Self::shape_err(name, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// Mean over the batch (row) axis: [t,d] -> [1,d].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (t, d) = self.rows_of("mean_rows", a)?;
        let va = self.value(a);
        let inv = T::from_f64(1.0 / t as f64);
        let mut data = vec![T::zero(); d];
        for row in va.data().chunks(d) {
            for (acc, &x) in data.iter_mut().zip(row) {
                *acc += x;
            }
        }
        for x in data.iter_mut() {
            *x *= inv;
        }
        let out = Tensor::new(vec![1, d], data)?;
        let rg = self.needs_grad(&[a]);
        self.finish("mean_rows", out, rg, Op::MeanRows { a, t, d }, (t * d) as u64)
    }

    /// Population variance over the batch (row) axis: [t,d] -> [1,d].
    pub fn var_rows(&mut self, a: Var) -> Result<Var> {
        let (t, d) = self.rows_of("var_rows", a)?;
        let va = self.value(a);
        let inv = T::from_f64(1.0 / t as f64);
        let mut mean = vec![T::zero(); d];
        for row in va.data().chunks(d) {
            for (acc, &x) in mean.iter_mut().zip(row) {
                *acc += x;
            }
        }
        for x in mean.iter_mut() {
            *x *= inv;
        }
        let mut var = vec![T::zero(); d];
        for row in va.data().chunks(d) {
            for ((acc, &x), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let dxm = x - mu;
                *acc += dxm * dxm;
            }
        }
        for x in var.iter_mut() {
            *x *= inv;
        }
        let out = Tensor::new(vec![1, d], var)?;
        let rg = self.needs_grad(&[a]);
        self.finish("var_rows", out, rg, Op::VarRows { a, t, d }, (3 * t * d) as u64)
    }

    /// Per-channel affine over rows: out[i,j] = x[i,j]*scale[j] + shift[j].
    /// `scale`/`shift` are [1,d] (or flat [d]) row vectors.
    pub fn affine_rows(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (t, d) = self.rows_of("affine_rows", x)?;
        let (vs, vb) = (self.value(scale), self.value(shift));
        if vs.numel() != d || vb.numel() != d {
            return Err(Self::shape_err("affine_rows", &[t, d], vs.shape()));
        }
        let vx = self.value(x);
        let mut data = vec![T::zero(); t * d];
        for (orow, xrow) in data.chunks_mut(d).zip(vx.data().chunks(d)) {
            for (((o, &xv), &sv), &bv) in orow.iter_mut().zip(xrow).zip(vs.data()).zip(vb.data()) {
                *o = xv * sv + bv;
            }
        }
        let out = Tensor::new(vec![t, d], data)?;
        let rg = self.needs_grad(&[x, scale, shift]);
        self.finish(
            "affine_rows",
            out,
            rg,
            Op::AffineRows { x, scale, shift, t, d },
            (2 * t * d) as u64,
        )
    }

    // ── loss ────────────────────────────────────────────────────────

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets,
    /// evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape() != targets.shape() {
            return Err(Self::shape_err("bce_with_logits", vl.shape(), targets.shape()));
        }
        for &t in targets.data() {
            if t != T::zero() && t != T::one() {
                return Err(Error::invalid(format!(
                    "bce_with_logits: target {} outside {{0,1}}",
                    t
                )));
            }
        }
        let count = vl.numel();
        let mut acc = 0.0f64;
        for (&x, &t) in vl.data().iter().zip(targets.data()) {
            let xf = x.as_f64();
            let tf = t.as_f64();
            // max(x,0) - x*t + ln(1 + exp(-|x|))
            acc += xf.max(0.0) - xf * tf + (-xf.abs()).exp().ln_1p();
        }
        let mean = T::from_f64(acc / count as f64);
        let rg = self.needs_grad(&[logits]);
        self.finish(
            "bce_with_logits",
            Tensor::scalar(mean),
            rg,
            Op::BceLogits { logits, targets: targets.data().to_vec(), count },
            (10 * count) as u64,
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// gradient-tracked leaf reachable from `loss`. Consumes the tape:
    /// a second call without re-recording is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; re-record before calling again".into(),
            ));
        }
        {
            let ln = &self.nodes[loss.0];
            if ln.value.numel() != 1 {
                return Err(Error::Tape(format!(
                    "backward: loss must be scalar, got shape {:?}",
                    ln.value.shape()
                )));
            }
            if !ln.requires_grad {
                return Err(Error::Tape(
                    "backward: loss is not connected to any gradient-tracked leaf".into(),
                ));
            }
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.apply_backward(op, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gd, &c) in g.iter_mut().zip(contrib) {
                    *gd += c;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn apply_backward(&mut self, op: Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, g);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = g.iter().zip(self.val(b)).map(|(&gd, &y)| gd * y).collect();
                let db: Vec<T> = g.iter().zip(self.val(a)).map(|(&gd, &x)| gd * x).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<T> = g.iter().map(|&gd| gd * c).collect();
                self.accumulate(a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.val(a).len()];
                self.accumulate(a, &da);
            }
            Op::Matmul { a, b, m, k, n } => {
                let da = kernels::matmul_nt(g, self.val(b), m, n, k);
                let db = kernels::matmul_tn(self.val(a), g, m, k, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Relu { a } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.val(a))
                    .map(|(&gd, &x)| if x > T::zero() { gd } else { T::zero() })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid { a } => {
                // use the stored output: dy/dx = y(1-y)
                let y: Vec<T> = self.val(a).iter().map(|&x| stable_sigmoid(x)).collect();
                let da: Vec<T> = g
                    .iter()
                    .zip(&y)
                    .map(|(&gd, &yv)| gd * yv * (T::one() - yv))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.val(a))
                    .map(|(&gd, &x)| {
                        let y = x.tanh();
                        gd * (T::one() - y * y)
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::RsqrtEps { a, eps } => {
                // y = (x+eps)^(-1/2); dy/dx = -y^3 / 2, recomputed from x
                let da: Vec<T> = g
                    .iter()
                    .zip(self.val(a))
                    .map(|(&gd, &x)| {
                        let y = (x + eps).sqrt().recip();
                        gd * T::from_f64(-0.5) * y * y * y
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Concat { parts, axis } => {
                let shapes: Vec<Vec<usize>> = parts
                    .iter()
                    .map(|&p| self.nodes[p.0].value.shape().to_vec())
                    .collect();
                let out_axis: usize = shapes.iter().map(|s| s[axis]).sum();
                let outer: usize = shapes[0][..axis].iter().product();
                let inner: usize = shapes[0][axis + 1..].iter().product();
                let mut offset = 0;
                for (&p, s) in parts.iter().zip(&shapes) {
                    let ax = s[axis];
                    let mut dp = vec![T::zero(); outer * ax * inner];
                    for o in 0..outer {
                        let src_start = (o * out_axis + offset) * inner;
                        dp[o * ax * inner..(o + 1) * ax * inner]
                            .copy_from_slice(&g[src_start..src_start + ax * inner]);
                    }
                    self.accumulate(p, &dp);
                    offset += ax;
                }
            }
            Op::Flatten { a } => self.accumulate(a, g),
            Op::BilinearUp { a, c, h, w, factor } => {
                let da = kernels::bilinear_upsample_backward(g, c, h, w, factor);
                self.accumulate(a, &da);
            }
            Op::BilinearSample { map, d, h, w, points } => {
                let dm = kernels::bilinear_sample_backward(g, d, h, w, &points);
                self.accumulate(map, &dm);
            }
            Op::MeanRows { a, t, d } => {
                let inv = T::from_f64(1.0 / t as f64);
                let mut da = vec![T::zero(); t * d];
                for row in da.chunks_mut(d) {
                    for (o, &gd) in row.iter_mut().zip(g) {
                        *o = gd * inv;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::VarRows { a, t, d } => {
                // d var_j / d x_ij = 2 (x_ij - mu_j) / t
                let x = self.val(a);
                let inv = T::from_f64(1.0 / t as f64);
                let two = T::from_f64(2.0);
                let mut mean = vec![T::zero(); d];
                for row in x.chunks(d) {
                    for (acc, &xv) in mean.iter_mut().zip(row) {
                        *acc += xv;
                    }
                }
                for m in mean.iter_mut() {
                    *m *= inv;
                }
                let mut da = vec![T::zero(); t * d];
                for (orow, xrow) in da.chunks_mut(d).zip(x.chunks(d)) {
                    for (((o, &xv), &mu), &gd) in orow.iter_mut().zip(xrow).zip(&mean).zip(g) {
                        *o = gd * two * (xv - mu) * inv;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::AffineRows { x, scale, shift, t, d } => {
                let xv = self.val(x);
                let sv = self.val(scale);
                let mut dx = vec![T::zero(); t * d];
                let mut ds = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for ((dxrow, xrow), grow) in dx.chunks_mut(d).zip(xv.chunks(d)).zip(g.chunks(d)) {
                    for i in 0..d {
                        let gd = grow[i];
                        dxrow[i] = gd * sv[i];
                        ds[i] += gd * xrow[i];
                        db[i] += gd;
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(scale, &ds);
                self.accumulate(shift, &db);
            }
            Op::Gap { a, c, h, w } => {
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut da = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let gd = g[ch] * inv;
                    for v in &mut da[ch * h * w..(ch + 1) * h * w] {
                        *v = gd;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Fc { x, w, b, t, k, n } => {
                let dx = kernels::matmul_nt(g, self.val(w), t, n, k);
                let dw = kernels::matmul_tn(self.val(x), g, t, k, n);
                let mut db = vec![T::zero(); n];
                for grow in g.chunks(n) {
                    for (acc, &gd) in db.iter_mut().zip(grow) {
                        *acc += gd;
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            Op::Conv2d { x, w, b, ic, h, wd, oc, kh, kw, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.val(x), self.val(w), g, ic, h, wd, oc, kh, kw, stride, pad);
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            Op::RepeatRows { a, t, d } => {
                let mut da = vec![T::zero(); d];
                for grow in g.chunks(d) {
                    for (acc, &gd) in da.iter_mut().zip(grow) {
                        *acc += gd;
                    }
                }
                let _ = t;
                self.accumulate(a, &da);
            }
            Op::BceLogits { logits, targets, count } => {
                let inv = T::from_f64(1.0 / count as f64);
                let da: Vec<T> = self
                    .val(logits)
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &t)| g[0] * (stable_sigmoid(x) - t) * inv)
                    .collect();
                self.accumulate(logits, &da);
            }
        }
    }

}

/// Epsilon used by batch-statistics normalization.
pub const VAR_EPS: f64 = 1e-5;

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
