//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Graph`] records every operation in topological (tape) order; `backward`
//! walks the tape once in reverse. Values are f64 throughout and every op
//! boundary checks for NaN/Inf so that a diverging run fails loudly instead of
//! propagating garbage. Kernels are single-threaded with a fixed reduction
//! order, so forward results are bit-identical across repeated runs.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, strides, BroadcastIter, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Backward-formula perturbations for mutation testing of the grad checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    ReluBackward,
    MatmulBackward,
    Conv2dBackward,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MaxScalar(Var, f64),
    Relu(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Matmul(Var, Var),
    Transpose2d(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Reshape(Var),
    BroadcastTo(Var),
    SumAxes { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    /// Log-sum-exp over the last axis; the axis is dropped from the output.
    LogSumExp(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<Fault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false, fault: None }
    }

    /// Perturb one backward formula; used to verify the grad checker catches bugs.
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.check_open()?;
        if !t.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad, requires_grad))
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data_of(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].data.clone()).expect("node invariant")
    }

    /// Gradient of the last backward pass w.r.t. `v`, if one was populated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor::new(&n.shape, g.clone()).expect("grad shape"))
    }

    /// A new non-differentiable leaf carrying the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        self.leaf(&t, false)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node { shape, data, grad: None, requires_grad, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn finite(data: &[f64], what: &str) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.into()))
        }
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, name: &str) -> Result<Var> {
        self.check_open()?;
        let out_shape = broadcast_shapes(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        if self.nodes[a.0].shape == out_shape && self.nodes[b.0].shape == out_shape {
            for i in 0..n {
                data.push(f(da[i], db[i]));
            }
        } else {
            let ia = BroadcastIter::new(&self.nodes[a.0].shape, &out_shape);
            let ib = BroadcastIter::new(&self.nodes[b.0].shape, &out_shape);
            for (oa, ob) in ia.zip(ib) {
                data.push(f(da[oa], db[ob]));
            }
        }
        Self::finite(&data, name)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, data, op, false, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    // ---- elementwise unary ops ----

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64, name: &str) -> Result<Var> {
        self.check_open()?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&v| f(v)).collect();
        Self::finite(&data, name)?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        Ok(self.push(shape, data, op, false, ng))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), |v| -v, "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |v| v * c, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |v| v + c, "add_scalar")
    }

    /// Elementwise max with a constant. Gradient flows only where `a > c`.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::MaxScalar(a, c), |v| v.max(c), "max_scalar")
    }

    /// Derivative at exactly 0 is defined as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 }, "relu")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt, "sqrt")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp, "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Ln(a), f64::ln, "ln")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = da[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Self::finite(&out, "matmul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), false, ng))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose2d on rank {}", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![n, m], out, Op::Transpose2d(a), false, ng))
    }

    /// 2-D convolution. Input (N,H,W,Cin), weight (Cout,Kh,Kw,Cin), symmetric
    /// zero padding, square stride.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_open()?;
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[3] {
            return Err(Error::ShapeMismatch(format!("conv2d input {:?} weight {:?}", sx, sw)));
        }
        let (n, h, wdt, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[1], sw[2]);
        if h + 2 * pad < kh || wdt + 2 * pad < kw || stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d geometry: input {:?} kernel {:?} stride {} pad {}",
                sx, sw, stride, pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let dx = &self.nodes[x.0].data;
        let dw = &self.nodes[w.0].data;
        let mut out = vec![0.0; n * ho * wo * cout];
        for b in 0..n {
            for oh in 0..ho {
                for ow in 0..wo {
                    let obase = ((b * ho + oh) * wo + ow) * cout;
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ki in 0..kh {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for kj in 0..kw {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw as usize >= wdt {
                                    continue;
                                }
                                let xoff = ((b * h + ih as usize) * wdt + iw as usize) * cin;
                                let woff = ((co * kh + ki) * kw + kj) * cin;
                                let xr = &dx[xoff..xoff + cin];
                                let wr = &dw[woff..woff + cin];
                                let mut dot = 0.0;
                                for c in 0..cin {
                                    dot += xr[c] * wr[c];
                                }
                                acc += dot;
                            }
                        }
                        out[obase + co] = acc;
                    }
                }
            }
        }
        Self::finite(&out, "conv2d")?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(vec![n, ho, wo, cout], out, Op::Conv2d { x, w, stride, pad }, false, ng))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_open()?;
        let count: usize = shape.iter().product();
        if count != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), false, ng))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_open()?;
        let merged = broadcast_shapes(&self.nodes[a.0].shape, shape)?;
        if merged != shape {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} to {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let da = &self.nodes[a.0].data;
        let data: Vec<f64> = BroadcastIter::new(&self.nodes[a.0].shape, shape).map(|o| da[o]).collect();
        let ng = self.needs(a);
        Ok(self.push(shape.to_vec(), data, Op::BroadcastTo(a), false, ng))
    }

    /// Sum over the given axes, keeping them as extent-1 dims.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check_open()?;
        let in_shape = self.nodes[a.0].shape.clone();
        for &ax in axes {
            if ax >= in_shape.len() {
                return Err(Error::ShapeMismatch(format!("sum axis {} of rank {}", ax, in_shape.len())));
            }
        }
        let mut out_shape = in_shape.clone();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let mut out = vec![0.0; out_shape.iter().product()];
        let da = &self.nodes[a.0].data;
        for (i, ooff) in BroadcastIter::new(&out_shape, &in_shape).enumerate() {
            out[ooff] += da[i];
        }
        Self::finite(&out, "sum_axes")?;
        let ng = self.needs(a);
        Ok(self.push(out_shape, out, Op::SumAxes { x: a }, false, ng))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.nodes[a.0].shape.clone();
        let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
        let s = self.sum_axes(a, axes)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.nodes[a.0].shape.len()).collect();
        let s = self.sum_axes(a, &axes)?;
        self.reshape(s, &[])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.check_open()?;
        if xs.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let base = self.nodes[xs[0].0].shape.clone();
        if axis >= base.len() {
            return Err(Error::ShapeMismatch(format!("concat axis {} of rank {}", axis, base.len())));
        }
        let mut axis_total = 0;
        for v in xs {
            let s = &self.nodes[v.0].shape;
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(Error::ShapeMismatch(format!("concat {:?} with {:?}", base, s)));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let after: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let out_block = axis_total * after;
        let mut col = 0;
        for v in xs {
            let s_ax = self.nodes[v.0].shape[axis];
            let da = &self.nodes[v.0].data;
            let in_block = s_ax * after;
            for o in 0..outer {
                let src = &da[o * in_block..(o + 1) * in_block];
                let dst = o * out_block + col * after;
                out[dst..dst + in_block].copy_from_slice(src);
            }
            col += s_ax;
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out_shape, out, Op::Concat { xs: xs.to_vec(), axis }, false, ng))
    }

    /// Numerically stable log-sum-exp over the last axis (axis is dropped).
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let s = self.nodes[a.0].shape.clone();
        if s.is_empty() {
            return Err(Error::ShapeMismatch("logsumexp on rank-0".into()));
        }
        let l = s[s.len() - 1];
        let rows = self.nodes[a.0].data.len() / l;
        let da = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &da[r * l..(r + 1) * l];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            out.push(m + s.ln());
        }
        Self::finite(&out, "logsumexp")?;
        let out_shape = s[..s.len() - 1].to_vec();
        let ng = self.needs(a);
        Ok(self.push(out_shape, out, Op::LogSumExp(a), false, ng))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// requires grad and is reachable from the loss, then closes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        let ls = &self.nodes[loss.0].shape;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(ls.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            if self.nodes[i].requires_grad || i == loss.0 {
                grads[i] = Some(g);
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            if self.nodes[i].requires_grad {
                // leaves that never received a contribution get explicit zeros
                let zero_len = self.nodes[i].data.len();
                self.nodes[i].grad = Some(g.unwrap_or_else(|| vec![0.0; zero_len]));
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out_shape = &self.nodes[i].shape;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.binary_back(*a, *b, out_shape, g, grads, |_, _, gv| gv, |_, _, gv| gv);
            }
            Op::Sub(a, b) => {
                self.binary_back(*a, *b, out_shape, g, grads, |_, _, gv| gv, |_, _, gv| -gv);
            }
            Op::Mul(a, b) => {
                self.binary_back(*a, *b, out_shape, g, grads, |_, bv, gv| gv * bv, |av, _, gv| gv * av);
            }
            Op::Div(a, b) => {
                self.binary_back(
                    *a,
                    *b,
                    out_shape,
                    g,
                    grads,
                    |_, bv, gv| gv / bv,
                    |av, bv, gv| -gv * av / (bv * bv),
                );
            }
            Op::Neg(a) => self.unary_back(*a, g, grads, |_, gv| -gv),
            Op::Scale(a, c) => {
                let c = *c;
                self.unary_back(*a, g, grads, move |_, gv| gv * c)
            }
            Op::AddScalar(a) => self.unary_back(*a, g, grads, |_, gv| gv),
            Op::MaxScalar(a, c) => {
                let c = *c;
                self.unary_back(*a, g, grads, move |av, gv| if av > c { gv } else { 0.0 })
            }
            Op::Relu(a) => {
                let k = if self.fault == Some(Fault::ReluBackward) { 1.01 } else { 1.0 };
                self.unary_back(*a, g, grads, move |av, gv| if av > 0.0 { gv * k } else { 0.0 })
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[i].data;
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, out.len());
                    for j in 0..out.len() {
                        ga[j] += g[j] * 0.5 / out[j];
                    }
                }
            }
            Op::Exp(a) => {
                let out = &self.nodes[i].data;
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, out.len());
                    for j in 0..out.len() {
                        ga[j] += g[j] * out[j];
                    }
                }
            }
            Op::Ln(a) => self.unary_back(*a, g, grads, |av, gv| gv / av),
            Op::Matmul(a, b) => self.matmul_back(*a, *b, g, grads),
            Op::Transpose2d(a) => {
                if self.needs(*a) {
                    let s = &self.nodes[a.0].shape;
                    let (m, n) = (s[0], s[1]);
                    let ga = Self::accum(grads, *a, m * n);
                    for x in 0..n {
                        for y in 0..m {
                            ga[y * n + x] += g[x * m + y];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => self.conv2d_back(*x, *w, *stride, *pad, i, g, grads),
            Op::Reshape(a) => {
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j];
                    }
                }
            }
            Op::BroadcastTo(a) => {
                if self.needs(*a) {
                    let len = self.nodes[a.0].data.len();
                    let src_shape = self.nodes[a.0].shape.clone();
                    let ga = Self::accum(grads, *a, len);
                    for (j, off) in BroadcastIter::new(&src_shape, out_shape).enumerate() {
                        ga[off] += g[j];
                    }
                }
            }
            Op::SumAxes { x, .. } => {
                if self.needs(*x) {
                    let in_shape = self.nodes[x.0].shape.clone();
                    let len = self.nodes[x.0].data.len();
                    let gx = Self::accum(grads, *x, len);
                    for (j, ooff) in BroadcastIter::new(out_shape, &in_shape).enumerate() {
                        gx[j] += g[ooff];
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let axis = *axis;
                let out_after: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..axis].iter().product();
                let out_block = out_shape[axis] * out_after;
                let mut col = 0;
                for v in xs.clone() {
                    let s_ax = self.nodes[v.0].shape[axis];
                    let in_block = s_ax * out_after;
                    if self.needs(v) {
                        let len = self.nodes[v.0].data.len();
                        let gv = Self::accum(grads, v, len);
                        for o in 0..outer {
                            let src = o * out_block + col * out_after;
                            for j in 0..in_block {
                                gv[o * in_block + j] += g[src + j];
                            }
                        }
                    }
                    col += s_ax;
                }
            }
            Op::LogSumExp(a) => {
                if self.needs(*a) {
                    let in_shape = &self.nodes[a.0].shape;
                    let l = in_shape[in_shape.len() - 1];
                    let da = &self.nodes[a.0].data;
                    let out = &self.nodes[i].data;
                    let ga = Self::accum(grads, *a, da.len());
                    for r in 0..out.len() {
                        for j in 0..l {
                            ga[r * l + j] += g[r] * (da[r * l + j] - out[r]).exp();
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn unary_back(
        &self,
        a: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, f64) -> f64,
    ) {
        if !self.needs(a) {
            return;
        }
        let da = &self.nodes[a.0].data;
        let ga = Self::accum(grads, a, da.len());
        for j in 0..da.len() {
            ga[j] += f(da[j], g[j]);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_back(
        &self,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        fa: impl Fn(f64, f64, f64) -> f64,
        fb: impl Fn(f64, f64, f64) -> f64,
    ) {
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let same = self.nodes[a.0].shape == *out_shape && self.nodes[b.0].shape == *out_shape;
        if self.needs(a) {
            let sa = self.nodes[a.0].shape.clone();
            let ga = Self::accum(grads, a, da.len());
            if same {
                for j in 0..g.len() {
                    ga[j] += fa(da[j], db[j], g[j]);
                }
            } else {
                let ia = BroadcastIter::new(&sa, out_shape);
                let ib = BroadcastIter::new(&self.nodes[b.0].shape, out_shape);
                for (j, (oa, ob)) in ia.zip(ib).enumerate() {
                    ga[oa] += fa(da[oa], db[ob], g[j]);
                }
            }
        }
        if self.needs(b) {
            let sb = self.nodes[b.0].shape.clone();
            let gb = Self::accum(grads, b, db.len());
            if same {
                for j in 0..g.len() {
                    gb[j] += fb(da[j], db[j], g[j]);
                }
            } else {
                let ia = BroadcastIter::new(&self.nodes[a.0].shape, out_shape);
                let ib = BroadcastIter::new(&sb, out_shape);
                for (j, (oa, ob)) in ia.zip(ib).enumerate() {
                    gb[ob] += fb(da[oa], db[ob], g[j]);
                }
            }
        }
    }

    fn matmul_back(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let n = self.nodes[b.0].shape[1];
        let fault = if self.fault == Some(Fault::MatmulBackward) { 1.01 } else { 1.0 };
        if self.needs(a) {
            // dA = g . B^T
            let db = &self.nodes[b.0].data;
            let ga = Self::accum(grads, a, m * k);
            for i in 0..m {
                for j in 0..n {
                    let gv = g[i * n + j] * fault;
                    if gv == 0.0 {
                        continue;
                    }
                    let brow = &db[j..]; // column j of B read with stride n
                    for l in 0..k {
                        ga[i * k + l] += gv * brow[l * n];
                    }
                }
            }
        }
        if self.needs(b) {
            // dB = A^T . g
            let da = &self.nodes[a.0].data;
            let gb = Self::accum(grads, b, k * n);
            for i in 0..m {
                for l in 0..k {
                    let av = da[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[l * n + j] += av * g[i * n + j];
                    }
                }
            }
        }
    }

    fn conv2d_back(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sx = &self.nodes[x.0].shape;
        let sw = &self.nodes[w.0].shape;
        let so = &self.nodes[out_idx].shape;
        let (n, h, wdt, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[1], sw[2]);
        let (ho, wo) = (so[1], so[2]);
        let dx = &self.nodes[x.0].data;
        let dw = &self.nodes[w.0].data;
        let fault = if self.fault == Some(Fault::Conv2dBackward) { 1.01 } else { 1.0 };
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut gx = if need_x { vec![0.0; dx.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; dw.len()] } else { Vec::new() };
        for b in 0..n {
            for oh in 0..ho {
                for ow in 0..wo {
                    let obase = ((b * ho + oh) * wo + ow) * cout;
                    for ki in 0..kh {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kj in 0..kw {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw as usize >= wdt {
                                continue;
                            }
                            let xoff = ((b * h + ih as usize) * wdt + iw as usize) * cin;
                            for co in 0..cout {
                                let gv = g[obase + co];
                                if gv == 0.0 {
                                    continue;
                                }
                                let woff = ((co * kh + ki) * kw + kj) * cin;
                                if need_x {
                                    let wr = &dw[woff..woff + cin];
                                    let xr = &mut gx[xoff..xoff + cin];
                                    for c in 0..cin {
                                        xr[c] += gv * wr[c] * fault;
                                    }
                                }
                                if need_w {
                                    let xr = &dx[xoff..xoff + cin];
                                    let wr = &mut gw[woff..woff + cin];
                                    for c in 0..cin {
                                        wr[c] += gv * xr[c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            let ga = Self::accum(grads, x, dx.len());
            for (s, v) in ga.iter_mut().zip(gx) {
                *s += v;
            }
        }
        if need_w {
            let ga = Self::accum(grads, w, dw.len());
            for (s, v) in ga.iter_mut().zip(gw) {
                *s += v;
            }
        }
    }
}

/// Row-major strides, re-exported for kernel helpers.
pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    strides(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0]), false).unwrap();
        let b = g.leaf(&t(&[2], &[3.0, 4.0]), false).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data_of(c), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let i = g.leaf(&eye, false).unwrap();
        let av = g.leaf(&a, false).unwrap();
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.data_of(out), a.data());
    }

    #[test]
    fn conv2d_all_ones_sums_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::ones(&[1, 3, 3, 1]), false).unwrap();
        let w = g.leaf(&Tensor::ones(&[1, 3, 3, 1]), false).unwrap();
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape_of(y), &[1, 1, 1, 1]);
        assert_eq!(g.data_of(y), &[9.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]), true).unwrap();
        let sq = g.square(x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_mean_constant_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[4], &[1.0, 5.0, -2.0, 7.0]), true).unwrap();
        let loss = g.mean_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_nonscalar() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn graph_consumed_after_backward() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]), true).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::GraphConsumed)));
        assert!(matches!(g.relu(x), Err(Error::GraphConsumed)));
    }

    #[test]
    fn nonfinite_input_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1], &[0.0]), false).unwrap();
        let l = g.ln(a); // ln(0) = -inf
        assert!(matches!(l, Err(Error::NonFinite(_))));
    }

    #[test]
    fn relu_derivative_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[-1.0, 0.0, 2.0]), true).unwrap();
        let r = g.relu(x).unwrap();
        let loss = g.sum_all(r).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcast_add_backward_reduces() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let b = g.leaf(&t(&[2], &[10.0, 20.0]), true).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data_of(c), &[11.0, 22.0, 13.0, 24.0]);
        let loss = g.sum_all(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn logsumexp_and_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 2], &[0.0, 0.0]), true).unwrap();
        let l = g.logsumexp(x).unwrap();
        assert!((g.data_of(l)[0] - (2.0f64).ln()).abs() < 1e-12);
        let loss = g.sum_all(l).unwrap();
        g.backward(loss).unwrap();
        let gr = g.grad(x).unwrap();
        assert!((gr.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn concat_and_split_grad() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1, 2], &[1.0, 2.0]), true).unwrap();
        let b = g.leaf(&t(&[1, 3], &[3.0, 4.0, 5.0]), true).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.data_of(c), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = g.leaf(&t(&[1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]), false).unwrap();
        let p = g.mul(c, w).unwrap();
        let loss = g.sum_all(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn forward_bit_identical_repeat() {
        let run = || {
            let mut g = Graph::new();
            let x = g
                .leaf(&t(&[2, 2], &[0.3, -1.7, 2.9, 0.001]), false)
                .unwrap();
            let y = g.relu(x).unwrap();
            let e = g.exp(y).unwrap();
            let m = g.mean_all(e).unwrap();
            g.data_of(m)[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
