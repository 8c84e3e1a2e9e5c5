use crate::error::{Error, Result};
use crate::tensor::{check_extent, check_rank, Tensor};

use super::kernels::{self, Bilinear, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of op outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    /// Outputs rounded to `f32`; accumulation stays 64-bit.
    #[default]
    F32,
    F64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GridSample {
        input: Var,
        points: Var,
    },
    Reshape(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// Every op appends one node; inputs always precede outputs, so the node list
/// is a topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    backward_done: bool,
    relu_fault: bool,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Make relu's backward pass its gradient through unmasked. Used only to
    /// confirm that the gradient harness detects a broken backward rule.
    #[doc(hidden)]
    pub fn inject_relu_fault(&mut self) {
        self.relu_fault = true;
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            value.round_f32();
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by [`Tape::backward`], if the node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Gradient, or zeros when the node was not reached by backward.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    /// Clear all gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    // ---- elementwise --------------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != sb.len() {
            return Err(Error::Rank {
                op,
                expected: sa.len(),
                shape: sb.to_vec(),
            });
        }
        sa.iter()
            .zip(sb)
            .enumerate()
            .map(|(axis, (&x, &y))| {
                if x == y || y == 1 {
                    Ok(x)
                } else if x == 1 {
                    Ok(y)
                } else {
                    Err(Error::Dimension {
                        op,
                        axis,
                        expected: x,
                        got: y,
                    })
                }
            })
            .collect()
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_index_map(&shape, va.shape());
            let mb = kernels::broadcast_index_map(&shape, vb.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, mk(a, b), rg))
    }

    /// Elementwise sum with broadcasting over extent-1 axes (equal rank).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    /// Elementwise product with broadcasting over extent-1 axes (equal rank).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::validation("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Usage(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() {
                return Err(Error::Rank {
                    op: "concat",
                    expected: base.len(),
                    shape: s.to_vec(),
                });
            }
            for (ax, (&x, &y)) in base.iter().zip(s).enumerate() {
                if ax != axis {
                    check_extent("concat", ax, x, y)?;
                }
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        check_rank("matmul", va, 2)?;
        check_rank("matmul", vb, 2)?;
        let (m, k) = (va.shape()[0], va.shape()[1]);
        check_extent("matmul", 0, k, vb.shape()[0])?;
        let n = vb.shape()[1];
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Zero-padded cross-correlation. Output extent is
    /// `floor((H + 2·pad − kh) / stride) + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        check_rank("conv2d", x, 4)?;
        check_rank("conv2d", w, 4)?;
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        check_extent("conv2d", 1, w.shape()[1], cin)?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::validation(format!(
                "conv2d: kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::validation("conv2d: stride must be >= 1"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::validation(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"
            )));
        }
        if let Some(b) = bias {
            let vb = self.value(b);
            check_rank("conv2d", vb, 1)?;
            check_extent("conv2d", 0, cout, vb.shape()[0])?;
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * p];
        let mut out = vec![0.0; n * cout * p];
        for b in 0..n {
            let img = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
            let c = &mut cols[b * rows * p..(b + 1) * rows * p];
            kernels::im2col(img, &geom, c);
            let o = &mut out[b * cout * p..(b + 1) * cout * p];
            kernels::gemm(cout, rows, p, w.data(), false, c, false, o, false);
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (co, row) in o.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[n, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Bilinear lookup of `input [N,C,H,W]` at `points [N,P,2]` given as
    /// pixel-unit `(x, y)`. Pixels outside the image read as zero.
    pub fn grid_sample_bilinear(&mut self, input: Var, points: Var) -> Result<Var> {
        let x = self.value(input);
        let pts = self.value(points);
        check_rank("grid_sample_bilinear", x, 4)?;
        check_rank("grid_sample_bilinear", pts, 3)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        check_extent("grid_sample_bilinear", 0, n, pts.shape()[0])?;
        check_extent("grid_sample_bilinear", 2, 2, pts.shape()[2])?;
        let p = pts.shape()[1];
        let mut out = vec![0.0; n * c * p];
        for b in 0..n {
            let img = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            for q in 0..p {
                let o = (b * p + q) * 2;
                let bl = Bilinear::new(pts.data()[o], pts.data()[o + 1]);
                for (dx, dy, wt) in bl.corners() {
                    if let Some(idx) = bl.index(dx, dy, h, w) {
                        for ch in 0..c {
                            out[(b * c + ch) * p + q] += wt * img[ch * h * w + idx];
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(points);
        Ok(self.push(Tensor::new(&[n, c, p], out)?, Op::GridSample { input, points }, rg))
    }

    // ---- layout -------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::Usage(format!(
                "permute: {axes:?} is not a permutation of {rank} axes"
            )));
        }
        let out = permute_tensor(v, axes);
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        check_rank("transpose", self.value(a), 2)?;
        self.permute(a, &[1, 0])
    }

    /// `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Usage(format!(
                "narrow: [{start}, {}) out of range on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Narrow { input: a, axis, start }, rg))
    }

    /// Select rows of a `[M, C]` matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        check_rank("gather_rows", v, 2)?;
        let (m, c) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= m {
                return Err(Error::Usage(format!("gather_rows: row {r} >= {m}")));
            }
            data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
        }
        if rows.is_empty() {
            return Err(Error::Usage("gather_rows: empty selection".into()));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[rows.len(), c], data)?,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean over all pixels of `−log softmax(logits)[target]`.
    ///
    /// `logits` is `[N,K,H,W]`; `target` is `[N,H,W]` with integer class ids
    /// in `[0, K)` (for binary segmentation, `{0, 1}`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let x = self.value(logits);
        check_rank("softmax_cross_entropy", x, 4)?;
        check_rank("softmax_cross_entropy", target, 3)?;
        let (n, k, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        for (ax, (&a, &b)) in [n, h, w].iter().zip(target.shape()).enumerate() {
            check_extent("softmax_cross_entropy", ax, a, b)?;
        }
        let hw = h * w;
        let mut targets = Vec::with_capacity(n * hw);
        for &t in target.data() {
            if t.fract() != 0.0 || t < 0.0 || t >= k as f64 {
                return Err(Error::validation(format!(
                    "softmax_cross_entropy: target value {t} is not a class id in [0, {k})"
                )));
            }
            targets.push(t as usize);
        }
        let mut probs = vec![0.0; n * k * hw];
        let mut total = 0.0;
        for b in 0..n {
            for px in 0..hw {
                let at = |c: usize| (b * k + c) * hw + px;
                let mx = (0..k).map(|c| x.data()[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (x.data()[at(c)] - mx).exp()).sum();
                let lz = z.ln();
                for c in 0..k {
                    probs[at(c)] = (x.data()[at(c)] - mx - lz).exp();
                }
                let t = targets[b * hw + px];
                total -= x.data()[at(t)] - mx - lz;
            }
        }
        let loss = total / (n * hw) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets, probs },
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Populate gradients of `loss` with respect to every node that requires
    /// them. Fails on a non-scalar loss or on a second call without
    /// [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward called twice without reset_grads".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), node.value.numel());
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            None => node.grad = Some(delta),
        }
    }

    fn reduce_broadcast(&self, g: &[f64], out_shape: &[usize], target: Var) -> Vec<f64> {
        let ts = self.shape(target);
        if ts == out_shape {
            return g.to_vec();
        }
        let map = kernels::broadcast_index_map(out_shape, ts);
        let mut d = vec![0.0; ts.iter().product()];
        for (gi, &ti) in g.iter().zip(&map) {
            d[ti] += gi;
        }
        d
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Take the op out so node values can be borrowed while accumulating.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let d = self.reduce_broadcast(g, &out_shape, a);
                    self.accumulate(a, d);
                }
                if self.rg(b) {
                    let d = self.reduce_broadcast(g, &out_shape, b);
                    self.accumulate(b, d);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                for (me, other) in [(a, b), (b, a)] {
                    if !self.rg(me) {
                        continue;
                    }
                    let ov = self.value(other);
                    let prod: Vec<f64> = if ov.shape() == out_shape.as_slice() {
                        g.iter().zip(ov.data()).map(|(x, y)| x * y).collect()
                    } else {
                        let m = kernels::broadcast_index_map(&out_shape, ov.shape());
                        g.iter().zip(&m).map(|(x, &j)| x * ov.data()[j]).collect()
                    };
                    let d = self.reduce_broadcast(&prod, &out_shape, me);
                    self.accumulate(me, d);
                }
            }
            Op::Scale(a, s) => {
                let d = g.iter().map(|x| x * s).collect();
                self.accumulate(*a, d);
            }
            Op::Relu(a) => {
                let d = if self.relu_fault {
                    g.to_vec()
                } else {
                    let x = self.value(*a).data();
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect()
                };
                self.accumulate(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let d = g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.accumulate(*a, d);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(p, d);
                    }
                    offset += len;
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, self.value(b).data(), true, &mut d, false);
                    self.accumulate(a, d);
                }
                if self.rg(b) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(a).data(), true, g, false, &mut d, false);
                    self.accumulate(b, d);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let cout = out_shape[1];
                let n = out_shape[0];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                if bias.is_some_and(|b| self.rg(b)) {
                    let mut d = vec![0.0; cout];
                    for b in 0..n {
                        for (co, dv) in d.iter_mut().enumerate() {
                            *dv += g[(b * cout + co) * p..(b * cout + co + 1) * p].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(bias.unwrap(), d);
                }
                if self.rg(*weight) {
                    let mut d = vec![0.0; cout * rows];
                    for b in 0..n {
                        kernels::gemm(
                            cout,
                            p,
                            rows,
                            &g[b * cout * p..(b + 1) * cout * p],
                            false,
                            &cols[b * rows * p..(b + 1) * rows * p],
                            true,
                            &mut d,
                            true,
                        );
                    }
                    self.accumulate(*weight, d);
                }
                if self.rg(*input) {
                    let img = geom.cin * geom.h * geom.w;
                    let mut d = vec![0.0; n * img];
                    let mut dcols = vec![0.0; rows * p];
                    for b in 0..n {
                        kernels::gemm(
                            rows,
                            cout,
                            p,
                            self.value(*weight).data(),
                            true,
                            &g[b * cout * p..(b + 1) * cout * p],
                            false,
                            &mut dcols,
                            false,
                        );
                        kernels::col2im(&dcols, geom, &mut d[b * img..(b + 1) * img]);
                    }
                    self.accumulate(*input, d);
                }
            }
            Op::GridSample { input, points } => {
                let x = self.value(*input);
                let pts = self.value(*points);
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let p = pts.shape()[1];
                let want_x = self.rg(*input);
                let want_p = self.rg(*points);
                let mut dx = if want_x { vec![0.0; x.numel()] } else { Vec::new() };
                let mut dp = if want_p { vec![0.0; pts.numel()] } else { Vec::new() };
                for b in 0..n {
                    let img = &x.data()[b * c * h * w..(b + 1) * c * h * w];
                    for q in 0..p {
                        let o = (b * p + q) * 2;
                        let bl = Bilinear::new(pts.data()[o], pts.data()[o + 1]);
                        let idx = [
                            bl.index(0, 0, h, w),
                            bl.index(1, 0, h, w),
                            bl.index(0, 1, h, w),
                            bl.index(1, 1, h, w),
                        ];
                        let corners = bl.corners();
                        for ch in 0..c {
                            let gv = g[(b * c + ch) * p + q];
                            if gv == 0.0 {
                                continue;
                            }
                            if want_x {
                                for (k, (_, _, wt)) in corners.iter().enumerate() {
                                    if let Some(ix) = idx[k] {
                                        dx[b * c * h * w + ch * h * w + ix] += gv * wt;
                                    }
                                }
                            }
                            if want_p {
                                let val = |k: usize| idx[k].map_or(0.0, |ix| img[ch * h * w + ix]);
                                let (v00, v10, v01, v11) = (val(0), val(1), val(2), val(3));
                                dp[o] += gv * ((v10 - v00) * (1.0 - bl.fy) + (v11 - v01) * bl.fy);
                                dp[o + 1] += gv * ((v01 - v00) * (1.0 - bl.fx) + (v11 - v10) * bl.fx);
                            }
                        }
                    }
                }
                let (input, points) = (*input, *points);
                if want_x {
                    self.accumulate(input, dx);
                }
                if want_p {
                    self.accumulate(points, dp);
                }
            }
            Op::Reshape(a) => self.accumulate(*a, g.to_vec()),
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor::new(&out_shape, g.to_vec()).expect("grad shape");
                let d = permute_tensor(&gt, &inverse).into_data();
                self.accumulate(*input, d);
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut d = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(*input, d);
            }
            Op::GatherRows { input, rows } => {
                let in_shape = self.shape(*input);
                let c = in_shape[1];
                let mut d = vec![0.0; in_shape[0] * c];
                for (q, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g[q * c + j];
                    }
                }
                self.accumulate(*input, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(*a, vec![g[0]; n]);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let s = self.shape(*logits);
                let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = g[0] / (n * hw) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for b in 0..n {
                    for px in 0..hw {
                        d[(b * k + targets[b * hw + px]) * hw + px] -= scale;
                    }
                }
                self.accumulate(*logits, d);
            }
        }
        self.nodes[i].op = op;
    }
}

fn permute_tensor(v: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = v.shape();
    let in_strides = kernels::strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = v.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(v.data()[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, data).expect("permute shape")
}
