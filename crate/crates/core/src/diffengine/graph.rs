//! Tape-based reverse-mode differentiation over [`Tensor4`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep.

use super::loss::{bce_with_logit, diou_with_grad, sigmoid};
use super::param::{ParamIdx, ParamSet};
use super::tensor::{ShapeError, Tensor4};
use crate::geometry::{decode_cell, Bbox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Which operands of a two-sided loss receive gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Live {
    Both,
    LeftOnly,
    RightOnly,
}

/// One regression target for [`Graph::diou_cells`]: the raw head output at
/// `(n, :, row, col)` is decoded with `stride` and compared against `target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub n: usize,
    pub row: usize,
    pub col: usize,
    pub stride: f64,
    pub target: Bbox,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Sigmoid(Var),
    Leaky(Var, f64),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    Concat(Vec<Var>),
    Upsample(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Bce {
        x: Var,
        target: Tensor4,
        mask: Option<Tensor4>,
        norm: f64,
    },
    L2 {
        a: Var,
        b: Var,
        live: Live,
        norm: f64,
    },
    DotConst(Var, Tensor4),
    Diou {
        reg: Var,
        cells: Vec<CellTarget>,
        grads: Vec<[f64; 4]>,
        norm: f64,
    },
}

struct Node {
    value: Tensor4,
    requires_grad: bool,
    param: Option<ParamIdx>,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor4>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph for inference: no caches kept and [`Graph::backward`] fails.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Parameters live outside the graph and are
    /// untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor4, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Free leaf that receives gradient.
    pub fn variable(&mut self, t: Tensor4) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf bound to a parameter; gradients flow back via
    /// [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, params: &ParamSet, idx: ParamIdx) -> Var {
        let v = self.push(params.get(idx).value.clone(), true, Op::Leaf);
        self.nodes[v.0].param = Some(idx);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, ShapeError> {
        let keep = self.grad_enabled && (self.rg(x) || self.rg(w) || self.rg(b));
        let (out, cols) = conv_forward(self.value(x), self.value(w), self.value(b), stride, pad, keep)?;
        let rg = keep;
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, rg, Op::Sigmoid(x))
    }

    pub fn leaky(&mut self, x: Var, slope: f64) -> Result<Var, ShapeError> {
        if !(0.0..1.0).contains(&slope) {
            return Err(ShapeError::invalid("leaky", format!("slope {slope} outside [0,1)")));
        }
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Leaky(x, slope)))
    }

    /// `a + b`; `b` may have channel extent 1 and is then broadcast over `a`'s
    /// channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let bc = broadcast_kind("add", self.value(a), self.value(b))?;
        let out = binary(self.value(a), self.value(b), bc, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Elementwise product with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let bc = broadcast_kind("mul", self.value(a), self.value(b))?;
        let out = binary(self.value(a), self.value(b), bc, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, rg, Op::Scale(a, s))
    }

    /// `a / d`; averaging with this is exact where multiplying by `1/d` is not.
    pub fn div_scalar(&mut self, a: Var, d: f64) -> Var {
        let out = self.value(a).map(|v| v / d);
        let rg = self.rg(a);
        self.push(out, rg, Op::DivScalar(a, d))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let first = parts
            .first()
            .ok_or_else(|| ShapeError::invalid("concat_channels", "no parts"))?;
        let [n, _, h, w] = self.value(*first).shape();
        let mut c_total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(ShapeError::mismatch(
                    "concat_channels",
                    format!("{:?} vs {:?}", s, self.value(*first).shape()),
                ));
            }
            c_total += s[1];
        }
        let mut out = Tensor4::zeros([n, c_total, h, w]);
        let hw = h * w;
        for s in 0..n {
            let mut c_off = 0;
            for p in parts {
                let t = self.value(*p);
                let src = t.sample(s);
                let dst = &mut out.data_mut()[(s * c_total + c_off) * hw..][..src.len()];
                dst.copy_from_slice(src);
                c_off += t.c();
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, rg, Op::Concat(parts.to_vec())))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let out = Tensor4::from_fn([n, c, 2 * h, 2 * w], |[s, ch, y, xx]| t.at(s, ch, y / 2, xx / 2));
        let rg = self.rg(x);
        self.push(out, rg, Op::Upsample(x))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, ShapeError> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ShapeError::invalid(
                "downsample",
                format!("odd spatial extent {h}x{w}"),
            ));
        }
        let mut out = Tensor4::zeros([n, c, h / 2, w / 2]);
        let mut argmax = Vec::with_capacity(out.len());
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut best = t.offset(s, ch, 2 * y, 2 * xx);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let o = t.offset(s, ch, 2 * y + dy, 2 * xx + dx);
                            if t.data()[o] > t.data()[best] {
                                best = o;
                            }
                        }
                        out.set(s, ch, y, xx, t.data()[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::MaxPool2 { x, argmax }))
    }

    /// Binary cross entropy on logits. With a mask, only elements whose mask
    /// value is non-zero contribute, weighted by the mask; `Mean` divides by
    /// the mask sum (or the element count without a mask).
    pub fn bce_logits(
        &mut self,
        x: Var,
        target: Tensor4,
        mask: Option<Tensor4>,
        reduction: Reduction,
    ) -> Result<Var, ShapeError> {
        let xs = self.value(x);
        if target.shape() != xs.shape() {
            return Err(ShapeError::mismatch(
                "bce_loss",
                format!("logits {:?} vs target {:?}", xs.shape(), target.shape()),
            ));
        }
        if let Some(m) = &mask {
            if m.shape() != xs.shape() {
                return Err(ShapeError::mismatch(
                    "bce_loss",
                    format!("logits {:?} vs mask {:?}", xs.shape(), m.shape()),
                ));
            }
        }
        if let Some(bad) = target.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(ShapeError::invalid("bce_loss", format!("target {bad} outside [0,1]")));
        }
        let mut total = 0.0;
        let mut weight = 0.0;
        match &mask {
            None => {
                for (&l, &t) in xs.data().iter().zip(target.data()) {
                    total += bce_with_logit(l, t);
                }
                weight = xs.len() as f64;
            }
            Some(m) => {
                for ((&l, &t), &mw) in xs.data().iter().zip(target.data()).zip(m.data()) {
                    if mw != 0.0 {
                        total += mw * bce_with_logit(l, t);
                        weight += mw;
                    }
                }
            }
        }
        let norm = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if weight > 0.0 => weight,
            Reduction::Mean => 1.0,
        };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor4::scalar(total / norm),
            rg,
            Op::Bce {
                x,
                target,
                mask,
                norm,
            },
        ))
    }

    /// Squared-difference loss between two graph values. `live` selects which
    /// side receives gradient; the other side is treated as a constant.
    pub fn l2(&mut self, a: Var, b: Var, live: Live, reduction: Reduction) -> Result<Var, ShapeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(ShapeError::mismatch(
                "l2_loss",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let sum: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let norm = match reduction {
            Reduction::Mean if !ta.is_empty() => ta.len() as f64,
            _ => 1.0,
        };
        let rg = match live {
            Live::Both => self.rg(a) || self.rg(b),
            Live::LeftOnly => self.rg(a),
            Live::RightOnly => self.rg(b),
        };
        Ok(self.push(Tensor4::scalar(sum / norm), rg, Op::L2 { a, b, live, norm }))
    }

    /// `sum(x * w)` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, w: Tensor4) -> Result<Var, ShapeError> {
        let xs = self.value(x);
        if xs.shape() != w.shape() {
            return Err(ShapeError::mismatch(
                "dot_const",
                format!("{:?} vs {:?}", xs.shape(), w.shape()),
            ));
        }
        let v: f64 = xs.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor4::scalar(v), rg, Op::DotConst(x, w)))
    }

    /// Distance-IoU loss over decoded boxes taken from a 4-channel raw
    /// regression map. `Mean` divides by the number of cells.
    pub fn diou_cells(
        &mut self,
        reg: Var,
        cells: Vec<CellTarget>,
        reduction: Reduction,
    ) -> Result<Var, ShapeError> {
        let t = self.value(reg);
        if t.c() != 4 {
            return Err(ShapeError::mismatch(
                "diou_loss",
                format!("regression map needs 4 channels, got {:?}", t.shape()),
            ));
        }
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(cells.len());
        for cell in &cells {
            if cell.n >= t.n() || cell.row >= t.h() || cell.col >= t.w() {
                return Err(ShapeError::mismatch(
                    "diou_loss",
                    format!("cell {cell:?} outside {:?}", t.shape()),
                ));
            }
            let raw: [f64; 4] = std::array::from_fn(|k| t.at(cell.n, k, cell.row, cell.col));
            let pred = decode_cell(raw, cell.col, cell.row, cell.stride);
            let (loss, g) = diou_with_grad(&pred, &cell.target)?;
            total += loss;
            // chain through decode: corners from center/extent
            let d_cx = g[0] + g[2];
            let d_cy = g[1] + g[3];
            let d_w = 0.5 * (g[2] - g[0]);
            let d_h = 0.5 * (g[3] - g[1]);
            grads.push([
                d_cx * cell.stride,
                d_cy * cell.stride,
                d_w * pred.width(),
                d_h * pred.height(),
            ]);
        }
        let norm = match reduction {
            Reduction::Mean if !cells.is_empty() => cells.len() as f64,
            _ => 1.0,
        };
        let rg = self.rg(reg);
        Ok(self.push(
            Tensor4::scalar(total / norm),
            rg,
            Op::Diou {
                reg,
                cells,
                grads,
                norm,
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<(), ShapeError> {
        if !self.grad_enabled {
            return Err(ShapeError::invalid("backward", "graph was built without gradients"));
        }
        if self.value(loss).len() != 1 {
            return Err(ShapeError::mismatch(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor4::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            backprop_node(&self.nodes, i, g, lower);
        }
        Ok(())
    }

    /// Adds gradients of parameter leaves into `params`.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Some(idx), Some(g)) = (node.param, g) {
                params.get_mut(idx).grad.add_assign(g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor4>], v: Var, shape: [usize; 4], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    let g = slot.get_or_insert_with(|| Tensor4::zeros(shape));
    f(g.data_mut());
}

fn backprop_node(nodes: &[Node], i: usize, g: &Tensor4, grads: &mut [Option<Tensor4>]) {
    let rg = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
            cols,
        } => conv_backward(nodes, g, *x, *w, *b, *stride, *pad, cols, grads),
        Op::Sigmoid(x) => {
            let y = &nodes[i].value;
            accumulate(grads, *x, y.shape(), |d| {
                for ((d, &gy), &yv) in d.iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gy * yv * (1.0 - yv);
                }
            });
        }
        Op::Leaky(x, slope) => {
            let xv = val(*x);
            accumulate(grads, *x, xv.shape(), |d| {
                for ((d, &gy), &xi) in d.iter_mut().zip(g.data()).zip(xv.data()) {
                    *d += if xi >= 0.0 { gy } else { slope * gy };
                }
            });
        }
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, g.shape(), |d| {
                    for (d, &gy) in d.iter_mut().zip(g.data()) {
                        *d += gy;
                    }
                });
            }
            if rg(*b) {
                let bs = val(*b).shape();
                accumulate(grads, *b, bs, |d| reduce_broadcast(d, bs, g, |gy, _| gy));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let bs = bv.shape();
            if rg(*a) {
                accumulate(grads, *a, av.shape(), |d| {
                    let [n, c, h, w] = av.shape();
                    let hw = h * w;
                    for s in 0..n {
                        for ch in 0..c {
                            let bch = if bs[1] == 1 { 0 } else { ch };
                            let go = (s * c + ch) * hw;
                            let bo = (s * bs[1] + bch) * hw;
                            for k in 0..hw {
                                d[go + k] += g.data()[go + k] * bv.data()[bo + k];
                            }
                        }
                    }
                });
            }
            if rg(*b) {
                accumulate(grads, *b, bs, |d| reduce_broadcast(d, bs, g, |gy, k| gy * av.data()[k]));
            }
        }
        Op::Scale(a, s) => {
            accumulate(grads, *a, g.shape(), |d| {
                for (d, &gy) in d.iter_mut().zip(g.data()) {
                    *d += s * gy;
                }
            });
        }
        Op::DivScalar(a, dv) => {
            accumulate(grads, *a, g.shape(), |d| {
                for (d, &gy) in d.iter_mut().zip(g.data()) {
                    *d += gy / dv;
                }
            });
        }
        Op::Concat(parts) => {
            let [n, c_total, h, w] = g.shape();
            let hw = h * w;
            let mut c_off = 0;
            for p in parts {
                let ps = val(*p).shape();
                if rg(*p) {
                    accumulate(grads, *p, ps, |d| {
                        let per = ps[1] * hw;
                        for s in 0..n {
                            let src = &g.data()[(s * c_total + c_off) * hw..][..per];
                            for (dv, sv) in d[s * per..(s + 1) * per].iter_mut().zip(src) {
                                *dv += sv;
                            }
                        }
                    });
                }
                c_off += ps[1];
            }
        }
        Op::Upsample(x) => {
            let xs = val(*x).shape();
            accumulate(grads, *x, xs, |d| {
                let [n, c, h, w] = g.shape();
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let src = g.at(s, ch, y, xx);
                                d[((s * xs[1] + ch) * xs[2] + y / 2) * xs[3] + xx / 2] += src;
                            }
                        }
                    }
                }
            });
        }
        Op::MaxPool2 { x, argmax } => {
            accumulate(grads, *x, val(*x).shape(), |d| {
                for (&src, &gy) in argmax.iter().zip(g.data()) {
                    d[src] += gy;
                }
            });
        }
        Op::Bce {
            x,
            target,
            mask,
            norm,
        } => {
            let xv = val(*x);
            let scale = g.data()[0] / norm;
            accumulate(grads, *x, xv.shape(), |d| {
                for (k, (dv, (&l, &t))) in d.iter_mut().zip(xv.data().iter().zip(target.data())).enumerate() {
                    let mw = mask.as_ref().map_or(1.0, |m| m.data()[k]);
                    if mw != 0.0 {
                        *dv += scale * mw * (sigmoid(l) - t);
                    }
                }
            });
        }
        Op::L2 { a, b, live, norm } => {
            let (av, bv) = (val(*a), val(*b));
            let scale = 2.0 * g.data()[0] / norm;
            if matches!(live, Live::Both | Live::LeftOnly) && rg(*a) {
                accumulate(grads, *a, av.shape(), |d| {
                    for ((dv, &x), &y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                        *dv += scale * (x - y);
                    }
                });
            }
            if matches!(live, Live::Both | Live::RightOnly) && rg(*b) {
                accumulate(grads, *b, bv.shape(), |d| {
                    for ((dv, &x), &y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                        *dv -= scale * (x - y);
                    }
                });
            }
        }
        Op::DotConst(x, w) => {
            let gy = g.data()[0];
            accumulate(grads, *x, w.shape(), |d| {
                for (dv, &wv) in d.iter_mut().zip(w.data()) {
                    *dv += gy * wv;
                }
            });
        }
        Op::Diou {
            reg,
            cells,
            grads: cell_grads,
            norm,
        } => {
            let rs = val(*reg).shape();
            let scale = g.data()[0] / norm;
            accumulate(grads, *reg, rs, |d| {
                for (cell, cg) in cells.iter().zip(cell_grads) {
                    for (k, gk) in cg.iter().enumerate() {
                        d[((cell.n * rs[1] + k) * rs[2] + cell.row) * rs[3] + cell.col] += scale * gk;
                    }
                }
            });
        }
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Channel,
}

fn broadcast_kind(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<Broadcast, ShapeError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        Ok(Broadcast::Same)
    } else if sb[1] == 1 && sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3] {
        Ok(Broadcast::Channel)
    } else {
        Err(ShapeError::mismatch(op, format!("{sa:?} vs {sb:?}")))
    }
}

fn binary(a: &Tensor4, b: &Tensor4, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    match bc {
        Broadcast::Same => Tensor4::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
        .expect("same shape"),
        Broadcast::Channel => {
            let [n, c, h, w] = a.shape();
            let hw = h * w;
            let mut out = Vec::with_capacity(a.len());
            for s in 0..n {
                let bs = &b.data()[s * hw..(s + 1) * hw];
                for ch in 0..c {
                    let as_ = &a.data()[(s * c + ch) * hw..][..hw];
                    out.extend(as_.iter().zip(bs).map(|(&x, &y)| f(x, y)));
                }
            }
            Tensor4::from_vec(a.shape(), out).expect("broadcast shape")
        }
    }
}

/// Sums the upstream gradient back to the (possibly channel-broadcast)
/// operand shape. `term(g, k)` maps the upstream value at flat index `k` of
/// the output.
fn reduce_broadcast(d: &mut [f64], bs: [usize; 4], g: &Tensor4, term: impl Fn(f64, usize) -> f64) {
    let [n, c, h, w] = g.shape();
    let hw = h * w;
    for s in 0..n {
        for ch in 0..c {
            let bch = if bs[1] == 1 { 0 } else { ch };
            let go = (s * c + ch) * hw;
            let bo = (s * bs[1] + bch) * hw;
            for k in 0..hw {
                d[bo + k] += term(g.data()[go + k], go + k);
            }
        }
    }
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, col: &mut [f64]) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, dv) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *dv = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(col: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(
    x: &Tensor4,
    w: &Tensor4,
    b: &Tensor4,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor4, Vec<f64>), ShapeError> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, k2] = w.shape();
    if wcin != cin || k != k2 {
        return Err(ShapeError::mismatch(
            "conv2d",
            format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
        ));
    }
    if b.len() != cout {
        return Err(ShapeError::mismatch(
            "conv2d",
            format!("bias {:?} for {cout} output channels", b.shape()),
        ));
    }
    let (Some(ho), Some(wo)) = (conv_out_extent(h, k, stride, pad), conv_out_extent(wd, k, stride, pad)) else {
        return Err(ShapeError::invalid(
            "conv2d",
            format!("kernel {k} stride {stride} padding {pad} does not fit {h}x{wd}"),
        ));
    };
    let kk = cin * k * k;
    let p = ho * wo;
    let mut out = Tensor4::zeros([n, cout, ho, wo]);
    let mut cols = vec![0.0; if keep_cols { n * kk * p } else { kk * p }];
    for s in 0..n {
        let col = if keep_cols { &mut cols[s * kk * p..(s + 1) * kk * p] } else { &mut cols[..] };
        im2col(x.sample(s), cin, h, wd, k, stride, pad, ho, wo, col);
        let dst = &mut out.data_mut()[s * cout * p..(s + 1) * cout * p];
        for co in 0..cout {
            let orow = &mut dst[co * p..(co + 1) * p];
            orow.fill(b.data()[co]);
            let wrow = &w.data()[co * kk..(co + 1) * kk];
            for (kidx, &wv) in wrow.iter().enumerate() {
                let crow = &col[kidx * p..(kidx + 1) * p];
                for (o, &c) in orow.iter_mut().zip(crow) {
                    *o += wv * c;
                }
            }
        }
    }
    if !keep_cols {
        cols = Vec::new();
    }
    Ok((out, cols))
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    nodes: &[Node],
    g: &Tensor4,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    cols: &[f64],
    grads: &mut [Option<Tensor4>],
) {
    let xv = &nodes[x.0].value;
    let wv = &nodes[w.0].value;
    let [n, cin, h, wd] = xv.shape();
    let [cout, _, k, _] = wv.shape();
    let [_, _, ho, wo] = g.shape();
    let kk = cin * k * k;
    let p = ho * wo;

    if nodes[w.0].requires_grad {
        accumulate(grads, w, wv.shape(), |dw| {
            for s in 0..n {
                let col = &cols[s * kk * p..(s + 1) * kk * p];
                let gs = g.sample(s);
                for co in 0..cout {
                    let grow = &gs[co * p..(co + 1) * p];
                    for kidx in 0..kk {
                        let crow = &col[kidx * p..(kidx + 1) * p];
                        dw[co * kk + kidx] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        });
    }
    if nodes[b.0].requires_grad {
        let bs = nodes[b.0].value.shape();
        accumulate(grads, b, bs, |db| {
            for s in 0..n {
                let gs = g.sample(s);
                for (co, dbv) in db.iter_mut().enumerate().take(cout) {
                    *dbv += gs[co * p..(co + 1) * p].iter().sum::<f64>();
                }
            }
        });
    }
    if nodes[x.0].requires_grad {
        accumulate(grads, x, xv.shape(), |dx| {
            let mut dcol = vec![0.0; kk * p];
            let per = cin * h * wd;
            for s in 0..n {
                dcol.fill(0.0);
                let gs = g.sample(s);
                for co in 0..cout {
                    let grow = &gs[co * p..(co + 1) * p];
                    let wrow = &wv.data()[co * kk..(co + 1) * kk];
                    for (kidx, &wval) in wrow.iter().enumerate() {
                        let drow = &mut dcol[kidx * p..(kidx + 1) * p];
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += wval * gv;
                        }
                    }
                }
                col2im_add(&dcol, cin, h, wd, k, stride, pad, ho, wo, &mut dx[s * per..(s + 1) * per]);
            }
        });
    }
}
