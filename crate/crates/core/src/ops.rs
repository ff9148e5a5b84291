//! Elementwise arithmetic, activations and reductions on the graph.
//!
//! Binary ops broadcast along singleton dimensions only: shapes of equal rank
//! where every dimension either matches or is 1 on one side, or one operand
//! holding a single element.

use crate::error::{Error, Result};
use crate::graph::{fnv_mix, Backward, BackwardCtx, Graph, OpTag, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    AddScalar(f64),
    MulScalar(f64),
    /// `x^p`. The derivative is taken as 0 at `x == 0`.
    PowScalar(f64),
    Ln,
    Exp,
    Relu,
    Sigmoid,
    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax over the trailing (channel) axis.
    Softmax,
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, 0 along broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    if numel == 1 || shape.len() != out.len() {
        return vec![0; out.len()];
    }
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in
/// row-major order.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = rank - 1;
        loop {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
            if d == 0 {
                break;
            }
            d -= 1;
        }
    }
}

fn binary_forward<T: Real>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    };
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    };
    let data = if a.shape() == b.shape() {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
        data
    };
    Ok(Tensor::from_parts(out_shape, data))
}

struct BinaryBackward {
    op: BinaryOp,
}

impl<T: Real> Backward<T> for BinaryBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad;
        let out_shape = g.shape();
        let sa = broadcast_strides(a.shape(), out_shape);
        let sb = broadcast_strides(b.shape(), out_shape);
        let mut ga = ctx.needs[0].then(|| vec![T::zero(); a.numel()]);
        let mut gb = ctx.needs[1].then(|| vec![T::zero(); b.numel()]);
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        let op = self.op;
        for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
            let go = gd[o];
            let (da, db) = match op {
                BinaryOp::Add => (go, go),
                BinaryOp::Sub => (go, -go),
                BinaryOp::Mul => (go * bd[j], go * ad[i]),
                BinaryOp::Div => (go / bd[j], -go * ad[i] / (bd[j] * bd[j])),
            };
            if let Some(ga) = &mut ga {
                ga[i] += da;
            }
            if let Some(gb) = &mut gb {
                gb[j] += db;
            }
        });
        Ok(vec![
            ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
            gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
        ])
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary_tag(op: UnaryOp) -> OpTag {
    match op {
        UnaryOp::Neg => OpTag::Neg,
        UnaryOp::AddScalar(_) => OpTag::AddScalar,
        UnaryOp::MulScalar(_) => OpTag::MulScalar,
        UnaryOp::PowScalar(_) => OpTag::PowScalar,
        UnaryOp::Ln => OpTag::Ln,
        UnaryOp::Exp => OpTag::Exp,
        UnaryOp::Relu => OpTag::Relu,
        UnaryOp::Sigmoid => OpTag::Sigmoid,
        UnaryOp::Clamp(..) => OpTag::Clamp,
    }
}

fn unary_forward<T: Real>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::AddScalar(c) => x + T::of(c),
        UnaryOp::MulScalar(c) => x * T::of(c),
        UnaryOp::PowScalar(p) => x.powf(T::of(p)),
        UnaryOp::Ln => x.ln(),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Relu => x.max(T::zero()),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Clamp(lo, hi) => x.max(T::of(lo)).min(T::of(hi)),
    }
}

struct UnaryBackward {
    op: UnaryOp,
}

impl<T: Real> Backward<T> for UnaryBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        if !ctx.needs[0] {
            return Ok(vec![None]);
        }
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let g = ctx.grad.data();
        let zero = T::zero();
        let d: Vec<T> = match self.op {
            UnaryOp::Neg => g.iter().map(|&v| -v).collect(),
            UnaryOp::AddScalar(_) => g.to_vec(),
            UnaryOp::MulScalar(c) => g.iter().map(|&v| v * T::of(c)).collect(),
            UnaryOp::PowScalar(p) => {
                let p = T::of(p);
                x.iter()
                    .zip(g)
                    .map(|(&xi, &gi)| {
                        if xi == zero {
                            if p == T::one() {
                                gi
                            } else {
                                zero
                            }
                        } else {
                            gi * p * xi.powf(p - T::one())
                        }
                    })
                    .collect()
            }
            UnaryOp::Ln => x.iter().zip(g).map(|(&xi, &gi)| gi / xi).collect(),
            UnaryOp::Exp => y.iter().zip(g).map(|(&yi, &gi)| gi * yi).collect(),
            UnaryOp::Relu => x
                .iter()
                .zip(g)
                .map(|(&xi, &gi)| if xi > zero { gi } else { zero })
                .collect(),
            UnaryOp::Sigmoid => y
                .iter()
                .zip(g)
                .map(|(&yi, &gi)| gi * yi * (T::one() - yi))
                .collect(),
            UnaryOp::Clamp(lo, hi) => {
                let (lo, hi) = (T::of(lo), T::of(hi));
                x.iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > lo && xi < hi { gi } else { zero })
                    .collect()
            }
        };
        Ok(vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), d))])
    }
}

struct SoftmaxBackward;

impl<T: Real> Backward<T> for SoftmaxBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        if !ctx.needs[0] {
            return Ok(vec![None]);
        }
        let c = *ctx.output.shape().last().unwrap_or(&1);
        let y = ctx.output.data();
        let g = ctx.grad.data();
        let mut d = vec![T::zero(); y.len()];
        for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
            let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *dv = yv * (gv - s);
            }
        }
        Ok(vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), d))])
    }
}

struct SumBackward {
    scale: f64,
}

impl<T: Real> Backward<T> for SumBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        if !ctx.needs[0] {
            return Ok(vec![None]);
        }
        let g = ctx.grad.data()[0] * T::of(self.scale);
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))])
    }
}

struct SliceChannelBackward {
    channel: usize,
}

impl<T: Real> Backward<T> for SliceChannelBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        if !ctx.needs[0] {
            return Ok(vec![None]);
        }
        let x = ctx.inputs[0];
        let c = *x.shape().last().unwrap();
        let mut d = vec![T::zero(); x.numel()];
        for (row, &gv) in d.chunks_mut(c).zip(ctx.grad.data()) {
            row[self.channel] = gv;
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
    }
}

struct ConcatBackward {
    widths: Vec<usize>,
}

impl<T: Real> Backward<T> for ConcatBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let total: usize = self.widths.iter().sum();
        let g = ctx.grad.data();
        let rows = g.len() / total;
        let mut out = Vec::with_capacity(self.widths.len());
        let mut offset = 0;
        for (k, &w) in self.widths.iter().enumerate() {
            if ctx.needs[k] {
                let mut d = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                out.push(Some(Tensor::from_parts(ctx.inputs[k].shape().to_vec(), d)));
            } else {
                out.push(None);
            }
            offset += w;
        }
        Ok(out)
    }
}

impl<T: Real> Graph<T> {
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let value = binary_forward(op, self.value(a), self.value(b))?;
        let tag = match op {
            BinaryOp::Add => OpTag::Add,
            BinaryOp::Sub => OpTag::Sub,
            BinaryOp::Mul => OpTag::Mul,
            BinaryOp::Div => OpTag::Div,
        };
        self.record(tag, value, vec![a, b], BinaryBackward { op })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = xv.map(|v| unary_forward(op, v));
        if self.tracking_branches() {
            let (hash, kinks) = unary_branches(op, xv);
            self.note_branches(hash, kinks);
        }
        self.record(unary_tag(op), value, vec![x], UnaryBackward { op })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::AddScalar(c), x)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::MulScalar(c), x)
    }

    /// `c - x`
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Result<Var> {
        let n = self.neg(x)?;
        self.add_scalar(n, c)
    }

    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(UnaryOp::PowScalar(p), x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Ln, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryOp::Clamp(lo, hi), x)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Softmax => self.softmax(x),
        }
    }

    /// Softmax over the trailing axis, which must have at least two entries.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&0);
        if xv.rank() < 2 || c < 2 {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "softmax needs a channel axis of size >= 2".into(),
            });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.record(OpTag::Softmax, value, vec![x], SoftmaxBackward)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(OpTag::SumAll, value, vec![x], SumBackward { scale: 1.0 })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel() as f64;
        let value = Tensor::scalar(xv.sum() / T::of(n));
        self.record(
            OpTag::MeanAll,
            value,
            vec![x],
            SumBackward { scale: 1.0 / n },
        )
    }

    /// Selects one entry of the trailing axis, keeping it as a size-1 axis.
    pub fn slice_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        if channel >= c {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!("channel {channel} out of range"),
            });
        }
        let data: Vec<T> = xv.data().chunks(c).map(|row| row[channel]).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::from_parts(shape, data);
        self.record(
            OpTag::SliceChannel,
            value,
            vec![x],
            SliceChannelBackward { channel },
        )
    }

    /// Concatenation along the trailing axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::from_parts(shape, data);
        self.record(OpTag::Concat, value, xs.to_vec(), ConcatBackward { widths })
    }
}

fn unary_branches<T: Real>(op: UnaryOp, x: &Tensor<T>) -> (u64, usize) {
    let region = |v: T| -> Option<u64> {
        match op {
            UnaryOp::Relu => Some((v > T::zero()) as u64),
            UnaryOp::Clamp(lo, hi) => Some(if v < T::of(lo) {
                0
            } else if v > T::of(hi) {
                2
            } else {
                1
            }),
            _ => None,
        }
    };
    let on_kink = |v: T| match op {
        UnaryOp::Relu => v == T::zero(),
        UnaryOp::Clamp(lo, hi) => v == T::of(lo) || v == T::of(hi),
        _ => false,
    };
    let mut hash = 0u64;
    let mut kinks = 0;
    for &v in x.data() {
        if let Some(r) = region(v) {
            hash = fnv_mix(hash, r);
        }
        kinks += on_kink(v) as usize;
    }
    (hash, kinks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn add_vectors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn pow_squares() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.25, 1.0]));
        let c = g.pow_scalar(a, 2.0).unwrap();
        assert_eq!(g.value(c).data(), &[0.0625, 1.0]);
    }

    #[test]
    fn per_channel_broadcast() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::ones([1, 2, 2, 3]));
        let k = g.constant(t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]));
        let y = g.mul(x, k).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 3]);
        for px in g.value(y).data().chunks(3) {
            assert_eq!(px, &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn two_sided_broadcast() {
        let mut g = Graph::new();
        let sp = g.input(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let ch = g.input(t(&[1, 1, 1, 2], &[10.0, 20.0]));
        let y = g.mul(sp, ch).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[10.0, 20.0, 20.0, 40.0, 30.0, 60.0, 40.0, 80.0]
        );
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(sp).unwrap().data(), &[30.0, 30.0, 30.0, 30.0]);
        assert_eq!(g.grad(ch).unwrap().data(), &[10.0, 10.0]);
    }

    #[test]
    fn incompatible_shapes_name_both() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros([2, 3]));
        let b = g.constant(Tensor::<f64>::zeros([3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let p = g.constant(t(&[1, 1, 1, 2], &[0.0, 0.0]));
        let sm = g.softmax(p).unwrap();
        assert_eq!(g.value(sm).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_needs_two_channels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros([2, 1]));
        assert!(g.softmax(x).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 1], &[1.0, 2.0]));
        let b = g.input(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice_channel(c, 2).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
