//! Pooling reductions, the channel-axis 1-D convolution and nearest upsampling.

use crate::error::{Error, Result};
use crate::graph::{fnv_mix, Backward, BackwardCtx, Graph, OpTag, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Gradient routed to saved argmax positions of the input.
struct ArgmaxBackward {
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for ArgmaxBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        if !ctx.needs[0] {
            return Ok(vec![None]);
        }
        let x = ctx.inputs[0];
        let mut d = vec![T::zero(); x.numel()];
        for (&i, &gv) in self.argmax.iter().zip(ctx.grad.data()) {
            d[i] += gv;
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
    }
}

struct SpatialAvgBackward {
    hw: usize,
}

impl<T: Real> Backward<T> for SpatialAvgBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        if !ctx.needs[0] {
            return Ok(vec![None]);
        }
        let x = ctx.inputs[0];
        let c = *x.shape().last().unwrap();
        let scale = T::of(1.0 / self.hw as f64);
        let g = ctx.grad.data();
        let mut d = vec![T::zero(); x.numel()];
        for (i, v) in d.iter_mut().enumerate() {
            let n = i / (self.hw * c);
            *v = g[n * c + i % c] * scale;
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
    }
}

struct ChannelAvgBackward;

impl<T: Real> Backward<T> for ChannelAvgBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        if !ctx.needs[0] {
            return Ok(vec![None]);
        }
        let x = ctx.inputs[0];
        let c = *x.shape().last().unwrap();
        let scale = T::of(1.0 / c as f64);
        let mut d = Vec::with_capacity(x.numel());
        for &gv in ctx.grad.data() {
            d.extend(std::iter::repeat_n(gv * scale, c));
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
    }
}

struct Conv1dBackward {
    channels: usize,
    k: usize,
}

impl<T: Real> Backward<T> for Conv1dBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (c, k) = (self.channels, self.k);
        let half = k / 2;
        let wd = w.data();
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.numel()]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); k]);
        for (row, (xr, gr)) in x
            .data()
            .chunks(c)
            .zip(ctx.grad.data().chunks(c))
            .enumerate()
        {
            for (o, &gv) in gr.iter().enumerate() {
                for (j, &wj) in wd.iter().enumerate() {
                    let Some(i) = (o + j).checked_sub(half).filter(|&i| i < c) else {
                        continue;
                    };
                    if let Some(dx) = &mut dx {
                        dx[row * c + i] += gv * wj;
                    }
                    if let Some(dw) = &mut dw {
                        dw[j] += gv * xr[i];
                    }
                }
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        ])
    }
}

struct UpsampleBackward {
    factor: usize,
}

impl<T: Real> Backward<T> for UpsampleBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        if !ctx.needs[0] {
            return Ok(vec![None]);
        }
        let x = ctx.inputs[0];
        let (n, h, w, c) = x.dims4()?;
        let r = self.factor;
        let (oh, ow) = (h * r, w * r);
        let g = ctx.grad.data();
        let mut d = vec![T::zero(); x.numel()];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = ((b * oh + oy) * ow + ox) * c;
                    let dst = ((b * h + oy / r) * w + ox / r) * c;
                    for ch in 0..c {
                        d[dst + ch] += g[src + ch];
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
    }
}

/// First index of the maximum, and how many entries tie with it.
fn argmax_first<T: Real>(values: impl Iterator<Item = (usize, T)>) -> (usize, usize) {
    let mut best = (usize::MAX, T::neg_infinity());
    let mut ties = 0;
    for (i, v) in values {
        if best.0 == usize::MAX || v > best.1 {
            best = (i, v);
            ties = 0;
        } else if v == best.1 {
            ties += 1;
        }
    }
    (best.0, ties)
}

impl<T: Real> Graph<T> {
    fn note_argmax(&mut self, argmax: &[usize], ties: usize) {
        if self.tracking_branches() {
            let hash = argmax.iter().fold(0u64, |h, &i| fnv_mix(h, i as u64));
            self.note_branches(hash, ties);
        }
    }

    /// Non-overlapping `window × window` max pooling. Ties resolve to the
    /// first element in row-major scan order.
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (n, h, w, c) = self.value(x).dims4()?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("spatial dims must be divisible by the pool window {window}"),
            });
        }
        let (oh, ow) = (h / window, w / window);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        let mut ties = 0;
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let cells = (0..window * window).map(|k| {
                            let (dy, dx) = (k / window, k % window);
                            let i = ((b * h + oy * window + dy) * w + ox * window + dx) * c + ch;
                            (i, xd[i])
                        });
                        let (i, t) = argmax_first(cells);
                        out.push(xd[i]);
                        argmax.push(i);
                        ties += t;
                    }
                }
            }
        }
        self.note_argmax(&argmax, ties);
        let value = Tensor::from_parts(vec![n, oh, ow, c], out);
        self.record(OpTag::MaxPool2d, value, vec![x], ArgmaxBackward { argmax })
    }

    /// Global pooling over all spatial positions: `[n, h, w, c] -> [n, 1, 1, c]`.
    pub fn pool_spatial(&mut self, kind: PoolKind, x: Var) -> Result<Var> {
        let (n, h, w, c) = self.value(x).dims4()?;
        let hw = h * w;
        let xd = self.value(x).data();
        match kind {
            PoolKind::Avg => {
                let scale = T::of(1.0 / hw as f64);
                let mut out = vec![T::zero(); n * c];
                for b in 0..n {
                    for px in xd[b * hw * c..(b + 1) * hw * c].chunks(c) {
                        for (o, &v) in out[b * c..(b + 1) * c].iter_mut().zip(px) {
                            *o += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= scale);
                let value = Tensor::from_parts(vec![n, 1, 1, c], out);
                self.record(
                    OpTag::PoolSpatial,
                    value,
                    vec![x],
                    SpatialAvgBackward { hw },
                )
            }
            PoolKind::Max => {
                let mut out = Vec::with_capacity(n * c);
                let mut argmax = Vec::with_capacity(n * c);
                let mut ties = 0;
                for b in 0..n {
                    for ch in 0..c {
                        let cells = (0..hw).map(|p| {
                            let i = (b * hw + p) * c + ch;
                            (i, xd[i])
                        });
                        let (i, t) = argmax_first(cells);
                        out.push(xd[i]);
                        argmax.push(i);
                        ties += t;
                    }
                }
                self.note_argmax(&argmax, ties);
                let value = Tensor::from_parts(vec![n, 1, 1, c], out);
                self.record(
                    OpTag::PoolSpatial,
                    value,
                    vec![x],
                    ArgmaxBackward { argmax },
                )
            }
        }
    }

    /// Pooling across the channel axis: `[n, h, w, c] -> [n, h, w, 1]`.
    pub fn pool_channel(&mut self, kind: PoolKind, x: Var) -> Result<Var> {
        let (n, h, w, c) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        match kind {
            PoolKind::Avg => {
                let scale = T::of(1.0 / c as f64);
                let out: Vec<T> = xd
                    .chunks(c)
                    .map(|px| px.iter().copied().sum::<T>() * scale)
                    .collect();
                let value = Tensor::from_parts(vec![n, h, w, 1], out);
                self.record(OpTag::PoolChannel, value, vec![x], ChannelAvgBackward)
            }
            PoolKind::Max => {
                let mut out = Vec::with_capacity(n * h * w);
                let mut argmax = Vec::with_capacity(n * h * w);
                let mut ties = 0;
                for (p, px) in xd.chunks(c).enumerate() {
                    let (i, t) = argmax_first(px.iter().copied().enumerate());
                    out.push(px[i]);
                    argmax.push(p * c + i);
                    ties += t;
                }
                self.note_argmax(&argmax, ties);
                let value = Tensor::from_parts(vec![n, h, w, 1], out);
                self.record(
                    OpTag::PoolChannel,
                    value,
                    vec![x],
                    ArgmaxBackward { argmax },
                )
            }
        }
    }

    /// 1-D convolution along the trailing axis with a single shared odd
    /// kernel `w: [k]`, zero padded so the length is preserved. No bias.
    pub fn conv1d_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        let k = match self.shape(w) {
            [k] => *k,
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "channel kernel must be rank 1".into(),
                })
            }
        };
        if k % 2 == 0 {
            return Err(Error::config(
                "kernel",
                format!("channel kernel size {k} must be odd"),
            ));
        }
        if k > 2 * c - 1 {
            return Err(Error::config(
                "kernel",
                format!("channel kernel size {k} exceeds 2C-1 for C={c}"),
            ));
        }
        let half = k / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); xd.len()];
        for (orow, xrow) in out.chunks_mut(c).zip(xd.chunks(c)) {
            for (o, ov) in orow.iter_mut().enumerate() {
                for (j, &wj) in wd.iter().enumerate() {
                    if let Some(i) = (o + j).checked_sub(half).filter(|&i| i < c) {
                        *ov += wj * xrow[i];
                    }
                }
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.record(
            OpTag::Conv1dChannels,
            value,
            vec![x, w],
            Conv1dBackward { channels: c, k },
        )
    }

    /// Nearest-neighbour upsampling of the spatial axes by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, h, w, c) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(Error::config("factor", "must be >= 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = ((b * h + oy / factor) * w + ox / factor) * c;
                    out.extend_from_slice(&xd[src..src + c]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, oh, ow, c], out);
        self.record(
            OpTag::UpsampleNearest,
            value,
            vec![x],
            UpsampleBackward { factor },
        )
    }
}
