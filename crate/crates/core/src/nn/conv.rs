//! 2-D convolution and transposed convolution over NHWC feature maps.
//!
//! Weights are laid out `[kh, kw, in, out]` for [`Graph::conv2d`] and
//! `[kh, kw, out, in]` for [`Graph::conv_transpose2d`], so one tensor used in
//! both positions makes the two operators adjoint.
//!
//! Batch items are processed in parallel; weight gradients are reduced over
//! the batch in index order so results do not depend on the thread count.

use rayon::prelude::*;

use super::Padding;
use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, OpTag, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    oh: usize,
    ow: usize,
    co: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    /// Top/left zero padding (conv2d) or crop (transposed conv).
    pt: usize,
    pl: usize,
}

/// Output size and leading padding of a strided convolution along one axis.
pub fn conv_output_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::InvalidShape {
                    shape: vec![input],
                    reason: format!("valid convolution needs input >= kernel {kernel}"),
                });
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// Output size and leading crop of a transposed convolution along one axis.
pub fn conv_transpose_output_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            if kernel < stride {
                return Err(Error::config(
                    "kernel",
                    format!("transposed conv kernel {kernel} smaller than stride {stride}"),
                ));
            }
            Ok((input * stride, (kernel - stride) / 2))
        }
        Padding::Valid => Ok(((input - 1) * stride + kernel, 0)),
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Input coordinate hit by output `o` through tap `k`, if inside the map.
#[inline]
fn tap(o: usize, stride: usize, k: usize, pad: usize, size: usize) -> Option<usize> {
    let pos = (o * stride + k).checked_sub(pad)?;
    (pos < size).then_some(pos)
}

fn conv2d_forward<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, g: Geometry) -> Vec<T> {
    let in_stride = g.h * g.w * g.ci;
    let out_stride = g.oh * g.ow * g.co;
    let mut out = vec![T::zero(); g.n * out_stride];
    out.par_chunks_mut(out_stride)
        .zip(x.par_chunks(in_stride))
        .for_each(|(out_n, x_n)| {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let o = &mut out_n[(oy * g.ow + ox) * g.co..][..g.co];
                    if let Some(b) = bias {
                        o.copy_from_slice(b);
                    }
                    for ky in 0..g.kh {
                        let Some(iy) = tap(oy, g.sh, ky, g.pt, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = tap(ox, g.sw, kx, g.pl, g.w) else {
                                continue;
                            };
                            let xs = &x_n[(iy * g.w + ix) * g.ci..][..g.ci];
                            let wk = &wt[(ky * g.kw + kx) * g.ci * g.co..][..g.ci * g.co];
                            for (c, &xv) in xs.iter().enumerate() {
                                axpy(o, xv, &wk[c * g.co..][..g.co]);
                            }
                        }
                    }
                }
            }
        });
    out
}

type Partials<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

fn conv2d_backward<T: Real>(
    x: &[T],
    wt: &[T],
    grad: &[T],
    g: Geometry,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_stride = g.h * g.w * g.ci;
    let out_stride = g.oh * g.ow * g.co;
    let wlen = g.kh * g.kw * g.ci * g.co;
    let parts: Vec<Partials<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * in_stride..][..in_stride];
            let g_n = &grad[n * out_stride..][..out_stride];
            let mut dx = need.0.then(|| vec![T::zero(); in_stride]);
            let mut dw = need.1.then(|| vec![T::zero(); wlen]);
            let mut db = need.2.then(|| vec![T::zero(); g.co]);
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gy = &g_n[(oy * g.ow + ox) * g.co..][..g.co];
                    if let Some(db) = &mut db {
                        for (d, &v) in db.iter_mut().zip(gy) {
                            *d += v;
                        }
                    }
                    for ky in 0..g.kh {
                        let Some(iy) = tap(oy, g.sh, ky, g.pt, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = tap(ox, g.sw, kx, g.pl, g.w) else {
                                continue;
                            };
                            let xoff = (iy * g.w + ix) * g.ci;
                            let woff = (ky * g.kw + kx) * g.ci * g.co;
                            if let Some(dx) = &mut dx {
                                let dxs = &mut dx[xoff..][..g.ci];
                                for (c, d) in dxs.iter_mut().enumerate() {
                                    *d += dot(gy, &wt[woff + c * g.co..][..g.co]);
                                }
                            }
                            if let Some(dw) = &mut dw {
                                let xs = &x_n[xoff..][..g.ci];
                                for (c, &xv) in xs.iter().enumerate() {
                                    axpy(&mut dw[woff + c * g.co..][..g.co], xv, gy);
                                }
                            }
                        }
                    }
                }
            }
            (dx, dw, db)
        })
        .collect();
    reduce_partials(parts, need)
}

fn reduce_partials<T: Real>(parts: Vec<Partials<T>>, need: (bool, bool, bool)) -> Partials<T> {
    let mut dx = need.0.then(Vec::new);
    let mut dw: Option<Vec<T>> = None;
    let mut db: Option<Vec<T>> = None;
    let sum_into = |acc: &mut Option<Vec<T>>, part: Option<Vec<T>>| {
        if let Some(p) = part {
            match acc {
                Some(a) => a.iter_mut().zip(&p).for_each(|(a, &b)| *a += b),
                None => *acc = Some(p),
            }
        }
    };
    for (px, pw, pb) in parts {
        if let (Some(dx), Some(px)) = (&mut dx, px) {
            dx.extend_from_slice(&px);
        }
        sum_into(&mut dw, pw);
        sum_into(&mut db, pb);
    }
    (dx, dw, db)
}

fn conv_t_forward<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, g: Geometry) -> Vec<T> {
    let in_stride = g.h * g.w * g.ci;
    let out_stride = g.oh * g.ow * g.co;
    let mut out = vec![T::zero(); g.n * out_stride];
    out.par_chunks_mut(out_stride)
        .zip(x.par_chunks(in_stride))
        .for_each(|(out_n, x_n)| {
            if let Some(b) = bias {
                for px in out_n.chunks_mut(g.co) {
                    px.copy_from_slice(b);
                }
            }
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let xs = &x_n[(iy * g.w + ix) * g.ci..][..g.ci];
                    for ky in 0..g.kh {
                        let Some(oy) = tap(iy, g.sh, ky, g.pt, g.oh) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ox) = tap(ix, g.sw, kx, g.pl, g.ow) else {
                                continue;
                            };
                            let o = &mut out_n[(oy * g.ow + ox) * g.co..][..g.co];
                            let wk = &wt[(ky * g.kw + kx) * g.co * g.ci..][..g.co * g.ci];
                            for (c, ov) in o.iter_mut().enumerate() {
                                *ov += dot(&wk[c * g.ci..][..g.ci], xs);
                            }
                        }
                    }
                }
            }
        });
    out
}

fn conv_t_backward<T: Real>(
    x: &[T],
    wt: &[T],
    grad: &[T],
    g: Geometry,
    need: (bool, bool, bool),
) -> Partials<T> {
    let in_stride = g.h * g.w * g.ci;
    let out_stride = g.oh * g.ow * g.co;
    let wlen = g.kh * g.kw * g.co * g.ci;
    let parts: Vec<Partials<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * in_stride..][..in_stride];
            let g_n = &grad[n * out_stride..][..out_stride];
            let mut dx = need.0.then(|| vec![T::zero(); in_stride]);
            let mut dw = need.1.then(|| vec![T::zero(); wlen]);
            let db = need.2.then(|| {
                let mut db = vec![T::zero(); g.co];
                for px in g_n.chunks(g.co) {
                    for (d, &v) in db.iter_mut().zip(px) {
                        *d += v;
                    }
                }
                db
            });
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let xoff = (iy * g.w + ix) * g.ci;
                    for ky in 0..g.kh {
                        let Some(oy) = tap(iy, g.sh, ky, g.pt, g.oh) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ox) = tap(ix, g.sw, kx, g.pl, g.ow) else {
                                continue;
                            };
                            let gy = &g_n[(oy * g.ow + ox) * g.co..][..g.co];
                            let woff = (ky * g.kw + kx) * g.co * g.ci;
                            if let Some(dx) = &mut dx {
                                let dxs = &mut dx[xoff..][..g.ci];
                                for (c, &gv) in gy.iter().enumerate() {
                                    axpy(dxs, gv, &wt[woff + c * g.ci..][..g.ci]);
                                }
                            }
                            if let Some(dw) = &mut dw {
                                let xs = &x_n[xoff..][..g.ci];
                                for (c, &gv) in gy.iter().enumerate() {
                                    axpy(&mut dw[woff + c * g.ci..][..g.ci], gv, xs);
                                }
                            }
                        }
                    }
                }
            }
            (dx, dw, db)
        })
        .collect();
    reduce_partials(parts, need)
}

struct ConvBackward {
    geo: Geometry,
    transposed: bool,
}

impl<T: Real> Backward<T> for ConvBackward {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let has_bias = ctx.inputs.len() == 3;
        let need = (ctx.needs[0], ctx.needs[1], has_bias && ctx.needs[2]);
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (dx, dw, db) = if self.transposed {
            conv_t_backward(x.data(), w.data(), ctx.grad.data(), self.geo, need)
        } else {
            conv2d_backward(x.data(), w.data(), ctx.grad.data(), self.geo, need)
        };
        let mut out = vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        ];
        if has_bias {
            out.push(db.map(|d| Tensor::from_parts(ctx.inputs[2].shape().to_vec(), d)));
        }
        Ok(out)
    }
}

impl<T: Real> Graph<T> {
    fn conv_weights(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        transposed: bool,
    ) -> Result<((usize, usize, usize, usize), (usize, usize, usize, usize))> {
        let xd = self.value(x).dims4()?;
        let ws = self.shape(w);
        let wd = match ws[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::InvalidShape {
                    shape: ws.to_vec(),
                    reason: format!("{op} weights must be rank 4"),
                })
            }
        };
        // Channel axis of the weights that must match the input.
        let (w_in, w_out) = if transposed {
            (wd.3, wd.2)
        } else {
            (wd.2, wd.3)
        };
        if w_in != xd.3 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [w_out] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: ws.to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        Ok((xd, wd))
    }

    /// Cross-correlation of `x: [n, h, w, in]` with `w: [kh, kw, in, out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let ((n, h, wd, ci), (kh, kw, _, co)) = self.conv_weights("conv2d", x, w, b, false)?;
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("stride", "must be >= 1"));
        }
        let (oh, pt) = conv_output_dim(h, kh, stride.0, padding)?;
        let (ow, pl) = conv_output_dim(wd, kw, stride.1, padding)?;
        let geo = Geometry {
            n,
            h,
            w: wd,
            ci,
            oh,
            ow,
            co,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            pt,
            pl,
        };
        let value = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geo,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record(
            OpTag::Conv2d,
            Tensor::from_parts(vec![n, oh, ow, co], value),
            parents,
            ConvBackward {
                geo,
                transposed: false,
            },
        )
    }

    /// Transposed convolution of `x: [n, h, w, in]` with `w: [kh, kw, out, in]`.
    /// With `Padding::Same` the output is exactly `stride` times larger.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let ((n, h, wd, ci), (kh, kw, co, _)) =
            self.conv_weights("conv_transpose2d", x, w, b, true)?;
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("stride", "must be >= 1"));
        }
        let (oh, pt) = conv_transpose_output_dim(h, kh, stride.0, padding)?;
        let (ow, pl) = conv_transpose_output_dim(wd, kw, stride.1, padding)?;
        let geo = Geometry {
            n,
            h,
            w: wd,
            ci,
            oh,
            ow,
            co,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            pt,
            pl,
        };
        let value = conv_t_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geo,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record(
            OpTag::ConvTranspose2d,
            Tensor::from_parts(vec![n, oh, ow, co], value),
            parents,
            ConvBackward {
                geo,
                transposed: true,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let xv = random(&[2, 3, 4, 1], &mut rng);
        let x = g.constant(xv.clone());
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros([1]));
        let y = g.conv2d(x, w, Some(b), (1, 1), Padding::Same).unwrap();
        assert_eq!(g.value(y), &xv);
        let t = g
            .conv_transpose2d(x, w, Some(b), (1, 1), Padding::Same)
            .unwrap();
        assert_eq!(g.value(t), &xv);
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 5, 5, 1]));
        let w = g.constant(Tensor::ones([3, 3, 1, 1]));
        let y = g.conv2d(x, w, None, (1, 1), Padding::Same).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 5, 5, 1]);
        assert_eq!(v.data()[2 * 5 + 2], 9.0);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[2], 6.0);
    }

    #[test]
    fn same_padding_stride_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 7, 8, 2]));
        let w = g.constant(Tensor::ones([3, 3, 2, 4]));
        let y = g.conv2d(x, w, None, (2, 2), Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 4]);
    }

    #[test]
    fn transposed_doubles() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 4, 4, 3]));
        let w = g.constant(Tensor::ones([4, 4, 2, 3]));
        let y = g
            .conv_transpose2d(x, w, None, (2, 2), Padding::Same)
            .unwrap();
        assert_eq!(g.shape(y), &[1, 8, 8, 2]);
    }

    #[test]
    fn channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 4, 4, 3]));
        let w = g.constant(Tensor::ones([3, 3, 2, 4]));
        assert!(matches!(
            g.conv2d(x, w, None, (1, 1), Padding::Same),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(g
            .conv_transpose2d(x, w, None, (1, 1), Padding::Same)
            .is_err());
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (h, k, s) in [(7, 3, 2), (6, 2, 2), (5, 3, 1), (9, 4, 1)] {
            if (h - k) % s != 0 {
                continue;
            }
            let xv = random(&[2, h, h, 3], &mut rng);
            let wv = random(&[k, k, 3, 4], &mut rng);
            let mut g = Graph::new();
            let x = g.constant(xv.clone());
            let w = g.constant(wv);
            let cx = g.conv2d(x, w, None, (s, s), Padding::Valid).unwrap();
            let yv = random(g.shape(cx), &mut rng);
            let y = g.constant(yv.clone());
            let ty = g
                .conv_transpose2d(y, w, None, (s, s), Padding::Valid)
                .unwrap();
            assert_eq!(g.shape(ty), xv.shape());
            let lhs = g.value(cx).dot(&yv).unwrap();
            let rhs = xv.dot(g.value(ty)).unwrap();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }
}
