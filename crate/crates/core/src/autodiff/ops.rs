//! Pointwise, pooling, normalisation, resampling and reduction ops.

use super::graph::{BackwardCtx, BackwardOp, Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::interp::{linear_taps, Tap};

fn same_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

struct Add;

impl<T: Scalar> BackwardOp<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![ctx.needs[0].then(|| ctx.grad_out.to_vec()), ctx.needs[1].then(|| ctx.grad_out.to_vec())]
    }
}

struct Mul;

impl<T: Scalar> BackwardOp<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let times = |other: &[T]| ctx.grad_out.iter().zip(other).map(|(&g, &o)| g * o).collect();
        vec![ctx.needs[0].then(|| times(b)), ctx.needs[1].then(|| times(a))]
    }
}

struct Relu;

impl<T: Scalar> BackwardOp<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_out.iter().zip(ctx.inputs[0].data()).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() });
        vec![Some(g.collect())]
    }
}

struct Sigmoid;

impl<T: Scalar> BackwardOp<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_out.iter().zip(ctx.output.data()).map(|(&g, &y)| g * y * (T::one() - y));
        vec![Some(g.collect())]
    }
}

/// Per-channel affine map `scale * x + shift`.
struct ChannelAffine<T> {
    scale: Vec<T>,
    spatial: usize,
}

impl<T: Scalar> BackwardOp<T> for ChannelAffine<T> {
    fn name(&self) -> &'static str {
        "frozen_batch_norm"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let c = self.scale.len();
        let mut g = ctx.grad_out.to_vec();
        for (idx, chunk) in g.chunks_mut(self.spatial).enumerate() {
            let s = self.scale[idx % c];
            chunk.iter_mut().for_each(|v| *v = *v * s);
        }
        vec![Some(g)]
    }
}

struct MaxPool {
    argmax: Vec<usize>,
    input_len: usize,
}

impl<T: Scalar> BackwardOp<T> for MaxPool {
    fn name(&self) -> &'static str {
        "max_pool3d"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.input_len];
        for (&src, &go) in self.argmax.iter().zip(ctx.grad_out) {
            g[src] = g[src] + go;
        }
        vec![Some(g)]
    }
}

/// Multiplies every channel of `x` by a single-channel gate.
struct GateMul {
    channels: usize,
    spatial: usize,
}

impl<T: Scalar> BackwardOp<T> for GateMul {
    fn name(&self) -> &'static str {
        "gate_mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, a) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (c, sp) = (self.channels, self.spatial);
        let gx = ctx.needs[0].then(|| {
            let mut g = ctx.grad_out.to_vec();
            for (idx, chunk) in g.chunks_mut(sp).enumerate() {
                let gate = &a[(idx / c) * sp..][..sp];
                chunk.iter_mut().zip(gate).for_each(|(v, &w)| *v = *v * w);
            }
            g
        });
        let ga = ctx.needs[1].then(|| {
            let mut g = vec![T::zero(); a.len()];
            for (idx, (go, xv)) in ctx.grad_out.chunks(sp).zip(x.chunks(sp)).enumerate() {
                let dst = &mut g[(idx / c) * sp..][..sp];
                for ((d, &go), &xv) in dst.iter_mut().zip(go).zip(xv) {
                    *d = *d + go * xv;
                }
            }
            g
        });
        vec![gx, ga]
    }
}

struct Concat {
    a_channels: usize,
    b_channels: usize,
    spatial: usize,
}

impl<T: Scalar> BackwardOp<T> for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (ca, cb, sp) = (self.a_channels, self.b_channels, self.spatial);
        let mut ga = Vec::with_capacity(ctx.inputs[0].len());
        let mut gb = Vec::with_capacity(ctx.inputs[1].len());
        for sample in ctx.grad_out.chunks((ca + cb) * sp) {
            ga.extend_from_slice(&sample[..ca * sp]);
            gb.extend_from_slice(&sample[ca * sp..]);
        }
        vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gb)]
    }
}

/// Linear resampling along one axis of a tensor viewed as `outer x len x inner`.
fn resample_axis<T: Scalar>(data: &[T], outer: usize, len: usize, inner: usize, taps: &[Tap]) -> Vec<T> {
    let out_len = taps.len();
    let mut out = vec![T::zero(); outer * out_len * inner];
    for o in 0..outer {
        let src = &data[o * len * inner..][..len * inner];
        let dst = &mut out[o * out_len * inner..][..out_len * inner];
        for (i, t) in taps.iter().enumerate() {
            let (wl, wh) = (T::of(1.0 - t.frac), T::of(t.frac));
            let (lo, hi) = (&src[t.lo * inner..][..inner], &src[t.hi * inner..][..inner]);
            for ((d, &a), &b) in dst[i * inner..][..inner].iter_mut().zip(lo).zip(hi) {
                *d = wl * a + wh * b;
            }
        }
    }
    out
}

/// Transpose of [`resample_axis`].
fn resample_axis_adjoint<T: Scalar>(grad: &[T], outer: usize, len: usize, inner: usize, taps: &[Tap]) -> Vec<T> {
    let out_len = taps.len();
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src = &grad[o * out_len * inner..][..out_len * inner];
        let dst = &mut out[o * len * inner..][..len * inner];
        for (i, t) in taps.iter().enumerate() {
            let (wl, wh) = (T::of(1.0 - t.frac), T::of(t.frac));
            let g = &src[i * inner..][..inner];
            for (j, &gv) in g.iter().enumerate() {
                dst[t.lo * inner + j] = dst[t.lo * inner + j] + wl * gv;
                dst[t.hi * inner + j] = dst[t.hi * inner + j] + wh * gv;
            }
        }
    }
    out
}

struct Upsample {
    nc: usize,
    from: [usize; 3],
    taps: [Vec<Tap>; 3],
}

impl Upsample {
    /// `(outer, inner)` around axis `a` for the tensor after axes `< a` are resampled.
    fn layout(&self, a: usize) -> (usize, usize) {
        let to: [usize; 3] = [self.taps[0].len(), self.taps[1].len(), self.taps[2].len()];
        let sizes: Vec<usize> = (0..3).map(|i| if i < a { to[i] } else { self.from[i] }).collect();
        let outer = self.nc * sizes[..a].iter().product::<usize>();
        let inner = sizes[a + 1..].iter().product();
        (outer, inner)
    }

    fn forward<T: Scalar>(&self, data: &[T]) -> Vec<T> {
        let mut v = data.to_vec();
        for a in 0..3 {
            let (outer, inner) = self.layout(a);
            v = resample_axis(&v, outer, self.from[a], inner, &self.taps[a]);
        }
        v
    }
}

impl<T: Scalar> BackwardOp<T> for Upsample {
    fn name(&self) -> &'static str {
        "upsample_trilinear"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut g = ctx.grad_out.to_vec();
        for a in (0..3).rev() {
            let (outer, inner) = self.layout(a);
            g = resample_axis_adjoint(&g, outer, self.from[a], inner, &self.taps[a]);
        }
        vec![Some(g)]
    }
}

struct Sum {
    scale: f64,
}

impl<T: Scalar> BackwardOp<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![ctx.grad_out[0] * T::of(self.scale); ctx.inputs[0].len()])]
    }
}

/// Frozen batch-norm statistics and affine parameters, one entry per channel.
pub struct BatchNormParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims(self.value(a), self.value(b), "add")?;
        let y: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(self.value(a).dims().to_vec(), y)?;
        Ok(self.push_op(&[a, b], y, Box::new(Add)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims(self.value(a), self.value(b), "mul")?;
        let y: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(self.value(a).dims().to_vec(), y)?;
        Ok(self.push_op(&[a, b], y, Box::new(Mul)))
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = Tensor::new(v.dims().to_vec(), v.data().iter().map(|&x| x.max(T::zero())).collect()).unwrap();
        self.push_op(&[x], y, Box::new(Relu))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = v.data().iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect();
        let y = Tensor::new(v.dims().to_vec(), y).unwrap();
        self.push_op(&[x], y, Box::new(Sigmoid))
    }

    /// Inference-mode batch norm with fixed statistics:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`. Only `x` is differentiated.
    pub fn frozen_batch_norm(&mut self, x: Var, p: &BatchNormParams<'_, T>) -> Result<Var> {
        let d = self.value(x).dims5()?;
        let c = d[1];
        if [p.gamma.len(), p.beta.len(), p.running_mean.len(), p.running_var.len()].iter().any(|&l| l != c) {
            return Err(Error::ShapeMismatch(format!("batch norm parameters do not have {c} channels")));
        }
        let eps = T::of(BATCH_NORM_EPS);
        let scale: Vec<T> = (0..c).map(|i| p.gamma[i] / (p.running_var[i] + eps).sqrt()).collect();
        let shift: Vec<T> = (0..c).map(|i| p.beta[i] - scale[i] * p.running_mean[i]).collect();
        let spatial = d[2] * d[3] * d[4];
        let mut y = self.value(x).data().to_vec();
        for (idx, chunk) in y.chunks_mut(spatial).enumerate() {
            let (s, b) = (scale[idx % c], shift[idx % c]);
            chunk.iter_mut().for_each(|v| *v = s * *v + b);
        }
        let y = Tensor::new(d.to_vec(), y)?;
        Ok(self.push_op(&[x], y, Box::new(ChannelAffine { scale, spatial })))
    }

    /// 2x2x2 max pooling with stride 2. Ties go to the first voxel in
    /// depth-row-column order. All spatial dims must be even.
    pub fn max_pool3d(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).dims5()?;
        for (axis, &len) in d[2..].iter().enumerate() {
            if len % 2 != 0 {
                return Err(Error::Indivisible { dim: ["depth", "height", "width"][axis], len, divisor: 2 });
            }
        }
        let (id, ih, iw) = (d[2], d[3], d[4]);
        let (od, oh, ow) = (id / 2, ih / 2, iw / 2);
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(d[0] * d[1] * od * oh * ow);
        let mut argmax = Vec::with_capacity(y.capacity());
        for nc in 0..d[0] * d[1] {
            let base = nc * id * ih * iw;
            for z in 0..od {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut best = base + ((2 * z) * ih + 2 * r) * iw + 2 * c;
                        for (dz, dr, dc) in (0..8).map(|k| (k >> 2, (k >> 1) & 1, k & 1)) {
                            let at = base + ((2 * z + dz) * ih + 2 * r + dr) * iw + 2 * c + dc;
                            if src[at] > src[best] {
                                best = at;
                            }
                        }
                        y.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let y = Tensor::new([d[0], d[1], od, oh, ow], y)?;
        let input_len = self.value(x).len();
        Ok(self.push_op(&[x], y, Box::new(MaxPool { argmax, input_len })))
    }

    /// `x * gate` where `gate` has one channel broadcast over the channels of `x`.
    pub fn gate_mul(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xd = self.value(x).dims5()?;
        let gd = self.value(gate).dims5()?;
        if gd[1] != 1 || gd[0] != xd[0] || gd[2..] != xd[2..] {
            return Err(Error::ShapeMismatch(format!("gate {gd:?} does not broadcast over {xd:?}")));
        }
        let (c, sp) = (xd[1], xd[2] * xd[3] * xd[4]);
        let a = self.value(gate).data();
        let mut y = self.value(x).data().to_vec();
        for (idx, chunk) in y.chunks_mut(sp).enumerate() {
            let g = &a[(idx / c) * sp..][..sp];
            chunk.iter_mut().zip(g).for_each(|(v, &w)| *v = *v * w);
        }
        let y = Tensor::new(xd.to_vec(), y)?;
        Ok(self.push_op(&[x, gate], y, Box::new(GateMul { channels: c, spatial: sp })))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.value(a).dims5()?;
        let bd = self.value(b).dims5()?;
        if ad[0] != bd[0] || ad[2..] != bd[2..] {
            return Err(Error::ShapeMismatch(format!("cannot concatenate {ad:?} with {bd:?}")));
        }
        let sp = ad[2] * ad[3] * ad[4];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(va.len() + vb.len());
        for n in 0..ad[0] {
            y.extend_from_slice(&va[n * ad[1] * sp..][..ad[1] * sp]);
            y.extend_from_slice(&vb[n * bd[1] * sp..][..bd[1] * sp]);
        }
        let y = Tensor::new([ad[0], ad[1] + bd[1], ad[2], ad[3], ad[4]], y)?;
        Ok(self.push_op(&[a, b], y, Box::new(Concat { a_channels: ad[1], b_channels: bd[1], spatial: sp })))
    }

    /// Trilinear resampling to `size` with half-pixel centres (corners not aligned).
    pub fn upsample_trilinear(&mut self, x: Var, size: [usize; 3]) -> Result<Var> {
        let d = self.value(x).dims5()?;
        if size.contains(&0) {
            return Err(Error::invalid("size", "target size must be positive"));
        }
        let op = Upsample {
            nc: d[0] * d[1],
            from: [d[2], d[3], d[4]],
            taps: [linear_taps(d[2], size[0]), linear_taps(d[3], size[1]), linear_taps(d[4], size[2])],
        };
        let y = Tensor::new([d[0], d[1], size[0], size[1], size[2]], op.forward(self.value(x).data()))?;
        Ok(self.push_op(&[x], y, Box::new(op)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push_op(&[x], Tensor::scalar(s), Box::new(Sum { scale: 1.0 }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s: T = self.value(x).data().iter().copied().sum();
        self.push_op(&[x], Tensor::scalar(s / T::of(n)), Box::new(Sum { scale: 1.0 / n }))
    }
}
