//! 3-D convolution and transposed convolution.
//!
//! Conv weights are laid out `out x in x kd x kh x kw`; transposed-conv
//! weights `in x out x kd x kh x kw`. With that layout a transposed conv is
//! exactly the adjoint of the conv sharing its weight array, so the same
//! three kernels serve both ops.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{BackwardCtx, BackwardOp, Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub bias: bool,
}

impl ConvSpec {
    /// Cubic kernel `k`, stride `s`, padding `p` on every axis.
    pub fn cube(in_channels: usize, out_channels: usize, k: usize, s: usize, p: usize, bias: bool) -> Self {
        Self { in_channels, out_channels, kernel: [k; 3], stride: [s; 3], padding: [p; 3], bias }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channels", "must be at least 1"));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::invalid("kernel", "kernel and stride entries must be at least 1"));
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Dims of the conv weight array.
    pub fn weight_dims(&self) -> [usize; 5] {
        let [a, b, c] = self.kernel;
        [self.out_channels, self.in_channels, a, b, c]
    }

    /// Dims of the transposed-conv weight array.
    pub fn transposed_weight_dims(&self) -> [usize; 5] {
        let [a, b, c] = self.kernel;
        [self.in_channels, self.out_channels, a, b, c]
    }

    pub fn conv_output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "kernel {:?} does not fit input {:?} with padding {:?}",
                    self.kernel, input, self.padding
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `(d - 1) * s - 2p + k` per axis.
    pub fn transposed_output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * self.stride[a] + self.kernel[a];
            if input[a] == 0 || full <= 2 * self.padding[a] {
                return Err(Error::ShapeMismatch(format!(
                    "transposed conv with kernel {:?} and padding {:?} collapses input {:?}",
                    self.kernel, self.padding, input
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

/// Geometry in conv terms: `wide` is the conv input side, `narrow` the conv
/// output side. For a transposed conv the roles swap.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    wide_ch: usize,
    narrow_ch: usize,
    wide: [usize; 3],
    narrow: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
}

impl Geom {
    fn wide_len(&self) -> usize {
        self.wide.iter().product()
    }
    fn narrow_len(&self) -> usize {
        self.narrow.iter().product()
    }
    fn taps(&self) -> usize {
        self.k.iter().product()
    }
}

/// Narrow positions `o` whose tap `i = o*s + k - p` lands inside `[0, n_wide)`.
#[inline]
fn valid_range(k: usize, s: usize, p: usize, n_wide: usize, n_narrow: usize) -> (usize, usize) {
    if k > n_wide - 1 + p {
        return (0, 0);
    }
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = ((n_wide - 1 + p - k) / s + 1).min(n_narrow);
    (lo.min(hi), hi)
}

/// Visits every (tap, narrow row) pair with its wide row. The callback gets
/// the tap index, narrow row start, wide row start, the first valid narrow
/// column, and the number of valid columns.
#[inline]
fn for_each_row(g: &Geom, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [kd, kh, kw] = g.k;
    let [wd, wh, ww] = g.wide;
    let [nd, nh, nw] = g.narrow;
    for a in 0..kd {
        let (d0, d1) = valid_range(a, g.s[0], g.p[0], wd, nd);
        for b in 0..kh {
            let (h0, h1) = valid_range(b, g.s[1], g.p[1], wh, nh);
            for c in 0..kw {
                let (w0, w1) = valid_range(c, g.s[2], g.p[2], ww, nw);
                if d0 >= d1 || h0 >= h1 || w0 >= w1 {
                    continue;
                }
                let tap = (a * kh + b) * kw + c;
                for od in d0..d1 {
                    let id = od * g.s[0] + a - g.p[0];
                    for oh in h0..h1 {
                        let ih = oh * g.s[1] + b - g.p[1];
                        let iw0 = w0 * g.s[2] + c - g.p[2];
                        f(tap, (od * nh + oh) * nw, (id * wh + ih) * ww + iw0, w0, w1 - w0);
                    }
                }
            }
        }
    }
}

/// narrow[n, o] = sum over wide channels and taps of w[o, i, tap] * wide[n, i, ...].
fn correlate<T: Scalar>(g: &Geom, wide: &[T], w: &[T]) -> Vec<T> {
    let (wl, nl, taps) = (g.wide_len(), g.narrow_len(), g.taps());
    let sw = g.s[2];
    let mut out = vec![T::zero(); g.batch * g.narrow_ch * nl];
    out.par_chunks_mut(nl).enumerate().for_each(|(idx, out_c)| {
        let (n, o) = (idx / g.narrow_ch, idx % g.narrow_ch);
        for i in 0..g.wide_ch {
            let src = &wide[(n * g.wide_ch + i) * wl..][..wl];
            let wk = &w[(o * g.wide_ch + i) * taps..][..taps];
            for_each_row(g, |tap, orow, irow, w0, len| {
                let wv = wk[tap];
                let dst = &mut out_c[orow + w0..orow + w0 + len];
                if sw == 1 {
                    for (d, &x) in dst.iter_mut().zip(&src[irow..irow + len]) {
                        *d = *d + wv * x;
                    }
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = *d + wv * src[irow + j * sw];
                    }
                }
            });
        }
    });
    out
}

/// Adjoint of [`correlate`] with respect to its wide input.
fn scatter<T: Scalar>(g: &Geom, narrow: &[T], w: &[T]) -> Vec<T> {
    let (wl, nl, taps) = (g.wide_len(), g.narrow_len(), g.taps());
    let sw = g.s[2];
    let mut out = vec![T::zero(); g.batch * g.wide_ch * wl];
    out.par_chunks_mut(wl).enumerate().for_each(|(idx, out_c)| {
        let (n, i) = (idx / g.wide_ch, idx % g.wide_ch);
        for o in 0..g.narrow_ch {
            let src = &narrow[(n * g.narrow_ch + o) * nl..][..nl];
            let wk = &w[(o * g.wide_ch + i) * taps..][..taps];
            for_each_row(g, |tap, orow, irow, w0, len| {
                let wv = wk[tap];
                let s = &src[orow + w0..orow + w0 + len];
                if sw == 1 {
                    for (d, &y) in out_c[irow..irow + len].iter_mut().zip(s) {
                        *d = *d + wv * y;
                    }
                } else {
                    for (j, &y) in s.iter().enumerate() {
                        let d = &mut out_c[irow + j * sw];
                        *d = *d + wv * y;
                    }
                }
            });
        }
    });
    out
}

/// Gradient of [`correlate`] with respect to its weights.
fn weight_grad<T: Scalar>(g: &Geom, wide: &[T], narrow: &[T]) -> Vec<T> {
    let (wl, nl, taps) = (g.wide_len(), g.narrow_len(), g.taps());
    let sw = g.s[2];
    let mut out = vec![T::zero(); g.narrow_ch * g.wide_ch * taps];
    out.par_chunks_mut(g.wide_ch * taps).enumerate().for_each(|(o, gw)| {
        for n in 0..g.batch {
            let gy = &narrow[(n * g.narrow_ch + o) * nl..][..nl];
            for i in 0..g.wide_ch {
                let x = &wide[(n * g.wide_ch + i) * wl..][..wl];
                let acc = &mut gw[i * taps..][..taps];
                for_each_row(g, |tap, orow, irow, w0, len| {
                    let ys = &gy[orow + w0..orow + w0 + len];
                    let mut s = T::zero();
                    if sw == 1 {
                        for (&a, &b) in ys.iter().zip(&x[irow..irow + len]) {
                            s = s + a * b;
                        }
                    } else {
                        for (j, &a) in ys.iter().enumerate() {
                            s = s + a * x[irow + j * sw];
                        }
                    }
                    acc[tap] = acc[tap] + s;
                });
            }
        }
    });
    out
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], spatial: usize) {
    let c = bias.len();
    for (idx, chunk) in y.chunks_mut(spatial).enumerate() {
        let b = bias[idx % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Scalar>(gy: &[T], channels: usize, spatial: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (idx, chunk) in gy.chunks(spatial).enumerate() {
        gb[idx % channels] = gb[idx % channels] + chunk.iter().copied().sum();
    }
    gb
}

fn check_operands<T: Scalar>(
    spec: &ConvSpec,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    transposed: bool,
) -> Result<[usize; 5]> {
    spec.validate()?;
    let xd = x.dims5()?;
    let (expected_w, in_ch, out_ch) = if transposed {
        (spec.transposed_weight_dims(), spec.in_channels, spec.out_channels)
    } else {
        (spec.weight_dims(), spec.in_channels, spec.out_channels)
    };
    if xd[1] != in_ch {
        return Err(Error::ShapeMismatch(format!("input has {} channels, layer expects {in_ch}", xd[1])));
    }
    if w.dims() != expected_w {
        return Err(Error::ShapeMismatch(format!("weight dims {:?}, expected {:?}", w.dims(), expected_w)));
    }
    match (b, spec.bias) {
        (Some(b), true) if b.dims() == [out_ch] => {}
        (None, false) => {}
        _ => return Err(Error::ShapeMismatch("bias presence or length disagrees with the layer".into())),
    }
    Ok(xd)
}

/// Forward conv on raw tensors, no tape.
pub fn conv3d_forward<T: Scalar>(spec: &ConvSpec, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xd = check_operands(spec, x, w, b, false)?;
    let narrow = spec.conv_output_spatial([xd[2], xd[3], xd[4]])?;
    let g = conv_geom(spec, xd[0], [xd[2], xd[3], xd[4]], narrow);
    let mut y = correlate(&g, x.data(), w.data());
    if let Some(b) = b {
        add_bias(&mut y, b.data(), g.narrow_len());
    }
    Tensor::new([xd[0], spec.out_channels, narrow[0], narrow[1], narrow[2]], y)
}

/// Forward transposed conv on raw tensors, no tape.
pub fn conv_transpose3d_forward<T: Scalar>(
    spec: &ConvSpec,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let xd = check_operands(spec, x, w, b, true)?;
    let wide = spec.transposed_output_spatial([xd[2], xd[3], xd[4]])?;
    let g = transposed_geom(spec, xd[0], wide, [xd[2], xd[3], xd[4]]);
    let mut y = scatter(&g, x.data(), w.data());
    if let Some(b) = b {
        add_bias(&mut y, b.data(), g.wide_len());
    }
    Tensor::new([xd[0], spec.out_channels, wide[0], wide[1], wide[2]], y)
}

fn conv_geom(spec: &ConvSpec, batch: usize, wide: [usize; 3], narrow: [usize; 3]) -> Geom {
    Geom {
        batch,
        wide_ch: spec.in_channels,
        narrow_ch: spec.out_channels,
        wide,
        narrow,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
    }
}

fn transposed_geom(spec: &ConvSpec, batch: usize, wide: [usize; 3], narrow: [usize; 3]) -> Geom {
    Geom {
        batch,
        wide_ch: spec.out_channels,
        narrow_ch: spec.in_channels,
        wide,
        narrow,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
    }
}

struct ConvBackward {
    geom: Geom,
    bias: bool,
}

impl<T: Scalar> BackwardOp<T> for ConvBackward {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let mut grads = vec![
            ctx.needs[0].then(|| scatter(g, ctx.grad_out, w)),
            ctx.needs[1].then(|| weight_grad(g, x, ctx.grad_out)),
        ];
        if self.bias {
            grads.push(ctx.needs[2].then(|| bias_grad(ctx.grad_out, g.narrow_ch, g.narrow_len())));
        }
        grads
    }
}

struct ConvTransposeBackward {
    geom: Geom,
    bias: bool,
}

impl<T: Scalar> BackwardOp<T> for ConvTransposeBackward {
    fn name(&self) -> &'static str {
        "conv_transpose3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let mut grads = vec![
            ctx.needs[0].then(|| correlate(g, ctx.grad_out, w)),
            ctx.needs[1].then(|| weight_grad(g, ctx.grad_out, x)),
        ];
        if self.bias {
            grads.push(ctx.needs[2].then(|| bias_grad(ctx.grad_out, g.wide_ch, g.wide_len())));
        }
        grads
    }
}

impl<T: Scalar> Graph<T> {
    pub fn conv3d(&mut self, spec: &ConvSpec, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = conv3d_forward(spec, self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let d = y.dims5()?;
        let xd = self.value(x).dims5()?;
        let geom = conv_geom(spec, xd[0], [xd[2], xd[3], xd[4]], [d[2], d[3], d[4]]);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(&inputs, y, Box::new(ConvBackward { geom, bias: b.is_some() })))
    }

    pub fn conv_transpose3d(&mut self, spec: &ConvSpec, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = conv_transpose3d_forward(spec, self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let d = y.dims5()?;
        let xd = self.value(x).dims5()?;
        let geom = transposed_geom(spec, xd[0], [d[2], d[3], d[4]], [xd[2], xd[3], xd[4]]);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(&inputs, y, Box::new(ConvTransposeBackward { geom, bias: b.is_some() })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct evaluation of the conv sum with explicit bounds checks.
    fn naive_conv(spec: &ConvSpec, x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
        let [n, ci, d, h, wd] = x.dims5().unwrap();
        let [od, oh, ow] = spec.conv_output_spatial([d, h, wd]).unwrap();
        let co = spec.out_channels;
        let [kd, kh, kw] = spec.kernel;
        let mut y = Tensor::zeros(vec![n, co, od, oh, ow]);
        for bn in 0..n {
            for o in 0..co {
                for z in 0..od {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut s = b.map_or(0.0, |b| b.data()[o]);
                            for i in 0..ci {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for cc in 0..kw {
                                            let iz = (z * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                                            let ir = (r * spec.stride[1] + bb) as isize - spec.padding[1] as isize;
                                            let ic = (c * spec.stride[2] + cc) as isize - spec.padding[2] as isize;
                                            if iz < 0 || ir < 0 || ic < 0 || iz >= d as isize || ir >= h as isize || ic >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((bn * ci + i) * d + iz as usize) * h + ir as usize) * wd + ic as usize;
                                            let wi = (((o * ci + i) * kd + a) * kh + bb) * kw + cc;
                                            s += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            y.data_mut()[(((bn * co + o) * od + z) * oh + r) * ow + c] = s;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (ConvSpec::cube(2, 3, 3, 1, 1, true), [1, 2, 4, 5, 6]),
            (ConvSpec::cube(1, 2, 2, 2, 0, false), [2, 1, 4, 4, 6]),
            (
                ConvSpec { in_channels: 2, out_channels: 2, kernel: [1, 3, 2], stride: [1, 2, 3], padding: [0, 1, 1], bias: true },
                [1, 2, 3, 7, 8],
            ),
        ];
        for (spec, xd) in cases {
            let x = random(&xd, &mut rng);
            let w = random(&spec.weight_dims(), &mut rng);
            let b = spec.bias.then(|| random(&[spec.out_channels], &mut rng));
            let fast = conv3d_forward(&spec, &x, &w, b.as_ref()).unwrap();
            let slow = naive_conv(&spec, &x, &w, b.as_ref());
            assert_eq!(fast.dims(), slow.dims());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_tap_cases() {
        let spec = ConvSpec::cube(1, 1, 1, 1, 0, false);
        let mut g = Graph::<f64>::new();
        let x = g.parameter(Tensor::new([1, 1, 1, 1, 1], vec![2.0]).unwrap());
        let w = g.parameter(Tensor::new([1, 1, 1, 1, 1], vec![3.0]).unwrap());
        let y = g.conv3d(&spec, x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0]);
        assert_eq!(g.grad(x).unwrap(), &[3.0]);

        let up = ConvSpec::cube(1, 1, 2, 2, 0, false);
        let one = Tensor::new([1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let ones = Tensor::full(vec![1, 1, 2, 2, 2], 1.0);
        let y = conv_transpose3d_forward(&up, &one, &ones, None).unwrap();
        assert_eq!(y, Tensor::full(vec![1, 1, 2, 2, 2], 1.0));

        assert!(ConvSpec::cube(1, 1, 0, 1, 0, false).validate().is_err());
        assert!(ConvSpec::cube(1, 1, 1, 0, 0, false).validate().is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::cube(2, 2, 3, 1, 1, true);
        let mut g = Graph::new();
        let x = g.parameter(random(&[1, 2, 3, 3, 3], &mut rng));
        let w = g.parameter(random(&spec.weight_dims(), &mut rng));
        let b = g.parameter(random(&[2], &mut rng));
        let y = g.conv3d(&spec, x, w, Some(b)).unwrap();
        g.backward_with(y, vec![0.0; 54]).unwrap();
        for v in [x, w, b] {
            assert!(g.grad(v).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let spec = ConvSpec::cube(1, 1, 3, 1, 1, false);
        let x = Tensor::from_fn(vec![1, 1, 3, 3, 3], |i| i as f64);
        let mut w = Tensor::zeros(spec.weight_dims().to_vec());
        w.data_mut()[13] = 1.0;
        assert_eq!(conv3d_forward(&spec, &x, &w, None).unwrap(), x);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (k, s, p, xd) in [(2, 2, 0, [1, 2, 4, 6, 8]), (3, 1, 1, [2, 2, 3, 4, 5]), (3, 2, 1, [1, 2, 5, 5, 7])] {
            let conv = ConvSpec::cube(2, 3, k, s, p, false);
            let x = random(&xd, &mut rng);
            let w = random(&conv.weight_dims(), &mut rng);
            let y = conv3d_forward(&conv, &x, &w, None).unwrap();
            let v = random(y.dims(), &mut rng);
            // The transposed layer maps 3 channels back to 2 with the same array.
            let tspec = ConvSpec::cube(3, 2, k, s, p, false);
            let xd2 = [xd[2], xd[3], xd[4]];
            assert_eq!(tspec.transposed_output_spatial([y.dims()[2], y.dims()[3], y.dims()[4]]).unwrap(), xd2);
            let atv = conv_transpose3d_forward(&tspec, &v, &w, None).unwrap();
            let lhs = y.dot(&v);
            let rhs = x.dot(&atv);
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn transposed_output_size() {
        let spec = ConvSpec::cube(4, 2, 2, 2, 0, true);
        assert_eq!(spec.transposed_output_spatial([2, 4, 4]).unwrap(), [4, 8, 8]);
        let spec = ConvSpec::cube(4, 2, 3, 2, 1, true);
        assert_eq!(spec.transposed_output_spatial([2, 4, 4]).unwrap(), [3, 7, 7]);
    }

    #[test]
    fn rejects_mismatched_operands() {
        let spec = ConvSpec::cube(2, 3, 3, 1, 1, true);
        let x = Tensor::<f64>::zeros(vec![1, 1, 4, 4, 4]);
        let w = Tensor::zeros(spec.weight_dims().to_vec());
        let b = Tensor::zeros(vec![3]);
        assert!(conv3d_forward(&spec, &x, &w, Some(&b)).is_err());
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4, 4]);
        assert!(conv3d_forward(&spec, &x, &w, None).is_err());
        assert!(conv3d_forward(&spec, &x, &w, Some(&b)).is_ok());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for spec in [ConvSpec::cube(2, 3, 3, 1, 1, true), ConvSpec::cube(2, 2, 2, 2, 0, false)] {
            let mut inputs = vec![random(&[1, 2, 4, 4, 4], &mut rng), random(&spec.weight_dims(), &mut rng)];
            if spec.bias {
                inputs.push(random(&[spec.out_channels], &mut rng));
            }
            let report = check_gradients(&inputs, &GradCheckConfig::default(), |g, v| g.conv3d(&spec, v[0], v[1], v.get(2).copied()))
                .unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn transposed_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = ConvSpec::cube(3, 2, 2, 2, 0, true);
        let inputs = vec![
            random(&[1, 3, 2, 3, 2], &mut rng),
            random(&spec.transposed_weight_dims(), &mut rng),
            random(&[2], &mut rng),
        ];
        let report =
            check_gradients(&inputs, &GradCheckConfig::default(), |g, v| g.conv_transpose3d(&spec, v[0], v[1], Some(v[2])))
                .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn parallel_kernels_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::cube(4, 4, 3, 1, 1, true);
        let x: Tensor<f32> = random(&[1, 4, 6, 6, 6], &mut rng).cast();
        let w: Tensor<f32> = random(&spec.weight_dims(), &mut rng).cast();
        let b: Tensor<f32> = random(&[4], &mut rng).cast();
        let run = || {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.parameter(x.clone()), g.parameter(w.clone()), g.parameter(b.clone()));
            let y = g.conv3d(&spec, xv, wv, Some(bv)).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            (g.value(y).clone(), g.grad(wv).unwrap().to_vec(), g.grad(xv).unwrap().to_vec())
        };
        let first = run();
        for _ in 0..3 {
            let again = run();
            assert!(first.0.data().iter().zip(again.0.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(first.1.iter().zip(&again.1).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(first.2.iter().zip(&again.2).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
