//! Layers and blocks of the network, each owning ids into a [`ParamStore`].

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{BatchNormParams, ConvSpec, Graph, Scalar, Tensor, Var};
use crate::error::Result;

/// Uniform in `±gain * sqrt(6 / fan_in)`, where `fan_in` counts the inputs
/// feeding one output voxel.
fn he_uniform<T: Scalar>(dims: [usize; 5], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(dims.to_vec(), |_| T::of(gain * rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub transposed: bool,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        Self::build(store, name, spec, false, 1.0, rng)
    }

    /// Like [`ConvLayer::new`] with the weight bound multiplied by `gain`.
    pub fn with_gain<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, gain: f64, rng: &mut impl Rng) -> Self {
        Self::build(store, name, spec, false, gain, rng)
    }

    pub fn transposed<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        Self::build(store, name, spec, true, 1.0, rng)
    }

    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        transposed: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let (dims, fan_in) = if transposed {
            let per_axis: usize = (0..3).map(|a| spec.kernel[a].div_ceil(spec.stride[a])).product();
            (spec.transposed_weight_dims(), spec.in_channels * per_axis)
        } else {
            (spec.weight_dims(), spec.in_channels * spec.kernel_volume())
        };
        let weight = store.add(format!("{name}.weight"), he_uniform(dims, fan_in, gain, rng), true);
        let bias = spec.bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![spec.out_channels]), true));
        Self { spec, transposed, weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.weight), self.bias.map(|b| p.var(b)));
        if self.transposed {
            g.conv_transpose3d(&self.spec, x, w, b)
        } else {
            g.conv3d(&self.spec, x, w, b)
        }
    }
}

/// Frozen batch norm; all four vectors are non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BnLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let mut buffer = |field: &str, v: f64| store.add(format!("{name}.{field}"), Tensor::full(vec![channels], T::of(v)), false);
        Self { gamma: buffer("gamma", 1.0), beta: buffer("beta", 0.0), mean: buffer("running_mean", 0.0), var: buffer("running_var", 1.0) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let bn = BatchNormParams {
            gamma: p.value(self.gamma),
            beta: p.value(self.beta),
            running_mean: p.value(self.mean),
            running_var: p.value(self.var),
        };
        g.frozen_batch_norm(x, &bn)
    }
}

/// 3x3x3 conv (stride 1, padding 1), frozen BN, ReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: ConvLayer,
    pub bn: BnLayer,
}

impl ConvUnit {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let conv = ConvLayer::new(store, &format!("{name}.conv"), ConvSpec::cube(in_ch, out_ch, 3, 1, 1, true), rng);
        let bn = BnLayer::new(store, &format!("{name}.bn"), out_ch);
        Self { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.bn.forward(g, p, y)?;
        Ok(g.relu(y))
    }
}

/// Residual block: 1x1x1 reduce to half the channels, 3x3x3, 1x1x1 restore,
/// each followed by frozen BN; ReLU after the first two and after the
/// shortcut add.
/// Weight gain of the restoring conv; small values keep each residual block
/// close to the identity at initialisation.
pub const RESTORE_GAIN: f64 = 0.0;

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: ConvLayer,
    pub bn1: BnLayer,
    pub mid: ConvLayer,
    pub bn2: BnLayer,
    pub restore: ConvLayer,
    pub bn3: BnLayer,
}

impl Bottleneck {
    pub fn reduced_channels(channels: usize) -> usize {
        (channels / 2).max(1)
    }

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let r = Self::reduced_channels(channels);
        let reduce = ConvLayer::new(store, &format!("{name}.reduce"), ConvSpec::cube(channels, r, 1, 1, 0, true), rng);
        let bn1 = BnLayer::new(store, &format!("{name}.bn1"), r);
        let mid = ConvLayer::new(store, &format!("{name}.mid"), ConvSpec::cube(r, r, 3, 1, 1, true), rng);
        let bn2 = BnLayer::new(store, &format!("{name}.bn2"), r);
        let restore = ConvLayer::with_gain(store, &format!("{name}.restore"), ConvSpec::cube(r, channels, 1, 1, 0, true), RESTORE_GAIN, rng);
        let bn3 = BnLayer::new(store, &format!("{name}.bn3"), channels);
        Self { reduce, bn1, mid, bn2, restore, bn3 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(g, p, x)?;
        let y = self.bn1.forward(g, p, y)?;
        let y = g.relu(y);
        let y = self.mid.forward(g, p, y)?;
        let y = self.bn2.forward(g, p, y)?;
        let y = g.relu(y);
        let y = self.restore.forward(g, p, y)?;
        let y = self.bn3.forward(g, p, y)?;
        let y = g.add(y, x)?;
        Ok(g.relu(y))
    }
}

/// Additive attention gate with a third, lower-level input.
///
/// `a = ReLU(up2(Wg g) + Wx x + Wl l)`, `alpha = sigmoid(psi(a))`, output
/// `x * alpha`. `g` is at half the resolution of `x` and `l`. `Wg` and `Wl`
/// have no bias; the shared bias sits on `Wx`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wg: ConvLayer,
    pub wx: ConvLayer,
    pub wl: ConvLayer,
    pub psi: ConvLayer,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        skip_ch: usize,
        gate_ch: usize,
        lower_ch: usize,
        divisor: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let inter = (skip_ch / divisor.max(1)).max(1);
        Self {
            wg: ConvLayer::new(store, &format!("{name}.wg"), ConvSpec::cube(gate_ch, inter, 1, 1, 0, false), rng),
            wx: ConvLayer::new(store, &format!("{name}.wx"), ConvSpec::cube(skip_ch, inter, 1, 1, 0, true), rng),
            wl: ConvLayer::new(store, &format!("{name}.wl"), ConvSpec::cube(lower_ch, inter, 1, 1, 0, false), rng),
            psi: ConvLayer::new(store, &format!("{name}.psi"), ConvSpec::cube(inter, 1, 1, 1, 0, true), rng),
        }
    }

    /// The gating coefficients, one channel at the resolution of `skip`.
    pub fn coefficients<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, skip: Var, gate: Var, lower: Var) -> Result<Var> {
        let sd = g.value(skip).dims5()?;
        let gg = self.wg.forward(g, p, gate)?;
        // A 1x1x1 conv commutes with trilinear resampling, so the gate is
        // projected first and the cheaper tensor is upsampled.
        let gg = g.upsample_trilinear(gg, [sd[2], sd[3], sd[4]])?;
        let xx = self.wx.forward(g, p, skip)?;
        let ll = self.wl.forward(g, p, lower)?;
        let a = g.add(gg, xx)?;
        let a = g.add(a, ll)?;
        let a = g.relu(a);
        let a = self.psi.forward(g, p, a)?;
        Ok(g.sigmoid(a))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, skip: Var, gate: Var, lower: Var) -> Result<Var> {
        let gd = g.value(gate).dims5()?;
        let sd = g.value(skip).dims5()?;
        if (2..5).any(|a| gd[a] * 2 != sd[a]) || g.value(lower).dims5()?[2..] != sd[2..] {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "attention expects a gate at half the skip resolution and a lower input at the skip resolution; got skip {sd:?}, gate {gd:?}, lower {:?}",
                g.value(lower).dims()
            )));
        }
        let alpha = self.coefficients(g, p, skip, gate, lower)?;
        g.gate_mul(skip, alpha)
    }
}
