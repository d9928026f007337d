//! Three-level 3-D encoder-decoder with residual bottleneck blocks and
//! attention-gated skip connections that also see the encoder input of
//! their level.

mod blocks;
mod params;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{Attention, BnLayer, Bottleneck, ConvLayer, ConvUnit};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};

use crate::autodiff::checkpoint::{load_tensors, save_tensors};
use crate::autodiff::{ConvSpec, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::write_json;

pub const ARCH_FILE: &str = "arch.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub attention_inter_channels_divisor: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { base_channels: 8, levels: 3, attention_inter_channels_divisor: 2, input_channels: 1, output_channels: 1 }
    }
}

impl ArchConfig {
    pub fn with_base(base_channels: usize) -> Self {
        Self { base_channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != 3 {
            return Err(Error::invalid("levels", "the network has exactly three levels"));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels", "must be at least 1"));
        }
        if self.attention_inter_channels_divisor == 0 {
            return Err(Error::invalid("attention_inter_channels_divisor", "must be at least 1"));
        }
        if self.input_channels != 1 || self.output_channels != 1 {
            return Err(Error::invalid("input_channels", "single-channel input and output only"));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    /// Encoder channels per level, then the bridge.
    pub fn channel_plan(&self) -> Vec<usize> {
        (0..=self.levels).map(|i| self.base_channels << i).collect()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    unit: ConvUnit,
    block: Bottleneck,
}

impl Stage {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let unit = ConvUnit::new(store, &format!("{name}.unit"), in_ch, out_ch, rng);
        let block = Bottleneck::new(store, &format!("{name}.block"), out_ch, rng);
        Self { unit, block }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let y = self.unit.forward(g, p, x)?;
        self.block.forward(g, p, y)
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvLayer,
    attention: Attention,
    stage: Stage,
}

#[derive(Clone, Debug)]
pub struct BaUnet<T: Scalar> {
    config: ArchConfig,
    params: ParamStore<T>,
    encoders: Vec<Stage>,
    bridge: Stage,
    /// Ordered from the deepest level up.
    decoders: Vec<DecoderStage>,
    head: Stage,
    head_out: ConvLayer,
}

impl<T: Scalar> BaUnet<T> {
    /// Builds the network with seeded fan-in-scaled uniform weights and zero biases.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = config.channel_plan();
        let levels = config.levels;

        let mut encoders = Vec::with_capacity(levels);
        let mut in_ch = config.input_channels;
        for (i, &c) in ch[..levels].iter().enumerate() {
            encoders.push(Stage::new(&mut store, &format!("enc{}", i + 1), in_ch, c, &mut rng));
            in_ch = c;
        }
        let bridge = Stage::new(&mut store, "bridge", ch[levels - 1], ch[levels], &mut rng);

        let mut decoders = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let name = format!("dec{}", i + 1);
            let (skip, below) = (ch[i], ch[i + 1]);
            let lower = if i == 0 { config.input_channels } else { ch[i - 1] };
            let up = ConvLayer::transposed(&mut store, &format!("{name}.up"), ConvSpec::cube(below, skip, 2, 2, 0, true), &mut rng);
            let attention = Attention::new(
                &mut store,
                &format!("{name}.attention"),
                skip,
                below,
                lower,
                config.attention_inter_channels_divisor,
                &mut rng,
            );
            let stage = Stage::new(&mut store, &name, 2 * skip, skip, &mut rng);
            decoders.push(DecoderStage { up, attention, stage });
        }
        let head = Stage::new(&mut store, "head", ch[0], ch[0], &mut rng);
        let head_out = ConvLayer::new(&mut store, "head.out", ConvSpec::cube(ch[0], config.output_channels, 1, 1, 0, true), &mut rng);
        Ok(Self { config, params: store, encoders, bridge, decoders, head, head_out })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> BaUnet<U> {
        BaUnet {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            bridge: self.bridge.clone(),
            decoders: self.decoders.clone(),
            head: self.head.clone(),
            head_out: self.head_out.clone(),
        }
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 5 || dims[1] != self.config.input_channels {
            return Err(Error::ShapeMismatch(format!("expected an N x 1 x D x H x W input, got {dims:?}")));
        }
        let div = self.config.divisor();
        for (axis, &len) in dims[2..].iter().enumerate() {
            if len == 0 || len % div != 0 {
                return Err(Error::Indivisible { dim: ["depth", "height", "width"][axis], len, divisor: div });
            }
        }
        Ok(())
    }

    /// Records the forward pass of `x` on `g`, returning the probability map.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        self.check_input(g.value(x).dims())?;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut lowers = Vec::with_capacity(self.config.levels);
        let mut cur = x;
        for enc in &self.encoders {
            lowers.push(cur);
            let s = enc.forward(g, p, cur)?;
            skips.push(s);
            cur = g.max_pool3d(s)?;
        }
        cur = self.bridge.forward(g, p, cur)?;
        for (dec, level) in self.decoders.iter().zip((0..self.config.levels).rev()) {
            let up = dec.up.forward(g, p, cur)?;
            let att = dec.attention.forward(g, p, skips[level], cur, lowers[level])?;
            let merged = g.concat_channels(up, att)?;
            cur = dec.stage.forward(g, p, merged)?;
        }
        let y = self.head.forward(g, p, cur)?;
        let y = self.head_out.forward(g, p, y)?;
        Ok(g.sigmoid(y))
    }

    /// Forward pass without gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// Writes `arch.json`, `params.json` and one raw file per tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let named: Vec<(String, &Tensor<T>)> = self.params.entries().iter().map(|e| (e.name.clone(), &e.tensor)).collect();
        save_tensors(dir, &named)?;
        write_json(&dir.join(ARCH_FILE), &self.config)
    }

    /// Rebuilds the network from `arch.json` and fills every parameter from
    /// the checkpoint. Missing, extra or reshaped tensors are errors.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let arch_path = dir.join(ARCH_FILE);
        let text = std::fs::read_to_string(&arch_path).map_err(|e| Error::io(&arch_path, e))?;
        let config: ArchConfig = serde_json::from_str(&text).map_err(|e| Error::json(&arch_path, e))?;
        let mut model = Self::new(config, 0)?;
        let tensors = load_tensors::<T>(dir)?;
        if tensors.len() != model.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} tensors, architecture needs {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in tensors {
            model.params.assign(&name, t)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, GradCheckConfig};
    use rand::Rng;

    fn random_input(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar count from the layer list: conv = out*in*k^3 (+out bias),
    /// frozen BN = 4 buffers per channel.
    fn expected_counts(c: usize) -> (usize, usize) {
        let conv = |i: usize, o: usize, k: usize, b: bool| o * i * k * k * k + if b { o } else { 0 };
        let bn = |ch: usize| 4 * ch;
        let unit = |i: usize, o: usize| (conv(i, o, 3, true), bn(o));
        let block = |ch: usize| {
            let r = (ch / 2).max(1);
            (conv(ch, r, 1, true) + conv(r, r, 3, true) + conv(r, ch, 1, true), bn(r) + bn(r) + bn(ch))
        };
        let stage = |i: usize, o: usize| {
            let (a, b) = unit(i, o);
            let (x, y) = block(o);
            (a + x, b + y)
        };
        let mut trainable = 0;
        let mut frozen = 0;
        let mut add = |(t, f): (usize, usize)| {
            trainable += t;
            frozen += f;
        };
        add(stage(1, c));
        add(stage(c, 2 * c));
        add(stage(2 * c, 4 * c));
        add(stage(4 * c, 8 * c));
        for (skip, below, lower) in [(4 * c, 8 * c, 2 * c), (2 * c, 4 * c, c), (c, 2 * c, 1)] {
            let inter = (skip / 2).max(1);
            add((conv(below, skip, 2, true), 0));
            add((conv(below, inter, 1, false) + conv(skip, inter, 1, true) + conv(lower, inter, 1, false) + conv(inter, 1, 1, true), 0));
            add(stage(2 * skip, skip));
        }
        add(stage(c, c));
        add((conv(c, 1, 1, true), 0));
        (trainable, frozen)
    }

    #[test]
    fn parameter_count_follows_layer_list() {
        for c in [1, 2, 4, 8] {
            let model = BaUnet::<f32>::new(ArchConfig::with_base(c), 0).unwrap();
            let (trainable, frozen) = expected_counts(c);
            assert_eq!(model.params().trainable_scalar_count(), trainable, "base {c}");
            assert_eq!(model.params().scalar_count(), trainable + frozen, "base {c}");
        }
    }

    #[test]
    fn names_are_unique_and_stable() {
        let a = BaUnet::<f32>::new(ArchConfig::with_base(2), 1).unwrap();
        let b = BaUnet::<f32>::new(ArchConfig::with_base(2), 2).unwrap();
        let names = |m: &BaUnet<f32>| m.params().entries().iter().map(|e| e.name.clone()).collect::<Vec<_>>();
        assert_eq!(names(&a), names(&b));
        let mut sorted = names(&a);
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), a.params().len());
        assert!(names(&a).contains(&"dec1.attention.psi.bias".to_string()));
    }

    #[test]
    fn output_shape_and_range() {
        let model = BaUnet::<f64>::new(ArchConfig::with_base(2), 3).unwrap();
        let x = random_input(&[1, 1, 8, 16, 16], 4);
        let y = model.predict(&x).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let again = model.predict(&x).unwrap();
        assert!(y.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_indivisible_input() {
        let model = BaUnet::<f64>::new(ArchConfig::with_base(1), 0).unwrap();
        let err = model.predict(&Tensor::zeros(vec![1, 1, 8, 12, 16])).unwrap_err();
        assert!(matches!(err, Error::Indivisible { len: 12, divisor: 8, .. }));
        assert!(model.predict(&Tensor::zeros(vec![1, 2, 8, 8, 8])).is_err());
        assert!(BaUnet::<f64>::new(ArchConfig { levels: 4, ..ArchConfig::default() }, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = BaUnet::<f32>::new(ArchConfig::with_base(2), 9).unwrap();
        let x: Tensor<f32> = random_input(&[1, 1, 8, 8, 8], 5).cast();
        let before = model.predict(&x).unwrap();
        model.save(dir.path()).unwrap();
        let loaded = BaUnet::<f32>::load(dir.path()).unwrap();
        assert_eq!(loaded.params(), model.params());
        let after = loaded.predict(&x).unwrap();
        assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        // A checkpoint for another width does not load into this one.
        let other = tempfile::tempdir().unwrap();
        BaUnet::<f32>::new(ArchConfig::with_base(2), 0).unwrap().save(other.path()).unwrap();
        std::fs::copy(dir.path().join("enc1.unit.conv.weight.raw"), other.path().join("enc1.unit.conv.weight.raw")).unwrap();
        let wide = BaUnet::<f32>::new(ArchConfig::with_base(3), 0).unwrap();
        write_json(&other.path().join(ARCH_FILE), wide.config()).unwrap();
        assert!(BaUnet::<f32>::load(other.path()).is_err());
    }

    #[test]
    fn sampled_parameter_gradients_match_finite_differences() {
        let mut model = BaUnet::<f64>::new(ArchConfig::with_base(2), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for id in model.params().trainable_ids() {
            // Biases and the zero-initialised restore convs would otherwise hide whole gradient paths.
            let name = &model.params().entries()[id.index()].name;
            if name.ends_with(".bias") || name.contains(".restore.") {
                model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        let x = random_input(&[1, 1, 8, 8, 8], 13);
        let ids = model.params().trainable_ids();
        let mut inputs = vec![x];
        inputs.extend(ids.iter().map(|&id| model.params().get(id).clone()));
        let total: usize = inputs[1..].iter().map(Tensor::len).sum();
        let cfg = GradCheckConfig {
            sample_fraction: Some(0.01),
            check_inputs: Some((0..inputs.len()).map(|i| i > 0).collect()),
            seed: 14,
            ..GradCheckConfig::default()
        };
        let report = check_gradients(&inputs, &cfg, |g, v| {
            let p = model.params().bind_vars(&v[1..]);
            let y = model.forward(g, &p, v[0])?;
            Ok(g.mean(y))
        })
        .unwrap();
        assert!(report.checked + report.skipped_nonsmooth >= total / 100, "{report:?}");
        assert!(report.skipped_nonsmooth * 100 <= report.checked, "{report:?}");
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
