//! Trainable time-conditioned regressor.
//!
//! A small encoder-decoder convolutional network maps a same-shape grid to
//! a same-shape grid, conditioned on an integer timestep through sinusoidal
//! embeddings projected to per-channel biases at every resolution level.
//! The same architecture serves as the projection-domain restorer and as
//! the image-domain noise estimator. Parameters live in one flat f32
//! vector described by a name/shape manifest, so weights serialize through
//! the common weights-file format and optimize with [`adam::Adam`].

pub mod adam;
pub mod tape;

pub use adam::Adam;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{WeightsEntry, WeightsFile};
use crate::rng::Rng;
use tape::{NodeId, Shape, Tape};

/// A map from (grid, timestep) to a same-shape grid. Implemented by the
/// trained regressor and by closed-form oracles in tests.
pub trait TimeConditioned {
    fn apply(&self, data: &[f32], height: usize, width: usize, t: usize) -> Result<Vec<f32>>;
}

/// Which objective a training loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Predict the clean grid from a degraded one.
    Restoration,
    /// Predict the Gaussian noise component of a diffused image.
    EpsilonPrediction,
}

/// Training hyperparameters shared by both diffusion models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Architecture hyperparameters. `levels` counts downsamplings; input
/// extents must be divisible by `2^levels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressorArch {
    pub in_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub time_embed_dim: usize,
}

impl Default for RegressorArch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 16,
            levels: 2,
            time_embed_dim: 32,
        }
    }
}

impl RegressorArch {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::invalid("channels and width must be nonzero"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be even and >= 2"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Shape,
    offset: usize,
    init: InitKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InitKind {
    /// Kaiming-style normal with the given standard deviation.
    Normal(f64),
    Zero,
}

/// Encoder-decoder regressor with skip connections and a raw-input tap
/// into the zero-initialized output head (so the untrained network maps
/// everything to zero, and a passthrough is one weight away).
pub struct TimeConditionedRegressor {
    arch: RegressorArch,
    specs: Vec<ParamSpec>,
    params: Vec<f32>,
}

impl TimeConditionedRegressor {
    pub fn new(arch: RegressorArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let specs = build_manifest(&arch);
        let total: usize = specs.iter().map(|s| s.shape.len()).sum();
        let mut params = vec![0.0f32; total];
        for spec in &specs {
            match spec.init {
                InitKind::Zero => {}
                InitKind::Normal(std) => {
                    for p in &mut params[spec.offset..spec.offset + spec.shape.len()] {
                        *p = (rng.gaussian() * std) as f32;
                    }
                }
            }
        }
        Ok(Self {
            arch,
            specs,
            params,
        })
    }

    pub fn arch(&self) -> &RegressorArch {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    fn spec(&self, name: &str) -> &ParamSpec {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn check_input(&self, len: usize, height: usize, width: usize) -> Result<()> {
        if len != self.arch.in_channels * height * width {
            return Err(Error::shape_mismatch(
                format!("{} x {height} x {width}", self.arch.in_channels),
                format!("{len} values"),
            ));
        }
        let div = 1usize << self.arch.levels;
        if height % div != 0 || width % div != 0 {
            return Err(Error::invalid(format!(
                "input {height}x{width} not divisible by 2^levels = {div}"
            )));
        }
        Ok(())
    }

    /// Builds the network on `tape` from an already-registered input node;
    /// returns the output node. This is the single source of the graph for
    /// both inference and training closures.
    pub fn emit(&self, tape: &mut Tape, input: NodeId, t: usize) -> Result<NodeId> {
        let arch = &self.arch;
        let emb = sinusoidal_embedding(t, arch.time_embed_dim);
        let emb = tape.input(Shape::vector(arch.time_embed_dim), emb)?;

        let block = |tape: &mut Tape, x: NodeId, prefix: &str| -> Result<NodeId> {
            let w = self.spec(&format!("{prefix}.weight"));
            let b = self.spec(&format!("{prefix}.bias"));
            let wn = tape.param(w.offset, w.shape)?;
            let bn = tape.param(b.offset, b.shape)?;
            tape.conv3x3(x, wn, bn)
        };
        let time_bias = |net: &Self, tape: &mut Tape, x: NodeId, prefix: &str| -> Result<NodeId> {
            let w = net.spec(&format!("{prefix}.time.weight"));
            let b = net.spec(&format!("{prefix}.time.bias"));
            let wn = tape.param(w.offset, w.shape)?;
            let bn = tape.param(b.offset, b.shape)?;
            let tb = tape.linear(emb, wn, bn)?;
            tape.add_channel_bias(x, tb)
        };

        let mut cur = block(tape, input, "stem")?;
        cur = time_bias(self, tape, cur, "stem")?;
        cur = tape.silu(cur);
        let mut skips = vec![cur];
        for l in 1..=arch.levels {
            cur = tape.avg_pool2(cur)?;
            cur = block(tape, cur, &format!("down{l}"))?;
            cur = time_bias(self, tape, cur, &format!("down{l}"))?;
            cur = tape.silu(cur);
            skips.push(cur);
        }
        for l in (1..=arch.levels).rev() {
            cur = block(tape, cur, &format!("up{l}.reduce"))?;
            cur = tape.upsample_nearest2(cur);
            cur = tape.add(cur, skips[l - 1])?;
            cur = block(tape, cur, &format!("up{l}.conv"))?;
            cur = time_bias(self, tape, cur, &format!("up{l}"))?;
            cur = tape.silu(cur);
        }
        let head_in = tape.concat_channels(cur, input)?;
        block(tape, head_in, "head")
    }

    /// Deterministic forward pass.
    pub fn forward(&self, data: &[f32], height: usize, width: usize, t: usize) -> Result<Vec<f32>> {
        self.check_input(data.len(), height, width)?;
        let mut tape = Tape::new(&self.params);
        let input = tape.input(Shape::new(self.arch.in_channels, height, width), data.to_vec())?;
        let out = self.emit(&mut tape, input, t)?;
        Ok(tape.value(out).to_vec())
    }

    /// Differentiates a scalar loss built by `build` on a fresh tape over
    /// this network's parameters. Returns the loss and the flat gradient.
    pub fn grad<F>(&self, build: F) -> Result<(f64, Vec<f32>)>
    where
        F: FnOnce(&Self, &mut Tape) -> Result<NodeId>,
    {
        let mut tape = Tape::new(&self.params);
        let loss = build(self, &mut tape)?;
        tape.backward(loss)
    }

    /// Mean-squared-error loss and gradient for one (input, target, t)
    /// triple, the building block of both training objectives.
    pub fn mse_loss_grad(
        &self,
        input: &[f32],
        target: &[f32],
        height: usize,
        width: usize,
        t: usize,
    ) -> Result<(f64, Vec<f32>)> {
        self.check_input(input.len(), height, width)?;
        if target.len() != input.len() {
            return Err(Error::shape_mismatch(
                format!("{} values", input.len()),
                format!("{}", target.len()),
            ));
        }
        let shape = Shape::new(self.arch.in_channels, height, width);
        self.grad(|net, tape| {
            let x = tape.input(shape, input.to_vec())?;
            let y = net.emit(tape, x, t)?;
            let target_node = tape.input(shape, target.to_vec())?;
            tape.mse(y, target_node)
        })
    }

    /// Serializes parameters plus architecture; `extra_meta` entries ride
    /// along in the manifest (schedule parameters, training provenance).
    pub fn to_weights(
        &self,
        extra_meta: serde_json::Map<String, serde_json::Value>,
    ) -> Result<WeightsFile> {
        let entries: Vec<WeightsEntry> = self
            .specs
            .iter()
            .map(|s| WeightsEntry {
                name: s.name.clone(),
                shape: vec![s.shape.c, s.shape.h, s.shape.w],
            })
            .collect();
        let mut meta = extra_meta;
        meta.insert("arch".into(), serde_json::to_value(self.arch)?);
        WeightsFile::new(entries, meta, self.params.clone())
    }

    /// Rebuilds a regressor from a weights file written by [`Self::to_weights`].
    pub fn from_weights(weights: &WeightsFile) -> Result<Self> {
        let arch_value = weights
            .meta
            .get("arch")
            .ok_or_else(|| Error::invalid("weights file carries no architecture metadata"))?;
        let arch: RegressorArch = serde_json::from_value(arch_value.clone())?;
        arch.validate()?;
        let specs = build_manifest(&arch);
        let expect: Vec<WeightsEntry> = specs
            .iter()
            .map(|s| WeightsEntry {
                name: s.name.clone(),
                shape: vec![s.shape.c, s.shape.h, s.shape.w],
            })
            .collect();
        if expect != weights.entries {
            return Err(Error::invalid(
                "weights manifest does not match the declared architecture",
            ));
        }
        Ok(Self {
            arch,
            specs,
            params: weights.payload.clone(),
        })
    }
}

impl TimeConditioned for TimeConditionedRegressor {
    fn apply(&self, data: &[f32], height: usize, width: usize, t: usize) -> Result<Vec<f32>> {
        self.forward(data, height, width, t)
    }
}

fn build_manifest(arch: &RegressorArch) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Shape, init: InitKind| {
        specs.push(ParamSpec {
            name,
            shape,
            offset,
            init,
        });
        offset += shape.len();
    };
    let conv = |c_out: usize, c_in: usize| {
        (
            Shape::new(c_out, c_in, 9),
            InitKind::Normal((2.0 / (c_in * 9) as f64).sqrt()),
        )
    };
    let time = |c_out: usize, e: usize| {
        (
            Shape::new(c_out, e, 1),
            InitKind::Normal((1.0 / e as f64).sqrt()),
        )
    };
    let e = arch.time_embed_dim;

    let (shape, init) = conv(arch.width(0), arch.in_channels);
    push("stem.weight".into(), shape, init);
    push("stem.bias".into(), Shape::vector(arch.width(0)), InitKind::Zero);
    let (shape, init) = time(arch.width(0), e);
    push("stem.time.weight".into(), shape, init);
    push("stem.time.bias".into(), Shape::vector(arch.width(0)), InitKind::Zero);

    for l in 1..=arch.levels {
        let (shape, init) = conv(arch.width(l), arch.width(l - 1));
        push(format!("down{l}.weight"), shape, init);
        push(format!("down{l}.bias"), Shape::vector(arch.width(l)), InitKind::Zero);
        let (shape, init) = time(arch.width(l), e);
        push(format!("down{l}.time.weight"), shape, init);
        push(format!("down{l}.time.bias"), Shape::vector(arch.width(l)), InitKind::Zero);
    }
    for l in (1..=arch.levels).rev() {
        let (shape, init) = conv(arch.width(l - 1), arch.width(l));
        push(format!("up{l}.reduce.weight"), shape, init);
        push(
            format!("up{l}.reduce.bias"),
            Shape::vector(arch.width(l - 1)),
            InitKind::Zero,
        );
        let (shape, init) = conv(arch.width(l - 1), arch.width(l - 1));
        push(format!("up{l}.conv.weight"), shape, init);
        push(
            format!("up{l}.conv.bias"),
            Shape::vector(arch.width(l - 1)),
            InitKind::Zero,
        );
        let (shape, init) = time(arch.width(l - 1), e);
        push(format!("up{l}.time.weight"), shape, init);
        push(format!("up{l}.time.bias"), Shape::vector(arch.width(l - 1)), InitKind::Zero);
    }
    push(
        "head.weight".into(),
        Shape::new(arch.in_channels, arch.width(0) + arch.in_channels, 9),
        InitKind::Zero,
    );
    push("head.bias".into(), Shape::vector(arch.in_channels), InitKind::Zero);
    specs
}

/// Standard sinusoidal position features of an integer timestep.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        out.push(((t as f64) * freq).sin() as f32);
    }
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        out.push(((t as f64) * freq).cos() as f32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> RegressorArch {
        RegressorArch {
            in_channels: 1,
            base_width: 4,
            levels: 1,
            time_embed_dim: 8,
        }
    }

    fn ramp_input(n: usize) -> Vec<f32> {
        (0..n).map(|i| (i as f32 * 0.37).sin() * 0.5 + 0.4).collect()
    }

    #[test]
    fn tiny_instance_fits_gradient_check_budget() {
        let mut rng = Rng::new(0);
        let net = TimeConditionedRegressor::new(tiny_arch(), &mut rng).unwrap();
        assert!(
            net.n_params() <= 1000,
            "gradient-check instance has {} params",
            net.n_params()
        );
    }

    #[test]
    fn zero_initialized_head_maps_everything_to_zero() {
        let mut rng = Rng::new(3);
        let net = TimeConditionedRegressor::new(tiny_arch(), &mut rng).unwrap();
        let out = net.forward(&ramp_input(64), 8, 8, 5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_shape_checked() {
        let mut rng = Rng::new(4);
        let mut net = TimeConditionedRegressor::new(tiny_arch(), &mut rng).unwrap();
        // Give the head nonzero weights so the output is nontrivial.
        for p in net.params_mut().iter_mut() {
            if *p == 0.0 {
                *p = 0.01;
            }
        }
        let x = ramp_input(64);
        let a = net.forward(&x, 8, 8, 3).unwrap();
        let b = net.forward(&x, 8, 8, 3).unwrap();
        assert_eq!(a, b);
        let c = net.forward(&x, 8, 8, 4).unwrap();
        assert_ne!(a, c, "timestep must condition the output");
        assert!(net.forward(&x, 8, 9, 3).is_err());
        assert!(net.forward(&x[..63], 8, 8, 3).is_err());
        // Odd extents cannot be pooled.
        assert!(net.forward(&ramp_input(25), 5, 5, 3).is_err());
    }

    #[test]
    fn weights_round_trip_preserves_forward_bit_exactly() {
        let mut rng = Rng::new(5);
        let mut net = TimeConditionedRegressor::new(tiny_arch(), &mut rng).unwrap();
        for p in net.params_mut().iter_mut() {
            *p += 0.003;
        }
        let x = ramp_input(64);
        let before = net.forward(&x, 8, 8, 2).unwrap();
        let weights = net.to_weights(Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.wts");
        weights.save(&path).unwrap();
        let loaded = TimeConditionedRegressor::from_weights(
            &crate::io::WeightsFile::load(&path).unwrap(),
        )
        .unwrap();
        let after = loaded.forward(&x, 8, 8, 2).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_coordinates() {
        let mut rng = Rng::new(11);
        let mut net = TimeConditionedRegressor::new(tiny_arch(), &mut rng).unwrap();
        // Randomize everything (including the zero head) so no coordinate
        // has a structurally zero gradient.
        for p in net.params_mut().iter_mut() {
            *p = (rng.gaussian() * 0.2) as f32;
        }
        let x = ramp_input(64);
        let target: Vec<f32> = ramp_input(64).iter().map(|v| v * 0.8 + 0.05).collect();
        let (_, grads) = net.mse_loss_grad(&x, &target, 8, 8, 4).unwrap();

        let n = net.n_params();
        let h = 1e-3f32;
        for k in 0..20 {
            let i = (rng.next_u64() % n as u64) as usize;
            let _ = k;
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let plus = net.params()[i];
            let (fp, _) = net.mse_loss_grad(&x, &target, 8, 8, 4).unwrap();
            net.params_mut()[i] = orig - h;
            let minus = net.params()[i];
            let (fm, _) = net.mse_loss_grad(&x, &target, 8, 8, 4).unwrap();
            net.params_mut()[i] = orig;
            let fd = (fp - fm) / ((plus - minus) as f64);
            let g = grads[i] as f64;
            let denom = fd.abs().max(g.abs()).max(1e-4);
            assert!(
                (fd - g).abs() / denom < 1e-2,
                "coordinate {i}: fd {fd} vs grad {g}"
            );
        }
    }

    #[test]
    fn overfits_a_single_sample() {
        // Fixed (input, target) pair: the optimizer must drive the loss
        // below 1e-3 of its initial value.
        let mut rng = Rng::new(21);
        let mut net = TimeConditionedRegressor::new(tiny_arch(), &mut rng).unwrap();
        let x = ramp_input(64);
        let target: Vec<f32> = x.iter().map(|v| 0.6 * v + 0.1).collect();
        let mut opt = Adam::new(net.n_params());
        let (initial, _) = net.mse_loss_grad(&x, &target, 8, 8, 1).unwrap();
        let mut last = initial;
        for _ in 0..600 {
            let (loss, grads) = net.mse_loss_grad(&x, &target, 8, 8, 1).unwrap();
            opt.step(net.params_mut(), &grads, 1e-2).unwrap();
            last = loss;
        }
        assert!(
            last < 1e-3 * initial,
            "loss only reached {last} from {initial}"
        );
    }

    #[test]
    fn embedding_distinguishes_timesteps() {
        let a = sinusoidal_embedding(1, 16);
        let b = sinusoidal_embedding(2, 16);
        assert_eq!(a.len(), 16);
        assert_ne!(a, b);
    }
}
