use std::collections::{BTreeMap, HashMap};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, seeded_rng, BnStats, Mode, ParamId, ParamStore, Tape, Tensor4, Var};
use crate::scalar::Scalar;

/// Shape of the dual-encoder network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsvaConfig {
    /// Number of 2×2 downsamplings in each contracting path.
    pub depth_levels: usize,
    /// Feature channels at full resolution; doubled at every downsampling.
    pub base_channels: usize,
    pub input_channels: usize,
    /// Ablation: feed `y1` to both contracting paths.
    #[serde(default)]
    pub single_input: bool,
}

impl Default for TsvaConfig {
    fn default() -> Self {
        Self {
            depth_levels: 3,
            base_channels: 16,
            input_channels: 1,
            single_input: false,
        }
    }
}

impl TsvaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_levels < 2 {
            return Err(Error::domain("depth_levels must be >= 2"));
        }
        if self.base_channels < 4 {
            return Err(Error::domain("base_channels must be >= 4"));
        }
        if self.input_channels < 1 {
            return Err(Error::domain("input_channels must be >= 1"));
        }
        Ok(())
    }

    /// Channels at encoder level `l` (level `depth_levels` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth_levels
    }

    /// Convolution layers when each contracting path is counted on its own
    /// and up-convolutions are not counted. Equals 27 at four levels.
    pub fn conv_layer_count(&self) -> usize {
        let d = self.depth_levels;
        2 * (2 * d) + 2 + 2 * d + 1
    }
}

/// Dual-encoder U-Net: one contracting path applied to both captures,
/// a merged bottleneck, an expansive path with skips from both paths, and
/// a residual connection adding `y1` to the output.
#[derive(Debug, Clone, PartialEq)]
pub struct TsvaModel<T> {
    pub config: TsvaConfig,
    pub params: ParamStore<T>,
    pub bn: BTreeMap<String, BnStats<T>>,
}

/// Parameter variables of one forward pass; each parameter is recorded once
/// so both contracting paths share the same tape node.
struct Bound {
    vars: HashMap<ParamId, Var>,
}

impl Bound {
    fn get<T: Scalar>(&mut self, tape: &mut Tape<T>, params: &ParamStore<T>, name: &str) -> Var {
        let id = params
            .id(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from model"));
        *self.vars.entry(id).or_insert_with(|| tape.param(params, id))
    }
}

impl<T: Scalar> TsvaModel<T> {
    /// Builds a model with seeded Kaiming weights, zero biases, unit BN scale.
    pub fn build(config: TsvaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 0);
        let mut model = Self {
            config,
            params: ParamStore::new(),
            bn: BTreeMap::new(),
        };
        let d = config.depth_levels;
        for l in 0..d {
            let cin = if l == 0 { config.input_channels } else { config.channels(l - 1) };
            let c = config.channels(l);
            model.add_block(&mut rng, &format!("enc{l}.block1"), cin, c)?;
            model.add_block(&mut rng, &format!("enc{l}.block2"), c, c)?;
        }
        let cb = config.channels(d);
        model.add_block(&mut rng, "mid.block1", 2 * config.channels(d - 1), cb)?;
        model.add_block(&mut rng, "mid.block2", cb, cb)?;
        for l in (0..d).rev() {
            let (cin, c) = (config.channels(l + 1), config.channels(l));
            let p = &mut model.params;
            p.insert(format!("dec{l}.up.weight"), kaiming_normal([cin, c, 2, 2], cin, &mut rng))?;
            p.insert(format!("dec{l}.up.bias"), Tensor4::zeros([c, 1, 1, 1]))?;
            model.add_block(&mut rng, &format!("dec{l}.block1"), 3 * c, c)?;
            model.add_block(&mut rng, &format!("dec{l}.block2"), c, c)?;
        }
        let (c0, ci) = (config.channels(0), config.input_channels);
        model.params.insert("out.weight", kaiming_normal([ci, c0, 1, 1], c0, &mut rng))?;
        model.params.insert("out.bias", Tensor4::zeros([ci, 1, 1, 1]))?;
        Ok(model)
    }

    fn add_block(&mut self, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Result<()> {
        let p = &mut self.params;
        p.insert(format!("{name}.conv.weight"), kaiming_normal([cout, cin, 3, 3], cin * 9, rng))?;
        p.insert(format!("{name}.conv.bias"), Tensor4::zeros([cout, 1, 1, 1]))?;
        p.insert(format!("{name}.bn.gamma"), Tensor4::filled([cout, 1, 1, 1], T::one()))?;
        p.insert(format!("{name}.bn.beta"), Tensor4::zeros([cout, 1, 1, 1]))?;
        self.bn.insert(name.to_string(), BnStats::new(cout));
        Ok(())
    }

    /// Zeroes the final projection so the network output equals `y1`.
    pub fn zero_output_projection(&mut self) {
        for name in ["out.weight", "out.bias"] {
            self.params
                .by_name_mut(name)
                .expect("projection parameters exist")
                .value
                .fill(T::zero());
        }
    }

    fn check_inputs(&self, y1: &Tensor4<T>, y2: &Tensor4<T>) -> Result<()> {
        if y1.shape() != y2.shape() {
            return Err(Error::shape(format!(
                "y1 {:?} and y2 {:?} differ",
                y1.shape(),
                y2.shape()
            )));
        }
        let [_, c, h, w] = y1.shape();
        if c != self.config.input_channels {
            return Err(Error::shape(format!(
                "expected {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("input {h}x{w} not divisible by {m}")));
        }
        Ok(())
    }

    fn block(
        &mut self,
        tape: &mut Tape<T>,
        bound: &mut Bound,
        name: &str,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let w = bound.get(tape, &self.params, &format!("{name}.conv.weight"));
        let b = bound.get(tape, &self.params, &format!("{name}.conv.bias"));
        let g = bound.get(tape, &self.params, &format!("{name}.bn.gamma"));
        let be = bound.get(tape, &self.params, &format!("{name}.bn.beta"));
        let x = tape.conv(x, w, b)?;
        let stats = self.bn.get_mut(name).expect("bn stats exist");
        let x = tape.batchnorm(x, g, be, stats, mode)?;
        Ok(tape.relu(x))
    }

    /// Contracting path; returns the per-level skip features and the pooled deepest map.
    fn encode(
        &mut self,
        tape: &mut Tape<T>,
        bound: &mut Bound,
        mut x: Var,
        mode: Mode,
    ) -> Result<(Vec<Var>, Var)> {
        let mut skips = Vec::with_capacity(self.config.depth_levels);
        for l in 0..self.config.depth_levels {
            x = self.block(tape, bound, &format!("enc{l}.block1"), x, mode)?;
            x = self.block(tape, bound, &format!("enc{l}.block2"), x, mode)?;
            skips.push(x);
            x = tape.maxpool2x2(x)?;
        }
        Ok((skips, x))
    }

    /// Records the network on `tape`; returns the output variable.
    ///
    /// In single-input mode `y2` is ignored and `y1` feeds both paths.
    pub fn forward_on_tape(&mut self, tape: &mut Tape<T>, y1: Var, y2: Var, mode: Mode) -> Result<Var> {
        self.check_inputs(tape.value(y1), tape.value(y2))?;
        let y2 = if self.config.single_input { y1 } else { y2 };
        let mut bound = Bound { vars: HashMap::new() };
        let (left, left_deep) = self.encode(tape, &mut bound, y1, mode)?;
        let (right, right_deep) = self.encode(tape, &mut bound, y2, mode)?;

        let mut x = tape.concat(&[left_deep, right_deep])?;
        x = self.block(tape, &mut bound, "mid.block1", x, mode)?;
        x = self.block(tape, &mut bound, "mid.block2", x, mode)?;

        for l in (0..self.config.depth_levels).rev() {
            let w = bound.get(tape, &self.params, &format!("dec{l}.up.weight"));
            let b = bound.get(tape, &self.params, &format!("dec{l}.up.bias"));
            x = tape.upconv2x2(x, w, b)?;
            // order: decoder features, left-path skip, right-path skip
            x = tape.concat(&[x, left[l], right[l]])?;
            x = self.block(tape, &mut bound, &format!("dec{l}.block1"), x, mode)?;
            x = self.block(tape, &mut bound, &format!("dec{l}.block2"), x, mode)?;
        }
        let w = bound.get(tape, &self.params, "out.weight");
        let b = bound.get(tape, &self.params, "out.bias");
        let correction = tape.conv(x, w, b)?;
        tape.add(correction, y1)
    }

    /// Forward pass without keeping the tape.
    pub fn forward(&mut self, y1: &Tensor4<T>, y2: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.check_inputs(y1, y2)?;
        let mut tape = Tape::new();
        let a = tape.input(y1.clone());
        let b = tape.input(y2.clone());
        let out = self.forward_on_tape(&mut tape, a, b, mode)?;
        Ok(tape.value(out).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }
}

impl<T: Scalar> TsvaModel<T> {
    /// Evaluation-mode forward pass; running statistics are left untouched.
    pub fn predict(&self, y1: &Tensor4<T>, y2: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut scratch = self.clone();
        scratch.forward(y1, y2, Mode::Eval)
    }
}
