//! Residual softplus MLPs for the scalar energy `s(x; θ)` and the generator `g(z; φ)`.
//!
//! Layout (residual form):
//!
//! ```text
//! h₀      = W_in·x + b_in                                (in_dim → channels)
//! h_{l+1} = h_l + W₂·softplus(W₁·h_l + b₁) + b₂          (layers blocks)
//! y       = W_out·h_L + b_out                             (channels → out_dim)
//! ```
//!
//! Without residual connections each layer is `h_{l+1} = softplus(W·h_l + b)`.
//! Parameters are a single flat vector; matrices are row-major `fan_out×fan_in`
//! followed by their bias.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffengine::{self, ExprGraph, Mat, NodeId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub layers: usize,
    pub channels: usize,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default)]
    pub activation: Activation,
}

fn default_true() -> bool {
    true
}

impl MlpConfig {
    /// Scalar energy network.
    pub fn dde(in_dim: usize, layers: usize, channels: usize) -> Self {
        MlpConfig { in_dim, out_dim: 1, layers, channels, residual: true, activation: Activation::Softplus }
    }

    pub fn generator(latent_dim: usize, out_dim: usize, layers: usize, channels: usize) -> Self {
        MlpConfig { in_dim: latent_dim, out_dim, layers, channels, residual: true, activation: Activation::Softplus }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::config("network dimensions must be positive"));
        }
        if self.layers == 0 {
            return Err(Error::config("network needs at least one layer"));
        }
        if self.channels == 0 {
            return Err(Error::config("network needs at least one channel"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LinearSlot> {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, fan_in: usize, fan_out: usize| {
            slots.push(LinearSlot { name, offset, fan_in, fan_out });
            offset += fan_in * fan_out + fan_out;
        };
        push("input".into(), self.in_dim, self.channels);
        for l in 0..self.layers {
            if self.residual {
                push(format!("block{l}.inner"), self.channels, self.channels);
                push(format!("block{l}.outer"), self.channels, self.channels);
            } else {
                push(format!("layer{l}"), self.channels, self.channels);
            }
        }
        push("output".into(), self.channels, self.out_dim);
        slots
    }

    /// Σ (fan_in·fan_out + fan_out) over every linear map.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LinearSlot::len).sum()
    }
}

/// One linear map in the flat parameter vector: weights at `offset`, bias right after.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearSlot {
    pub name: String,
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearSlot {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    pub fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    config: MlpConfig,
    values: Vec<f64>,
}

/// Where a network's weights come from inside a graph.
#[derive(Clone, Copy, Debug)]
pub enum Weights<'a> {
    /// Parameter slots starting at this offset of the graph's parameter vector.
    Trainable { base: usize },
    /// Baked into the graph as constants; receives no gradient.
    Frozen(&'a [f64]),
}

impl MlpParams {
    pub fn from_values(config: MlpConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_count();
        if values.len() != expected {
            return Err(Error::config(format!("network needs {expected} parameters, got {}", values.len())));
        }
        Ok(MlpParams { config, values })
    }

    /// All weights and biases zero.
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        let n = {
            config.validate()?;
            config.param_count()
        };
        Self::from_values(config, vec![0.0; n])
    }

    /// Network computing `x ↦ x` (needs `in_dim == out_dim ≤ channels`): adapters embed and
    /// project the first `in_dim` channels, every block is zero.
    pub fn identity(config: MlpConfig) -> Result<Self> {
        if config.in_dim != config.out_dim || config.channels < config.in_dim {
            return Err(Error::config("identity network needs in_dim == out_dim <= channels"));
        }
        let mut p = Self::zeros(config)?;
        let layout = p.config.layout();
        let (first, last) = (&layout[0], &layout[layout.len() - 1]);
        for i in 0..p.config.in_dim {
            p.values[first.offset + i * first.fan_in + i] = 1.0;
            p.values[last.offset + i * last.fan_in + i] = 1.0;
        }
        Ok(p)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Append this network to `g`, reading its input from `input`. Returns the output node.
    pub fn build(&self, g: &mut ExprGraph, input: NodeId, weights: Weights<'_>) -> NodeId {
        build_mlp(&self.config, g, input, weights)
    }

    /// Graph with data slot 0 as input and the network output as output; weights trainable at offset 0.
    pub fn graph(&self) -> ExprGraph {
        let mut g = ExprGraph::new();
        let x = g.data(0, self.config.in_dim);
        let y = self.build(&mut g, x, Weights::Trainable { base: 0 });
        g.set_output(y);
        g
    }

    pub fn forward_batch(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        diffengine::evaluate(&self.graph(), &self.values, &[x])
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.config.in_dim {
            return Err(Error::config(format!(
                "network input has {} dimensions, expected {}",
                x.cols(),
                self.config.in_dim
            )));
        }
        Ok(())
    }
}

pub fn build_mlp(config: &MlpConfig, g: &mut ExprGraph, input: NodeId, weights: Weights<'_>) -> NodeId {
    let layout = config.layout();
    let linear = |g: &mut ExprGraph, x: NodeId, slot: &LinearSlot| {
        let (w, b) = match weights {
            Weights::Trainable { base } => (
                g.param(base + slot.offset, slot.fan_out, slot.fan_in),
                g.param(base + slot.bias_range().start, 1, slot.fan_out),
            ),
            Weights::Frozen(values) => (
                g.constant(Mat::from_vec(slot.fan_out, slot.fan_in, values[slot.weight_range()].to_vec()).unwrap()),
                g.constant(Mat::row_vector(&values[slot.bias_range()])),
            ),
        };
        let xw = g.matmul_t(x, w);
        g.add_row(xw, b)
    };

    let mut h = linear(g, input, &layout[0]);
    let blocks = &layout[1..layout.len() - 1];
    if config.residual {
        for pair in blocks.chunks_exact(2) {
            let a = linear(g, h, &pair[0]);
            let act = g.softplus(a);
            let delta = linear(g, act, &pair[1]);
            h = g.add(h, delta);
        }
    } else {
        for slot in blocks {
            let a = linear(g, h, slot);
            h = g.softplus(a);
        }
    }
    linear(g, h, &layout[layout.len() - 1])
}

/// Uniform(−1/√fan_in, 1/√fan_in) weights, zero biases; deterministic per seed.
pub fn init_mlp(config: &MlpConfig, seed: u64) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(config.clone())?;
    let mut r = rng::stream(seed, "mlp-init", 0);
    for slot in config.layout() {
        let bound = 1.0 / (slot.fan_in as f64).sqrt();
        for w in &mut params.values[slot.weight_range()] {
            *w = r.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// s(x; θ) for every row of `x`.
pub fn dde_forward_batch(params: &MlpParams, x: &Mat) -> Result<Vec<f64>> {
    if params.config.out_dim != 1 {
        return Err(Error::config("energy network must have a scalar output"));
    }
    Ok(params.forward_batch(x)?.into_vec())
}

pub fn dde_forward(params: &MlpParams, x: &[f64]) -> Result<f64> {
    Ok(dde_forward_batch(params, &Mat::row_vector(x))?[0])
}

/// ∇ₓ s(x; θ) for every row of `x`.
pub fn dde_score_batch(params: &MlpParams, x: &Mat) -> Result<Mat> {
    if params.config.out_dim != 1 {
        return Err(Error::config("energy network must have a scalar output"));
    }
    params.check_input(x)?;
    diffengine::input_gradient(&params.graph(), &params.values, x)
}

pub fn dde_score(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(dde_score_batch(params, &Mat::row_vector(x))?.into_vec())
}

pub fn generator_forward_batch(params: &MlpParams, z: &Mat) -> Result<Mat> {
    params.forward_batch(z)
}

pub fn generator_forward(params: &MlpParams, z: &[f64]) -> Result<Vec<f64>> {
    Ok(generator_forward_batch(params, &Mat::row_vector(z))?.into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = MlpConfig::dde(2, 3, 8);
        let a = init_mlp(&cfg, 1).unwrap();
        let b = init_mlp(&cfg, 1).unwrap();
        let c = init_mlp(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        for slot in cfg.layout() {
            assert!(a.values()[slot.bias_range()].iter().all(|&v| v == 0.0));
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            assert!(a.values()[slot.weight_range()].iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn param_count_of_large_energy_net() {
        // in: 2·32+32, 25 blocks of two 32×32 maps, out: 32·1+1
        let cfg = MlpConfig::dde(2, 25, 32);
        let expected = (2 * 32 + 32) + 25 * 2 * (32 * 32 + 32) + (32 + 1);
        assert_eq!(expected, 52929);
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(init_mlp(&cfg, 0).unwrap().len(), expected);
        let plain = MlpConfig { residual: false, ..cfg };
        assert_eq!(plain.param_count(), (2 * 32 + 32) + 25 * (32 * 32 + 32) + 33);
    }

    #[test]
    fn zero_weights_collapse_to_output_bias() {
        let cfg = MlpConfig::dde(2, 25, 32);
        let mut p = MlpParams::zeros(cfg.clone()).unwrap();
        let last = cfg.layout().pop().unwrap();
        p.values_mut()[last.bias_range()][0] = 1.75;
        for x in [[0.0, 0.0], [3.0, -2.0], [100.0, 1e3]] {
            assert_eq!(dde_forward(&p, &x).unwrap(), 1.75);
        }
    }

    #[test]
    fn linear_case() {
        let cfg = MlpConfig::dde(2, 1, 2);
        let mut p = MlpParams::zeros(cfg.clone()).unwrap();
        let layout = cfg.layout();
        let v = p.values_mut();
        v[layout[0].offset] = 1.0;
        v[layout[0].offset + 3] = 1.0;
        let out = layout.last().unwrap().offset;
        v[out] = 1.0;
        v[out + 1] = 1.0;
        assert_eq!(dde_forward(&p, &[2.0, 3.0]).unwrap(), 5.0);
    }

    #[test]
    fn identity_generator() {
        let cfg = MlpConfig::generator(2, 2, 1, 2);
        let p = MlpParams::identity(cfg).unwrap();
        assert_eq!(generator_forward(&p, &[0.25, -1.5]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn zero_generator_is_constant() {
        let cfg = MlpConfig::generator(3, 2, 2, 4);
        let mut p = MlpParams::zeros(cfg.clone()).unwrap();
        let last = cfg.layout().pop().unwrap();
        p.values_mut()[last.bias_range()].copy_from_slice(&[0.5, -0.5]);
        let z = Mat::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]]).unwrap();
        let x = generator_forward_batch(&p, &z).unwrap();
        assert_eq!(x.row(0), &[0.5, -0.5]);
        assert_eq!(x.row(1), &[0.5, -0.5]);
    }

    #[test]
    fn batch_shape_contract() {
        let cfg = MlpConfig::generator(2, 2, 2, 8);
        let p = init_mlp(&cfg, 3).unwrap();
        let mut r = rng::stream(0, "t", 0);
        let z = rng::normal_mat(&mut r, 2048, 2, 1.0);
        assert_eq!(generator_forward_batch(&p, &z).unwrap().shape(), (2048, 2));
        assert!(generator_forward(&p, &[1.0]).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(MlpConfig::dde(2, 0, 8).validate().is_err());
        assert!(MlpConfig::dde(2, 2, 0).validate().is_err());
        assert!(MlpParams::from_values(MlpConfig::dde(2, 1, 2), vec![0.0; 3]).is_err());
    }
}
