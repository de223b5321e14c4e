//! Fully connected ReLU networks shared by the representation, the
//! classifier head and the end-to-end baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_into, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::SampleMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer widths `p -> hidden... -> d` with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize, init_seed: u64) -> Self {
        Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation: Activation::Relu,
            init_seed,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden_widths);
        w.push(self.output_dim);
        w
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.input_dim == 0 {
            errors.push("input dimension must be at least 1".into());
        }
        if self.output_dim == 0 {
            errors.push("output dimension must be at least 1".into());
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            errors.push(format!("hidden layer {i} has zero width"));
        }
    }
}

/// Network parameters stored as `(weight, bias)` pairs; weights are
/// `in x out` row-major so a forward pass is `x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: Vec<Param>,
}

impl Mlp {
    /// Uniform fan-in initialization `U(-1/sqrt(in), 1/sqrt(in))` for weights and biases.
    pub fn build(config: MlpConfig) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::InvalidConfig(errors));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let widths = config.widths();
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Param::new(format!("layer{l}.weight"), vec![fan_in, fan_out], w));
            params.push(Param::new(format!("layer{l}.bias"), vec![fan_out], b));
        }
        Ok(Self { config, params })
    }

    pub fn num_layers(&self) -> usize {
        self.params.len() / 2
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Checks that parameter shapes agree with the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let widths = self.config.widths();
        if self.params.len() != 2 * (widths.len() - 1) {
            return Err(Error::invalid("parameter count does not match layer widths"));
        }
        for (l, pair) in widths.windows(2).enumerate() {
            let (w, b) = (&self.params[2 * l], &self.params[2 * l + 1]);
            if w.shape != [pair[0], pair[1]]
                || b.shape != [pair[1]]
                || w.values.len() != pair[0] * pair[1]
                || b.values.len() != pair[1]
            {
                return Err(Error::invalid(format!("layer {l} shape mismatch")));
            }
        }
        Ok(())
    }

    /// Records the forward pass; returns the output and the parameter leaves
    /// in `self.params` order.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let leaves: Vec<Var> = self.params.iter().map(|p| tape.param(p.tensor())).collect();
        let out = self.forward_with_leaves(tape, x, &leaves)?;
        Ok((out, leaves))
    }

    pub(crate) fn forward_with_leaves(&self, tape: &mut Tape, x: Var, leaves: &[Var]) -> Result<Var> {
        let layers = self.num_layers();
        let mut h = x;
        for l in 0..layers {
            h = tape.matmul(h, leaves[2 * l])?;
            h = tape.add_bias(h, leaves[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Plain forward pass; same arithmetic as the taped one.
    pub fn forward(&self, x: &SampleMatrix) -> Result<SampleMatrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp forward",
                left: vec![x.rows(), x.cols()],
                right: vec![self.input_dim(), self.output_dim()],
            });
        }
        let n = x.rows();
        let layers = self.num_layers();
        let mut h = x.as_slice().to_vec();
        let mut width = x.cols();
        for l in 0..layers {
            let (w, b) = (&self.params[2 * l], &self.params[2 * l + 1]);
            let out_w = w.shape[1];
            h = matmul_into(&h, &w.values, n, width, out_w);
            for row in h.chunks_mut(out_w) {
                row.iter_mut().zip(&b.values).for_each(|(v, bb)| *v += bb);
                if l + 1 < layers {
                    row.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            width = out_w;
        }
        SampleMatrix::new(n, width, h)
    }
}
