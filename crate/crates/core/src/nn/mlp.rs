use crate::autodiff::{gemm, ParameterVector, Tape, Tensor, Var};
use crate::dgp::RandomStream;
use crate::error::{Error, Result};

pub const VARIANCE_MIN: f64 = 1e-6;
pub const VARIANCE_MAX: f64 = 1e6;

pub(crate) fn log_variance_bounds() -> (f64, f64) {
    (VARIANCE_MIN.ln(), VARIANCE_MAX.ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Architecture of a fully connected network with scalar input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    /// Output heads: 2 for (mean, log-variance), 4 for evidential regression.
    pub outputs: usize,
    pub dropout_rate: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_layers: 4,
            hidden_width: 100,
            activation: Activation::Relu,
            outputs: 2,
            dropout_rate: 0.0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 || self.outputs == 0 {
            return Err(Error::contract(format!(
                "network needs at least one hidden layer, unit and output: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::contract(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(1, self.hidden_width)];
        for _ in 1..self.hidden_layers {
            dims.push((self.hidden_width, self.hidden_width));
        }
        dims.push((self.hidden_width, self.outputs));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// He-uniform weights and zero biases, laid out as
    /// `layer{k}.weight` (`fan_in x fan_out`) then `layer{k}.bias`.
    pub fn init_params(&self, stream: &mut RandomStream) -> ParameterVector {
        let mut blocks = Vec::new();
        for (k, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let limit = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| limit * (2.0 * stream.uniform() - 1.0))
                .collect();
            blocks.push((
                format!("layer{k}.weight"),
                Tensor::matrix(fan_in, fan_out, w).expect("dims"),
            ));
            blocks.push((format!("layer{k}.bias"), Tensor::vector(vec![0.0; fan_out])));
        }
        ParameterVector::from_tensors(blocks)
    }

    /// Builds the network on `tape` from weight/bias nodes in layout order.
    ///
    /// With `dropout` set and a positive rate, each hidden activation is
    /// multiplied by a fresh inverted-dropout mask. Returns an `n x outputs`
    /// node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        weights: &[Var],
        xs: &[f64],
        mut dropout: Option<&mut RandomStream>,
    ) -> Result<Var> {
        let dims = self.layer_dims();
        if weights.len() != 2 * dims.len() {
            return Err(Error::contract(format!(
                "expected {} parameter blocks, got {}",
                2 * dims.len(),
                weights.len()
            )));
        }
        let mut h = tape.constant(Tensor::matrix(xs.len(), 1, xs.to_vec())?);
        for (k, _) in dims.iter().enumerate() {
            let z = tape.matmul(h, weights[2 * k])?;
            let z = tape.add(z, weights[2 * k + 1])?;
            if k + 1 == dims.len() {
                return Ok(z);
            }
            h = match self.activation {
                Activation::Relu => tape.relu(z)?,
                Activation::Tanh => tape.tanh(z)?,
            };
            if let Some(stream) = dropout.as_deref_mut() {
                if self.dropout_rate > 0.0 {
                    let mask = dropout_mask(stream, xs.len() * self.hidden_width, self.dropout_rate);
                    let m = tape.constant(Tensor::matrix(xs.len(), self.hidden_width, mask)?);
                    h = tape.mul(h, m)?;
                }
            }
        }
        unreachable!("loop returns at the output layer")
    }

    /// Tape-free forward pass with flat parameters; returns row-major
    /// `n x outputs` raw head values.
    pub fn forward_values(&self, params: &[f64], xs: &[f64], mut dropout: Option<&mut RandomStream>) -> Vec<f64> {
        let n = xs.len();
        let dims = self.layer_dims();
        let mut h = xs.to_vec();
        let mut offset = 0;
        for (k, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &params[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out;
            let b = &params[offset..offset + fan_out];
            offset += fan_out;
            let mut z = vec![0.0; n * fan_out];
            for row in z.chunks_exact_mut(fan_out) {
                row.copy_from_slice(b);
            }
            gemm(n, fan_in, fan_out, &h, false, w, false, &mut z, true);
            if k + 1 < dims.len() {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
                if let Some(stream) = dropout.as_deref_mut() {
                    if self.dropout_rate > 0.0 {
                        let mask = dropout_mask(stream, z.len(), self.dropout_rate);
                        z.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                    }
                }
            }
            h = z;
        }
        h
    }
}

fn dropout_mask(stream: &mut RandomStream, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if stream.uniform() < rate { 0.0 } else { keep })
        .collect()
}

/// First-order predictive parameters at one input: mean and noise variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FirstOrderPrediction {
    pub mean: f64,
    pub variance: f64,
}

impl FirstOrderPrediction {
    /// From raw (mean, log-variance) head values, clamping the variance.
    pub fn from_heads(mean: f64, log_variance: f64) -> Self {
        let (lo, hi) = log_variance_bounds();
        FirstOrderPrediction {
            mean,
            variance: log_variance.clamp(lo, hi).exp().clamp(VARIANCE_MIN, VARIANCE_MAX),
        }
    }
}

/// Gaussian negative log-likelihood `1/2 [log(2 pi s2) + (y - mu)^2 / s2]`.
pub fn gaussian_nll(pred: FirstOrderPrediction, y: f64) -> Result<f64> {
    if !(pred.variance > 0.0) {
        return Err(Error::contract(format!(
            "variance must be positive, got {}",
            pred.variance
        )));
    }
    let r = y - pred.mean;
    Ok(0.5 * ((std::f64::consts::TAU * pred.variance).ln() + r * r / pred.variance))
}

/// Per-example Gaussian NLL vector from an `n x 2` (mean, log-variance) head.
pub fn gaussian_nll_terms(tape: &mut Tape, heads: Var, ys: &[f64]) -> Result<Var> {
    let (lo, hi) = log_variance_bounds();
    let mu = tape.column(heads, 0)?;
    let s = tape.column(heads, 1)?;
    let s = tape.restoring_clamp(s, lo, hi)?;
    let y = tape.constant(Tensor::vector(ys.to_vec()));
    let r = tape.sub(y, mu)?;
    let r2 = tape.square(r)?;
    let neg_s = tape.neg(s)?;
    let prec = tape.exp(neg_s)?;
    let quad = tape.mul(r2, prec)?;
    let inner = tape.add(s, quad)?;
    let half = tape.scale(inner, 0.5)?;
    tape.offset(half, 0.5 * std::f64::consts::TAU.ln())
}

/// Mean Gaussian NLL over a batch.
pub fn gaussian_nll_mean(tape: &mut Tape, heads: Var, ys: &[f64]) -> Result<Var> {
    let terms = gaussian_nll_terms(tape, heads, ys)?;
    tape.mean(terms)
}
