//! The synthetic heteroscedastic data-generating process and its ground truth.
//!
//! Covariates follow `Beta(1.2, 0.5)`, the conditional mean is
//! `sin(1 / (5 (x + 0.16)^3))` and the noise variance is `x^4`.

mod rng;

pub use rng::{derive_seed, sample_beta, RandomStream, ALGORITHM};

use std::path::Path;

use crate::error::{Error, Result};
use crate::report::fmt_f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanFn {
    /// `sin(1 / (5 (x + 0.16)^3))`
    SinInverseCubic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseFn {
    /// `x^4`
    Quartic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DgpSpec {
    pub beta_alpha: f64,
    pub beta_beta: f64,
    pub mean_fn: MeanFn,
    pub noise_fn: NoiseFn,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            beta_alpha: 1.2,
            beta_beta: 0.5,
            mean_fn: MeanFn::SinInverseCubic,
            noise_fn: NoiseFn::Quartic,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_alpha > 0.0 && self.beta_beta > 0.0) {
            return Err(Error::contract(format!(
                "Beta shape parameters must be positive, got ({}, {})",
                self.beta_alpha, self.beta_beta
            )));
        }
        Ok(())
    }

    pub fn mean(&self, x: f64) -> f64 {
        match self.mean_fn {
            MeanFn::SinInverseCubic => f_true(x),
        }
    }

    pub fn noise_variance(&self, x: f64) -> f64 {
        match self.noise_fn {
            NoiseFn::Quartic => sigma2_true(x),
        }
    }
}

/// True conditional mean.
pub fn f_true(x: f64) -> f64 {
    (1.0 / (5.0 * (x + 0.16).powi(3))).sin()
}

/// True noise variance.
pub fn sigma2_true(x: f64) -> f64 {
    x.powi(4)
}

/// One realization of the training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, seed: u64) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::contract(format!(
                "dataset has {} covariates but {} responses",
                xs.len(),
                ys.len()
            )));
        }
        Ok(Dataset { xs, ys, seed })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// The rows at `indices`, in order (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            xs: indices.iter().map(|&i| self.xs[i]).collect(),
            ys: indices.iter().map(|&i| self.ys[i]).collect(),
            seed: self.seed,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in self.xs.iter().zip(&self.ys) {
            out.push_str(&fmt_f64(*x));
            out.push(',');
            out.push_str(&fmt_f64(*y));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("x,y") {
            return Err(Error::Parse("dataset CSV must start with `x,y`".into()));
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.is_empty()) {
            let (x, y) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad dataset row `{line}`")))?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad number `{s}`: {e}")))
            };
            xs.push(parse(x)?);
            ys.push(parse(y)?);
        }
        Dataset::new(xs, ys, seed)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Draws `n` points from the process with the stream keyed by `seed`.
pub fn generate_dataset(spec: &DgpSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::contract("dataset size must be positive"));
    }
    let mut stream = RandomStream::new(seed).child("dataset", n as u64);
    let xs = sample_beta(&mut stream, spec.beta_alpha, spec.beta_beta, n)?;
    let ys = xs
        .iter()
        .map(|&x| spec.mean(x) + spec.noise_variance(x).sqrt() * stream.normal())
        .collect();
    Dataset::new(xs, ys, seed)
}
