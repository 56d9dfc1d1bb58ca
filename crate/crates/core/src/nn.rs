//! Parameter-holding building blocks shared by the encoder layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numkit::{Graph, Parameter, Scalar, Tensor, Var, LN_EPS};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Source of initial weight values. Biases and norm gains ignore it.
pub enum Init<'a> {
    /// All-zero weights; used to build skeletons that get filled in later.
    Zeros,
    /// Truncated normal (±2σ) with σ = [`INIT_STD`].
    TruncNormal(&'a mut ChaCha8Rng),
}

impl Init<'_> {
    pub fn weight<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::TruncNormal(rng) => {
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break T::lit(z * INIT_STD);
                        }
                    })
                    .collect();
                Tensor::new(shape.to_vec(), data).expect("sized")
            }
        }
    }
}

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, init: &mut Init<'_>) -> Self {
        Self {
            weight: Parameter::new(format!("{prefix}.weight"), init.weight(&[d_in, d_out])),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros([d_out])),
        }
    }

    pub fn from_parts(prefix: &str, weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight: Parameter::new(format!("{prefix}.weight"), weight),
            bias: Parameter::new(format!("{prefix}.bias"), bias),
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = g.matmul(x, &g.param(&self.weight))?;
        g.add(&y, &g.param(&self.bias))
    }

    pub fn d_in(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(prefix: &str, width: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::ones([width])),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros([width])),
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        g.layer_norm(x, &g.param(&self.gamma), &g.param(&self.beta), T::lit(LN_EPS))
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}
