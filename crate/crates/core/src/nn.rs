//! Parameterized layers: convolution, transposed convolution, batch
//! normalization, dropout and 2x2 max pooling.
//!
//! Layers are read-only during a forward pass. Training-mode batch
//! statistics are collected in a [`ForwardCtx`] and folded into the running
//! averages afterwards with [`BatchNorm2d::apply_stats`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{BatchStats, Scalar, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and the gradient of the most recent backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { value, grad: None }
    }
}

/// State threaded through one forward pass.
pub struct ForwardCtx<T: Scalar> {
    pub mode: Mode,
    /// Distinguishes dropout masks between training steps.
    pub step: u64,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> ForwardCtx<T> {
    pub fn new(mode: Mode, step: u64) -> Self {
        Self {
            mode,
            step,
            bn_stats: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    /// Batch statistics recorded by training-mode batch norms, keyed by layer name.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Visitor over named parameters and non-trainable buffers.
pub trait Module<T: Scalar> {
    fn parameters(&self) -> Vec<(String, &Parameter<T>)>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)>;

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub name: String,
    /// `(C_out, C_in, k, k)`
    pub weight: Parameter<T>,
    /// `(C_out)`
    pub bias: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            name: name.into(),
            weight: Parameter::new(he_uniform(vec![c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng)),
            bias: Parameter::new(Tensor::zeros(vec![c_out])),
            stride,
            padding,
        }
    }

    /// 3x3, stride 1, padding 1: preserves spatial size.
    pub fn same3x3<R: Rng + ?Sized>(name: impl Into<String>, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::new(name, c_in, c_out, 3, 1, 1, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight.value);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias.value);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn parameters(&self) -> Vec<(String, &Parameter<T>)> {
        vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }
}

/// Learned upsampling; with a 2x2 kernel and stride 2 it exactly doubles
/// the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Scalar> {
    pub name: String,
    /// `(C_in, C_out, k, k)`
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        // each output pixel sees c_in * (k / stride)^2 inputs
        let fan_in = (c_in * kernel * kernel / (stride * stride)).max(1);
        Self {
            name: name.into(),
            weight: Parameter::new(he_uniform(vec![c_in, c_out, kernel, kernel], fan_in, rng)),
            bias: Parameter::new(Tensor::zeros(vec![c_out])),
            stride,
        }
    }

    pub fn upsample2x<R: Rng + ?Sized>(name: impl Into<String>, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::new(name, c_in, c_out, 2, 2, rng)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight.value);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias.value);
        tape.conv_transpose2d(x, w, Some(b), self.stride, 0)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn parameters(&self) -> Vec<(String, &Parameter<T>)> {
        vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub name: String,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Parameter::new(Tensor::ones(vec![channels])),
            beta: Parameter::new(Tensor::zeros(vec![channels])),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let c = tape.value(x)?.dims4()?.1;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "{}: input has {c} channels, layer expects {}",
                self.name,
                self.channels()
            )));
        }
        let g = tape.param(&format!("{}.gamma", self.name), &self.gamma.value);
        let b = tape.param(&format!("{}.beta", self.name), &self.beta.value);
        let eps = T::from_f64_lossy(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, g, b, eps, None)?;
                if let Some(stats) = stats {
                    ctx.bn_stats.push((self.name.clone(), stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let running = (self.running_mean.data(), self.running_var.data());
                Ok(tape.batch_norm(x, g, b, eps, Some(running))?.0)
            }
        }
    }

    /// Exponential moving average update with the unbiased batch variance.
    pub fn apply_stats(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(self.momentum);
        let one_m = T::one() - m;
        let unbias = if stats.count > 1 {
            T::from_f64_lossy(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + one_m * b * unbias;
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn parameters(&self) -> Vec<(String, &Parameter<T>)> {
        vec![
            (format!("{}.gamma", self.name), &self.gamma),
            (format!("{}.beta", self.name), &self.beta),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        vec![
            (format!("{}.gamma", self.name), &mut self.gamma),
            (format!("{}.beta", self.name), &mut self.beta),
        ]
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.name), &self.running_mean),
            (format!("{}.running_var", self.name), &self.running_var),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.name), &mut self.running_mean),
            (format!("{}.running_var", self.name), &mut self.running_var),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Dropout {
    pub name: String,
    pub rate: f64,
    pub seed: u64,
}

impl Dropout {
    pub fn new(name: impl Into<String>, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self {
            name: name.into(),
            rate,
            seed,
        })
    }

    /// Identity in eval mode or at rate 0; otherwise the mask is drawn from a
    /// generator seeded by `(seed, ctx.step)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, ctx: &ForwardCtx<T>) -> Result<Var> {
        if ctx.mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let mut rng = rng_from(&[self.seed, ctx.step]);
        tape.dropout(x, self.rate, &mut rng)
    }
}

pub fn maxpool2<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.maxpool2(x)
}
