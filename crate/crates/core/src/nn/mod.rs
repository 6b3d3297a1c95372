//! Building blocks and the two classifiers: a Vision Transformer student and
//! a small convolutional teacher.
//!
//! Both models take a batch of normalized patches laid out `[B, H, W, C]` and
//! return class logits `[B, classes]`.

mod cnn;
pub mod init;
mod vit;
pub mod weights;

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor, TensorError};

pub use cnn::{Cnn, CnnConfig, ConvStage, Pool};
pub use vit::{MultiHeadAttention, PatchEmbed, Vit, VitConfig};
pub use weights::{checksum, load_weights, save_weights, LoadError};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Load(#[from] LoadError),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A classifier with named parameters.
pub trait Model<F: Scalar> {
    /// `[B, H, W, C]` patches to `[B, classes]` logits.
    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>>;

    /// Parameters in a stable order with unique names.
    fn parameters(&self) -> Vec<(String, Tensor<F>)>;

    fn num_classes(&self) -> usize;

    fn mode(&self) -> Mode;

    fn set_mode(&mut self, mode: Mode);

    /// Restarts the dropout stream; forward passes in train mode draw masks
    /// from it in order.
    fn reseed_dropout(&self, seed: u64);

    fn spec(&self) -> ModelSpec;

    /// Stops gradient tracking for every parameter.
    fn freeze(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
            p.set_requires_grad(false);
        }
    }

    fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }
}

/// Total number of scalar parameters.
pub fn param_count<F: Scalar>(model: &dyn Model<F>) -> usize {
    model.parameters().iter().map(|(_, t)| t.numel()).sum()
}

/// Architecture description sufficient to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Vit(VitConfig),
    Cnn(CnnConfig),
}

impl ModelSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Vit(c) => c.num_classes,
            ModelSpec::Cnn(c) => c.num_classes,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            ModelSpec::Vit(c) => c.image_size,
            ModelSpec::Cnn(c) => c.image_size,
        }
    }

    pub fn build<F: Scalar>(&self, init_seed: u64) -> Result<Box<dyn Model<F>>> {
        Ok(match self {
            ModelSpec::Vit(c) => Box::new(Vit::new(c.clone(), init_seed)?),
            ModelSpec::Cnn(c) => Box::new(Cnn::new(c.clone(), init_seed)?),
        })
    }
}

/// Fully connected layer over the last axis: `x W + b`, `W: [in, out]`.
pub struct Linear<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: init::trunc_normal(&[input, output], 0.02, rng),
            bias: init::zeros(&[output]),
        }
    }

    pub fn he(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: init::he_normal(&[input, output], input, rng),
            bias: init::zeros(&[output]),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = x.shape().to_vec();
        let input = *shape.last().unwrap();
        let rows = x.numel() / input;
        let out = self.weight.shape()[1];
        let y = x
            .reshape(&[rows, input])?
            .matmul(&self.weight)?
            .add_bias(&self.bias)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out;
        Ok(y.reshape(&out_shape)?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub struct LayerNorm<F: Scalar> {
    pub gain: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: init::ones(&[dim]),
            bias: init::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(x.layer_norm(&self.gain, &self.bias, F::from_f64(1e-6))?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Dropout probability plus the stream masks are drawn from.
pub(crate) struct DropoutState {
    pub p: f64,
    pub rng: RefCell<ChaCha8Rng>,
}

impl DropoutState {
    pub fn new(p: f64, seed: u64) -> Self {
        DropoutState {
            p,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn reseed(&self, seed: u64) {
        *self.rng.borrow_mut() = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn apply<F: Scalar>(&self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        Ok(x.dropout(self.p, mode == Mode::Train, &mut *self.rng.borrow_mut())?)
    }
}

pub(crate) fn check_input<F: Scalar>(x: &Tensor<F>, size: usize, channels: usize) -> Result<usize> {
    let s = x.shape();
    if s.len() != 4 || s[1] != size || s[2] != size || s[3] != channels {
        return Err(NnError::Shape(format!(
            "expected [batch, {size}, {size}, {channels}], got {s:?}"
        )));
    }
    Ok(s[0])
}

pub(crate) fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::Config(format!("dropout_p must lie in [0, 1), got {p}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
