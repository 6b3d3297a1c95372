use serde::{Deserialize, Serialize};

use super::{
    check_dropout, check_input, init, DropoutState, Linear, Mode, Model, ModelSpec, NnError,
    Result,
};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    None,
    Max,
    Avg,
}

/// conv (zero padding `kernel / 2`) -> ReLU -> optional pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: Pool,
    pub pool_size: usize,
}

impl ConvStage {
    pub fn new(channels: usize, kernel: usize, pool: Pool) -> Self {
        ConvStage {
            channels,
            kernel,
            stride: 1,
            pool,
            pool_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub image_size: usize,
    pub channels: usize,
    pub stages: Vec<ConvStage>,
    /// Widths of the hidden fully connected layers before the output layer.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub dropout_p: f64,
}

impl CnnConfig {
    /// Four conv stages and a three-layer classifier for 32 px patches.
    pub fn small(num_classes: usize) -> Self {
        CnnConfig {
            image_size: 32,
            channels: 3,
            stages: vec![
                ConvStage::new(8, 3, Pool::Max),
                ConvStage::new(16, 3, Pool::Max),
                ConvStage::new(32, 3, Pool::Max),
                ConvStage::new(32, 3, Pool::Max),
            ],
            hidden: vec![64, 32],
            num_classes,
            dropout_p: 0.2,
        }
    }

    /// Spatial extent and channel count after every stage.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut size = self.image_size;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(NnError::Config(format!("stage {i}: extents must be positive")));
            }
            let pad = s.kernel / 2;
            if size + 2 * pad < s.kernel {
                return Err(NnError::Config(format!("stage {i}: kernel larger than input")));
            }
            size = (size + 2 * pad - s.kernel) / s.stride + 1;
            if s.pool != Pool::None {
                if s.pool_size == 0 || size < s.pool_size {
                    return Err(NnError::Config(format!(
                        "stage {i}: pooling {} does not fit a {size} px map",
                        s.pool_size
                    )));
                }
                size /= s.pool_size;
            }
            out.push((size, s.channels));
        }
        Ok(out)
    }

    pub fn feature_len(&self) -> Result<usize> {
        Ok(match self.stage_shapes()?.last() {
            Some(&(size, ch)) => size * size * ch,
            None => self.image_size * self.image_size * self.channels,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(NnError::Config(
                "image_size, channels and num_classes must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(NnError::Config("hidden widths must be positive".into()));
        }
        self.feature_len()?;
        check_dropout(self.dropout_p)
    }
}

struct Conv<F: Scalar> {
    weight: Tensor<F>,
    bias: Tensor<F>,
    stage: ConvStage,
}

pub struct Cnn<F: Scalar = f32> {
    cfg: CnnConfig,
    convs: Vec<Conv<F>>,
    fcs: Vec<Linear<F>>,
    dropout: DropoutState,
    mode: Mode,
}

impl<F: Scalar> Cnn<F> {
    pub fn new(cfg: CnnConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(init_seed, rng::INIT, 0);
        let mut in_ch = cfg.channels;
        let mut convs = Vec::with_capacity(cfg.stages.len());
        for s in &cfg.stages {
            let fan_in = in_ch * s.kernel * s.kernel;
            convs.push(Conv {
                weight: init::he_normal(&[s.channels, in_ch, s.kernel, s.kernel], fan_in, &mut r),
                bias: init::zeros(&[s.channels]),
                stage: s.clone(),
            });
            in_ch = s.channels;
        }
        let mut widths = vec![cfg.feature_len()?];
        widths.extend(&cfg.hidden);
        widths.push(cfg.num_classes);
        let fcs = widths.windows(2).map(|w| Linear::he(w[0], w[1], &mut r)).collect();
        Ok(Cnn {
            dropout: DropoutState::new(cfg.dropout_p, rng::derive_seed(init_seed, rng::DROPOUT, 0)),
            cfg,
            convs,
            fcs,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }
}

impl<F: Scalar> Model<F> for Cnn<F> {
    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let b = check_input(x, self.cfg.image_size, self.cfg.channels)?;
        let mut h = x.permute(&[0, 3, 1, 2])?;
        for conv in &self.convs {
            let s = &conv.stage;
            h = h.conv2d(&conv.weight, Some(&conv.bias), s.stride, s.kernel / 2)?.relu();
            h = match s.pool {
                Pool::None => h,
                Pool::Max => h.max_pool2d(s.pool_size, s.pool_size)?,
                Pool::Avg => h.avg_pool2d(s.pool_size, s.pool_size)?,
            };
        }
        let features = h.numel() / b;
        let mut h = h.reshape(&[b, features])?;
        let last = self.fcs.len() - 1;
        for (i, fc) in self.fcs.iter().enumerate() {
            h = fc.forward(&h)?;
            if i < last {
                h = self.dropout.apply(&h.relu(), self.mode)?;
            }
        }
        Ok(h)
    }

    fn parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("features.{i}.weight"), c.weight.clone()));
            out.push((format!("features.{i}.bias"), c.bias.clone()));
        }
        for (i, fc) in self.fcs.iter().enumerate() {
            fc.push_params(&format!("classifier.{i}"), &mut out);
        }
        out
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn reseed_dropout(&self, seed: u64) {
        self.dropout.reseed(seed);
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::Cnn(self.cfg.clone())
    }
}
