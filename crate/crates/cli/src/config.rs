//! Flat run configuration. One file serves every subcommand; each command
//! reads the keys it needs and the manifest records all of them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vitkd::distill::{KDConfig, KlDirection};
use vitkd::nn::{CnnConfig, ConvStage, ModelSpec, Pool, VitConfig};
use vitkd::preprocess::PatchConfig;
use vitkd::synthdata::SynthConfig;
use vitkd::train::{SweepPlan, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub margin: usize,
    pub bubble_density: f64,
    pub bubble_radius_min: f64,
    pub bubble_radius_max: f64,
    pub rim_fraction: f64,
    pub bubble_contrast: f64,
    pub noise_scale: f64,
    pub jitter: f64,

    pub patch_size: usize,
    pub overlap_threshold: f64,
    pub foreground_threshold: f64,

    pub vit_cell_size: usize,
    pub vit_embed_dim: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    pub vit_mlp_ratio: f64,
    /// Output channels of each conv stage; every stage is conv, ReLU, 2×2 max pool.
    pub cnn_channels: Vec<usize>,
    pub cnn_kernel: usize,
    pub cnn_hidden: Vec<usize>,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout_p: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
    pub augment: bool,

    pub temperature: f64,
    pub alpha: f64,
    pub kl_direction: KlDirection,

    pub temperatures: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Seeds for sweep cells; empty means just `seed`.
    pub seeds: Vec<u64>,
}

impl Default for Config {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let patch = PatchConfig::default();
        let train = TrainConfig::default();
        let vit = VitConfig::tiny(2);
        let cnn = CnnConfig::small(2);
        let grid = SweepPlan::default_grid(Vec::new());
        let kd = KDConfig::new(10.0, 0.5);
        Config {
            seed: 0,
            train_images: synth.train_images,
            val_images: synth.val_images,
            test_images: synth.test_images,
            image_size: synth.image_size,
            margin: synth.margin,
            bubble_density: synth.bubble_density,
            bubble_radius_min: synth.bubble_radius_min,
            bubble_radius_max: synth.bubble_radius_max,
            rim_fraction: synth.rim_fraction,
            bubble_contrast: synth.bubble_contrast,
            noise_scale: synth.noise_scale,
            jitter: synth.jitter,
            patch_size: patch.patch_size,
            overlap_threshold: patch.overlap_threshold,
            foreground_threshold: patch.foreground_threshold,
            vit_cell_size: vit.cell_size,
            vit_embed_dim: vit.embed_dim,
            vit_layers: vit.num_layers,
            vit_heads: vit.num_heads,
            vit_mlp_ratio: vit.mlp_ratio,
            cnn_channels: cnn.stages.iter().map(|s| s.channels).collect(),
            cnn_kernel: cnn.stages[0].kernel,
            cnn_hidden: cnn.hidden,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            dropout_p: train.dropout_p,
            max_epochs: train.max_epochs,
            early_stop_patience: train.early_stop_patience,
            scheduler_factor: train.scheduler_factor,
            scheduler_patience: train.scheduler_patience,
            min_lr: train.min_lr,
            min_delta: train.min_delta,
            augment: train.augment,
            temperature: kd.temperature,
            alpha: kd.alpha,
            kl_direction: kd.kl_direction,
            temperatures: grid.temperatures,
            alphas: grid.alphas,
            seeds: Vec::new(),
        }
    }
}

impl Config {
    /// Parses TOML text. Errors name the offending line and key.
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Every key with its value in TOML syntax, in declaration order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let table = toml::Value::try_from(self).expect("config serializes");
        let toml::Value::Table(table) = table else { unreachable!() };
        let order = field_order();
        let mut out: Vec<(String, String)> = table.into_iter().map(|(k, v)| (k, v.to_string())).collect();
        out.sort_by_key(|(k, _)| order.iter().position(|o| o == k).unwrap_or(usize::MAX));
        out
    }

    /// Inverse of [`Config::entries`].
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, String> {
        let text: String = entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Self::parse(&text)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            train_images: self.train_images,
            val_images: self.val_images,
            test_images: self.test_images,
            image_size: self.image_size,
            margin: self.margin,
            bubble_density: self.bubble_density,
            bubble_radius_min: self.bubble_radius_min,
            bubble_radius_max: self.bubble_radius_max,
            rim_fraction: self.rim_fraction,
            bubble_contrast: self.bubble_contrast,
            noise_scale: self.noise_scale,
            jitter: self.jitter,
            seed: self.seed,
        }
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            patch_size: self.patch_size,
            overlap_threshold: self.overlap_threshold,
            foreground_threshold: self.foreground_threshold,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            dropout_p: self.dropout_p,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            scheduler_factor: self.scheduler_factor,
            scheduler_patience: self.scheduler_patience,
            min_lr: self.min_lr,
            min_delta: self.min_delta,
            augment: self.augment,
            seed: self.seed,
        }
    }

    pub fn kd(&self) -> KDConfig {
        KDConfig {
            temperature: self.temperature,
            alpha: self.alpha,
            kl_direction: self.kl_direction,
        }
    }

    pub fn plan(&self) -> SweepPlan {
        SweepPlan {
            temperatures: self.temperatures.clone(),
            alphas: self.alphas.clone(),
            kl_direction: self.kl_direction,
            seeds: if self.seeds.is_empty() { vec![self.seed] } else { self.seeds.clone() },
        }
    }

    /// Student architecture for patches of `image_size` pixels.
    pub fn student(&self, image_size: usize) -> ModelSpec {
        ModelSpec::Vit(VitConfig {
            image_size,
            cell_size: self.vit_cell_size,
            embed_dim: self.vit_embed_dim,
            num_layers: self.vit_layers,
            num_heads: self.vit_heads,
            mlp_ratio: self.vit_mlp_ratio,
            num_classes: 2,
            dropout_p: self.dropout_p,
            channels: 3,
        })
    }

    pub fn teacher(&self, image_size: usize) -> ModelSpec {
        ModelSpec::Cnn(CnnConfig {
            image_size,
            channels: 3,
            stages: self
                .cnn_channels
                .iter()
                .map(|&c| ConvStage::new(c, self.cnn_kernel, Pool::Max))
                .collect(),
            hidden: self.cnn_hidden.clone(),
            num_classes: 2,
            dropout_p: self.dropout_p,
        })
    }
}

fn field_order() -> Vec<String> {
    // Serializing the default yields keys in declaration order.
    let probe = toml::to_string(&Config::default()).expect("config serializes");
    probe
        .lines()
        .filter_map(|l| l.split_once(" = ").map(|(k, _)| k.trim().to_string()))
        .collect()
}
