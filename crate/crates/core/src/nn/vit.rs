use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_dropout, check_input, init, DropoutState, LayerNorm, Linear, Mode, Model, ModelSpec,
    NnError, Result,
};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

fn default_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub cell_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub dropout_p: f64,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

impl VitConfig {
    /// ViT-tiny geometry: 224 px images, 16 px cells, width 192, depth 12.
    pub fn tiny(num_classes: usize) -> Self {
        VitConfig {
            image_size: 224,
            cell_size: 16,
            embed_dim: 192,
            num_layers: 12,
            num_heads: 3,
            mlp_ratio: 4.0,
            num_classes,
            dropout_p: 0.2,
            channels: 3,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.cell_size
    }

    /// Cells plus the class token.
    pub fn token_count(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("cell_size", self.cell_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NnError::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.cell_size) {
            return Err(NnError::Config(format!(
                "image_size {} is not divisible by cell_size {}",
                self.image_size, self.cell_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(NnError::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(NnError::Config("mlp_ratio gives an empty hidden layer".into()));
        }
        check_dropout(self.dropout_p)
    }
}

/// Splits images into non-overlapping square cells, projects each flattened
/// cell linearly, prepends a class token and adds positional embeddings.
pub struct PatchEmbed<F: Scalar> {
    pub proj: Linear<F>,
    pub class_token: Tensor<F>,
    pub position: Tensor<F>,
    image_size: usize,
    cell_size: usize,
    channels: usize,
}

impl<F: Scalar> PatchEmbed<F> {
    pub fn new(cfg: &VitConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.cell_size == 0 || !cfg.image_size.is_multiple_of(cfg.cell_size) {
            return Err(NnError::Config(format!(
                "image_size {} is not divisible by cell_size {}",
                cfg.image_size, cfg.cell_size
            )));
        }
        let d = cfg.embed_dim;
        let cell_dim = cfg.cell_size * cfg.cell_size * cfg.channels;
        Ok(PatchEmbed {
            proj: Linear::new(cell_dim, d, rng),
            class_token: init::trunc_normal(&[1, 1, d], 0.02, rng),
            position: init::trunc_normal(&[1, cfg.token_count(), d], 0.02, rng),
            image_size: cfg.image_size,
            cell_size: cfg.cell_size,
            channels: cfg.channels,
        })
    }

    /// Flattened cells `[B, cells, cell*cell*C]`, cells in row-major grid order.
    pub fn cells(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let b = check_input(x, self.image_size, self.channels)?;
        let (c, g) = (self.cell_size, self.image_size / self.cell_size);
        Ok(x.reshape(&[b, g, c, g, c, self.channels])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, g * g, c * c * self.channels])?)
    }

    /// `[B, H, W, C]` to tokens `[B, cells + 1, embed_dim]`.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let cells = self.cells(x)?;
        let (b, n) = (cells.shape()[0], cells.shape()[1]);
        let d = self.class_token.shape()[2];
        let emb = self.proj.forward(&cells)?;
        let cls = self.class_token.broadcast_to(&[b, 1, d])?;
        let tokens = Tensor::concat(&[&cls, &emb], 1)?;
        Ok(tokens.add(&self.position.broadcast_to(&[b, n + 1, d])?)?)
    }

    /// Tokens for a single `[H, W, C]` image: `[cells + 1, embed_dim]`.
    pub fn embed_image(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(NnError::Shape(format!("expected [H, W, C], got {s:?}")));
        }
        let t = self.forward(&image.reshape(&[1, s[0], s[1], s[2]])?)?;
        let (n, d) = (t.shape()[1], t.shape()[2]);
        Ok(t.reshape(&[n, d])?)
    }
}

/// Multi-head scaled dot-product self-attention with a fused QKV projection.
pub struct MultiHeadAttention<F: Scalar> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    heads: usize,
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::Config(format!(
                "embed_dim {dim} is not divisible by num_heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Output `[B, N, D]` and attention weights `[B * heads, N, N]`.
    pub fn forward_with_weights(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(NnError::Shape(format!("attention expects [B, N, D], got {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = d / h;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape(&[b, n, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Tensor<F>> {
            Ok(qkv.narrow(0, i, 1)?.reshape(&[b * h, n, dh])?)
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scale = F::one() / F::from_f64(dh as f64).sqrt();
        let weights = q.bmm_nt(&k)?.scale(scale).softmax(2, F::one())?;
        let ctx = weights
            .bmm(&v)?
            .reshape(&[b, h, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, d])?;
        Ok((self.proj.forward(&ctx)?, weights))
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

struct Block<F: Scalar> {
    norm1: LayerNorm<F>,
    attn: MultiHeadAttention<F>,
    norm2: LayerNorm<F>,
    fc1: Linear<F>,
    fc2: Linear<F>,
}

impl<F: Scalar> Block<F> {
    fn forward(&self, x: &Tensor<F>, drop: &DropoutState, mode: Mode) -> Result<Tensor<F>> {
        let a = self.attn.forward(&self.norm1.forward(x)?)?;
        let x = x.add(&drop.apply(&a, mode)?)?;
        let m = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu();
        let m = self.fc2.forward(&drop.apply(&m, mode)?)?;
        Ok(x.add(&drop.apply(&m, mode)?)?)
    }
}

/// Pre-norm Vision Transformer classifying from the class token.
pub struct Vit<F: Scalar = f32> {
    cfg: VitConfig,
    pub embed: PatchEmbed<F>,
    blocks: Vec<Block<F>>,
    norm: LayerNorm<F>,
    pub head: Linear<F>,
    dropout: DropoutState,
    mode: Mode,
}

impl<F: Scalar> Vit<F> {
    pub fn new(cfg: VitConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(init_seed, rng::INIT, 0);
        let d = cfg.embed_dim;
        let embed = PatchEmbed::new(&cfg, &mut r)?;
        let blocks = (0..cfg.num_layers)
            .map(|_| {
                Ok(Block {
                    norm1: LayerNorm::new(d),
                    attn: MultiHeadAttention::new(d, cfg.num_heads, &mut r)?,
                    norm2: LayerNorm::new(d),
                    fc1: Linear::new(d, cfg.mlp_hidden(), &mut r),
                    fc2: Linear::new(cfg.mlp_hidden(), d, &mut r),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Vit {
            norm: LayerNorm::new(d),
            head: Linear::new(d, cfg.num_classes, &mut r),
            dropout: DropoutState::new(cfg.dropout_p, rng::derive_seed(init_seed, rng::DROPOUT, 0)),
            embed,
            blocks,
            cfg,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }
}

impl<F: Scalar> Model<F> for Vit<F> {
    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut h = self.dropout.apply(&self.embed.forward(x)?, self.mode)?;
        for block in &self.blocks {
            h = block.forward(&h, &self.dropout, self.mode)?;
        }
        let h = self.norm.forward(&h)?;
        let b = h.shape()[0];
        let cls = h.narrow(1, 0, 1)?.reshape(&[b, self.cfg.embed_dim])?;
        self.head.forward(&cls)
    }

    fn parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.embed.proj.push_params("patch_embed.proj", &mut out);
        out.push(("patch_embed.class_token".into(), self.embed.class_token.clone()));
        out.push(("patch_embed.position".into(), self.embed.position.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.norm1.push_params(&format!("blocks.{i}.norm1"), &mut out);
            b.attn.qkv.push_params(&format!("blocks.{i}.attn.qkv"), &mut out);
            b.attn.proj.push_params(&format!("blocks.{i}.attn.proj"), &mut out);
            b.norm2.push_params(&format!("blocks.{i}.norm2"), &mut out);
            b.fc1.push_params(&format!("blocks.{i}.mlp.fc1"), &mut out);
            b.fc2.push_params(&format!("blocks.{i}.mlp.fc2"), &mut out);
        }
        self.norm.push_params("norm", &mut out);
        self.head.push_params("head", &mut out);
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
        ModelSpec::Vit(self.cfg.clone())
    }
}
