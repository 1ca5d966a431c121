//! Pre-norm vision transformer, used both as the frozen high-resolution
//! backbone and as the narrow learnable side network.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::nn::{impl_params, randomize, LayerNorm, Linear, Params};
use crate::tensor::{graph, ops, Buffer, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub with_class_token: bool,
}

impl ViTConfig {
    /// ViT-B/16 at the given input resolution.
    pub fn vit_b(image_size: usize) -> Self {
        ViTConfig {
            image_size,
            patch_size: 16,
            channels: 3,
            layers: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            with_class_token: true,
        }
    }

    /// ViT-L/16 at the given input resolution.
    pub fn vit_l(image_size: usize) -> Self {
        ViTConfig {
            layers: 24,
            dim: 1024,
            heads: 16,
            ..Self::vit_b(image_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::dims(
                "patchify",
                &[self.image_size, self.image_size],
                &[self.patch_size],
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + usize::from(self.with_class_token)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub has_class_token: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Attention map and per-head projections captured from one block.
#[derive(Clone, Debug)]
pub struct LayerTap {
    /// 1-based block index.
    pub layer_index: usize,
    /// `[H × n × n]`, post-softmax.
    pub attn: Tensor,
    /// `[H × n × d_h]`.
    pub keys: Tensor,
    /// `[H × n × d_h]`.
    pub values: Tensor,
}

/// `[n × H·d_h]` (head `h` in column block `h`) to `[H × n × d_h]`.
pub fn to_head_major(x: &[f32], n: usize, heads: usize) -> Vec<f32> {
    let dim = x.len() / n;
    let dh = dim / heads;
    let mut out = vec![0.0; x.len()];
    for h in 0..heads {
        for t in 0..n {
            out[(h * n + t) * dh..(h * n + t + 1) * dh]
                .copy_from_slice(&x[t * dim + h * dh..t * dim + (h + 1) * dh]);
        }
    }
    out
}

/// Inverse of [`to_head_major`].
pub fn to_token_major(x: &[f32], n: usize, heads: usize) -> Vec<f32> {
    let dim = x.len() / n;
    let dh = dim / heads;
    let mut out = vec![0.0; x.len()];
    for h in 0..heads {
        for t in 0..n {
            out[t * dim + h * dh..t * dim + (h + 1) * dh]
                .copy_from_slice(&x[(h * n + t) * dh..(h * n + t + 1) * dh]);
        }
    }
    out
}

/// Splits an `[h × w × c]` image into non-overlapping `p × p` patches, one
/// row per patch in raster order, each flattened as `(row, col, channel)`.
pub fn extract_patches(image: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let [h, w, c] = *image.shape() else {
        return Err(Error::contract(format!(
            "images are [h × w × c], got {:?}",
            image.shape()
        )));
    };
    if c != channels {
        return Err(Error::dims("patchify channels", image.shape(), &[channels]));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::dims("patchify", image.shape(), &[patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = patch * c;
    let px = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for y in 0..patch {
                let start = ((gy * patch + y) * w + gx * patch) * c;
                out.extend_from_slice(&px[start..start + row]);
            }
        }
    }
    Tensor::new(out, &[gh * gw, patch * patch * c])
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub cls: Option<Tensor>,
    pub pos: Tensor,
}

impl_params!(PatchEmbed { proj, cls, pos });

impl PatchEmbed {
    pub fn new(cfg: &ViTConfig) -> Self {
        PatchEmbed {
            proj: Linear::zeroed(cfg.patch_dim(), cfg.dim),
            cls: cfg.with_class_token.then(|| Tensor::zeros(&[1, cfg.dim])),
            pos: Tensor::zeros(&[cfg.n_tokens(), cfg.dim]),
        }
    }

    /// Linear patch projection, class token prepended, positions added.
    pub fn forward(&self, image: &Tensor, cfg: &ViTConfig) -> Result<TokenSequence> {
        if image.shape()[..2] != [cfg.image_size, cfg.image_size] {
            return Err(Error::dims(
                "patchify",
                image.shape(),
                &[cfg.image_size, cfg.image_size, cfg.channels],
            ));
        }
        let patches = extract_patches(image, cfg.patch_size, cfg.channels)?;
        let mut tokens = self.proj.forward(&patches)?;
        if let Some(cls) = &self.cls {
            tokens = ops::concat_rows(&[cls, &tokens])?;
        }
        Ok(TokenSequence {
            tokens: ops::add(&tokens, &self.pos)?,
            has_class_token: self.cls.is_some(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl_params!(Attention { q, k, v, proj });

impl Attention {
    pub fn new(dim: usize) -> Self {
        Attention {
            q: Linear::zeroed(dim, dim),
            k: Linear::zeroed(dim, dim),
            v: Linear::zeroed(dim, dim),
            proj: Linear::zeroed(dim, dim),
        }
    }

    /// Multi-head self-attention over `x`; `tap` carries the layer index to
    /// stamp on the captured record.
    pub fn forward(
        &self,
        x: &Tensor,
        heads: usize,
        tap: Option<usize>,
    ) -> Result<(Tensor, Option<LayerTap>)> {
        let q = self.q.forward(x)?;
        let k = self.k.forward(x)?;
        let v = self.v.forward(x)?;
        let (o, probs) = ops::attention(&q, &k, &v, heads, tap.is_some())?;
        let out = self.proj.forward(&o)?;
        let tap = match (tap, probs) {
            (Some(layer_index), Some(attn)) => {
                let n = x.shape()[0];
                let dh = x.shape()[1] / heads;
                let head_major = |t: &Tensor| {
                    Tensor::from_buffer(
                        Buffer::from_vec(to_head_major(t.data(), n, heads)),
                        &[heads, n, dh],
                    )
                };
                Some(LayerTap {
                    layer_index,
                    attn,
                    keys: head_major(&k)?,
                    values: head_major(&v)?,
                })
            }
            _ => None,
        };
        Ok((out, tap))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_params!(Mlp { fc1, fc2 });

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl_params!(Block { ln1, attn, ln2, mlp });

impl Block {
    pub fn new(dim: usize, mlp_ratio: usize) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim),
            ln2: LayerNorm::new(dim),
            mlp: Mlp {
                fc1: Linear::zeroed(dim, dim * mlp_ratio),
                fc2: Linear::zeroed(dim * mlp_ratio, dim),
            },
        }
    }

    /// `z' = MSA(LN(z)) + z`.
    pub fn attention_half(
        &self,
        z: &Tensor,
        heads: usize,
        tap: Option<usize>,
    ) -> Result<(Tensor, Option<LayerTap>)> {
        let (a, tap) = self.attn.forward(&self.ln1.forward(z)?, heads, tap)?;
        Ok((ops::add(&a, z)?, tap))
    }

    /// `z'' = MLP(LN(z')) + z'`.
    pub fn mlp_half(&self, z: &Tensor) -> Result<Tensor> {
        let h = ops::gelu(&self.mlp.fc1.forward(&self.ln2.forward(z)?)?);
        ops::add(&self.mlp.fc2.forward(&h)?, z)
    }

    pub fn forward(
        &self,
        z: &Tensor,
        heads: usize,
        tap: Option<usize>,
    ) -> Result<(Tensor, Option<LayerTap>)> {
        let (mid, tap) = self.attention_half(z, heads, tap)?;
        Ok((self.mlp_half(&mid)?, tap))
    }
}

/// Final norm and linear classifier reading the class token.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub norm: LayerNorm,
    pub fc: Linear,
}

impl_params!(ClassifierHead { norm, fc });

impl ClassifierHead {
    pub fn new(dim: usize, classes: usize) -> Self {
        ClassifierHead {
            norm: LayerNorm::new(dim),
            fc: Linear::zeroed(dim, classes),
        }
    }

    /// Logits `[1 × classes]` from the first row of `tokens`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let cls = ops::slice_rows(tokens, 0, 1)?;
        self.fc.forward(&self.norm.forward(&cls)?)
    }
}

#[derive(Clone, Debug)]
pub struct ViT {
    pub cfg: ViTConfig,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub head: Option<ClassifierHead>,
}

impl_params!(ViT { embed, blocks, head });

impl ViT {
    /// Frozen encoder with seeded random weights and no classifier.
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut vit = ViT {
            embed: PatchEmbed::new(&cfg),
            blocks: (0..cfg.layers).map(|_| Block::new(cfg.dim, cfg.mlp_ratio)).collect(),
            head: None,
            cfg,
        };
        randomize(&mut vit, seed);
        Ok(vit)
    }

    /// Same encoder plus a classifier head, every tensor learnable.
    pub fn classifier(cfg: ViTConfig, classes: usize, seed: u64) -> Result<Self> {
        let mut vit = Self::new(cfg, seed)?;
        let mut head = ClassifierHead::new(vit.cfg.dim, classes);
        randomize(&mut head, crate::tensor::init::derive_seed(seed, "head"));
        vit.head = Some(head);
        vit.make_trainable();
        Ok(vit)
    }

    pub fn embed(&self, image: &Tensor) -> Result<TokenSequence> {
        self.embed.forward(image, &self.cfg)
    }

    /// Token activations after every block.
    pub fn forward(&self, image: &Tensor) -> Result<TokenSequence> {
        let mut z = self.embed(image)?;
        for block in &self.blocks {
            z.tokens = block.forward(&z.tokens, self.cfg.heads, None)?.0;
        }
        Ok(z)
    }

    pub fn classify(&self, image: &Tensor) -> Result<Tensor> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::contract("this encoder has no classifier head"))?;
        head.forward(&self.forward(image)?.tokens)
    }

    /// Inference-mode pass returning the taps of `tap_layers` (1-based) in
    /// ascending order.
    pub fn lpm_forward(&self, image: &Tensor, tap_layers: &[usize]) -> Result<Vec<LayerTap>> {
        let mut taps = Vec::with_capacity(tap_layers.len());
        self.lpm_forward_each(image, tap_layers, |tap| {
            taps.push(tap);
            Ok(())
        })?;
        Ok(taps)
    }

    /// Streaming form of [`ViT::lpm_forward`]: each tap goes to `on_tap` as
    /// soon as its block has run, so at most one attention map is alive.
    /// Blocks past the last requested tap, and the MLP of that last block,
    /// cannot influence any tap and are not run.
    pub fn lpm_forward_each(
        &self,
        image: &Tensor,
        tap_layers: &[usize],
        mut on_tap: impl FnMut(LayerTap) -> Result<()>,
    ) -> Result<()> {
        let wanted: BTreeSet<usize> = tap_layers.iter().copied().collect();
        if let Some(&bad) = wanted.iter().find(|&&l| l == 0 || l > self.cfg.layers) {
            return Err(Error::contract(format!(
                "tap layer {bad} outside 1..={}",
                self.cfg.layers
            )));
        }
        let Some(&last) = wanted.last() else {
            return Ok(());
        };
        graph::no_grad(|| {
            let mut z = self.embed(image)?.tokens;
            for (i, block) in self.blocks.iter().enumerate().take(last) {
                let layer = i + 1;
                let (mid, tap) =
                    block.attention_half(&z, self.cfg.heads, wanted.contains(&layer).then_some(layer))?;
                if let Some(tap) = tap {
                    on_tap(tap)?;
                }
                if layer == last {
                    break;
                }
                z = block.mlp_half(&mid)?;
            }
            Ok(())
        })
    }
}
