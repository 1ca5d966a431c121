//! Side network with fine-grained prompts: layer mapping, token importance
//! and selection, cross-attention fusion, and the side forward pass.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::nn::{impl_params, randomize, LayerNorm, Linear, Params};
use crate::tensor::{init, ops, Buffer, Tensor};
use crate::vit::{to_token_major, Block, ClassifierHead, LayerTap, PatchEmbed, ViTConfig};

/// How tokens are kept from each tapped layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Highest average incoming attention.
    Important,
    /// Uniform without replacement, seeded per image and layer.
    Random,
}

impl Selection {
    pub fn code(self) -> u8 {
        match self {
            Selection::Important => 0,
            Selection::Random => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Selection::Important => "important",
            Selection::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "important" => Ok(Selection::Important),
            "random" => Ok(Selection::Random),
            _ => Err(Error::config(format!("unknown selection strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FptConfig {
    pub high_res: usize,
    pub low_res: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// L_M.
    pub lpm_layers: usize,
    /// D_M.
    pub lpm_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// L_S.
    pub side_layers: usize,
    /// k, with D_S = D_M / k.
    pub reduction: usize,
    /// n_p.
    pub prompts: usize,
    pub token_ratio: f64,
    pub classes: usize,
    pub selection: Selection,
    /// Root seed of random selection.
    pub selection_seed: u64,
    /// Off gives a plain side network that never reads LPM features.
    pub fusion: bool,
}

impl Default for FptConfig {
    fn default() -> Self {
        FptConfig {
            high_res: 512,
            low_res: 128,
            patch_size: 16,
            channels: 3,
            lpm_layers: 12,
            lpm_dim: 768,
            heads: 12,
            mlp_ratio: 4,
            side_layers: 6,
            reduction: 8,
            prompts: 16,
            token_ratio: 0.2,
            classes: 2,
            selection: Selection::Important,
            selection_seed: 0,
            fusion: true,
        }
    }
}

impl FptConfig {
    pub fn side_dim(&self) -> usize {
        self.lpm_dim / self.reduction.max(1)
    }

    pub fn lpm(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.high_res,
            patch_size: self.patch_size,
            channels: self.channels,
            layers: self.lpm_layers,
            dim: self.lpm_dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            with_class_token: true,
        }
    }

    pub fn side(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.low_res,
            layers: self.side_layers,
            dim: self.side_dim(),
            ..self.lpm()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side_layers == 0 || self.side_layers > self.lpm_layers {
            return Err(Error::config(format!(
                "side depth {} must lie in 1..={}",
                self.side_layers, self.lpm_layers
            )));
        }
        if self.reduction == 0 || self.lpm_dim % self.reduction != 0 {
            return Err(Error::config(format!(
                "lpm dim {} is not divisible by reduction factor {}",
                self.lpm_dim, self.reduction
            )));
        }
        if !(self.token_ratio > 0.0 && self.token_ratio <= 1.0) {
            return Err(Error::config(format!(
                "token ratio {} outside (0, 1]",
                self.token_ratio
            )));
        }
        if self.prompts == 0 || self.classes < 2 {
            return Err(Error::config("need at least one prompt and two classes"));
        }
        self.lpm().validate()?;
        self.side().validate()
    }

    /// LPM layers feeding side layers 1..=L_S, ascending.
    pub fn tap_layers(&self) -> Vec<usize> {
        (1..=self.side_layers)
            .map(|l| self.lpm_layers - self.side_layers + l)
            .collect()
    }

    pub fn n_selected(&self) -> usize {
        selection_count(self.lpm().n_patches(), self.token_ratio)
    }
}

/// LPM layer `l' = L_M − L_S + l` feeding side layer `l` (all 1-based).
pub fn side_layer_map(lpm_layers: usize, side_layers: usize, l: usize) -> Result<usize> {
    if side_layers > lpm_layers || l == 0 || l > side_layers {
        return Err(Error::contract(format!(
            "side layer {l} invalid for L_M={lpm_layers}, L_S={side_layers}"
        )));
    }
    Ok(lpm_layers - side_layers + l)
}

/// `max(1, ⌊ratio · n⌋)`; the small slack keeps products such as
/// `0.7 · 10` from flooring one short.
pub fn selection_count(n_patch: usize, ratio: f64) -> usize {
    (((ratio * n_patch as f64) + 1e-9).floor() as usize).clamp(1, n_patch)
}

/// Mean attention each patch token receives from the other tokens,
/// averaged over heads. Class-token column excluded, its query row kept.
pub fn importance_scores(attn: &Tensor, class_token_present: bool) -> Result<Vec<f64>> {
    let [heads, n, m] = *attn.shape() else {
        return Err(Error::contract(format!(
            "attention maps are [H × n × n], got {:?}",
            attn.shape()
        )));
    };
    if n != m {
        return Err(Error::dims("importance_scores", attn.shape(), &[heads, n, n]));
    }
    if n < 2 {
        return Err(Error::contract("importance needs at least two tokens"));
    }
    let first = usize::from(class_token_present);
    if first >= n {
        return Err(Error::contract("no patch tokens to score"));
    }
    let a = attn.data();
    let mut sums = vec![0.0f64; n];
    for h in 0..heads {
        for i in 0..n {
            let row = &a[(h * n + i) * n..(h * n + i + 1) * n];
            for (j, &v) in row.iter().enumerate() {
                if j != i {
                    sums[j] += v as f64;
                }
            }
        }
    }
    let denom = (heads * (n - 1)) as f64;
    Ok(sums[first..].iter().map(|s| s / denom).collect())
}

/// Indices of the `selection_count` largest scores, ties to the lower
/// index, returned ascending.
pub fn select_important(scores: &[f64], token_ratio: f64) -> Result<Vec<usize>> {
    check_ratio(token_ratio)?;
    if scores.is_empty() {
        return Err(Error::contract("no scores to select from"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("importance scores"));
    }
    let k = selection_count(scores.len(), token_ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

pub fn select_random(n_patch: usize, token_ratio: f64, seed: u64) -> Result<Vec<usize>> {
    check_ratio(token_ratio)?;
    if n_patch == 0 {
        return Err(Error::contract("no patches to select from"));
    }
    let k = selection_count(n_patch, token_ratio);
    let mut picked = index::sample(&mut init::rng(seed), n_patch, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("token ratio {ratio} outside (0, 1]")))
    }
}

/// Kept keys and values of one LPM layer, head-major.
#[derive(Clone, Debug)]
pub struct SelectedFeatures {
    pub layer_index: usize,
    /// Patch indices (class token excluded), strictly increasing.
    pub indices: Vec<usize>,
    /// `[H × n_sel × d_h]`.
    pub keys: Tensor,
    /// `[H × n_sel × d_h]`.
    pub values: Tensor,
}

impl SelectedFeatures {
    /// Gathers `indices` (patch-relative) out of a tap.
    pub fn from_tap(tap: &LayerTap, indices: Vec<usize>, class_token_present: bool) -> Result<Self> {
        let [heads, n, dh] = *tap.keys.shape() else {
            return Err(Error::contract("tap keys must be [H × n × d_h]"));
        };
        let offset = usize::from(class_token_present);
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("selected indices must be strictly increasing"));
        }
        if indices.is_empty() || indices.last().is_some_and(|&i| i + offset >= n) {
            return Err(Error::contract(format!(
                "selection {indices:?} does not fit {n} tokens"
            )));
        }
        let gather = |src: &Tensor| {
            let data = src.data();
            let mut out = Vec::with_capacity(heads * indices.len() * dh);
            for h in 0..heads {
                for &i in &indices {
                    let row = (h * n + i + offset) * dh;
                    out.extend_from_slice(&data[row..row + dh]);
                }
            }
            Tensor::new(out, &[heads, indices.len(), dh])
        };
        Ok(SelectedFeatures {
            layer_index: tap.layer_index,
            keys: gather(&tap.keys)?,
            values: gather(&tap.values)?,
            indices,
        })
    }

    pub fn heads(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn token_major(&self, t: &Tensor) -> Result<Tensor> {
        let [h, n, dh] = *t.shape() else {
            return Err(Error::contract("selected features must be [H × n_sel × d_h]"));
        };
        Tensor::from_buffer(Buffer::from_vec(to_token_major(t.data(), n, h)), &[n, h * dh])
    }
}

/// Runs the strategy of `cfg` on each tap. Random selection draws from a
/// stream keyed by `(selection_seed, image_key, layer)`.
pub fn select_features(
    taps: &[LayerTap],
    cfg: &FptConfig,
    image_key: &str,
) -> Result<Vec<SelectedFeatures>> {
    taps.iter().map(|tap| select_layer(tap, cfg, image_key)).collect()
}

/// Selection for a single tap.
pub fn select_layer(tap: &LayerTap, cfg: &FptConfig, image_key: &str) -> Result<SelectedFeatures> {
    let n_patch = cfg.lpm().n_patches();
    let indices = match cfg.selection {
        Selection::Important => select_important(&importance_scores(&tap.attn, true)?, cfg.token_ratio)?,
        Selection::Random => {
            let label = format!("select/{image_key}/{}", tap.layer_index);
            select_random(n_patch, cfg.token_ratio, init::derive_seed(cfg.selection_seed, &label))?
        }
    };
    SelectedFeatures::from_tap(tap, indices, true)
}

/// Cross-attention fusion: `LN(p)` queries the selected keys/values, the
/// residual is added at LPM width, then the shared projector maps to side
/// width and the result is appended after the side tokens.
pub fn fuse(
    z_side: &Tensor,
    prompts: &Tensor,
    norm: &LayerNorm,
    sel: &SelectedFeatures,
    f_out: &Linear,
) -> Result<Tensor> {
    let (fused, _) = fuse_with_attention(z_side, prompts, norm, sel, f_out, false)?;
    Ok(fused)
}

/// [`fuse`] that optionally also returns the prompt attention `[H × n_p × n_sel]`.
pub fn fuse_with_attention(
    z_side: &Tensor,
    prompts: &Tensor,
    norm: &LayerNorm,
    sel: &SelectedFeatures,
    f_out: &Linear,
    keep_attention: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let dm = prompts.shape()[1];
    let heads = sel.heads();
    if heads == 0 || sel.keys.shape()[0] * sel.keys.shape()[2] != dm {
        return Err(Error::dims("fuse", prompts.shape(), sel.keys.shape()));
    }
    let k = sel.token_major(&sel.keys)?;
    let v = sel.token_major(&sel.values)?;
    let q = norm.forward(prompts)?;
    let (attended, probs) = ops::attention(&q, &k, &v, heads, keep_attention)?;
    let projected = f_out.forward(&ops::add(&attended, prompts)?)?;
    Ok((ops::concat_rows(&[z_side, &projected])?, probs))
}

/// Every learnable tensor of the method.
#[derive(Clone, Debug)]
pub struct SideNetwork {
    pub cfg: FptConfig,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    /// One `n_p × D_M` matrix per side layer.
    pub prompts: Vec<Tensor>,
    pub fusion_norms: Vec<LayerNorm>,
    /// Shared by every fusion module.
    pub f_out: Option<Linear>,
    pub head: ClassifierHead,
}

impl_params!(SideNetwork { embed, blocks, prompts, fusion_norms, f_out, head });

/// Per-group parameter counts of a side network.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupCounts {
    pub embeddings: usize,
    pub blocks: usize,
    pub prompts: usize,
    pub fusion_norms: usize,
    pub f_out: usize,
    pub head: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.embeddings + self.blocks + self.prompts + self.fusion_norms + self.f_out + self.head
    }
}

impl SideNetwork {
    /// Randomly initialized, every tensor learnable.
    pub fn new(cfg: FptConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let side = cfg.side();
        let layers = if cfg.fusion { cfg.side_layers } else { 0 };
        let mut net = SideNetwork {
            embed: PatchEmbed::new(&side),
            blocks: (0..side.layers).map(|_| Block::new(side.dim, side.mlp_ratio)).collect(),
            prompts: (0..layers).map(|_| Tensor::zeros(&[cfg.prompts, cfg.lpm_dim])).collect(),
            fusion_norms: (0..layers).map(|_| LayerNorm::new(cfg.lpm_dim)).collect(),
            f_out: cfg.fusion.then(|| Linear::zeroed(cfg.lpm_dim, side.dim)),
            head: ClassifierHead::new(side.dim, cfg.classes),
            cfg,
        };
        randomize(&mut net, seed);
        net.make_trainable();
        Ok(net)
    }

    pub fn census(&self) -> GroupCounts {
        GroupCounts {
            embeddings: self.embed.param_count(),
            blocks: self.blocks.param_count(),
            prompts: self.prompts.param_count(),
            fusion_norms: self.fusion_norms.param_count(),
            f_out: self.f_out.param_count(),
            head: self.head.param_count(),
        }
    }

    /// Logits `[1 × classes]` for one low-resolution image and its `L_S`
    /// selected-feature records (ignored when fusion is off).
    pub fn forward(&self, image_low: &Tensor, feats: &[SelectedFeatures]) -> Result<Tensor> {
        Ok(self.forward_traced(image_low, feats, &mut |_, _| {})?.0)
    }

    /// [`SideNetwork::forward`] that reports each side layer's in-block
    /// sequence length and prompt attention to `observe`.
    pub fn forward_traced(
        &self,
        image_low: &Tensor,
        feats: &[SelectedFeatures],
        observe: &mut dyn FnMut(usize, &Tensor),
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let cfg = &self.cfg;
        let side = cfg.side();
        if cfg.fusion && feats.len() != cfg.side_layers {
            return Err(Error::contract(format!(
                "expected {} selected-feature records, got {}",
                cfg.side_layers,
                feats.len()
            )));
        }
        let mut z = self.embed.forward(image_low, &side)?.tokens;
        let n_side = z.shape()[0];
        let mut prompt_attn = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let input = match &self.f_out {
                Some(f_out) if cfg.fusion => {
                    let (fused, probs) = fuse_with_attention(
                        &z,
                        &self.prompts[l],
                        &self.fusion_norms[l],
                        &feats[l],
                        f_out,
                        true,
                    )?;
                    prompt_attn.extend(probs);
                    fused
                }
                _ => z,
            };
            let (out, _) = block.forward(&input, side.heads, None)?;
            observe(l + 1, &out);
            z = if out.shape()[0] == n_side {
                out
            } else {
                ops::slice_rows(&out, 0, n_side)?
            };
        }
        Ok((self.head.forward(&z)?, prompt_attn))
    }
}
