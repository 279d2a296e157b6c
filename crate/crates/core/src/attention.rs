//! Tokenization of volumetric features and pre-norm multi-head
//! self-attention, used both per modality and for the joint multimodal
//! stream.
//!
//! Layer layout per transformer layer: layer norm feeds the Q/K/V
//! projections; scaled dot-product attention runs per head; heads are
//! concatenated and projected; the first residual adds the un-normalized
//! layer input; the feed-forward block applies a second pre-norm residual.

use crate::error::{Error, Result};
use crate::layers::linear_tokens;
use crate::params::{init_pos, init_xavier, ones, zeros, ParamStore};
use crate::tensor::{
    add, add_broadcast_batch, bmm, gelu, layer_norm, permute, reshape, scale, softmax_last,
    Tensor,
};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    /// Token embedding width C_t.
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Cubic patch side for tokenization.
    pub patch: usize,
    /// Feed-forward expansion factor.
    pub mlp_ratio: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            embed_dim: 64,
            heads: 4,
            layers: 2,
            patch: 1,
            mlp_ratio: 2,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("attention dimensions must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch == 0 {
            return Err(Error::config("patch must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Number of tokens for a (D, H, W) grid under cubic patching.
pub fn token_count(grid: (usize, usize, usize), patch: usize) -> Result<usize> {
    let (d, h, w) = grid;
    if patch == 0 || d % patch != 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "patch {patch} incompatible with grid {grid:?}"
        )));
    }
    Ok((d / patch) * (h / patch) * (w / patch))
}

/// Rearranges [B, C, D, H, W] into patch tokens [B, N, P^3 * C].
/// Token order is row-major over the patch grid; within a token, features
/// are ordered (channel, dz, dy, dx).
pub fn patchify_volume(x: &Tensor, patch: usize) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape("patchify expects [B, C, D, H, W]"));
    }
    let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let n = token_count((d, h, w), patch)?;
    let feat = patch * patch * patch * c;
    let (gd, gh, gw) = (d / patch, h / patch, w / patch);

    let forward_map = move |src: &ArrayD<f32>| -> ArrayD<f32> {
        let xs = src.as_slice().unwrap();
        let mut out = ArrayD::<f32>::zeros(vec![b, n, feat]);
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    for dz in 0..d {
                        for dy in 0..h {
                            for dx in 0..w {
                                let token = ((dz / patch) * gh + dy / patch) * gw + dx / patch;
                                let f = ((ci * patch + dz % patch) * patch + dy % patch) * patch
                                    + dx % patch;
                                let src_ix = (((bi * c + ci) * d + dz) * h + dy) * w + dx;
                                os[(bi * n + token) * feat + f] = xs[src_ix];
                            }
                        }
                    }
                }
            }
        }
        let _ = gd;
        out
    };
    let value = forward_map(x.value());
    let shape = s.clone();
    Ok(Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            // Inverse of a bijective index map: scatter back.
            let gs = g.as_slice().unwrap();
            let mut dx = ArrayD::<f32>::zeros(shape.clone());
            {
                let ds = dx.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        for dz in 0..d {
                            for dy in 0..h {
                                for dx_i in 0..w {
                                    let token =
                                        ((dz / patch) * gh + dy / patch) * gw + dx_i / patch;
                                    let f = ((ci * patch + dz % patch) * patch + dy % patch)
                                        * patch
                                        + dx_i % patch;
                                    let src_ix = (((bi * c + ci) * d + dz) * h + dy) * w + dx_i;
                                    ds[src_ix] = gs[(bi * n + token) * feat + f];
                                }
                            }
                        }
                    }
                }
            }
            vec![dx]
        }),
    ))
}

/// Inverse of unit-patch tokenization: [B, N, C] -> [B, C, D, H, W] with
/// N = D * H * W.
pub fn tokens_to_volume(t: &Tensor, grid: (usize, usize, usize)) -> Result<Tensor> {
    let s = t.shape().to_vec();
    let (d, h, w) = grid;
    if s.len() != 3 || s[1] != d * h * w {
        return Err(Error::shape(format!(
            "tokens {s:?} do not match grid {grid:?}"
        )));
    }
    let (b, c) = (s[0], s[2]);
    // [B, N, C] -> [B, D, H, W, C] -> [B, C, D, H, W]
    Ok(permute(&reshape(t, &[b, d, h, w, c]), &[0, 4, 1, 2, 3]))
}

/// [B, C, D, H, W] -> [B, N, C] with N = D * H * W (unit-patch flatten).
pub fn volume_to_tokens(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    reshape(&permute(x, &[0, 2, 3, 4, 1]), &[b, d * h * w, c])
}

/// Learnable patch projection plus positional embedding.
pub struct Tokenizer {
    proj: usize,
    pos: usize,
    patch: usize,
    tokens: usize,
}

impl Tokenizer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        grid: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Tokenizer> {
        let n = token_count(grid, cfg.patch)?;
        let feat = cfg.patch.pow(3) * cfg.embed_dim;
        Ok(Tokenizer {
            proj: store.add(
                format!("{prefix}.token.proj"),
                init_xavier(rng, &[feat, cfg.embed_dim], feat, cfg.embed_dim),
            ),
            pos: store.add(format!("{prefix}.token.pos"), init_pos(rng, &[n, cfg.embed_dim])),
            patch: cfg.patch,
            tokens: n,
        })
    }

    pub fn token_len(&self) -> usize {
        self.tokens
    }

    /// Patch-flatten, project, add positional embedding.
    pub fn tokenize(&self, store: &ParamStore, x: &Tensor, trainable: bool) -> Result<Tensor> {
        let patches = patchify_volume(x, self.patch)?;
        let s = patches.shape().to_vec();
        let flat = reshape(&patches, &[s[0] * s[1], s[2]]);
        let projected = crate::tensor::matmul(&flat, &store.leaf(self.proj, trainable));
        let c_t = store.value(self.proj).shape()[1];
        let tokens = reshape(&projected, &[s[0], s[1], c_t]);
        Ok(add_broadcast_batch(&tokens, &store.leaf(self.pos, trainable)))
    }
}

struct Layer {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

/// A stack of pre-norm transformer layers.
pub struct TransformerStack {
    layers: Vec<Layer>,
    heads: usize,
    head_dim: usize,
}

impl TransformerStack {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> TransformerStack {
        let c = cfg.embed_dim;
        let hidden = c * cfg.mlp_ratio;
        let layers = (0..cfg.layers)
            .map(|i| Layer {
                ln1_g: store.add(format!("{prefix}.l{i}.ln1.g"), ones(&[c])),
                ln1_b: store.add(format!("{prefix}.l{i}.ln1.b"), zeros(&[c])),
                wq: store.add(format!("{prefix}.l{i}.wq"), init_xavier(rng, &[c, c], c, c)),
                wk: store.add(format!("{prefix}.l{i}.wk"), init_xavier(rng, &[c, c], c, c)),
                wv: store.add(format!("{prefix}.l{i}.wv"), init_xavier(rng, &[c, c], c, c)),
                wo: store.add(format!("{prefix}.l{i}.wo"), init_xavier(rng, &[c, c], c, c)),
                ln2_g: store.add(format!("{prefix}.l{i}.ln2.g"), ones(&[c])),
                ln2_b: store.add(format!("{prefix}.l{i}.ln2.b"), zeros(&[c])),
                mlp_w1: store.add(
                    format!("{prefix}.l{i}.mlp.w1"),
                    init_xavier(rng, &[c, hidden], c, hidden),
                ),
                mlp_b1: store.add(format!("{prefix}.l{i}.mlp.b1"), zeros(&[hidden])),
                mlp_w2: store.add(
                    format!("{prefix}.l{i}.mlp.w2"),
                    init_xavier(rng, &[hidden, c], hidden, c),
                ),
                mlp_b2: store.add(format!("{prefix}.l{i}.mlp.b2"), zeros(&[c])),
            })
            .collect();
        TransformerStack {
            layers,
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
        }
    }

    /// Runs the stack; when `attn_out` is provided, per-layer attention
    /// probabilities [B*heads, N, N] are appended to it.
    pub fn forward(
        &self,
        store: &ParamStore,
        tokens: &Tensor,
        trainable: bool,
        mut attn_out: Option<&mut Vec<ArrayD<f32>>>,
    ) -> Tensor {
        let mut cur = tokens.clone();
        for layer in &self.layers {
            let normed = layer_norm(
                &cur,
                &store.leaf(layer.ln1_g, trainable),
                &store.leaf(layer.ln1_b, trainable),
                NORM_EPS,
            );
            let q = linear_tokens(&normed, &store.leaf(layer.wq, trainable), None);
            let k = linear_tokens(&normed, &store.leaf(layer.wk, trainable), None);
            let v = linear_tokens(&normed, &store.leaf(layer.wv, trainable), None);

            let (probs, ctx) = self.attend(&q, &k, &v);
            if let Some(sink) = attn_out.as_deref_mut() {
                sink.push(probs.value().clone());
            }
            let msa = linear_tokens(&ctx, &store.leaf(layer.wo, trainable), None);
            let u = add(&cur, &msa);

            let ff_in = layer_norm(
                &u,
                &store.leaf(layer.ln2_g, trainable),
                &store.leaf(layer.ln2_b, trainable),
                NORM_EPS,
            );
            let hidden = gelu(&linear_tokens(
                &ff_in,
                &store.leaf(layer.mlp_w1, trainable),
                Some(&store.leaf(layer.mlp_b1, trainable)),
            ));
            let ff = linear_tokens(
                &hidden,
                &store.leaf(layer.mlp_w2, trainable),
                Some(&store.leaf(layer.mlp_b2, trainable)),
            );
            cur = add(&u, &ff);
        }
        cur
    }

    /// Scaled dot-product attention over packed heads.
    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
        let s = q.shape().to_vec();
        let (b, n) = (s[0], s[1]);
        let (heads, dk) = (self.heads, self.head_dim);
        let split = |t: &Tensor| {
            reshape(
                &permute(&reshape(t, &[b, n, heads, dk]), &[0, 2, 1, 3]),
                &[b * heads, n, dk],
            )
        };
        let (qh, kh, vh) = (split(q), split(k), split(v));
        let scores = scale(&bmm(&qh, &kh, true), 1.0 / (dk as f32).sqrt());
        let probs = softmax_last(&scores);
        let ctx = bmm(&probs, &vh, false);
        let merged = reshape(
            &permute(&reshape(&ctx, &[b, heads, n, dk]), &[0, 2, 1, 3]),
            &[b, n, heads * dk],
        );
        (probs, merged)
    }
}
