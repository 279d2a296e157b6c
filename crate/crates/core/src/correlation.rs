//! Inter-modal correlation: pixel-wise cross-source attention over the
//! modality axis, residual fusion into the token streams, and the joint
//! multimodal transformer producing the fused deep latent.
//!
//! Correlation scores are elementwise Q ⊙ K products; the softmax runs over
//! the source-modality index with temperature sqrt(M). By default the softmax
//! ranges over every source, present or not — a missing source's keys and
//! values are bias-derived constants, so they contribute no input content.
//! `renormalize_over_available` restricts it to present sources per sample.

use crate::attention::{tokens_to_volume, volume_to_tokens, AttentionConfig, TransformerStack};
use crate::availability::{gate, AvailabilityMask};
use crate::error::{Error, Result};
use crate::layers::channel_mix;
use crate::params::{init_he, init_pos, zeros, ParamStore};
use crate::tensor::{
    add, add_broadcast_batch, concat, index_axis0, mul, narrow, scale, softmax_modality, stack0,
    Tensor,
};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

/// Additive penalty that removes a source from the softmax.
const EXCLUDED: f32 = -1.0e30;

pub struct Correlation {
    qkv: Vec<(usize, usize)>,
    fuse_w: usize,
    fuse_b: usize,
    pos: usize,
    stack: TransformerStack,
    dec_w: usize,
    dec_b: usize,
    modalities: usize,
    grid: (usize, usize, usize),
    embed: usize,
    renormalize_over_available: bool,
}

pub struct CorrelationOutput {
    /// Fused latent volume [B, C_dec, D, H, W].
    pub x_inter6: Tensor,
    /// Ungated per-modality correlation volumes (kept for the private
    /// latent projections).
    pub z_corr: Vec<Tensor>,
    /// Gated correlation volumes; zero wherever the target modality is
    /// missing.
    pub z_corr_gated: Vec<Tensor>,
    /// Per-target stacked attention weights over sources, [M, B, C, D, H, W].
    pub alphas: Vec<ArrayD<f32>>,
    /// Multimodal transformer attention maps (when traced).
    pub multi_attention: Vec<ArrayD<f32>>,
}

impl Correlation {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        att: &AttentionConfig,
        deep_width: usize,
        inter_channels: usize,
        modalities: usize,
        grid: (usize, usize, usize),
        renormalize_over_available: bool,
        rng: &mut ChaCha8Rng,
    ) -> Correlation {
        let c = att.embed_dim;
        let n = grid.0 * grid.1 * grid.2;
        let qkv = (0..modalities)
            .map(|m| {
                (
                    store.add(format!("{prefix}.qkv{m}.w"), init_he(rng, &[c, 3 * c], c)),
                    store.add(format!("{prefix}.qkv{m}.b"), zeros(&[3 * c])),
                )
            })
            .collect();
        let fuse_w = store.add(
            format!("{prefix}.fuse.w"),
            init_he(rng, &[deep_width, c], deep_width),
        );
        let fuse_b = store.add(format!("{prefix}.fuse.b"), zeros(&[c]));
        let pos = store.add(
            format!("{prefix}.pos"),
            init_pos(rng, &[(modalities + 1) * n, c]),
        );
        let stack = TransformerStack::register(store, &format!("{prefix}.multi"), att, rng);
        let dec_w = store.add(format!("{prefix}.dec.w"), init_he(rng, &[c, inter_channels], c));
        let dec_b = store.add(format!("{prefix}.dec.b"), zeros(&[inter_channels]));
        Correlation {
            qkv,
            fuse_w,
            fuse_b,
            pos,
            stack,
            dec_w,
            dec_b,
            modalities,
            grid,
            embed: c,
            renormalize_over_available,
        }
    }

    /// Q/K/V volumes for one modality from its token stream.
    fn project_qkv(
        &self,
        store: &ParamStore,
        modality: usize,
        tokens: &Tensor,
        trainable: bool,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let volume = tokens_to_volume(tokens, self.grid)?;
        let (w, b) = self.qkv[modality];
        let packed = channel_mix(
            &volume,
            &store.leaf(w, trainable),
            Some(&store.leaf(b, trainable)),
        );
        let c = self.embed;
        Ok((
            narrow(&packed, 1, 0, c),
            narrow(&packed, 1, c, c),
            narrow(&packed, 1, 2 * c, c),
        ))
    }

    /// Runs the whole block on the per-modality intra-attention token
    /// streams plus the fused deep feature.
    pub fn forward(
        &self,
        store: &ParamStore,
        z_tokens: &[Tensor],
        f6: &Tensor,
        mask: &AvailabilityMask,
        trainable: bool,
        trace_attention: bool,
    ) -> Result<CorrelationOutput> {
        let m_count = self.modalities;
        if z_tokens.len() != m_count {
            return Err(Error::shape(format!(
                "correlation: {} token streams for {} modalities",
                z_tokens.len(),
                m_count
            )));
        }
        let mut qs = Vec::with_capacity(m_count);
        let mut ks = Vec::with_capacity(m_count);
        let mut vs = Vec::with_capacity(m_count);
        for (m, tokens) in z_tokens.iter().enumerate() {
            let (q, k, v) = self.project_qkv(store, m, tokens, trainable)?;
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }

        let penalty = if self.renormalize_over_available {
            Some(self.exclusion_penalty(mask, qs[0].shape()))
        } else {
            None
        };
        let temperature = (m_count as f32).sqrt();

        let mut z_corr = Vec::with_capacity(m_count);
        let mut z_corr_gated = Vec::with_capacity(m_count);
        let mut alphas = Vec::with_capacity(m_count);
        let mut fused_tokens = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let scores: Vec<Tensor> = (0..m_count).map(|j| mul(&qs[m], &ks[j])).collect();
            let mut stacked = stack0(&scores);
            if let Some(p) = &penalty {
                stacked = add(&stacked, p);
            }
            let alpha = softmax_modality(&stacked, temperature);
            alphas.push(alpha.value().clone());

            let mut corr = mul(&index_axis0(&alpha, 0), &vs[0]);
            for j in 1..m_count {
                corr = add(&corr, &mul(&index_axis0(&alpha, j), &vs[j]));
            }
            let gated = gate(&corr, &mask.column(m))?;
            let fused = add(&z_tokens[m], &volume_to_tokens(&gated));
            z_corr.push(corr);
            z_corr_gated.push(gated);
            fused_tokens.push(fused);
        }

        // Joint stream: modality tokens then the projected deep fusion.
        let z_multi = concat(1, &fused_tokens);
        let f6_proj = channel_mix(
            f6,
            &store.leaf(self.fuse_w, trainable),
            Some(&store.leaf(self.fuse_b, trainable)),
        );
        let f6_tokens = volume_to_tokens(&f6_proj);
        let u = concat(1, &[z_multi, f6_tokens]);
        let u = add_broadcast_batch(&u, &store.leaf(self.pos, trainable));

        let mut multi_attention = Vec::new();
        let refined = self.stack.forward(
            store,
            &u,
            trainable,
            trace_attention.then_some(&mut multi_attention),
        );

        // The (M+1)*N refined tokens map back onto one grid by averaging the
        // aligned spatial positions of the M+1 streams.
        let n = self.grid.0 * self.grid.1 * self.grid.2;
        let mut acc: Option<Tensor> = None;
        for k in 0..=m_count {
            let stream = tokens_to_volume(&narrow(&refined, 1, k * n, n), self.grid)?;
            acc = Some(match acc {
                Some(a) => add(&a, &stream),
                None => stream,
            });
        }
        let averaged = scale(&acc.unwrap(), 1.0 / (m_count + 1) as f32);
        let x_inter6 = channel_mix(
            &averaged,
            &store.leaf(self.dec_w, trainable),
            Some(&store.leaf(self.dec_b, trainable)),
        );

        Ok(CorrelationOutput {
            x_inter6,
            z_corr,
            z_corr_gated,
            alphas,
            multi_attention,
        })
    }

    /// Builds the additive [M, B, C, D, H, W] penalty that excludes missing
    /// sources from the per-sample softmax.
    fn exclusion_penalty(&self, mask: &AvailabilityMask, shape: &[usize]) -> Tensor {
        let mut full = vec![self.modalities];
        full.extend_from_slice(shape);
        let mut value = ArrayD::<f32>::zeros(full);
        for j in 0..self.modalities {
            for (b, row) in mask.rows().iter().enumerate() {
                if row[j] == 0 {
                    value
                        .index_axis_mut(ndarray::Axis(0), j)
                        .index_axis_mut(ndarray::Axis(0), b)
                        .fill(EXCLUDED);
                }
            }
        }
        Tensor::constant(value)
    }
}
