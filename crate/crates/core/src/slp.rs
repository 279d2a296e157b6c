//! Structured latent projection: split the fused latent into one shared
//! component and per-modality private components, hard-route the private
//! blocks by the availability mask, and concatenate for the decoder.
//!
//! The private projections consume the *ungated* correlation volumes; the
//! only masking is the multiplicative routing applied afterwards, so a
//! missing modality contributes an exactly-zero channel block of fixed
//! position and width. The decoder input layout is therefore identical
//! across every availability pattern: [shared, private_1, ..., private_M].

use crate::availability::{gate, AvailabilityMask};
use crate::error::{Error, Result};
use crate::layers::channel_mix;
use crate::params::{init_he, zeros, ParamStore};
use crate::tensor::{concat, Tensor};
use rand_chacha::ChaCha8Rng;

pub struct Slp {
    shared_w: usize,
    shared_b: usize,
    private: Vec<(usize, usize)>,
    latent_channels: usize,
}

impl Slp {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        inter_channels: usize,
        corr_channels: usize,
        latent_channels: usize,
        modalities: usize,
        rng: &mut ChaCha8Rng,
    ) -> Slp {
        let shared_w = store.add(
            format!("{prefix}.shared.w"),
            init_he(rng, &[inter_channels, latent_channels], inter_channels),
        );
        let shared_b = store.add(format!("{prefix}.shared.b"), zeros(&[latent_channels]));
        let private = (0..modalities)
            .map(|m| {
                (
                    store.add(
                        format!("{prefix}.private{m}.w"),
                        init_he(rng, &[corr_channels, latent_channels], corr_channels),
                    ),
                    store.add(format!("{prefix}.private{m}.b"), zeros(&[latent_channels])),
                )
            })
            .collect();
        Slp {
            shared_w,
            shared_b,
            private,
            latent_channels,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn modalities(&self) -> usize {
        self.private.len()
    }

    /// Shared latent from the fused volume; depends on the mask only through
    /// its input.
    pub fn project_shared(&self, store: &ParamStore, x_inter6: &Tensor, trainable: bool) -> Tensor {
        channel_mix(
            x_inter6,
            &store.leaf(self.shared_w, trainable),
            Some(&store.leaf(self.shared_b, trainable)),
        )
    }

    /// Private latent for one modality from its ungated correlation volume.
    pub fn project_private(
        &self,
        store: &ParamStore,
        modality: usize,
        z_corr: &Tensor,
        trainable: bool,
    ) -> Tensor {
        let (w, b) = self.private[modality];
        channel_mix(
            z_corr,
            &store.leaf(w, trainable),
            Some(&store.leaf(b, trainable)),
        )
    }

    /// Routes the private latents by the mask and concatenates
    /// [shared, private_1, ..., private_M] along channels.
    pub fn compose_decoder_input(
        &self,
        z_sh: &Tensor,
        z_pr: &[Tensor],
        mask: &AvailabilityMask,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if z_pr.len() != self.private.len() || mask.modalities() != self.private.len() {
            return Err(Error::shape(format!(
                "compose: {} private latents, mask width {}, expected {}",
                z_pr.len(),
                mask.modalities(),
                self.private.len()
            )));
        }
        let mut routed = Vec::with_capacity(z_pr.len());
        for (m, z) in z_pr.iter().enumerate() {
            routed.push(gate(z, &mask.column(m))?);
        }
        let mut parts = vec![z_sh.clone()];
        parts.extend(routed.iter().cloned());
        Ok((concat(1, &parts), routed))
    }
}
