//! Lightweight convolutional decoder: four nearest-neighbor upsampling
//! stages that fold in the skip features f4..f1, a depth-axis mean
//! reduction, and a sigmoid segmentation head.

use crate::error::{Error, Result};
use crate::layers::channel_mix_2d;
use crate::params::{init_he, ones, zeros, ParamStore};
use crate::tensor::{concat, conv3d, group_norm, mean_axis, relu, sigmoid, upsample2x_hw, Tensor};
use rand_chacha::ChaCha8Rng;

const NORM_EPS: f32 = 1e-5;
pub const STAGES: usize = 4;

struct Stage {
    conv_w: usize,
    conv_b: usize,
    norm_g: usize,
    norm_b: usize,
    c_in: usize,
}

pub struct Decoder {
    stages: Vec<Stage>,
    head_w: usize,
    head_b: usize,
    norm_groups: usize,
}

/// Full-resolution probabilities and logits, both [B, 1, H, W].
pub struct Prediction {
    pub probs: Tensor,
    pub logits: Tensor,
}

impl Decoder {
    /// `input_channels` is the latent width entering stage 1; `skip_widths`
    /// are the widths of f4..f1 in consumption order.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_channels: usize,
        skip_widths: [usize; STAGES],
        stage_widths: [usize; STAGES],
        norm_groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decoder> {
        for (k, &w) in stage_widths.iter().enumerate() {
            if w == 0 || w % norm_groups != 0 {
                return Err(Error::config(format!(
                    "decoder stage {k} width {w} incompatible with norm_groups {norm_groups}"
                )));
            }
        }
        let mut stages = Vec::with_capacity(STAGES);
        let mut c_in = input_channels;
        for (k, (&skip, &c_out)) in skip_widths.iter().zip(&stage_widths).enumerate() {
            let total_in = c_in + skip;
            stages.push(Stage {
                conv_w: store.add(
                    format!("{prefix}.stage{k}.conv.w"),
                    init_he(rng, &[c_out, total_in, 3, 3, 3], total_in * 27),
                ),
                conv_b: store.add(format!("{prefix}.stage{k}.conv.b"), zeros(&[c_out])),
                norm_g: store.add(format!("{prefix}.stage{k}.norm.g"), ones(&[c_out])),
                norm_b: store.add(format!("{prefix}.stage{k}.norm.b"), zeros(&[c_out])),
                c_in: total_in,
            });
            c_in = c_out;
        }
        let head_w = store.add(
            format!("{prefix}.head.w"),
            init_he(rng, &[c_in, 1], c_in),
        );
        let head_b = store.add(format!("{prefix}.head.b"), zeros(&[1]));
        Ok(Decoder {
            stages,
            head_w,
            head_b,
            norm_groups,
        })
    }

    /// Decodes the routed latent with skips f4..f1 (deepest first).
    pub fn decode(
        &self,
        store: &ParamStore,
        skips: &[Tensor; STAGES],
        z6: &Tensor,
        trainable: bool,
    ) -> Result<Prediction> {
        let mut cur = z6.clone();
        for (k, (stage, skip)) in self.stages.iter().zip(skips.iter()).enumerate() {
            let up = upsample2x_hw(&cur);
            let us = up.shape();
            let ss = skip.shape();
            if us[0] != ss[0] || us[2] != ss[2] || us[3] != ss[3] || us[4] != ss[4] {
                return Err(Error::shape(format!(
                    "decoder stage {k}: upsampled {us:?} does not align with skip {ss:?}"
                )));
            }
            if us[1] + ss[1] != stage.c_in {
                return Err(Error::shape(format!(
                    "decoder stage {k}: channel widths {} + {} != registered {}",
                    us[1], ss[1], stage.c_in
                )));
            }
            let merged = concat(1, &[up, skip.clone()]);
            let conv = conv3d(
                &merged,
                &store.leaf(stage.conv_w, trainable),
                &store.leaf(stage.conv_b, trainable),
                (1, 1, 1),
                (1, 1, 1),
            );
            let normed = group_norm(
                &conv,
                self.norm_groups,
                &store.leaf(stage.norm_g, trainable),
                &store.leaf(stage.norm_b, trainable),
                NORM_EPS,
            );
            cur = relu(&normed);
        }
        // Depth axis reduced by mean before the 1x1 head.
        let planar = mean_axis(&cur, 2);
        let logits = channel_mix_2d(
            &planar,
            &store.leaf(self.head_w, trainable),
            Some(&store.leaf(self.head_b, trainable)),
        );
        let probs = sigmoid(&logits);
        Ok(Prediction { probs, logits })
    }
}
