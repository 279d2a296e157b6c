//! Per-modality multi-scale 3-d convolutional encoder.
//!
//! A compact stand-in for a heavyweight inflated backbone with the same
//! interface: six feature levels, the deepest feeding the transformer stage,
//! levels 1-4 feeding decoder skips. The spectral/channel axis of each
//! modality becomes the depth axis of the 3-d convolutions; a per-modality
//! pointwise stem maps heterogeneous channel counts onto a common depth
//! extent first.
//!
//! Normalization is group-style per sample, so no statistics ever cross the
//! batch axis — a masked sample can never leak content into its neighbors.

use crate::error::{Error, Result};
use crate::layers::channel_mix;
use crate::params::{init_he, zeros, ones, ParamStore};
use crate::tensor::{add, conv3d, group_norm, relu, reshape, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LEVELS: usize = 6;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Stem output channels (input width of level 1).
    pub base_width: usize,
    pub level_widths: [usize; LEVELS],
    pub level_strides: [usize; LEVELS],
    /// Depth of the 3-d feature maps after the stem.
    pub depth_extent: usize,
    /// Channel groups for per-sample normalization.
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            base_width: 16,
            level_widths: [16, 32, 64, 64, 96, 96],
            level_strides: [1, 2, 2, 2, 2, 1],
            depth_extent: 3,
            norm_groups: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.depth_extent == 0 || self.norm_groups == 0 {
            return Err(Error::config("encoder widths and depth must be positive"));
        }
        if self.level_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("level widths must be positive"));
        }
        for (l, &s) in self.level_strides.iter().enumerate() {
            if s != 1 && s != 2 {
                return Err(Error::config(format!("level {l} stride {s}; only 1 or 2 supported")));
            }
        }
        // The decoder upsamples four times and consumes skips f1..f4, which
        // pins the stride layout: full res at level 1, halving at 2-4, one
        // more halving across levels 5-6.
        let s = &self.level_strides;
        if s[0] != 1 || s[1] != 2 || s[2] != 2 || s[3] != 2 || s[4] * s[5] != 2 {
            return Err(Error::config(
                "level strides must be (1, 2, 2, 2, ...) with one extra halving over levels 5-6",
            ));
        }
        for (l, &w) in self.level_widths.iter().enumerate() {
            if w % self.norm_groups != 0 {
                return Err(Error::config(format!(
                    "level {l} width {w} not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        if self.base_width % self.norm_groups != 0 {
            return Err(Error::config("base_width not divisible by norm_groups"));
        }
        Ok(())
    }

    /// Spatial side length at each level for a given input side.
    pub fn level_sides(&self, side: usize) -> [usize; LEVELS] {
        let mut out = [0; LEVELS];
        let mut cur = side;
        for (l, &s) in self.level_strides.iter().enumerate() {
            cur /= s;
            out[l] = cur;
        }
        out
    }

    /// Side length of the deepest level (the transformer grid).
    pub fn deep_side(&self, side: usize) -> usize {
        self.level_sides(side)[LEVELS - 1]
    }
}

struct Block {
    conv_w: usize,
    conv_b: usize,
    norm_g: usize,
    norm_b: usize,
    stride: usize,
    residual: bool,
}

/// One modality's encoder: pointwise stem plus six conv blocks.
pub struct Encoder {
    stem_w: usize,
    stem_b: usize,
    blocks: Vec<Block>,
    input_channels: usize,
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        input_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Encoder {
        let stem_out = cfg.base_width * cfg.depth_extent;
        let stem_w = store.add(
            format!("{prefix}.stem.w"),
            init_he(rng, &[input_channels, stem_out], input_channels),
        );
        let stem_b = store.add(format!("{prefix}.stem.b"), zeros(&[stem_out]));
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut c_in = cfg.base_width;
        for l in 0..LEVELS {
            let c_out = cfg.level_widths[l];
            let fan_in = c_in * 27;
            let conv_w = store.add(
                format!("{prefix}.block{l}.conv.w"),
                init_he(rng, &[c_out, c_in, 3, 3, 3], fan_in),
            );
            let conv_b = store.add(format!("{prefix}.block{l}.conv.b"), zeros(&[c_out]));
            let norm_g = store.add(format!("{prefix}.block{l}.norm.g"), ones(&[c_out]));
            let norm_b = store.add(format!("{prefix}.block{l}.norm.b"), zeros(&[c_out]));
            blocks.push(Block {
                conv_w,
                conv_b,
                norm_g,
                norm_b,
                stride: cfg.level_strides[l],
                residual: cfg.level_strides[l] == 1 && c_in == c_out,
            });
            c_in = c_out;
        }
        Encoder {
            stem_w,
            stem_b,
            blocks,
            input_channels,
            cfg: cfg.clone(),
        }
    }

    /// Runs one modality input [B, 1, D_m, H, W] through the pyramid.
    pub fn encode(
        &self,
        store: &ParamStore,
        x: &Tensor,
        trainable: bool,
    ) -> Result<[Tensor; LEVELS]> {
        let s = x.shape().to_vec();
        if s.len() != 5 || s[1] != 1 {
            return Err(Error::shape(format!(
                "encoder input must be [B, 1, D, H, W], got {s:?}"
            )));
        }
        if s[2] != self.input_channels {
            return Err(Error::shape(format!(
                "encoder expects {} input channels, got {}",
                self.input_channels, s[2]
            )));
        }
        let total_stride: usize = self.cfg.level_strides.iter().product();
        if s[3] % total_stride != 0 || s[4] % total_stride != 0 {
            return Err(Error::shape(format!(
                "spatial dims {}x{} not divisible by cumulative stride {total_stride}",
                s[3], s[4]
            )));
        }

        let mut cur = self.stem(store, x, trainable);
        let mut levels = Vec::with_capacity(LEVELS);
        for block in &self.blocks {
            let conv = conv3d(
                &cur,
                &store.leaf(block.conv_w, trainable),
                &store.leaf(block.conv_b, trainable),
                (1, block.stride, block.stride),
                (1, 1, 1),
            );
            let normed = group_norm(
                &conv,
                self.cfg.norm_groups,
                &store.leaf(block.norm_g, trainable),
                &store.leaf(block.norm_b, trainable),
                NORM_EPS,
            );
            let mut out = relu(&normed);
            if block.residual {
                out = add(&out, &cur);
            }
            levels.push(out.clone());
            cur = out;
        }
        Ok(levels.try_into().map_err(|_| Error::shape("level count")).unwrap())
    }

    /// Pointwise stem: maps the modality's raw channel axis onto
    /// [base_width, depth_extent] at every pixel.
    fn stem(&self, store: &ParamStore, x: &Tensor, trainable: bool) -> Tensor {
        let s = x.shape().to_vec();
        let (b, d, h, w) = (s[0], s[2], s[3], s[4]);
        // [B, 1, D, H, W] -> [B, D, H, W] laid out identically.
        let squeezed = reshape(x, &[b, d, h, w]);
        let volume = reshape(&squeezed, &[b, d, 1, h, w]); // channel axis = D
        let mixed = channel_mix(
            &volume,
            &store.leaf(self.stem_w, trainable),
            Some(&store.leaf(self.stem_b, trainable)),
        ); // [B, base*depth, 1, H, W]
        let grouped = reshape(
            &mixed,
            &[b, self.cfg.base_width, self.cfg.depth_extent, h, w],
        );
        grouped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::ArrayD;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            base_width: 4,
            level_widths: [4, 6, 8, 8, 10, 10],
            level_strides: [1, 2, 2, 2, 2, 1],
            depth_extent: 2,
            norm_groups: 1,
        }
    }

    #[test]
    fn default_config_validates() {
        EncoderConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_stride_layouts_are_rejected() {
        let mut cfg = EncoderConfig::default();
        cfg.level_strides = [2, 2, 2, 2, 1, 1];
        assert!(cfg.validate().is_err());
        cfg.level_strides = [1, 2, 2, 2, 2, 2];
        assert!(cfg.validate().is_err());
        cfg.level_strides = [1, 2, 2, 2, 1, 2];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn pyramid_sides_follow_strides() {
        let cfg = small_cfg();
        assert_eq!(cfg.level_sides(64), [64, 32, 16, 8, 4, 4]);

        let mut store = ParamStore::new();
        let mut rng = stream(31);
        let enc = Encoder::register(&mut store, "enc0", &cfg, 3, &mut rng);
        let x = Tensor::constant(ArrayD::zeros(vec![2, 1, 3, 64, 64]));
        let levels = enc.encode(&store, &x, false).unwrap();
        let expect = [64, 32, 16, 8, 4, 4];
        for (l, t) in levels.iter().enumerate() {
            assert_eq!(
                t.shape(),
                &[2, cfg.level_widths[l], 2, expect[l], expect[l]],
                "level {l}"
            );
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = stream(32);
        let enc = Encoder::register(&mut store, "enc0", &cfg, 2, &mut rng);
        let x = Tensor::constant(ArrayD::zeros(vec![1, 1, 2, 24, 24]));
        assert!(enc.encode(&store, &x, false).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = stream(33);
        let enc = Encoder::register(&mut store, "enc0", &cfg, 2, &mut rng);
        let x0 = ArrayD::from_shape_fn(vec![1, 1, 2, 32, 32], |ix| {
            ((ix[2] * 31 + ix[3] * 7 + ix[4]) % 13) as f32 * 0.1 - 0.6
        });
        let a = enc.encode(&store, &Tensor::constant(x0.clone()), false).unwrap();
        let b = enc.encode(&store, &Tensor::constant(x0), false).unwrap();
        for (ta, tb) in a.iter().zip(b.iter()) {
            assert_eq!(ta.value(), tb.value());
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_pyramid() {
        // Conv biases and norm shifts start at zero, and normalizing an
        // all-zero block keeps it at zero, so the whole pyramid is zero.
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = stream(34);
        let enc = Encoder::register(&mut store, "enc0", &cfg, 2, &mut rng);
        let x = Tensor::constant(ArrayD::zeros(vec![2, 1, 2, 32, 32]));
        let levels = enc.encode(&store, &x, false).unwrap();
        for (l, t) in levels.iter().enumerate() {
            assert!(t.value().iter().all(|&v| v == 0.0), "level {l} not zero");
        }
    }
}
