//! Level-wise cross-modal fusion: concatenate the gated modality features
//! along channels, project with a 1x1x1 convolution, activate, normalize.
//! Weights are independent per level.

use crate::encoder::{EncoderConfig, LEVELS};
use crate::error::{Error, Result};
use crate::layers::channel_mix;
use crate::params::{init_he, ones, zeros, ParamStore};
use crate::tensor::{concat, group_norm, relu, Tensor};
use rand_chacha::ChaCha8Rng;

const NORM_EPS: f32 = 1e-5;

struct Level {
    w: usize,
    b: usize,
    norm_g: usize,
    norm_b: usize,
    c_out: usize,
}

/// The six per-level fusion operators.
pub struct Fusion {
    levels: Vec<Level>,
    modalities: usize,
    norm_groups: usize,
}

impl Fusion {
    /// Fused widths equal the encoder level widths, keeping skip widths
    /// independent of the modality count.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        enc: &EncoderConfig,
        modalities: usize,
        rng: &mut ChaCha8Rng,
    ) -> Fusion {
        let levels = (0..LEVELS)
            .map(|l| {
                let c_each = enc.level_widths[l];
                let c_in = modalities * c_each;
                let c_out = c_each;
                Level {
                    w: store.add(format!("{prefix}.l{l}.w"), init_he(rng, &[c_in, c_out], c_in)),
                    b: store.add(format!("{prefix}.l{l}.b"), zeros(&[c_out])),
                    norm_g: store.add(format!("{prefix}.l{l}.norm.g"), ones(&[c_out])),
                    norm_b: store.add(format!("{prefix}.l{l}.norm.b"), zeros(&[c_out])),
                    c_out,
                }
            })
            .collect();
        Fusion {
            levels,
            modalities,
            norm_groups: enc.norm_groups,
        }
    }

    /// Applies level `l`'s operator to the gated per-modality maps.
    pub fn fuse_level(
        &self,
        store: &ParamStore,
        level: usize,
        gated: &[Tensor],
        trainable: bool,
    ) -> Result<Tensor> {
        if gated.len() != self.modalities {
            return Err(Error::shape(format!(
                "fusion level {level}: got {} modalities, expected {}",
                gated.len(),
                self.modalities
            )));
        }
        let first = gated[0].shape();
        for (m, t) in gated.iter().enumerate().skip(1) {
            if t.shape() != first {
                return Err(Error::shape(format!(
                    "fusion level {level}: modality {m} shape {:?} vs {:?}",
                    t.shape(),
                    first
                )));
            }
        }
        let lv = &self.levels[level];
        let stacked = concat(1, gated);
        let projected = channel_mix(
            &stacked,
            &store.leaf(lv.w, trainable),
            Some(&store.leaf(lv.b, trainable)),
        );
        let activated = relu(&projected);
        Ok(group_norm(
            &activated,
            self.norm_groups,
            &store.leaf(lv.norm_g, trainable),
            &store.leaf(lv.norm_b, trainable),
            NORM_EPS,
        ))
    }

    pub fn width(&self, level: usize) -> usize {
        self.levels[level].c_out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::testutil::random_array;
    use ndarray::ArrayD;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            base_width: 4,
            level_widths: [4, 4, 4, 4, 4, 4],
            level_strides: [1, 2, 2, 2, 2, 1],
            depth_extent: 2,
            norm_groups: 1,
        }
    }

    #[test]
    fn single_modality_is_projection_activation_norm() {
        let mut store = ParamStore::new();
        let mut rng = stream(41);
        let fusion = Fusion::register(&mut store, "fuse", &cfg(), 1, &mut rng);
        let x = Tensor::constant(random_array(&mut rng, &[2, 4, 2, 4, 4]));
        let out = fusion.fuse_level(&store, 0, &[x], false).unwrap();
        assert_eq!(out.shape(), &[2, 4, 2, 4, 4]);
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut store = ParamStore::new();
        let mut rng = stream(42);
        let fusion = Fusion::register(&mut store, "fuse", &cfg(), 2, &mut rng);
        let a = Tensor::constant(ArrayD::zeros(vec![1, 4, 2, 4, 4]));
        let b = Tensor::constant(ArrayD::zeros(vec![1, 4, 2, 8, 8]));
        assert!(fusion.fuse_level(&store, 0, &[a, b], false).is_err());
    }

    #[test]
    fn projection_mean_toy_matches_hand_arithmetic() {
        // Two 1-channel maps, projection weights (0.5, 0.5), pre-norm output
        // is the elementwise mean of the inputs.
        let mut store = ParamStore::new();
        let w = store.add("w", ArrayD::from_shape_vec(vec![2, 1], vec![0.5f32, 0.5]).unwrap());
        let b = store.add("b", zeros(&[1]));
        let a = Tensor::constant(
            ArrayD::from_shape_vec(vec![1, 1, 1, 1, 2], vec![1.0f32, 3.0]).unwrap(),
        );
        let c = Tensor::constant(
            ArrayD::from_shape_vec(vec![1, 1, 1, 1, 2], vec![5.0f32, 7.0]).unwrap(),
        );
        let stacked = concat(1, &[a, c]);
        let projected = channel_mix(&stacked, &store.leaf(w, false), Some(&store.leaf(b, false)));
        assert_eq!(projected.value().as_slice().unwrap(), &[3.0, 5.0]);
    }

    #[test]
    fn modality_permutation_with_matching_weight_blocks_is_invariant() {
        // Swapping the two modalities while swapping the two weight blocks of
        // the projection leaves the fused output unchanged.
        let enc = cfg();
        let mut rng = stream(43);
        let mut store = ParamStore::new();
        let fusion = Fusion::register(&mut store, "fuse", &enc, 2, &mut rng);
        let a = Tensor::constant(random_array(&mut rng, &[2, 4, 2, 4, 4]));
        let b = Tensor::constant(random_array(&mut rng, &[2, 4, 2, 4, 4]));
        let out_ab = fusion
            .fuse_level(&store, 2, &[a.clone(), b.clone()], false)
            .unwrap();

        // Swap the [0..4) and [4..8) input-row blocks of the level-2 weight.
        let slot = store.slot_of("fuse.l2.w").unwrap();
        let w = store.value(slot).clone();
        let mut swapped = w.clone();
        for r in 0..4 {
            for c in 0..4 {
                swapped[[r, c]] = w[[r + 4, c]];
                swapped[[r + 4, c]] = w[[r, c]];
            }
        }
        store.set(slot, swapped);
        let out_ba = fusion.fuse_level(&store, 2, &[b, a], false).unwrap();
        assert_eq!(out_ab.value(), out_ba.value());
    }

    #[test]
    fn masked_to_zero_sample_is_zero_before_normalization() {
        // All modalities zero for a sample with zero projection bias: the
        // projected map is exactly zero for that sample.
        let mut store = ParamStore::new();
        let mut rng = stream(44);
        let fusion = Fusion::register(&mut store, "fuse", &cfg(), 2, &mut rng);
        let zero = Tensor::constant(ArrayD::zeros(vec![1, 4, 2, 4, 4]));
        let lv = &fusion.levels[0];
        let projected = channel_mix(
            &concat(1, &[zero.clone(), zero]),
            &store.leaf(lv.w, false),
            Some(&store.leaf(lv.b, false)),
        );
        assert!(projected.value().iter().all(|&v| v == 0.0));
    }
}
