//! Deterministic synthetic multimodal dataset: generation, splitting, and
//! per-channel mean normalization.
//!
//! Each tile's target is a union of random rectangles and discs. Shapes are
//! assigned round-robin to per-modality families, and a modality's channels
//! show the union of the shapes it "reveals" plus a shared low-frequency
//! background and Gaussian noise. The informativeness knob controls how much
//! of the target a modality reveals:
//!
//! * 0.0 — nothing (channels are background + noise);
//! * 0.5 — exactly the modality's own shape family;
//! * 1.0 — every shape, i.e. the full target.
//!
//! Between those points shapes switch on one by one in a deterministic,
//! per-(shape, modality) order, own-family shapes first. With M modalities at
//! informativeness 0.5 the revealed regions are disjoint across modalities,
//! which makes the joint input strictly more informative than any single
//! modality — the synthetic stand-in for complementary sensors.

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed_indexed, hash_unit};
use ndarray::{Array3, Array4, Array5, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const BACKGROUND_AMPLITUDE: f32 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_tiles: usize,
    pub tile_size: usize,
    pub channels_per_modality: Vec<usize>,
    /// Per-modality reveal fraction in [0, 1]; see module docs.
    pub informativeness: Vec<f64>,
    /// Per-modality Gaussian noise level.
    pub noise_sigma: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_tiles: 200,
            tile_size: 224,
            channels_per_modality: vec![3, 3, 2],
            informativeness: vec![0.5, 0.5, 0.5],
            noise_sigma: vec![0.1, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn modalities(&self) -> usize {
        self.channels_per_modality.len()
    }

    pub fn max_channels(&self) -> usize {
        self.channels_per_modality.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities();
        if m == 0 {
            return Err(Error::config("at least one modality is required"));
        }
        if self.n_tiles == 0 {
            return Err(Error::config("n_tiles must be positive"));
        }
        if self.tile_size == 0 || self.tile_size % 16 != 0 {
            return Err(Error::config(format!(
                "tile_size {} must be a positive multiple of 16 (four 2x upsampling stages)",
                self.tile_size
            )));
        }
        if self.channels_per_modality.iter().any(|&c| c == 0) {
            return Err(Error::config("every modality needs at least one channel"));
        }
        if self.informativeness.len() != m || self.noise_sigma.len() != m {
            return Err(Error::config(
                "informativeness and noise_sigma must have one entry per modality",
            ));
        }
        if self.informativeness.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::config("informativeness values must lie in [0, 1]"));
        }
        if self.noise_sigma.iter().any(|&v| v < 0.0) {
            return Err(Error::config("noise_sigma values must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-(modality, channel) means, computed from the training subset only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    fn check_cover(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::config("split indices must be a disjoint cover"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::config("split indices must cover all tiles"));
        }
        Ok(())
    }
}

/// Full in-memory dataset: inputs [n, M, D, H, W], binary targets
/// [n, 1, H, W], split indices, and (after normalization) channel means.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub inputs: Array5<f32>,
    pub targets: Array4<f32>,
    pub splits: Splits,
    pub norm_stats: Option<NormalizationStats>,
    pub config: SyntheticConfig,
}

struct Shape {
    kind: u8, // 0 = rectangle, 1 = disc
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        if self.kind == 0 {
            (x - self.cx).abs() <= self.a && (y - self.cy).abs() <= self.b
        } else {
            let dx = (x - self.cx) / self.a;
            let dy = (y - self.cy) / self.a;
            dx * dx + dy * dy <= 1.0
        }
    }
}

fn draw_shapes(rng: &mut rand_chacha::ChaCha8Rng, size: usize) -> Vec<Shape> {
    let s = size as f64;
    let n = rng.random_range(3..=6usize);
    (0..n)
        .map(|_| {
            let kind = rng.random_range(0..2u8);
            let cx = rng.random::<f64>() * s;
            let cy = rng.random::<f64>() * s;
            if kind == 0 {
                Shape {
                    kind,
                    cx,
                    cy,
                    a: s * (0.08 + 0.17 * rng.random::<f64>()),
                    b: s * (0.08 + 0.17 * rng.random::<f64>()),
                }
            } else {
                let r = s * (0.08 + 0.14 * rng.random::<f64>());
                Shape { kind, cx, cy, a: r, b: r }
            }
        })
        .collect()
}

fn rasterize(shapes: &[Shape], size: usize) -> (Array3<f32>, f64) {
    // Channel 0 of the output marks each pixel with the covering shape set is
    // not needed; we keep one plane per shape for family unions.
    let mut planes = Array3::<f32>::zeros((shapes.len(), size, size));
    let mut covered = 0usize;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut any = false;
            for (k, sh) in shapes.iter().enumerate() {
                if sh.contains(fx, fy) {
                    planes[[k, y, x]] = 1.0;
                    any = true;
                }
            }
            if any {
                covered += 1;
            }
        }
    }
    (planes, covered as f64 / (size * size) as f64)
}

/// Generates the bundle; deterministic for a fixed config (tiles get their
/// own derived streams, so generation order never matters).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let m = cfg.modalities();
    let size = cfg.tile_size;
    let d_max = cfg.max_channels();
    let mut inputs = Array5::<f32>::zeros((cfg.n_tiles, m, d_max, size, size));
    let mut targets = Array4::<f32>::zeros((cfg.n_tiles, 1, size, size));

    for tile in 0..cfg.n_tiles {
        let mut trng = rng::stream(derive_seed_indexed(cfg.seed, "tile", tile as u64));

        // Rejection-sample a target with 10-60% positive pixels.
        let (planes, shapes) = loop {
            let shapes = draw_shapes(&mut trng, size);
            let (planes, frac) = rasterize(&shapes, size);
            if (0.10..=0.60).contains(&frac) {
                break (planes, shapes);
            }
        };
        let n_shapes = shapes.len();

        for y in 0..size {
            for x in 0..size {
                let hit = (0..n_shapes).any(|k| planes[[k, y, x]] > 0.0);
                targets[[tile, 0, y, x]] = if hit { 1.0 } else { 0.0 };
            }
        }

        // Shared low-frequency background.
        let fx = trng.random_range(1..=2u32) as f64;
        let fy = trng.random_range(1..=2u32) as f64;
        let px = trng.random::<f64>() * std::f64::consts::TAU;
        let py = trng.random::<f64>() * std::f64::consts::TAU;
        let bg = Array3::from_shape_fn((1, size, size), |(_, y, x)| {
            let u = (std::f64::consts::TAU * fx * x as f64 / size as f64 + px).sin();
            let v = (std::f64::consts::TAU * fy * y as f64 / size as f64 + py).sin();
            (BACKGROUND_AMPLITUDE as f64 * u * v) as f32
        });

        for modality in 0..m {
            // Union of the shapes this modality reveals.
            let mut revealed = Array3::<f32>::zeros((1, size, size));
            for k in 0..n_shapes {
                if !reveals(cfg, tile, k, modality) {
                    continue;
                }
                for y in 0..size {
                    for x in 0..size {
                        if planes[[k, y, x]] > 0.0 {
                            revealed[[0, y, x]] = 1.0;
                        }
                    }
                }
            }
            let sigma = cfg.noise_sigma[modality];
            for channel in 0..cfg.channels_per_modality[modality] {
                for y in 0..size {
                    for x in 0..size {
                        let noise = if sigma > 0.0 {
                            (sigma * rng::normal(&mut trng)) as f32
                        } else {
                            0.0
                        };
                        inputs[[tile, modality, channel, y, x]] =
                            revealed[[0, y, x]] + bg[[0, y, x]] + noise;
                    }
                }
            }
        }
    }

    Ok(DatasetBundle {
        inputs,
        targets,
        splits: Splits {
            train: (0..cfg.n_tiles).collect(),
            val: Vec::new(),
            test: Vec::new(),
        },
        norm_stats: None,
        config: cfg.clone(),
    })
}

/// Reveal rule: shape k is visible to modality m iff informativeness exceeds
/// a deterministic per-(shape, modality) threshold; own-family thresholds lie
/// in (0, 0.5), foreign ones in (0.5, 1).
fn reveals(cfg: &SyntheticConfig, tile: usize, shape: usize, modality: usize) -> bool {
    let m = cfg.modalities();
    let own = shape % m == modality;
    let u = hash_unit(cfg.seed, &[0x5eed, tile as u64, shape as u64, modality as u64]);
    let threshold = if own { 0.5 * u } else { 0.5 + 0.5 * u };
    cfg.informativeness[modality] > threshold
}

/// Deterministically reassigns tiles to train/val/test.
pub fn split(mut bundle: DatasetBundle, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetBundle> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::config("split fractions must be nonnegative"));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions sum to {}, expected 1",
            ft + fv + fe
        )));
    }
    let n = bundle.inputs.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    let mut srng = rng::stream(rng::derive_seed(seed, "split"));
    // Fisher-Yates, explicit so the draw count is fixed.
    for i in (1..n).rev() {
        let j = srng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (ft * n as f64).round() as usize;
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    bundle.splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    bundle.splits.check_cover(n)?;
    bundle.norm_stats = None;
    Ok(bundle)
}

/// Computes per-(modality, channel) means over the training tiles and
/// subtracts them from every split.
pub fn normalize(bundle: DatasetBundle) -> Result<(DatasetBundle, NormalizationStats)> {
    if bundle.splits.train.is_empty() {
        return Err(Error::config("normalize requires a non-empty training split"));
    }
    let m = bundle.config.modalities();
    let mut means = Vec::with_capacity(m);
    for modality in 0..m {
        let channels = bundle.config.channels_per_modality[modality];
        let mut channel_means = Vec::with_capacity(channels);
        for channel in 0..channels {
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for &tile in &bundle.splits.train {
                let plane = bundle
                    .inputs
                    .index_axis(Axis(0), tile);
                let plane = plane.index_axis(Axis(0), modality);
                let plane = plane.index_axis(Axis(0), channel);
                acc += plane.iter().map(|&v| v as f64).sum::<f64>();
                count += plane.len();
            }
            channel_means.push(acc / count as f64);
        }
        means.push(channel_means);
    }
    let stats = NormalizationStats { means };
    let bundle = apply_normalization(bundle, &stats)?;
    Ok((bundle, stats))
}

/// Subtracts stored means from every tile; zero means is the identity.
pub fn apply_normalization(
    mut bundle: DatasetBundle,
    stats: &NormalizationStats,
) -> Result<DatasetBundle> {
    let m = bundle.config.modalities();
    if stats.means.len() != m {
        return Err(Error::shape("stats modality count mismatch".to_string()));
    }
    for modality in 0..m {
        let channels = bundle.config.channels_per_modality[modality];
        if stats.means[modality].len() != channels {
            return Err(Error::shape(format!(
                "stats for modality {modality} have {} channels, expected {channels}",
                stats.means[modality].len()
            )));
        }
        for channel in 0..channels {
            let mean = stats.means[modality][channel] as f32;
            if mean == 0.0 {
                continue;
            }
            let mut lane = bundle
                .inputs
                .slice_mut(ndarray::s![.., modality, channel, .., ..]);
            lane.mapv_inplace(|v| v - mean);
        }
    }
    bundle.norm_stats = Some(stats.clone());
    Ok(bundle)
}

/// Cuts an image [C, H, W] into non-overlapping patches in row-major order;
/// trailing remainder pixels are dropped.
pub fn patchify(image: &Array3<f32>, patch: usize) -> Result<Vec<Array3<f32>>> {
    let (c, h, w) = {
        let s = image.shape();
        (s[0], s[1], s[2])
    };
    if patch == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    if h < patch || w < patch {
        return Err(Error::config(format!(
            "image {h}x{w} smaller than patch {patch}"
        )));
    }
    let mut out = Vec::new();
    for py in 0..h / patch {
        for px in 0..w / patch {
            let view = image.slice(ndarray::s![
                ..,
                py * patch..(py + 1) * patch,
                px * patch..(px + 1) * patch
            ]);
            out.push(view.to_owned());
        }
    }
    let _ = c;
    Ok(out)
}

impl DatasetBundle {
    pub fn n_tiles(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn tile_size(&self) -> usize {
        self.inputs.shape()[3]
    }

    pub fn modalities(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Gathers inputs for a batch of tile indices, [B, M, D, H, W].
    pub fn gather_inputs(&self, indices: &[usize]) -> Array5<f32> {
        let s = self.inputs.shape();
        let mut out = Array5::<f32>::zeros((indices.len(), s[1], s[2], s[3], s[4]));
        for (bi, &tile) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), bi)
                .assign(&self.inputs.index_axis(Axis(0), tile));
        }
        out
    }

    /// Gathers targets for a batch of tile indices, [B, 1, H, W].
    pub fn gather_targets(&self, indices: &[usize]) -> Array4<f32> {
        let s = self.targets.shape();
        let mut out = Array4::<f32>::zeros((indices.len(), s[1], s[2], s[3]));
        for (bi, &tile) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), bi)
                .assign(&self.targets.index_axis(Axis(0), tile));
        }
        out
    }
}
