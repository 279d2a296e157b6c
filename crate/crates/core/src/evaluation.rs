//! Segmentation metrics and the per-scenario evaluation sweep.

use crate::availability::enumerate_scenarios;
use crate::error::{Error, Result};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

fn check_binary(name: &str, a: &ArrayView2<'_, f32>) -> Result<()> {
    if a.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::config(format!("{name} must be binary (0/1)")));
    }
    Ok(())
}

fn counts(pred: &ArrayView2<'_, f32>, gt: &ArrayView2<'_, f32>) -> Result<(f64, f64, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "metric shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    check_binary("prediction", pred)?;
    check_binary("ground truth", gt)?;
    let mut inter = 0.0;
    let mut p = 0.0;
    let mut g = 0.0;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        p += a as f64;
        g += b as f64;
        inter += (a * b) as f64;
    }
    Ok((inter, p, g))
}

/// Intersection over union of two binary maps; 1.0 when both are empty.
pub fn iou(pred: &ArrayView2<'_, f32>, gt: &ArrayView2<'_, f32>) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    let union = p + g - inter;
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

/// F1 (Dice) score of two binary maps; 1.0 when both are empty.
pub fn f1(pred: &ArrayView2<'_, f32>, gt: &ArrayView2<'_, f32>) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    Ok(if p + g == 0.0 { 1.0 } else { 2.0 * inter / (p + g) })
}

/// Strict positive threshold: probability must exceed `thr`; ties go negative.
pub fn binarize(probs: &ArrayView2<'_, f32>, thr: f32) -> ndarray::Array2<f32> {
    probs.mapv(|p| if p > thr { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub mask: Vec<u8>,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub n_samples: usize,
}

/// Per-availability-pattern metrics over a fixed evaluation split; one row per
/// nonempty scenario in canonical order. Stds are per-sample population stds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub model_id: String,
    pub threshold: f32,
    pub rows: Vec<ScenarioRow>,
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ScenarioReport {
    /// Builds a report by scoring per-sample predictions produced by
    /// `predict`, which receives the scenario mask and must return
    /// probability maps [n, H, W] for the whole split.
    pub fn from_predictions<F>(
        model_id: &str,
        modalities: usize,
        threshold: f32,
        targets: &ndarray::ArrayView3<'_, f32>,
        mut predict: F,
    ) -> Result<ScenarioReport>
    where
        F: FnMut(&[u8]) -> Result<ndarray::Array3<f32>>,
    {
        let n = targets.shape()[0];
        if n == 0 {
            return Err(Error::config("evaluation split is empty"));
        }
        let mut rows = Vec::new();
        for mask in enumerate_scenarios(modalities)? {
            let probs = predict(&mask)?;
            if probs.shape() != targets.shape() {
                return Err(Error::shape(format!(
                    "predictions {:?} vs targets {:?}",
                    probs.shape(),
                    targets.shape()
                )));
            }
            let mut ious = Vec::with_capacity(n);
            let mut f1s = Vec::with_capacity(n);
            for i in 0..n {
                let pred = binarize(&probs.index_axis(ndarray::Axis(0), i), threshold);
                let gt = targets.index_axis(ndarray::Axis(0), i);
                ious.push(iou(&pred.view(), &gt)?);
                f1s.push(f1(&pred.view(), &gt)?);
            }
            let (iou_mean, iou_std) = mean_std(&ious);
            let (f1_mean, f1_std) = mean_std(&f1s);
            rows.push(ScenarioRow {
                mask,
                iou_mean,
                iou_std,
                f1_mean,
                f1_std,
                n_samples: n,
            });
        }
        Ok(ScenarioReport {
            model_id: model_id.to_string(),
            threshold,
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};
    use proptest::prelude::*;

    #[test]
    fn identical_nonempty_maps_score_one() {
        let a: Array2<f32> = array![[1.0, 0.0], [1.0, 1.0]];
        assert_eq!(iou(&a.view(), &a.view()).unwrap(), 1.0);
        assert_eq!(f1(&a.view(), &a.view()).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_nonempty_maps_score_zero() {
        let a: Array2<f32> = array![[1.0, 0.0], [0.0, 0.0]];
        let b: Array2<f32> = array![[0.0, 0.0], [0.0, 1.0]];
        assert_eq!(iou(&a.view(), &b.view()).unwrap(), 0.0);
        assert_eq!(f1(&a.view(), &b.view()).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_square_gives_third_and_half() {
        // P = left half, G = top half of a 4x4 square: |P∩G| = 4,
        // |P∪G| = 12 -> IoU 1/3; F1 = 2*4/(8+8) = 1/2.
        let n = 4;
        let pred = Array2::from_shape_fn((n, n), |(_, x)| if x < n / 2 { 1.0 } else { 0.0 });
        let gt = Array2::from_shape_fn((n, n), |(y, _)| if y < n / 2 { 1.0 } else { 0.0 });
        let i = iou(&pred.view(), &gt.view()).unwrap();
        let f = f1(&pred.view(), &gt.view()).unwrap();
        assert!((i - 1.0 / 3.0).abs() < 1e-12);
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn both_empty_convention_is_one() {
        let z = Array2::<f32>::zeros((3, 3));
        assert_eq!(iou(&z.view(), &z.view()).unwrap(), 1.0);
        assert_eq!(f1(&z.view(), &z.view()).unwrap(), 1.0);
    }

    #[test]
    fn non_binary_input_is_rejected() {
        let a: Array2<f32> = array![[0.5, 0.0]];
        let b: Array2<f32> = array![[1.0, 0.0]];
        assert!(iou(&a.view(), &b.view()).is_err());
        assert!(f1(&b.view(), &a.view()).is_err());
    }

    #[test]
    fn threshold_is_strict_at_half() {
        let probs: Array2<f32> = array![[0.5, 0.500001], [0.499999, 1.0]];
        let bin = binarize(&probs.view(), 0.5);
        assert_eq!(bin, array![[0.0, 1.0], [0.0, 1.0]]);
    }

    #[test]
    fn perfect_oracle_report_has_unit_rows() {
        let targets = Array3::from_shape_fn((3, 4, 4), |(i, y, x)| ((i + y + x) % 2) as f32);
        let report = ScenarioReport::from_predictions(
            "oracle",
            3,
            0.5,
            &targets.view(),
            |_mask| Ok(targets.clone()),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 7);
        for row in &report.rows {
            assert_eq!(row.iou_mean, 1.0);
            assert_eq!(row.f1_mean, 1.0);
            assert_eq!(row.iou_std, 0.0);
            assert_eq!(row.n_samples, 3);
        }
    }

    #[test]
    fn constant_half_model_follows_the_tie_rule() {
        // Probability exactly 0.5 everywhere binarizes to all-negative, so
        // IoU is 0 against nonempty targets and 1 against empty ones.
        let mut targets = Array3::<f32>::zeros((2, 4, 4));
        targets[[0, 1, 1]] = 1.0;
        let report = ScenarioReport::from_predictions(
            "half",
            1,
            0.5,
            &targets.view(),
            |_mask| Ok(Array3::from_elem((2, 4, 4), 0.5)),
        )
        .unwrap();
        let row = &report.rows[0];
        assert!((row.iou_mean - 0.5).abs() < 1e-12); // (0 + 1) / 2
    }

    proptest! {
        #[test]
        fn f1_identity_holds(bits_p in proptest::collection::vec(0u8..2, 16),
                             bits_g in proptest::collection::vec(0u8..2, 16)) {
            let p = Array2::from_shape_vec((4, 4), bits_p.iter().map(|&b| b as f32).collect()).unwrap();
            let g = Array2::from_shape_vec((4, 4), bits_g.iter().map(|&b| b as f32).collect()).unwrap();
            let both_empty = p.iter().all(|&v| v == 0.0) && g.iter().all(|&v| v == 0.0);
            prop_assume!(!both_empty);
            let i = iou(&p.view(), &g.view()).unwrap();
            let f = f1(&p.view(), &g.view()).unwrap();
            prop_assert!((f - 2.0 * i / (1.0 + i)).abs() < 1e-9);
        }
    }
}
