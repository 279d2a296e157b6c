//! Modality availability masks: representation, random dropout sampling,
//! scenario enumeration, and the elementwise gating primitive.
//!
//! A mask row marks which modalities are present for one sample. Rows are
//! never all-zero: a sample with no modalities at all has no defined
//! prediction, so the type forbids it at construction.

use crate::error::{Error, Result};
use crate::tensor::{mul_rows, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-sample binary modality indicators, shape [batch, modalities].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityMask {
    rows: Vec<Vec<u8>>,
}

impl AvailabilityMask {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("availability mask needs at least one row"));
        }
        let m = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::shape(format!(
                    "mask row {i} has length {}, expected {m}",
                    row.len()
                )));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::config(format!("mask row {i} has non-binary entry")));
            }
            if row.iter().all(|&v| v == 0) {
                return Err(Error::config(format!(
                    "mask row {i} is all-zero; every sample needs at least one modality"
                )));
            }
        }
        Ok(AvailabilityMask { rows })
    }

    /// One identical row repeated `batch` times.
    pub fn uniform(batch: usize, row: &[u8]) -> Result<Self> {
        AvailabilityMask::new(vec![row.to_vec(); batch])
    }

    pub fn full(batch: usize, modalities: usize) -> Self {
        AvailabilityMask {
            rows: vec![vec![1; modalities]; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.rows.len()
    }

    pub fn modalities(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn is_available(&self, sample: usize, modality: usize) -> bool {
        self.rows[sample][modality] == 1
    }

    /// The availability indicator of one modality across the batch, as f32.
    pub fn column(&self, modality: usize) -> Vec<f32> {
        self.rows.iter().map(|r| f32::from(r[modality])).collect()
    }

    /// Selects the mask rows for a batch of sample indices.
    pub fn select(&self, indices: &[usize]) -> Self {
        AvailabilityMask {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

/// How training-time masks are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DropoutPolicy {
    /// Uniform over the 2^M - 1 nonempty subsets, with optional extra
    /// probability mass on the all-ones row.
    UniformNonempty { full_probability: f64 },
    /// Always the all-ones mask (no modality dropout).
    FullOnly,
    /// A fixed row applied to every sample.
    Fixed { row: Vec<u8> },
}

impl DropoutPolicy {
    pub fn uniform() -> Self {
        DropoutPolicy::UniformNonempty {
            full_probability: 0.0,
        }
    }

    pub fn validate(&self, modalities: usize) -> Result<()> {
        match self {
            DropoutPolicy::UniformNonempty { full_probability } => {
                if !(0.0..=1.0).contains(full_probability) {
                    return Err(Error::config(format!(
                        "full_probability {full_probability} outside [0, 1]"
                    )));
                }
            }
            DropoutPolicy::FullOnly => {}
            DropoutPolicy::Fixed { row } => {
                if row.len() != modalities {
                    return Err(Error::config(format!(
                        "fixed mask has {} entries, expected {modalities}",
                        row.len()
                    )));
                }
                if row.iter().all(|&v| v == 0) || row.iter().any(|&v| v > 1) {
                    return Err(Error::config("fixed mask must be nonempty and binary"));
                }
            }
        }
        Ok(())
    }
}

/// Draws one mask row per sample according to the policy.
pub fn sample_mask(
    batch: usize,
    modalities: usize,
    policy: &DropoutPolicy,
    rng: &mut ChaCha8Rng,
) -> AvailabilityMask {
    assert!(batch >= 1 && modalities >= 1);
    let rows = (0..batch)
        .map(|_| match policy {
            DropoutPolicy::FullOnly => vec![1; modalities],
            DropoutPolicy::Fixed { row } => row.clone(),
            DropoutPolicy::UniformNonempty { full_probability } => {
                if *full_probability > 0.0 && rng.random::<f64>() < *full_probability {
                    vec![1; modalities]
                } else {
                    let code = rng.random_range(1..(1u64 << modalities));
                    bits_to_row(code, modalities)
                }
            }
        })
        .collect();
    AvailabilityMask { rows }
}

fn bits_to_row(code: u64, modalities: usize) -> Vec<u8> {
    (0..modalities)
        .map(|m| ((code >> (modalities - 1 - m)) & 1) as u8)
        .collect()
}

/// All 2^M - 1 nonempty availability patterns in canonical order:
/// descending cardinality, then descending as a binary string, so the full
/// mask comes first and [1,0] precedes [0,1].
pub fn enumerate_scenarios(modalities: usize) -> Result<Vec<Vec<u8>>> {
    if modalities == 0 {
        return Err(Error::config("scenario enumeration needs M >= 1"));
    }
    if modalities > 16 {
        return Err(Error::config("scenario enumeration capped at M <= 16"));
    }
    let mut codes: Vec<u64> = (1..(1u64 << modalities)).collect();
    codes.sort_by_key(|&c| (std::cmp::Reverse(c.count_ones()), std::cmp::Reverse(c)));
    Ok(codes.into_iter().map(|c| bits_to_row(c, modalities)).collect())
}

/// Gates a feature tensor with a per-sample indicator column: rows with 0 are
/// zeroed exactly, rows with 1 pass through unchanged.
pub fn gate(x: &Tensor, mask_column: &[f32]) -> Result<Tensor> {
    if x.shape()[0] != mask_column.len() {
        return Err(Error::shape(format!(
            "gate: batch {} vs mask column {}",
            x.shape()[0],
            mask_column.len()
        )));
    }
    Ok(mul_rows(x, mask_column))
}
