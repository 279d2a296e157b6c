//! Fused normalization and softmax ops with hand-derived backward passes.

use super::Tensor;
use ndarray::ArrayD;

/// Shared backward for "normalize a contiguous block" ops.
///
/// Given dxhat over a block plus the block's xhat and inverse stddev, the
/// input gradient is (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) / std.
fn norm_block_backward(dxhat: &[f32], xhat: &[f32], inv_std: f32, out: &mut [f32]) {
    let n = dxhat.len() as f64;
    let mean_d: f64 = dxhat.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_dx: f64 = dxhat
        .iter()
        .zip(xhat)
        .map(|(&d, &h)| d as f64 * h as f64)
        .sum::<f64>()
        / n;
    for ((o, &d), &h) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = ((d as f64 - mean_d - h as f64 * mean_dx) * inv_std as f64) as f32;
    }
}

fn block_stats(block: &[f32], eps: f32) -> (f32, f32) {
    let n = block.len() as f64;
    let mean = block.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = block.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
    (mean as f32, 1.0 / ((var + eps as f64).sqrt() as f32))
}

/// Layer normalization over the last axis with per-feature affine parameters.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
    let feat = *x.shape().last().unwrap();
    debug_assert_eq!(gamma.shape(), [feat]);
    debug_assert_eq!(beta.shape(), [feat]);
    let mut value = x.value().clone();
    {
        let g = gamma.value().as_slice().unwrap();
        let b = beta.value().as_slice().unwrap();
        let flat = value.as_slice_mut().unwrap();
        for row in flat.chunks_mut(feat) {
            let (mean, inv_std) = block_stats(row, eps);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[i] + b[i];
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, parents| {
            let xv = parents[0].value();
            let gam = parents[1].value().as_slice().unwrap();
            let xs = xv.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![0.0f32; xs.len()];
            let mut dgamma = vec![0.0f64; feat];
            let mut dbeta = vec![0.0f64; feat];
            let mut xhat = vec![0.0f32; feat];
            let mut dxhat = vec![0.0f32; feat];
            for (r, row) in xs.chunks(feat).enumerate() {
                let (mean, inv_std) = block_stats(row, eps);
                let grow = &gs[r * feat..(r + 1) * feat];
                for i in 0..feat {
                    xhat[i] = (row[i] - mean) * inv_std;
                    dxhat[i] = grow[i] * gam[i];
                    dgamma[i] += (grow[i] * xhat[i]) as f64;
                    dbeta[i] += grow[i] as f64;
                }
                norm_block_backward(&dxhat, &xhat, inv_std, &mut dx[r * feat..(r + 1) * feat]);
            }
            vec![
                ArrayD::from_shape_vec(xv.shape().to_vec(), dx).unwrap(),
                ArrayD::from_shape_vec(vec![feat], dgamma.into_iter().map(|v| v as f32).collect())
                    .unwrap(),
                ArrayD::from_shape_vec(vec![feat], dbeta.into_iter().map(|v| v as f32).collect())
                    .unwrap(),
            ]
        }),
    )
}

/// Group normalization of a [B, C, D, H, W] tensor: statistics per sample per
/// channel group, so no information crosses the batch axis.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
    let s = x.shape().to_vec();
    debug_assert_eq!(s.len(), 5);
    let (batch, channels) = (s[0], s[1]);
    assert!(channels % groups == 0, "group count must divide channels");
    let spatial = s[2] * s[3] * s[4];
    let cg = channels / groups;
    let block_len = cg * spatial;
    let mut value = x.value().clone();
    {
        let g = gamma.value().as_slice().unwrap();
        let b = beta.value().as_slice().unwrap();
        let flat = value.as_slice_mut().unwrap();
        for bi in 0..batch {
            for gi in 0..groups {
                let start = (bi * channels + gi * cg) * spatial;
                let block = &mut flat[start..start + block_len];
                let (mean, inv_std) = block_stats(block, eps);
                for (j, v) in block.iter_mut().enumerate() {
                    let c = gi * cg + j / spatial;
                    *v = (*v - mean) * inv_std * g[c] + b[c];
                }
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |gr, _, parents| {
            let xv = parents[0].value();
            let gam = parents[1].value().as_slice().unwrap();
            let xs = xv.as_slice().unwrap();
            let gs = gr.as_slice().unwrap();
            let mut dx = vec![0.0f32; xs.len()];
            let mut dgamma = vec![0.0f64; channels];
            let mut dbeta = vec![0.0f64; channels];
            let mut xhat = vec![0.0f32; block_len];
            let mut dxhat = vec![0.0f32; block_len];
            for bi in 0..batch {
                for gi in 0..groups {
                    let start = (bi * channels + gi * cg) * spatial;
                    let xb = &xs[start..start + block_len];
                    let gb = &gs[start..start + block_len];
                    let (mean, inv_std) = block_stats(xb, eps);
                    for j in 0..block_len {
                        let c = gi * cg + j / spatial;
                        xhat[j] = (xb[j] - mean) * inv_std;
                        dxhat[j] = gb[j] * gam[c];
                        dgamma[c] += (gb[j] * xhat[j]) as f64;
                        dbeta[c] += gb[j] as f64;
                    }
                    norm_block_backward(&dxhat, &xhat, inv_std, &mut dx[start..start + block_len]);
                }
            }
            vec![
                ArrayD::from_shape_vec(xv.shape().to_vec(), dx).unwrap(),
                ArrayD::from_shape_vec(vec![channels], dgamma.into_iter().map(|v| v as f32).collect())
                    .unwrap(),
                ArrayD::from_shape_vec(vec![channels], dbeta.into_iter().map(|v| v as f32).collect())
                    .unwrap(),
            ]
        }),
    )
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let feat = *x.shape().last().unwrap();
    let mut value = x.value().clone();
    {
        let flat = value.as_slice_mut().unwrap();
        for row in flat.chunks_mut(feat) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v as f64;
            }
            let inv = (1.0 / sum) as f32;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, out, _| {
            let ys = out.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![0.0f32; ys.len()];
            for r in 0..ys.len() / feat {
                let y = &ys[r * feat..(r + 1) * feat];
                let gr = &gs[r * feat..(r + 1) * feat];
                let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                for i in 0..feat {
                    dx[r * feat + i] = y[i] * (gr[i] - dot as f32);
                }
            }
            vec![ArrayD::from_shape_vec(out.shape().to_vec(), dx).unwrap()]
        }),
    )
}

/// Softmax over the leading axis of an [M, ...] stack with a temperature
/// divisor; the cross-source attention normalization.
pub fn softmax_modality(stack: &Tensor, temperature: f32) -> Tensor {
    let m = stack.shape()[0];
    let rest: usize = stack.shape()[1..].iter().product();
    let mut value = stack.value().clone();
    {
        let flat = value.as_slice_mut().unwrap();
        for p in 0..rest {
            let mut max = f32::NEG_INFINITY;
            for j in 0..m {
                max = max.max(flat[j * rest + p] / temperature);
            }
            let mut sum = 0.0f64;
            for j in 0..m {
                let e = (flat[j * rest + p] / temperature - max).exp();
                flat[j * rest + p] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for j in 0..m {
                flat[j * rest + p] *= inv;
            }
        }
    }
    Tensor::from_op(
        value,
        vec![stack.clone()],
        Box::new(move |g, out, _| {
            let ys = out.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![0.0f32; ys.len()];
            for p in 0..rest {
                let mut dot = 0.0f64;
                for j in 0..m {
                    dot += ys[j * rest + p] as f64 * gs[j * rest + p] as f64;
                }
                for j in 0..m {
                    dx[j * rest + p] =
                        ys[j * rest + p] * (gs[j * rest + p] - dot as f32) / temperature;
                }
            }
            vec![ArrayD::from_shape_vec(out.shape().to_vec(), dx).unwrap()]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::testutil::{check_grad, random_array};

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = stream(11);
        let x = random_array(&mut rng, &[4, 6]);
        let gamma = Tensor::constant(ArrayD::ones(vec![6]));
        let beta = Tensor::constant(ArrayD::zeros(vec![6]));
        let out = layer_norm(&Tensor::constant(x), &gamma, &beta, 1e-5);
        for row in out.value().as_slice().unwrap().chunks(6) {
            let mean: f32 = row.iter().sum::<f32>() / 6.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 6.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_grads_match_finite_differences() {
        let mut rng = stream(12);
        let x = random_array(&mut rng, &[3, 5]);
        let gamma = random_array(&mut rng, &[5]).mapv(|v| v + 1.5);
        let beta = random_array(&mut rng, &[5]);
        let (gc, bc) = (Tensor::constant(gamma.clone()), Tensor::constant(beta.clone()));
        check_grad(|t| layer_norm(t, &gc, &bc, 1e-5), &x, 2e-2, 1e-3);
        let xc = Tensor::constant(x.clone());
        check_grad(
            |t| layer_norm(&xc, t, &Tensor::constant(beta.clone()), 1e-5),
            &gamma,
            1e-2,
            1e-3,
        );
        check_grad(
            |t| layer_norm(&xc, &Tensor::constant(gamma.clone()), t, 1e-5),
            &beta,
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn group_norm_is_per_sample() {
        // Changing sample 1 must not affect sample 0's output.
        let mut rng = stream(13);
        let x = random_array(&mut rng, &[2, 4, 1, 2, 2]);
        let gamma = Tensor::constant(ArrayD::ones(vec![4]));
        let beta = Tensor::constant(ArrayD::zeros(vec![4]));
        let out_a = group_norm(&Tensor::constant(x.clone()), 2, &gamma, &beta, 1e-5);
        let mut x2 = x.clone();
        x2.index_axis_mut(ndarray::Axis(0), 1).mapv_inplace(|v| v * 3.0 + 1.0);
        let out_b = group_norm(&Tensor::constant(x2), 2, &gamma, &beta, 1e-5);
        assert_eq!(
            out_a.value().index_axis(ndarray::Axis(0), 0),
            out_b.value().index_axis(ndarray::Axis(0), 0)
        );
    }

    #[test]
    fn group_norm_grads_match_finite_differences() {
        let mut rng = stream(14);
        let x = random_array(&mut rng, &[2, 4, 1, 2, 2]);
        let gamma = random_array(&mut rng, &[4]).mapv(|v| v + 1.5);
        let beta = random_array(&mut rng, &[4]);
        let (gc, bc) = (Tensor::constant(gamma.clone()), Tensor::constant(beta.clone()));
        check_grad(|t| group_norm(t, 2, &gc, &bc, 1e-5), &x, 2e-2, 1e-3);
        let xc = Tensor::constant(x.clone());
        check_grad(
            |t| group_norm(&xc, 2, t, &Tensor::constant(beta.clone()), 1e-5),
            &gamma,
            1e-2,
            1e-3,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = stream(15);
        let x = random_array(&mut rng, &[5, 7]).mapv(|v| v * 4.0);
        let out = softmax_last(&Tensor::constant(x));
        for row in out.value().as_slice().unwrap().chunks(7) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_grads_match_finite_differences() {
        let mut rng = stream(16);
        let x = random_array(&mut rng, &[3, 4]);
        check_grad(softmax_last, &x, 1e-2, 1e-3);
        let stack = random_array(&mut rng, &[3, 2, 4]);
        check_grad(|t| softmax_modality(t, 3.0f32.sqrt()), &stack, 1e-2, 1e-3);
    }

    #[test]
    fn modality_softmax_singleton_is_identity_weight() {
        let x = Tensor::constant(ArrayD::from_elem(vec![1, 2, 2], 0.7f32));
        let out = softmax_modality(&x, 1.0);
        assert!(out.value().iter().all(|&v| (v - 1.0).abs() < 1e-7));
    }
}
