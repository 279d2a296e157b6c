//! Small composite layers shared by the network modules.

use crate::tensor::{add_bias_last, matmul, permute, reshape, Tensor};

/// Pointwise channel mixing of a [B, C, D, H, W] volume (a 1x1x1 convolution):
/// w is [C_in, C_out], bias [C_out].
pub(crate) fn channel_mix(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let s = x.shape().to_vec();
    let (batch, c_in) = (s[0], s[1]);
    let (d, h, wd) = (s[2], s[3], s[4]);
    let c_out = w.shape()[1];
    let flat = reshape(
        &permute(x, &[0, 2, 3, 4, 1]),
        &[batch * d * h * wd, c_in],
    );
    let mut out = matmul(&flat, w);
    if let Some(b) = b {
        out = add_bias_last(&out, b);
    }
    permute(&reshape(&out, &[batch, d, h, wd, c_out]), &[0, 4, 1, 2, 3])
}

/// Linear map over the last axis of a token tensor [B, N, C_in] -> [B, N, C_out].
pub(crate) fn linear_tokens(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let s = x.shape().to_vec();
    let (batch, n, c_in) = (s[0], s[1], s[2]);
    let c_out = w.shape()[1];
    let flat = reshape(x, &[batch * n, c_in]);
    let mut out = matmul(&flat, w);
    if let Some(b) = b {
        out = add_bias_last(&out, b);
    }
    reshape(&out, &[batch, n, c_out])
}

/// Pointwise channel mixing of a [B, C, H, W] map (a 1x1 convolution).
pub(crate) fn channel_mix_2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let s = x.shape().to_vec();
    let (batch, c_in, h, wd) = (s[0], s[1], s[2], s[3]);
    let c_out = w.shape()[1];
    let flat = reshape(&permute(x, &[0, 2, 3, 1]), &[batch * h * wd, c_in]);
    let mut out = matmul(&flat, w);
    if let Some(b) = b {
        out = add_bias_last(&out, b);
    }
    permute(&reshape(&out, &[batch, h, wd, c_out]), &[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn channel_mix_is_a_per_voxel_matmul() {
        // 2 input channels, identity-ish weights picking channel sums.
        let x = Tensor::constant(
            ArrayD::from_shape_vec(vec![1, 2, 1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
        );
        let w = Tensor::constant(ArrayD::from_shape_vec(vec![2, 1], vec![1.0f32, 1.0]).unwrap());
        let out = channel_mix(&x, &w, None);
        assert_eq!(out.shape(), &[1, 1, 1, 1, 2]);
        // Voxel (0,0,0): 1 + 3; voxel (0,0,1): 2 + 4.
        assert_eq!(out.value().as_slice().unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn linear_tokens_shapes() {
        let x = Tensor::constant(ArrayD::zeros(vec![2, 5, 3]));
        let w = Tensor::constant(ArrayD::zeros(vec![3, 7]));
        let b = Tensor::constant(ArrayD::zeros(vec![7]));
        assert_eq!(linear_tokens(&x, &w, Some(&b)).shape(), &[2, 5, 7]);
    }
}
