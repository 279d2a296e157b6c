//! Matrix products.

use super::Tensor;
use ndarray::{ArrayD, ArrayView2, Axis, Ix2, Ix3};

fn as2(a: &ArrayD<f32>) -> ArrayView2<'_, f32> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor expected")
}

/// 2-d matrix product: [m, k] x [k, n] -> [m, n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape().len(), 2);
    debug_assert_eq!(b.shape().len(), 2);
    debug_assert_eq!(a.shape()[1], b.shape()[0]);
    let value = as2(a.value()).dot(&as2(b.value())).into_dyn();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, parents| {
            let g2 = as2(g);
            let av = as2(parents[0].value());
            let bv = as2(parents[1].value());
            let ga = g2.dot(&bv.t()).into_dyn();
            let gb = av.t().dot(&g2).into_dyn();
            vec![ga, gb]
        }),
    )
}

/// Batched matrix product over a leading group axis:
/// [g, m, k] x [g, k, n] -> [g, m, n]. With `transpose_b`, b is [g, n, k].
pub fn bmm(a: &Tensor, b: &Tensor, transpose_b: bool) -> Tensor {
    let (ga, gb) = (a.shape()[0], b.shape()[0]);
    debug_assert_eq!(ga, gb);
    let a3 = a.value().view().into_dimensionality::<Ix3>().expect("rank-3");
    let b3 = b.value().view().into_dimensionality::<Ix3>().expect("rank-3");
    let (m, k) = (a3.shape()[1], a3.shape()[2]);
    let n = if transpose_b { b3.shape()[1] } else { b3.shape()[2] };
    let mut value = ndarray::Array3::<f32>::zeros((ga, m, n));
    for i in 0..ga {
        let ai = a3.index_axis(Axis(0), i);
        let bi = b3.index_axis(Axis(0), i);
        let prod = if transpose_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
        value.index_axis_mut(Axis(0), i).assign(&prod);
    }
    let _ = k;
    Tensor::from_op(
        value.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, parents| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let a3 = parents[0].value().view().into_dimensionality::<Ix3>().unwrap();
            let b3 = parents[1].value().view().into_dimensionality::<Ix3>().unwrap();
            let mut da = ndarray::Array3::<f32>::zeros(a3.raw_dim());
            let mut db = ndarray::Array3::<f32>::zeros(b3.raw_dim());
            for i in 0..g3.shape()[0] {
                let gi = g3.index_axis(Axis(0), i);
                let ai = a3.index_axis(Axis(0), i);
                let bi = b3.index_axis(Axis(0), i);
                if transpose_b {
                    // out = a . b^T
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi));
                    db.index_axis_mut(Axis(0), i).assign(&gi.t().dot(&ai));
                } else {
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
            }
            vec![da.into_dyn(), db.into_dyn()]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::testutil::{check_grad, random_array};

    #[test]
    fn matmul_matches_finite_differences() {
        let mut rng = stream(5);
        let a = random_array(&mut rng, &[3, 4]);
        let b = random_array(&mut rng, &[4, 2]);
        check_grad(|t| matmul(t, &Tensor::constant(b.clone())), &a, 1e-2, 1e-3);
        check_grad(|t| matmul(&Tensor::constant(a.clone()), t), &b, 1e-2, 1e-3);
    }

    #[test]
    fn bmm_both_layouts_match_finite_differences() {
        let mut rng = stream(6);
        let a = random_array(&mut rng, &[2, 3, 4]);
        let b = random_array(&mut rng, &[2, 4, 3]);
        let bt = random_array(&mut rng, &[2, 3, 4]);
        check_grad(|t| bmm(t, &Tensor::constant(b.clone()), false), &a, 1e-2, 1e-3);
        check_grad(|t| bmm(&Tensor::constant(a.clone()), t, false), &b, 1e-2, 1e-3);
        check_grad(|t| bmm(t, &Tensor::constant(bt.clone()), true), &a, 1e-2, 1e-3);
        check_grad(|t| bmm(&Tensor::constant(a.clone()), t, true), &bt, 1e-2, 1e-3);
    }

    #[test]
    fn bmm_matches_manual_product() {
        let a = Tensor::constant(
            ndarray::ArrayD::from_shape_vec(vec![1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
        );
        let b = Tensor::constant(
            ndarray::ArrayD::from_shape_vec(vec![1, 2, 2], vec![5.0f32, 6.0, 7.0, 8.0]).unwrap(),
        );
        let out = bmm(&a, &b, false);
        assert_eq!(out.value().as_slice().unwrap(), &[19.0, 22.0, 43.0, 50.0]);
    }
}
