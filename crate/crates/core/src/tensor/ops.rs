//! Elementwise, shape, and reduction primitives.

use super::Tensor;
use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

pub(crate) fn reshape_value(a: &ArrayD<f32>, shape: &[usize]) -> ArrayD<f32> {
    let flat: Vec<f32> = a.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape: element count mismatch")
}

/// Elementwise sum of two same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let value = a.value() + b.value();
    Tensor::from_op(value, vec![a.clone(), b.clone()], Box::new(|g, _, _| vec![g.clone(), g.clone()]))
}

/// Elementwise difference a - b.
pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let value = a.value() - b.value();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)]),
    )
}

/// Elementwise product of two same-shaped tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let value = a.value() * b.value();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, parents| {
            vec![g * parents[1].value(), g * parents[0].value()]
        }),
    )
}

/// a * mul + add, with scalar coefficients.
pub fn affine(a: &Tensor, mul: f32, add: f32) -> Tensor {
    let value = a.value().mapv(|x| x * mul + add);
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g, _, _| vec![g.mapv(|x| x * mul)]),
    )
}

pub fn scale(a: &Tensor, c: f32) -> Tensor {
    affine(a, c, 0.0)
}

pub fn relu(a: &Tensor) -> Tensor {
    let value = a.value().mapv(|x| x.max(0.0));
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(|g, _, parents| {
            let mut out = g.clone();
            out.zip_mut_with(parents[0].value(), |gi, &xi| {
                if xi <= 0.0 {
                    *gi = 0.0;
                }
            });
            vec![out]
        }),
    )
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Gaussian error linear unit (tanh approximation).
pub fn gelu(a: &Tensor) -> Tensor {
    let value = a.value().mapv(|x| {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        0.5 * x * (1.0 + u.tanh())
    });
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(|g, _, parents| {
            let mut out = g.clone();
            out.zip_mut_with(parents[0].value(), |gi, &x| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                *gi *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            });
            vec![out]
        }),
    )
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let value = a.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(|g, out, _| {
            let mut gx = g.clone();
            gx.zip_mut_with(out, |gi, &y| *gi *= y * (1.0 - y));
            vec![gx]
        }),
    )
}

/// Natural logarithm; inputs must be positive.
pub fn ln(a: &Tensor) -> Tensor {
    let value = a.value().mapv(f32::ln);
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(|g, _, parents| {
            let mut gx = g.clone();
            gx.zip_mut_with(parents[0].value(), |gi, &x| *gi /= x);
            vec![gx]
        }),
    )
}

/// Clamp to [lo, hi]; gradient is zero outside the open interval.
pub fn clamp(a: &Tensor, lo: f32, hi: f32) -> Tensor {
    let value = a.value().mapv(|x| x.clamp(lo, hi));
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g, _, parents| {
            let mut gx = g.clone();
            gx.zip_mut_with(parents[0].value(), |gi, &x| {
                if x <= lo || x >= hi {
                    *gi = 0.0;
                }
            });
            vec![gx]
        }),
    )
}

/// Scales each leading-axis row of `x` by the constant weight `w[b]`;
/// the elementwise gating primitive for availability masks.
pub fn mul_rows(x: &Tensor, w: &[f32]) -> Tensor {
    debug_assert_eq!(x.shape()[0], w.len());
    let mut value = x.value().clone();
    for (b, &wb) in w.iter().enumerate() {
        value.index_axis_mut(Axis(0), b).mapv_inplace(|v| v * wb);
    }
    let w: Vec<f32> = w.to_vec();
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = g.clone();
            for (b, &wb) in w.iter().enumerate() {
                gx.index_axis_mut(Axis(0), b).mapv_inplace(|v| v * wb);
            }
            vec![gx]
        }),
    )
}

/// Adds a per-channel bias over axis 1 of an N-d tensor.
pub fn add_bias_channel(x: &Tensor, b: &Tensor) -> Tensor {
    let channels = x.shape()[1];
    debug_assert_eq!(b.shape(), [channels]);
    let mut value = x.value().clone();
    let bias = b.value();
    for c in 0..channels {
        let bc = bias[[c]];
        value.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bc);
    }
    Tensor::from_op(
        value,
        vec![x.clone(), b.clone()],
        Box::new(move |g, _, _| {
            let mut gb = ArrayD::zeros(vec![channels]);
            for c in 0..channels {
                gb[[c]] = g.index_axis(Axis(1), c).iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
            vec![g.clone(), gb]
        }),
    )
}

/// Adds a bias over the last axis of an N-d tensor.
pub fn add_bias_last(x: &Tensor, b: &Tensor) -> Tensor {
    let last = *x.shape().last().unwrap();
    debug_assert_eq!(b.shape(), [last]);
    let mut value = x.value().clone();
    let bias = b.value();
    let rows = value.len() / last;
    {
        let flat = value.as_slice_mut().expect("standard layout");
        for r in 0..rows {
            for c in 0..last {
                flat[r * last + c] += bias[[c]];
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone(), b.clone()],
        Box::new(move |g, _, _| {
            let mut gb = vec![0.0f64; last];
            let flat: Vec<f32> = g.iter().copied().collect();
            for (i, v) in flat.iter().enumerate() {
                gb[i % last] += *v as f64;
            }
            let gb = ArrayD::from_shape_vec(vec![last], gb.into_iter().map(|v| v as f32).collect())
                .unwrap();
            vec![g.clone(), gb]
        }),
    )
}

/// Adds a tensor shaped like one sample to every row of a batch:
/// x[b, ...] + p[...]. Used for positional embeddings.
pub fn add_broadcast_batch(x: &Tensor, p: &Tensor) -> Tensor {
    debug_assert_eq!(&x.shape()[1..], p.shape());
    let mut value = x.value().clone();
    let pv = p.value();
    for b in 0..x.shape()[0] {
        let mut row = value.index_axis_mut(Axis(0), b);
        row += pv;
    }
    Tensor::from_op(
        value,
        vec![x.clone(), p.clone()],
        Box::new(|g, _, _| {
            let gp = g.sum_axis(Axis(0));
            vec![g.clone(), gp]
        }),
    )
}

/// Reshape preserving logical (row-major) element order.
pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    let value = reshape_value(a.value(), shape);
    let orig: Vec<usize> = a.shape().to_vec();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g, _, _| vec![reshape_value(g, &orig)]),
    )
}

/// Axis permutation (copies into standard layout).
pub fn permute(a: &Tensor, axes: &[usize]) -> Tensor {
    let value = a
        .value()
        .view()
        .permuted_axes(axes.to_vec())
        .as_standard_layout()
        .to_owned();
    let mut inverse = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g, _, _| {
            vec![g
                .view()
                .permuted_axes(inverse.clone())
                .as_standard_layout()
                .to_owned()]
        }),
    )
}

/// Concatenation along an axis.
pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
    debug_assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Tensor::from_op(
        value,
        parts.to_vec(),
        Box::new(move |g, _, _| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for &len in &sizes {
                out.push(
                    g.slice_axis(Axis(axis), Slice::from(start..start + len))
                        .as_standard_layout()
                        .to_owned(),
                );
                start += len;
            }
            out
        }),
    )
}

/// Contiguous sub-range along an axis.
pub fn narrow(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let value = a
        .value()
        .slice_axis(Axis(axis), Slice::from(start..start + len))
        .as_standard_layout()
        .to_owned();
    let full: Vec<usize> = a.shape().to_vec();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g, _, _| {
            let mut gx = ArrayD::<f32>::zeros(full.clone());
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![gx]
        }),
    )
}

/// Stacks same-shaped tensors along a new leading axis.
pub fn stack0(parts: &[Tensor]) -> Tensor {
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = ndarray::stack(Axis(0), &views).expect("stack: incompatible shapes");
    Tensor::from_op(
        value,
        parts.to_vec(),
        Box::new(move |g, _, parents| {
            (0..parents.len())
                .map(|i| g.index_axis(Axis(0), i).to_owned())
                .collect()
        }),
    )
}

/// Selects index `i` along the leading axis, dropping that axis.
pub fn index_axis0(a: &Tensor, i: usize) -> Tensor {
    let value = a.value().index_axis(Axis(0), i).to_owned();
    let full: Vec<usize> = a.shape().to_vec();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g, _, _| {
            let mut gx = ArrayD::<f32>::zeros(full.clone());
            gx.index_axis_mut(Axis(0), i).assign(g);
            vec![gx]
        }),
    )
}

/// Sum of every element, as a 1-element tensor.
pub fn sum_all(a: &Tensor) -> Tensor {
    let total: f64 = a.value().iter().map(|&v| v as f64).sum();
    let value = ArrayD::from_elem(vec![1], total as f32);
    let shape: Vec<usize> = a.shape().to_vec();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g, _, _| vec![ArrayD::from_elem(shape.clone(), g[[0]])]),
    )
}

/// Mean of every element, as a 1-element tensor.
pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f32;
    scale(&sum_all(a), 1.0 / n)
}

/// Mean along one axis, removing it.
pub fn mean_axis(a: &Tensor, axis: usize) -> Tensor {
    let n = a.shape()[axis];
    let value = a.value().mean_axis(Axis(axis)).expect("mean_axis: empty axis");
    let full: Vec<usize> = a.shape().to_vec();
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g, _, _| {
            let expanded = g.clone().insert_axis(Axis(axis));
            let gx = expanded
                .broadcast(full.clone())
                .expect("broadcast back")
                .mapv(|v| v / n as f32);
            vec![gx]
        }),
    )
}
