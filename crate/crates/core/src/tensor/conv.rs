//! 3-d convolution (im2col + GEMM) and nearest-neighbor upsampling.

use super::Tensor;
use ndarray::{Array2, ArrayD};

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    input: (usize, usize, usize),
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
    out: (usize, usize, usize),
}

impl ConvGeom {
    fn new(
        x: &[usize],
        w: &[usize],
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Self {
        assert_eq!(x.len(), 5, "conv3d input must be [B, C, D, H, W]");
        assert_eq!(w.len(), 5, "conv3d weight must be [O, C, kd, kh, kw]");
        assert_eq!(x[1], w[1], "conv3d channel mismatch");
        let dim = |n: usize, k: usize, s: usize, p: usize| {
            assert!(n + 2 * p >= k, "conv3d kernel larger than padded input");
            (n + 2 * p - k) / s + 1
        };
        let out = (
            dim(x[2], w[2], stride.0, pad.0),
            dim(x[3], w[3], stride.1, pad.1),
            dim(x[4], w[4], stride.2, pad.2),
        );
        ConvGeom {
            batch: x[0],
            c_in: x[1],
            c_out: w[0],
            input: (x[2], x[3], x[4]),
            kernel: (w[2], w[3], w[4]),
            stride,
            pad,
            out,
        }
    }

    fn rows(&self) -> usize {
        self.batch * self.out.0 * self.out.1 * self.out.2
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel.0 * self.kernel.1 * self.kernel.2
    }
}

/// Lowers the input into a [patch_len, rows] matrix; rows are output
/// positions in (b, d, h, w) order, exactly matching the GEMM layout below.
fn im2col(x: &ArrayD<f32>, geom: &ConvGeom) -> Array2<f32> {
    let (d_in, h_in, w_in) = geom.input;
    let (kd, kh, kw) = geom.kernel;
    let (sd, sh, sw) = geom.stride;
    let (pd, ph, pw) = geom.pad;
    let (d_out, h_out, w_out) = geom.out;
    let xs = x.as_slice().expect("standard layout");
    let mut patches = Array2::<f32>::zeros((geom.patch_len(), geom.rows()));
    let hw_out = h_out * w_out;
    let dhw_out = d_out * hw_out;
    for c in 0..geom.c_in {
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let prow = ((c * kd + dz) * kh + dy) * kw + dx;
                    let mut dst = patches.row_mut(prow);
                    let dst = dst.as_slice_mut().unwrap();
                    for b in 0..geom.batch {
                        let xbase = (b * geom.c_in + c) * d_in * h_in * w_in;
                        for od in 0..d_out {
                            let id = od * sd + dz;
                            if id < pd || id - pd >= d_in {
                                continue;
                            }
                            let id = id - pd;
                            for oh in 0..h_out {
                                let ih = oh * sh + dy;
                                if ih < ph || ih - ph >= h_in {
                                    continue;
                                }
                                let ih = ih - ph;
                                let rbase = b * dhw_out + od * hw_out + oh * w_out;
                                let xrow = xbase + (id * h_in + ih) * w_in;
                                for ow in 0..w_out {
                                    let iw = ow * sw + dx;
                                    if iw < pw || iw - pw >= w_in {
                                        continue;
                                    }
                                    dst[rbase + ow] = xs[xrow + iw - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    patches
}

/// Scatters patch-space gradients back onto the input grid.
fn col2im(dpatches: &Array2<f32>, geom: &ConvGeom) -> ArrayD<f32> {
    let (d_in, h_in, w_in) = geom.input;
    let (kd, kh, kw) = geom.kernel;
    let (sd, sh, sw) = geom.stride;
    let (pd, ph, pw) = geom.pad;
    let (d_out, h_out, w_out) = geom.out;
    let mut dx = ArrayD::<f32>::zeros(vec![geom.batch, geom.c_in, d_in, h_in, w_in]);
    let dxs = dx.as_slice_mut().unwrap();
    let hw_out = h_out * w_out;
    let dhw_out = d_out * hw_out;
    for c in 0..geom.c_in {
        for dz in 0..kd {
            for dy in 0..kh {
                for dx_k in 0..kw {
                    let prow = ((c * kd + dz) * kh + dy) * kw + dx_k;
                    let src = dpatches.row(prow);
                    let src = src.as_slice().unwrap();
                    for b in 0..geom.batch {
                        let xbase = (b * geom.c_in + c) * d_in * h_in * w_in;
                        for od in 0..d_out {
                            let id = od * sd + dz;
                            if id < pd || id - pd >= d_in {
                                continue;
                            }
                            let id = id - pd;
                            for oh in 0..h_out {
                                let ih = oh * sh + dy;
                                if ih < ph || ih - ph >= h_in {
                                    continue;
                                }
                                let ih = ih - ph;
                                let rbase = b * dhw_out + od * hw_out + oh * w_out;
                                let xrow = xbase + (id * h_in + ih) * w_in;
                                for ow in 0..w_out {
                                    let iw = ow * sw + dx_k;
                                    if iw < pw || iw - pw >= w_in {
                                        continue;
                                    }
                                    dxs[xrow + iw - pw] += src[rbase + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 3-d convolution: x [B, C, D, H, W], w [O, C, kd, kh, kw], b [O].
///
/// Patches are recomputed during the backward pass instead of being captured,
/// trading a little compute for graph memory.
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Tensor {
    let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let patches = im2col(x.value(), &geom);
    let w_flat = reshape2(w.value(), geom.c_out, geom.patch_len());
    // [O, rows]
    let out_mat = w_flat.dot(&patches);
    let (d_out, h_out, w_out) = geom.out;
    let mut value = out_mat
        .into_shape_with_order((geom.c_out, geom.batch, d_out, h_out, w_out))
        .unwrap()
        .into_dyn()
        .permuted_axes(vec![1, 0, 2, 3, 4])
        .as_standard_layout()
        .to_owned();
    let bias = b.value();
    for o in 0..geom.c_out {
        let bo = bias[[o]];
        value
            .index_axis_mut(ndarray::Axis(1), o)
            .mapv_inplace(|v| v + bo);
    }
    Tensor::from_op(
        value,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, _, parents| {
            let rows = geom.rows();
            let g_mat = g
                .view()
                .permuted_axes(vec![1, 0, 2, 3, 4])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((geom.c_out, rows))
                .unwrap();
            let patches = im2col(parents[0].value(), &geom);
            let dw = g_mat.dot(&patches.t());
            let w_flat = reshape2(parents[1].value(), geom.c_out, geom.patch_len());
            let dpatches = w_flat.t().dot(&g_mat);
            let dx = col2im(&dpatches, &geom);
            let mut db = ArrayD::<f32>::zeros(vec![geom.c_out]);
            for o in 0..geom.c_out {
                db[[o]] = g_mat.row(o).iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
            let dw = dw
                .into_dyn()
                .into_shape_with_order(parents[1].shape().to_vec())
                .unwrap();
            vec![dx, dw, db]
        }),
    )
}

fn reshape2(a: &ArrayD<f32>, r: usize, c: usize) -> Array2<f32> {
    a.view()
        .into_shape_with_order((r, c))
        .expect("contiguous weight")
        .to_owned()
}

/// Nearest-neighbor 2x upsampling of the two trailing spatial axes of a
/// [B, C, D, H, W] tensor.
pub fn upsample2x_hw(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 5);
    let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let xs = x.value().as_slice().unwrap();
    let mut value = ArrayD::<f32>::zeros(vec![b, c, d, 2 * h, 2 * w]);
    {
        let vs = value.as_slice_mut().unwrap();
        let planes = b * c * d;
        for p in 0..planes {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut vs[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let gs = g.as_slice().unwrap();
            let mut dx = ArrayD::<f32>::zeros(vec![b, c, d, h, w]);
            {
                let ds = dx.as_slice_mut().unwrap();
                let planes = b * c * d;
                for p in 0..planes {
                    let src = &gs[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut ds[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
            }
            vec![dx]
        }),
    )
}
