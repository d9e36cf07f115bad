//! Pure numeric kernels shared by forward evaluation and gradient
//! computation. Everything here is a plain function over `ndarray` values:
//! no graph state, no RNG, deterministic output for identical input.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image `[c, h, w]` into a `[c·kh·kw, oh·ow]` patch matrix.
pub fn im2col(
    x: ArrayView2<'_, f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    debug_assert_eq!(x.shape(), &[c, h * w]);
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut col = Array2::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, iy as usize * w + ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Fold a `[c·kh·kw, oh·ow]` patch-gradient matrix back onto an image
/// gradient `[c, h·w]`, accumulating overlapping contributions.
pub fn col2im(
    col: ArrayView2<'_, f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut img = Array2::zeros((c, h * w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[[ci, iy as usize * w + ix as usize]] += col[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    img
}

/// Batched 2-D convolution: `x [n,c,h,w]`, `weight [o,c,kh,kw]` → `[n,o,oh,ow]`.
pub fn conv2d_forward(
    x: ArrayView4<'_, f64>,
    weight: ArrayView4<'_, f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (o, wc, kh, kw) = weight.dim();
    assert_eq!(c, wc, "conv channel mismatch");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let wmat = weight
        .to_shape((o, c * kh * kw))
        .expect("weight reshapes")
        .to_owned();
    let mut out = Array4::zeros((n, o, oh, ow));
    for ni in 0..n {
        let xi = x
            .index_axis(Axis(0), ni)
            .to_shape((c, h * w))
            .expect("input reshapes")
            .to_owned();
        let col = im2col(xi.view(), c, h, w, kh, kw, stride, pad);
        let y = wmat.dot(&col); // [o, oh*ow]
        out.index_axis_mut(Axis(0), ni)
            .assign(&y.into_shape_with_order((o, oh, ow)).expect("output reshapes"));
    }
    out
}

/// Gradients of `conv2d_forward` w.r.t. input and weight.
pub fn conv2d_backward(
    x: ArrayView4<'_, f64>,
    weight: ArrayView4<'_, f64>,
    grad_out: ArrayView4<'_, f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>) {
    let (n, c, h, w) = x.dim();
    let (o, _, kh, kw) = weight.dim();
    let (gn, go, oh, ow) = grad_out.dim();
    assert_eq!((gn, go), (n, o), "grad batch/channel mismatch");
    let wmat = weight
        .to_shape((o, c * kh * kw))
        .expect("weight reshapes")
        .to_owned();
    let mut dx = need_dx.then(|| Array4::zeros((n, c, h, w)));
    let mut dw_mat = need_dw.then(|| Array2::<f64>::zeros((o, c * kh * kw)));
    for ni in 0..n {
        let g = grad_out
            .index_axis(Axis(0), ni)
            .to_shape((o, oh * ow))
            .expect("grad reshapes")
            .to_owned();
        if need_dw {
            let xi = x
                .index_axis(Axis(0), ni)
                .to_shape((c, h * w))
                .expect("input reshapes")
                .to_owned();
            let col = im2col(xi.view(), c, h, w, kh, kw, stride, pad);
            *dw_mat.as_mut().unwrap() += &g.dot(&col.t());
        }
        if need_dx {
            let dcol = wmat.t().dot(&g); // [c*kh*kw, oh*ow]
            let dimg = col2im(dcol.view(), c, h, w, kh, kw, stride, pad);
            dx.as_mut()
                .unwrap()
                .index_axis_mut(Axis(0), ni)
                .assign(&dimg.into_shape_with_order((c, h, w)).expect("grad reshapes"));
        }
    }
    let dw = dw_mat.map(|m| {
        m.into_shape_with_order((o, c, kh, kw))
            .expect("weight grad reshapes")
    });
    (dx, dw)
}

/// Nearest-neighbor 2× upsampling on `[n,c,h,w]`.
pub fn upsample2x_forward(x: ArrayView4<'_, f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[ni, ci, y, xx]];
                    out[[ni, ci, 2 * y, 2 * xx]] = v;
                    out[[ni, ci, 2 * y, 2 * xx + 1]] = v;
                    out[[ni, ci, 2 * y + 1, 2 * xx]] = v;
                    out[[ni, ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    out
}

/// Gradient of nearest 2× upsampling: sum each 2×2 output block.
pub fn upsample2x_backward(grad_out: ArrayView4<'_, f64>) -> Array4<f64> {
    let (n, c, h2, w2) = grad_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    dx[[ni, ci, y, xx]] = grad_out[[ni, ci, 2 * y, 2 * xx]]
                        + grad_out[[ni, ci, 2 * y, 2 * xx + 1]]
                        + grad_out[[ni, ci, 2 * y + 1, 2 * xx]]
                        + grad_out[[ni, ci, 2 * y + 1, 2 * xx + 1]];
                }
            }
        }
    }
    dx
}

/// Group-normalization statistics saved for the backward pass.
pub struct GroupNormCtx {
    pub mean: Array2<f64>,    // [n, groups]
    pub inv_std: Array2<f64>, // [n, groups]
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization over `[n,c,h,w]` with per-channel affine parameters.
pub fn group_norm_forward(
    x: ArrayView4<'_, f64>,
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
) -> (Array4<f64>, GroupNormCtx) {
    let (n, c, h, w) = x.dim();
    assert_eq!(c % groups, 0, "channels must divide into groups");
    assert_eq!(gamma.len(), c);
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let mut out = Array4::zeros((n, c, h, w));
    let mut mean = Array2::zeros((n, groups));
    let mut inv_std = Array2::zeros((n, groups));
    for ni in 0..n {
        for g in 0..groups {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ci in g * cg..(g + 1) * cg {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[[ni, ci, y, xx]];
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let mu = sum / m;
            let var = (sq / m - mu * mu).max(0.0);
            let istd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            mean[[ni, g]] = mu;
            inv_std[[ni, g]] = istd;
            for ci in g * cg..(g + 1) * cg {
                for y in 0..h {
                    for xx in 0..w {
                        let xhat = (x[[ni, ci, y, xx]] - mu) * istd;
                        out[[ni, ci, y, xx]] = gamma[ci] * xhat + beta[ci];
                    }
                }
            }
        }
    }
    (out, GroupNormCtx { mean, inv_std })
}

/// Gradients of group normalization w.r.t. input, gamma, and beta.
pub fn group_norm_backward(
    x: ArrayView4<'_, f64>,
    gamma: &[f64],
    ctx: &GroupNormCtx,
    grad_out: ArrayView4<'_, f64>,
    groups: usize,
) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dim();
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let mut dx = Array4::zeros((n, c, h, w));
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for g in 0..groups {
            let mu = ctx.mean[[ni, g]];
            let istd = ctx.inv_std[[ni, g]];
            // First pass: accumulate the two group-wide sums.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in g * cg..(g + 1) * cg {
                for y in 0..h {
                    for xx in 0..w {
                        let go = grad_out[[ni, ci, y, xx]];
                        let xhat = (x[[ni, ci, y, xx]] - mu) * istd;
                        let dxhat = go * gamma[ci];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[ci] += go * xhat;
                        dbeta[ci] += go;
                    }
                }
            }
            // Second pass: dx = istd/m · (m·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)).
            for ci in g * cg..(g + 1) * cg {
                for y in 0..h {
                    for xx in 0..w {
                        let xhat = (x[[ni, ci, y, xx]] - mu) * istd;
                        let dxhat = grad_out[[ni, ci, y, xx]] * gamma[ci];
                        dx[[ni, ci, y, xx]] =
                            istd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax on `[rows, cols]`.
pub fn softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut mx = f64::NEG_INFINITY;
        for ci in 0..cols {
            mx = mx.max(x[[r, ci]]);
        }
        let mut sum = 0.0;
        for ci in 0..cols {
            let e = (x[[r, ci]] - mx).exp();
            out[[r, ci]] = e;
            sum += e;
        }
        for ci in 0..cols {
            out[[r, ci]] /= sum;
        }
    }
    out
}
