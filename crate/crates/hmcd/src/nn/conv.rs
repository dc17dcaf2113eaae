//! 2D convolution kernels (im2col + GEMM) with analytic backward passes.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView4};

/// Output spatial size for a conv with the given geometry.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` into a `[Cin*k*k, Ho*Wo]` matrix of receptive fields.
pub fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * wo + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[Cin*k*k, Ho*Wo]` gradient matrix back onto the input (scatter-add).
pub fn col2im(
    cols: &Array2<f64>,
    input_dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, h, w) = input_dim;
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += cols[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution: `w` is `[Cout, Cin, k, k]`, `x` is `[Cin, H, W]`.
pub fn conv2d_forward(
    x: &Array3<f64>,
    w: ArrayView4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (cout, cin, k, _) = w.dim();
    debug_assert_eq!(cin, x.dim().0);
    let (_, h, width) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(width, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let w2 = w
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut y2 = Array2::zeros((cout, ho * wo));
    ndarray::linalg::general_mat_mul(1.0, &w2, &cols, 0.0, &mut y2);
    if let Some(b) = b {
        for (mut row, &bias) in y2.rows_mut().into_iter().zip(b.iter()) {
            row += bias;
        }
    }
    y2.into_shape_with_order((cout, ho, wo)).expect("output reshape")
}

/// Gradients of a convolution. Returns `gx` and accumulates `gw`/`gb`.
pub fn conv2d_backward(
    x: &Array3<f64>,
    w: ArrayView4<f64>,
    gy: &Array3<f64>,
    stride: usize,
    pad: usize,
    gw: &mut Array4<f64>,
    gb: Option<&mut Array1<f64>>,
) -> Array3<f64> {
    let (cout, cin, k, _) = w.dim();
    let (_, ho, wo) = gy.dim();
    let cols = im2col(x, k, stride, pad);
    let gy2 = gy
        .to_shape((cout, ho * wo))
        .expect("grad reshape")
        .to_owned();

    // gw += gy2 . cols^T
    let mut gw2 = Array2::zeros((cout, cin * k * k));
    ndarray::linalg::general_mat_mul(1.0, &gy2, &cols.t().to_owned(), 0.0, &mut gw2);
    let gw_add = gw2
        .into_shape_with_order((cout, cin, k, k))
        .expect("gw reshape");
    *gw += &gw_add;

    if let Some(gb) = gb {
        for (g, row) in gb.iter_mut().zip(gy2.rows()) {
            *g += row.sum();
        }
    }

    // gx = col2im(w^T . gy2)
    let w2 = w
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut gcols = Array2::zeros((cin * k * k, ho * wo));
    ndarray::linalg::general_mat_mul(1.0, &w2.t().to_owned(), &gy2, 0.0, &mut gcols);
    col2im(&gcols, x.dim(), k, stride, pad)
}
