//! im2col/col2im kernels backing the 2D and 3D convolution tape ops.
//!
//! Convolutions are lowered to a single matrix product: patches are
//! unrolled into a column matrix, multiplied by the flattened kernel
//! bank, and the gradient path runs the same product transposed plus a
//! col2im scatter. Kernels are always odd-sized with symmetric zero
//! padding.

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4};

/// Output length of one spatial dimension.
pub fn out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Unroll `[C, H, W]` into `[C*kh*kw, Ho*Wo]` patch columns.
pub fn im2col2d(
    x: &ArrayView3<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = out_len(h, kernel, stride, pad);
    let wo = out_len(w, kernel, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kernel * kernel, ho * wo));
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
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

/// Scatter-add column gradients back to the `[C, H, W]` input layout.
pub fn col2im2d(
    dcols: &Array2<f64>,
    dims: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, h, w) = dims;
    let ho = out_len(h, kernel, stride, pad);
    let wo = out_len(w, kernel, stride, pad);
    let mut dx = Array3::<f64>::zeros(dims);
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
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
                        dx[(ci, iy as usize, ix as usize)] += dcols[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    dx
}

/// Unroll `[C, D, H, W]` into `[C*k^3, Do*Ho*Wo]` patch columns.
pub fn im2col3d(
    x: &ArrayView4<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, d, h, w) = x.dim();
    let do_ = out_len(d, kernel, stride, pad);
    let ho = out_len(h, kernel, stride, pad);
    let wo = out_len(w, kernel, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kernel * kernel * kernel, do_ * ho * wo));
    for ci in 0..c {
        for kz in 0..kernel {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = ((ci * kernel + kz) * kernel + ky) * kernel + kx;
                    for oz in 0..do_ {
                        let iz = (oz * stride + kz) as isize - pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
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
                                cols[(row, (oz * ho + oy) * wo + ox)] =
                                    x[(ci, iz as usize, iy as usize, ix as usize)];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add column gradients back to the `[C, D, H, W]` input layout.
pub fn col2im3d(
    dcols: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (c, d, h, w) = dims;
    let do_ = out_len(d, kernel, stride, pad);
    let ho = out_len(h, kernel, stride, pad);
    let wo = out_len(w, kernel, stride, pad);
    let mut dx = Array4::<f64>::zeros(dims);
    for ci in 0..c {
        for kz in 0..kernel {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = ((ci * kernel + kz) * kernel + ky) * kernel + kx;
                    for oz in 0..do_ {
                        let iz = (oz * stride + kz) as isize - pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
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
                                dx[(ci, iz as usize, iy as usize, ix as usize)] +=
                                    dcols[(row, (oz * ho + oy) * wo + ox)];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
