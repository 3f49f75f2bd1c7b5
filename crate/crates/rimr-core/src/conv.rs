//! Convolution kernels shared by the autodiff graph.
//!
//! All variants reduce to im2col/col2im plus one matrix product so the hot
//! loops run through the blocked GEMM. 2D ops are the 3D ops with a unit
//! depth axis. Layouts:
//!   conv:           x[C_in, D, H, W] * k[C_out, C_in, kd, kh, kw] -> y[C_out, D', H', W']
//!   conv transpose: x[C_out, D', H', W'] * same k -> y[C_in, D, H, W]
//! so a transposed convolution with the same kernels is the exact adjoint of
//! the forward convolution.

use crate::scalar::{gemm_nt, gemm_tn, Scalar};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Stride and zero padding for one convolution, per spatial axis (d, h, w).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom3 {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom3 {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    /// Lifts a 2D (h, w) geometry onto the unit depth axis.
    pub fn from_2d(stride: [usize; 2], pad: [usize; 2]) -> Self {
        Self { stride: [1, stride[0], stride[1]], pad: [0, pad[0], pad[1]] }
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> TensorResult<usize> {
    let padded = input + 2 * pad;
    if stride == 0 {
        return Err(TensorError::InvalidArgument { op: "conv", message: "stride must be positive".into() });
    }
    if padded < kernel || kernel == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv",
            message: format!("kernel extent {kernel} exceeds padded input extent {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> TensorResult<usize> {
    let grown = (input - 1) * stride + kernel;
    if input == 0 || grown < 2 * pad + 1 {
        return Err(TensorError::InvalidArgument {
            op: "conv_transpose",
            message: format!("input extent {input}, kernel {kernel}, stride {stride}, pad {pad} yield a non-positive output"),
        });
    }
    Ok(grown - 2 * pad)
}

struct Geometry {
    channels: usize,
    in_spatial: [usize; 3],
    kernel: [usize; 3],
    out_spatial: [usize; 3],
    geom: ConvGeom3,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.out_spatial.iter().product()
    }
}

/// Unpacks sliding patches of `x` into `cols` with layout
/// `[channels * kd * kh * kw, od * oh * ow]`, zero-filling out-of-bounds taps.
fn im2col<E: Scalar>(x: &[E], g: &Geometry, cols: &mut [E]) {
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_len());
    let [id_, ih, iw] = g.in_spatial;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out_spatial;
    let [sd, sh, sw] = g.geom.stride;
    let [pd, ph, pw] = g.geom.pad;
    let mut row = 0usize;
    for c in 0..g.channels {
        let x_c = &x[c * id_ * ih * iw..(c + 1) * id_ * ih * iw];
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let dst = &mut cols[row * g.out_len()..(row + 1) * g.out_len()];
                    let mut out_idx = 0usize;
                    for oz in 0..od {
                        let iz = (oz * sd + dz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + dy) as isize - ph as isize;
                            let in_plane = iz >= 0 && iz < id_ as isize && iy >= 0 && iy < ih as isize;
                            if in_plane {
                                let base = (iz as usize * ih + iy as usize) * iw;
                                for ox in 0..ow {
                                    let ix = (ox * sw + dx) as isize - pw as isize;
                                    dst[out_idx + ox] = if ix >= 0 && ix < iw as isize {
                                        x_c[base + ix as usize]
                                    } else {
                                        E::ZERO
                                    };
                                }
                            } else {
                                dst[out_idx..out_idx + ow].fill(E::ZERO);
                            }
                            out_idx += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulates each column entry back onto its source
/// position, skipping taps that fell in the zero padding.
fn col2im<E: Scalar>(cols: &[E], g: &Geometry, x: &mut [E]) {
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_len());
    let [id_, ih, iw] = g.in_spatial;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out_spatial;
    let [sd, sh, sw] = g.geom.stride;
    let [pd, ph, pw] = g.geom.pad;
    let mut row = 0usize;
    for c in 0..g.channels {
        let x_c = &mut x[c * id_ * ih * iw..(c + 1) * id_ * ih * iw];
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let src = &cols[row * g.out_len()..(row + 1) * g.out_len()];
                    let mut out_idx = 0usize;
                    for oz in 0..od {
                        let iz = (oz * sd + dz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + dy) as isize - ph as isize;
                            if iz >= 0 && iz < id_ as isize && iy >= 0 && iy < ih as isize {
                                let base = (iz as usize * ih + iy as usize) * iw;
                                for ox in 0..ow {
                                    let ix = (ox * sw + dx) as isize - pw as isize;
                                    if ix >= 0 && ix < iw as isize {
                                        x_c[base + ix as usize] += src[out_idx + ox];
                                    }
                                }
                            }
                            out_idx += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn forward_geometry<E: Scalar>(
    x: &Tensor<E>,
    kernels: &Tensor<E>,
    geom: ConvGeom3,
) -> TensorResult<Geometry> {
    if x.rank() != 4 {
        return Err(TensorError::RankMismatch { op: "conv", expected: 4, shape: x.shape().to_vec() });
    }
    if kernels.rank() != 5 {
        return Err(TensorError::RankMismatch { op: "conv", expected: 5, shape: kernels.shape().to_vec() });
    }
    if kernels.shape()[1] != x.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv",
            lhs: x.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    let in_spatial = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let kernel = [kernels.shape()[2], kernels.shape()[3], kernels.shape()[4]];
    let mut out_spatial = [0usize; 3];
    for axis in 0..3 {
        out_spatial[axis] = conv_out_extent(in_spatial[axis], kernel[axis], geom.stride[axis], geom.pad[axis])?;
    }
    Ok(Geometry { channels: x.shape()[0], in_spatial, kernel, out_spatial, geom })
}

/// Cross-correlation of `x[C_in, D, H, W]` with `kernels[C_out, C_in, kd, kh, kw]`.
pub fn conv3d<E: Scalar>(x: &Tensor<E>, kernels: &Tensor<E>, geom: ConvGeom3) -> TensorResult<Tensor<E>> {
    let g = forward_geometry(x, kernels, geom)?;
    let c_out = kernels.shape()[0];
    let mut cols = vec![E::ZERO; g.patch_len() * g.out_len()];
    im2col(x.data(), &g, &mut cols);
    let mut out = vec![E::ZERO; c_out * g.out_len()];
    E::gemm(c_out, g.patch_len(), g.out_len(), E::ONE, kernels.data(), &cols, E::ZERO, &mut out);
    Tensor::new(vec![c_out, g.out_spatial[0], g.out_spatial[1], g.out_spatial[2]], out)
}

/// Gradient of `conv3d` w.r.t. its input.
pub fn conv3d_grad_input<E: Scalar>(dout: &Tensor<E>, kernels: &Tensor<E>, x_shape: &[usize], geom: ConvGeom3) -> TensorResult<Tensor<E>> {
    let probe = Tensor::zeros(x_shape);
    let g = forward_geometry(&probe, kernels, geom)?;
    let c_out = kernels.shape()[0];
    // cols = kernels^T @ dout, then scatter patches back onto the input grid.
    let mut cols = vec![E::ZERO; g.patch_len() * g.out_len()];
    gemm_tn(g.patch_len(), c_out, g.out_len(), kernels.data(), dout.data(), &mut cols);
    let mut dx = Tensor::zeros(x_shape);
    col2im(&cols, &g, dx.data_mut());
    Ok(dx)
}

/// Gradient of `conv3d` w.r.t. its kernels.
pub fn conv3d_grad_kernels<E: Scalar>(dout: &Tensor<E>, x: &Tensor<E>, kernel_shape: &[usize], geom: ConvGeom3) -> TensorResult<Tensor<E>> {
    let probe = Tensor::zeros(kernel_shape);
    let g = forward_geometry(x, &probe, geom)?;
    let c_out = kernel_shape[0];
    let mut cols = vec![E::ZERO; g.patch_len() * g.out_len()];
    im2col(x.data(), &g, &mut cols);
    let mut dk = Tensor::zeros(kernel_shape);
    // dK = dout @ cols^T, one independent reduction per kernel weight.
    gemm_nt(c_out, g.out_len(), g.patch_len(), dout.data(), &cols, dk.data_mut());
    Ok(dk)
}

/// Transposed convolution: with kernels `[C_fwd_out, C_fwd_in, ...]` this maps
/// `C_fwd_out` channels back to `C_fwd_in`, the adjoint of [`conv3d`].
pub fn conv_transpose3d<E: Scalar>(x: &Tensor<E>, kernels: &Tensor<E>, geom: ConvGeom3) -> TensorResult<Tensor<E>> {
    if x.rank() != 4 {
        return Err(TensorError::RankMismatch { op: "conv_transpose", expected: 4, shape: x.shape().to_vec() });
    }
    if kernels.rank() != 5 {
        return Err(TensorError::RankMismatch { op: "conv_transpose", expected: 5, shape: kernels.shape().to_vec() });
    }
    if kernels.shape()[0] != x.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose",
            lhs: x.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    let kernel = [kernels.shape()[2], kernels.shape()[3], kernels.shape()[4]];
    let mut out_spatial = [0usize; 3];
    for axis in 0..3 {
        out_spatial[axis] =
            conv_transpose_out_extent(x.shape()[axis + 1], kernel[axis], geom.stride[axis], geom.pad[axis])?;
    }
    let out_shape = vec![kernels.shape()[1], out_spatial[0], out_spatial[1], out_spatial[2]];
    // Running the forward geometry on the *output* grid recovers the input
    // grid, so the scatter below is exactly the adjoint of im2col + GEMM.
    let probe = Tensor::zeros(&out_shape);
    let g = forward_geometry(&probe, kernels, geom)?;
    debug_assert_eq!(g.out_spatial, [x.shape()[1], x.shape()[2], x.shape()[3]]);
    let c_out = kernels.shape()[0];
    let mut cols = vec![E::ZERO; g.patch_len() * g.out_len()];
    gemm_tn(g.patch_len(), c_out, g.out_len(), kernels.data(), x.data(), &mut cols);
    let mut out = Tensor::zeros(&out_shape);
    col2im(&cols, &g, out.data_mut());
    Ok(out)
}

/// Gradient of `conv_transpose3d` w.r.t. its input: a plain convolution of the
/// upstream gradient with the same kernels.
pub fn conv_transpose3d_grad_input<E: Scalar>(dout: &Tensor<E>, kernels: &Tensor<E>, geom: ConvGeom3) -> TensorResult<Tensor<E>> {
    conv3d(dout, kernels, geom)
}

/// Gradient of `conv_transpose3d` w.r.t. its kernels.
pub fn conv_transpose3d_grad_kernels<E: Scalar>(
    dout: &Tensor<E>,
    x: &Tensor<E>,
    kernel_shape: &[usize],
    geom: ConvGeom3,
) -> TensorResult<Tensor<E>> {
    let probe = Tensor::zeros(kernel_shape);
    let g = forward_geometry(dout, &probe, geom)?;
    let c_out = kernel_shape[0];
    let mut cols = vec![E::ZERO; g.patch_len() * g.out_len()];
    im2col(dout.data(), &g, &mut cols);
    let mut dk = Tensor::zeros(kernel_shape);
    gemm_nt(c_out, g.out_len(), g.patch_len(), x.data(), &cols, dk.data_mut());
    Ok(dk)
}
