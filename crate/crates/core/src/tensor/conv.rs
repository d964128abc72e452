//! im2col + GEMM convolution kernels (cross-correlation, NCHW).

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of one spatial axis, or `None` when no kernel placement fits.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn geometry(
    input: &[usize],
    kernel: &[usize],
    bias: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(shape_err!(
            "conv2d expects 4-d input and kernel, got {:?} and {:?}",
            input,
            kernel
        ));
    }
    let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
    let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kcin != cin {
        return Err(shape_err!(
            "conv2d input has {} channels but kernel expects {}",
            cin,
            kcin
        ));
    }
    if bias != [cout] {
        return Err(shape_err!("conv2d bias shape {:?}, expected [{}]", bias, cout));
    }
    if stride == 0 {
        return Err(shape_err!("conv2d stride must be positive"));
    }
    let ho = conv_output_extent(h, kh, stride, pad)
        .ok_or_else(|| shape_err!("kernel height {} does not fit input {} (pad {})", kh, h, pad))?;
    let wo = conv_output_extent(w, kw, stride, pad)
        .ok_or_else(|| shape_err!("kernel width {} does not fit input {} (pad {})", kw, w, pad))?;
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    })
}

fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let src = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Shape errors are reported before any work.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    Ok(forward(&g, input.data(), kernel.data(), bias.data()))
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Tensor<T> {
    let plane = g.out_plane();
    let k = g.patch();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.n {
        let image = &x[n * in_len..(n + 1) * in_len];
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for (co, chunk) in y.chunks_mut(plane).enumerate() {
            chunk.fill(b[co]);
        }
        let cols: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut col);
            &col
        };
        T::gemm(
            g.cout,
            k,
            plane,
            T::one(),
            w,
            k as isize,
            1,
            cols,
            plane as isize,
            1,
            T::one(),
            y,
            plane as isize,
            1,
        );
    }
    Tensor {
        shape: vec![g.n, g.cout, g.ho, g.wo],
        data: out,
    }
}

/// Gradients of a convolution given the upstream gradient `dy`.
/// Each requested gradient is accumulated into the provided buffer.
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let k = g.patch();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let mut dcol = if g.is_pointwise() || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.n {
        let image = &x[n * in_len..(n + 1) * in_len];
        let gy = &dy[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in gy.chunks(plane).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut col);
                &col
            };
            // dW[co, p] += Σ_q dY[co, q] · col[p, q]
            T::gemm(
                g.cout,
                plane,
                k,
                T::one(),
                gy,
                plane as isize,
                1,
                cols,
                1,
                plane as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let gx = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    k,
                    g.cout,
                    plane,
                    T::one(),
                    w,
                    1,
                    k as isize,
                    gy,
                    plane as isize,
                    1,
                    T::one(),
                    gx,
                    plane as isize,
                    1,
                );
            } else {
                T::gemm(
                    k,
                    g.cout,
                    plane,
                    T::one(),
                    w,
                    1,
                    k as isize,
                    gy,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    plane as isize,
                    1,
                );
                col2im_add(g, &dcol, gx);
            }
        }
    }
}
