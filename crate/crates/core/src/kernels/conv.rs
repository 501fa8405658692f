//! 2-D convolution via im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Static geometry of one convolution (square kernels, symmetric padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix: `C_in * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one image (`C_in x H x W`) into a `patch_len x (H_out * W_out)` matrix.
pub fn im2col<F: Real>(img: &[F], g: &ConvGeom, col: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back into `img`.
pub fn col2im<F: Real>(col: &[F], g: &ConvGeom, img: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y = conv(x, weight) + bias` for a batch. `weight` is `C_out x C_in x k x k`.
pub fn conv2d_forward<F: Real>(x: &[F], batch: usize, g: &ConvGeom, weight: &[F], bias: Option<&[F]>, y: &mut [F]) {
    let in_len = g.in_channels * g.in_h * g.in_w;
    let n = g.out_h() * g.out_w();
    let out_len = g.out_channels * n;
    let kk = g.patch_len();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); kk * n] };
    for b in 0..batch {
        let img = &x[b * in_len..(b + 1) * in_len];
        let cols: &[F] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut col);
            &col
        };
        let out = &mut y[b * out_len..(b + 1) * out_len];
        F::gemm(g.out_channels, kk, n, F::one(), weight, kk, 1, cols, n, 1, F::zero(), out, n, 1);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                out[oc * n..(oc + 1) * n].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Accumulates weight/bias gradients into `dw`/`db` and, when requested,
/// writes the input gradient into `dx` (overwriting it).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Real>(
    x: &[F],
    batch: usize,
    g: &ConvGeom,
    weight: &[F],
    dy: &[F],
    mut dx: Option<&mut [F]>,
    dw: &mut [F],
    mut db: Option<&mut [F]>,
) {
    let in_len = g.in_channels * g.in_h * g.in_w;
    let n = g.out_h() * g.out_w();
    let out_len = g.out_channels * n;
    let kk = g.patch_len();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); kk * n] };
    let mut dcol = vec![F::zero(); kk * n];
    if let Some(dx) = dx.as_deref_mut() {
        dx.iter_mut().for_each(|v| *v = F::zero());
    }
    for b in 0..batch {
        let img = &x[b * in_len..(b + 1) * in_len];
        let cols: &[F] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut col);
            &col
        };
        let gout = &dy[b * out_len..(b + 1) * out_len];
        // dW (C_out x kk) += dY (C_out x n) * cols^T (n x kk)
        F::gemm(g.out_channels, n, kk, F::one(), gout, n, 1, cols, 1, n, F::one(), dw, kk, 1);
        if let Some(db) = db.as_deref_mut() {
            for (oc, acc) in db.iter_mut().enumerate() {
                *acc += gout[oc * n..(oc + 1) * n].iter().copied().sum::<F>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dimg = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                F::gemm(kk, g.out_channels, n, F::one(), weight, 1, kk, gout, n, 1, F::zero(), dimg, n, 1);
            } else {
                // dcol (kk x n) = W^T (kk x C_out) * dY (C_out x n)
                F::gemm(kk, g.out_channels, n, F::one(), weight, 1, kk, gout, n, 1, F::zero(), &mut dcol, n, 1);
                col2im(&dcol, g, dimg);
            }
        }
    }
}
