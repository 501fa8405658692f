//! Max pooling (no padding) and global average pooling.

use crate::real::Real;

pub fn pooled_len(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Returns the flat input index of each output's maximum (first index on ties).
pub fn maxpool_forward<F: Real>(
    x: &[F],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    y: &mut [F],
) -> Vec<usize> {
    let (oh, ow) = (pooled_len(h, kernel, stride), pooled_len(w, kernel, stride));
    let mut argmax = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                y[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    argmax
}

pub fn maxpool_backward<F: Real>(dy: &[F], argmax: &[usize], dx: &mut [F]) {
    dx.iter_mut().for_each(|v| *v = F::zero());
    for (g, &i) in dy.iter().zip(argmax) {
        dx[i] += *g;
    }
}

pub fn global_avgpool_forward<F: Real>(x: &[F], planes: usize, spatial: usize, y: &mut [F]) {
    let n = F::from_usize(spatial).expect("count");
    for p in 0..planes {
        y[p] = x[p * spatial..(p + 1) * spatial].iter().copied().sum::<F>() / n;
    }
}

pub fn global_avgpool_backward<F: Real>(dy: &[F], planes: usize, spatial: usize, dx: &mut [F]) {
    let n = F::from_usize(spatial).expect("count");
    for p in 0..planes {
        let g = dy[p] / n;
        dx[p * spatial..(p + 1) * spatial].iter_mut().for_each(|v| *v = g);
    }
}
