//! Fully connected layers, ReLU and the softmax cross-entropy loss.

use crate::real::Real;

/// `y (B x out) = x (B x in) * W^T + b`, with `W` stored `out x in`.
pub fn linear_forward<F: Real>(
    x: &[F],
    batch: usize,
    in_f: usize,
    out_f: usize,
    weight: &[F],
    bias: Option<&[F]>,
    y: &mut [F],
) {
    F::gemm(batch, in_f, out_f, F::one(), x, in_f, 1, weight, 1, in_f, F::zero(), y, out_f, 1);
    if let Some(bias) = bias {
        for row in y.chunks_mut(out_f) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += *b);
        }
    }
}

/// Writes `dx`, accumulates `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Real>(
    x: &[F],
    batch: usize,
    in_f: usize,
    out_f: usize,
    weight: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: &mut [F],
    db: Option<&mut [F]>,
) {
    // dW (out x in) += dy^T (out x B) * x (B x in)
    F::gemm(out_f, batch, in_f, F::one(), dy, 1, out_f, x, in_f, 1, F::one(), dw, in_f, 1);
    if let Some(db) = db {
        for row in dy.chunks(out_f) {
            db.iter_mut().zip(row).for_each(|(a, g)| *a += *g);
        }
    }
    if let Some(dx) = dx {
        F::gemm(batch, out_f, in_f, F::one(), dy, out_f, 1, weight, in_f, 1, F::zero(), dx, in_f, 1);
    }
}

pub fn relu_forward<F: Real>(x: &mut [F]) {
    x.iter_mut().for_each(|v| {
        if *v < F::zero() {
            *v = F::zero()
        }
    });
}

/// Gradient of ReLU given its *output* (positive exactly where the input was).
pub fn relu_backward<F: Real>(y: &[F], dy: &mut [F]) {
    dy.iter_mut().zip(y).for_each(|(g, &o)| {
        if o <= F::zero() {
            *g = F::zero()
        }
    });
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<F: Real>(logits: &[F], batch: usize, classes: usize, labels: &[usize]) -> (F, Vec<F>) {
    let mut grad = vec![F::zero(); logits.len()];
    let mut loss = F::zero();
    let inv_b = F::one() / F::from_usize(batch).expect("batch");
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let denom: F = row.iter().map(|&z| (z - m).exp()).sum();
        let log_denom = denom.ln() + m;
        loss += log_denom - row[labels[b]];
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (row[k] - log_denom).exp() * inv_b;
        }
        g[labels[b]] -= inv_b;
    }
    (loss * inv_b, grad)
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows<F: Real>(logits: &[F], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = vec![0.3f64, -1.2, 2.0, 0.0, 0.5, 0.5];
        let labels = [2usize, 0];
        let (_, g) = softmax_cross_entropy(&logits, 2, 3, &labels);
        let h = 1e-6;
        for i in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p[i] += h;
            m[i] -= h;
            let fd =
                (softmax_cross_entropy(&p, 2, 3, &labels).0 - softmax_cross_entropy(&m, 2, 3, &labels).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_logits_give_log_k_loss() {
        let (l, _) = softmax_cross_entropy(&[0.0f64; 10], 1, 10, &[3]);
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let (b, i, o) = (3, 4, 2);
        let x: Vec<f64> = (0..b * i).map(|k| (k as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..o * i).map(|k| (k as f64 * 0.71).cos()).collect();
        let bias = vec![0.2, -0.1];
        let up: Vec<f64> = (0..b * o).map(|k| k as f64 - 2.5).collect();
        let loss = |x: &[f64], w: &[f64]| {
            let mut y = vec![0.0; b * o];
            linear_forward(x, b, i, o, w, Some(&bias), &mut y);
            y.iter().zip(&up).map(|(a, u)| a * u).sum::<f64>()
        };
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; o];
        linear_backward(&x, b, i, o, &w, &up, Some(&mut dx), &mut dw, Some(&mut db));
        let h = 1e-6;
        for k in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[k] += h;
            m[k] -= h;
            assert!(((loss(&p, &w) - loss(&m, &w)) / (2.0 * h) - dx[k]).abs() < 1e-7);
        }
        for k in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[k] += h;
            m[k] -= h;
            assert!(((loss(&x, &p) - loss(&x, &m)) / (2.0 * h) - dw[k]).abs() < 1e-7);
        }
        assert_eq!(db, vec![-2.5 - 0.5 + 1.5, -1.5 + 0.5 + 2.5]);
    }
}
