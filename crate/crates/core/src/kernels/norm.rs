//! Batch normalization over `(N, H, W)` per channel.

use crate::real::Real;

/// Per-batch intermediates kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct BnCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Training-mode forward. Returns `(batch_mean, batch_var_biased, cache)`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_train<F: Real>(
    x: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
    y: &mut [F],
) -> (Vec<F>, Vec<F>, BnCache<F>) {
    let m = F::from_usize(batch * spatial).expect("count");
    let mut mean = vec![F::zero(); channels];
    let mut var = vec![F::zero(); channels];
    for c in 0..channels {
        let mut s = F::zero();
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            s += x[base..base + spatial].iter().copied().sum::<F>();
        }
        let mu = s / m;
        let mut ss = F::zero();
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            ss += x[base..base + spatial].iter().map(|&v| (v - mu) * (v - mu)).sum::<F>();
        }
        mean[c] = mu;
        var[c] = ss / m;
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (mean, var, BnCache { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_eval<F: Real>(
    x: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[F],
    beta: &[F],
    running_mean: &[F],
    running_var: &[F],
    eps: F,
    y: &mut [F],
) {
    for c in 0..channels {
        let scale = gamma[c] / (running_var[c] + eps).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                y[i] = x[i] * scale + shift;
            }
        }
    }
}

/// Writes `dx` and accumulates into `dgamma`/`dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<F: Real>(
    dy: &[F],
    cache: &BnCache<F>,
    gamma: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    dx: &mut [F],
    dgamma: &mut [F],
    dbeta: &mut [F],
) {
    let m = F::from_usize(batch * spatial).expect("count");
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xhat) = (F::zero(), F::zero());
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * cache.xhat[i];
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let k = gamma[c] * cache.inv_std[c] / m;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                dx[i] = k * (m * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_forward_normalizes_each_channel() {
        let (b, c, s) = (3, 2, 4);
        let x: Vec<f64> = (0..b * c * s).map(|i| ((i * 5 % 7) as f64) * 0.7 - 1.0).collect();
        let mut y = vec![0.0; x.len()];
        batchnorm_forward_train(&x, b, c, s, &[1.0, 1.0], &[0.0, 0.0], 1e-12, &mut y);
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|bb| y[(bb * c + ch) * s..(bb * c + ch + 1) * s].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (b, c, s) = (2, 3, 3);
        let x: Vec<f64> = (0..b * c * s).map(|i| ((i * 7 % 13) as f64) * 0.31 - 2.0).collect();
        let gamma = vec![0.7, -1.2, 1.5];
        let beta = vec![0.1, 0.0, -0.4];
        let up: Vec<f64> = (0..x.len()).map(|i| ((i * 3 % 5) as f64) - 2.0).collect();
        let eps = 1e-5;
        let loss = |x: &[f64], g: &[f64], bt: &[f64]| {
            let mut y = vec![0.0; x.len()];
            batchnorm_forward_train(x, b, c, s, g, bt, eps, &mut y);
            y.iter().zip(&up).map(|(a, u)| a * u).sum::<f64>()
        };
        let mut y = vec![0.0; x.len()];
        let (_, _, cache) = batchnorm_forward_train(&x, b, c, s, &gamma, &beta, eps, &mut y);
        let mut dx = vec![0.0; x.len()];
        let mut dg = vec![0.0; c];
        let mut dbt = vec![0.0; c];
        batchnorm_backward(&up, &cache, &gamma, b, c, s, &mut dx, &mut dg, &mut dbt);
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, &gamma, &beta) - loss(&m, &gamma, &beta)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx[i]);
        }
        for i in 0..c {
            let (mut p, mut m) = (gamma.clone(), gamma.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&x, &p, &beta) - loss(&x, &m, &beta)) / (2.0 * h);
            assert!((fd - dg[i]).abs() < 1e-6);
            let (mut p, mut m) = (beta.clone(), beta.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&x, &gamma, &p) - loss(&x, &gamma, &m)) / (2.0 * h);
            assert!((fd - dbt[i]).abs() < 1e-6);
        }
    }
}
