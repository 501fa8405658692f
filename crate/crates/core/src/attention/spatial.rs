use super::Dims;
use crate::real::{sigmoid, Real};

/// Forward intermediates of the spatial map, laid out per `(batch, group)`.
#[derive(Clone, Debug)]
pub struct SpatialTrace<F> {
    /// Gates, `(B, g, H*W)`.
    pub a_s: Vec<F>,
    /// Standardized similarities before the affine, `(B, g, H*W)`.
    pub normalized: Vec<F>,
    /// Population std of the raw similarities, `(B, g)`.
    pub sigma: Vec<F>,
    /// Pooled descriptor `avg + max` per channel, `(B, C)`.
    descriptor: Vec<F>,
    /// Position of each channel's maximum, `(B, C)`.
    argmax: Vec<usize>,
}

/// Computes the per-group spatial gates of `x`.
///
/// For each group the similarity at position `i` is
/// `W_i = (avg + max) . P_i`, with `P_i` the group's channel vector at `i`
/// and `avg`/`max` its spatially pooled descriptors. `W` is standardized
/// over the positions with `eps` added to the standard deviation, then
/// `a_s = sigmoid(scale * N + shift)`.
pub fn spatial_map<F: Real>(x: &[F], d: Dims, groups: usize, scale: &[F], shift: &[F], eps: F) -> SpatialTrace<F> {
    let n = d.spatial();
    let cg = d.channels / groups;
    let nf = F::from_usize(n).expect("count");
    let mut trace = SpatialTrace {
        a_s: vec![F::zero(); d.batch * groups * n],
        normalized: vec![F::zero(); d.batch * groups * n],
        sigma: vec![F::zero(); d.batch * groups],
        descriptor: vec![F::zero(); d.batch * d.channels],
        argmax: vec![0; d.batch * d.channels],
    };
    let mut sim = vec![F::zero(); n];
    for b in 0..d.batch {
        for k in 0..groups {
            let c0 = b * d.channels + k * cg;
            sim.iter_mut().for_each(|v| *v = F::zero());
            for c in 0..cg {
                let row = &x[(c0 + c) * n..(c0 + c + 1) * n];
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                let avg = row.iter().copied().sum::<F>() / nf;
                let f = avg + row[best];
                trace.descriptor[c0 + c] = f;
                trace.argmax[c0 + c] = best;
                sim.iter_mut().zip(row).for_each(|(s, &v)| *s += f * v);
            }
            let mu = sim.iter().copied().sum::<F>() / nf;
            let var = sim.iter().map(|&w| (w - mu) * (w - mu)).sum::<F>() / nf;
            let sigma = var.sqrt();
            let denom = sigma + eps;
            let gk = b * groups + k;
            trace.sigma[gk] = sigma;
            let out = gk * n;
            for i in 0..n {
                let z = (sim[i] - mu) / denom;
                trace.normalized[out + i] = z;
                trace.a_s[out + i] = sigmoid(scale[k] * z + shift[k]);
            }
        }
    }
    trace
}

/// `x * a_s`, broadcasting each group gate over the group's channels.
pub fn apply_spatial_map<F: Real>(x: &[F], d: Dims, groups: usize, a_s: &[F]) -> Vec<F> {
    let n = d.spatial();
    let cg = d.channels / groups;
    let mut out = vec![F::zero(); x.len()];
    for b in 0..d.batch {
        for c in 0..d.channels {
            let gate = &a_s[(b * groups + c / cg) * n..][..n];
            let base = (b * d.channels + c) * n;
            for i in 0..n {
                out[base + i] = x[base + i] * gate[i];
            }
        }
    }
    out
}

/// Gradients of [`apply_spatial_map`]: returns `(dx, d_a_s)`.
pub(crate) fn apply_spatial_map_backward<F: Real>(
    x: &[F],
    d: Dims,
    groups: usize,
    a_s: &[F],
    dy: &[F],
) -> (Vec<F>, Vec<F>) {
    let n = d.spatial();
    let cg = d.channels / groups;
    let mut dx = vec![F::zero(); x.len()];
    let mut da = vec![F::zero(); a_s.len()];
    for b in 0..d.batch {
        for c in 0..d.channels {
            let gbase = (b * groups + c / cg) * n;
            let base = (b * d.channels + c) * n;
            for i in 0..n {
                dx[base + i] = dy[base + i] * a_s[gbase + i];
                da[gbase + i] += dy[base + i] * x[base + i];
            }
        }
    }
    (dx, da)
}

/// Back-propagates `d_a_s` through [`spatial_map`].
///
/// Returns `(dx, d_scale, d_shift)`. Where the similarities of a group are
/// constant (`sigma == 0`) the standardization has no defined derivative
/// through `sigma`; that term is dropped (its coefficient `W_i - mu` is zero
/// there anyway).
#[allow(clippy::too_many_arguments)]
pub fn spatial_map_backward<F: Real>(
    x: &[F],
    d: Dims,
    groups: usize,
    scale: &[F],
    eps: F,
    trace: &SpatialTrace<F>,
    d_as: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let n = d.spatial();
    let cg = d.channels / groups;
    let nf = F::from_usize(n).expect("count");
    let mut dx = vec![F::zero(); x.len()];
    let mut d_scale = vec![F::zero(); groups];
    let mut d_shift = vec![F::zero(); groups];
    let mut dn = vec![F::zero(); n];
    let mut dw = vec![F::zero(); n];
    for b in 0..d.batch {
        for k in 0..groups {
            let gk = b * groups + k;
            let a = &trace.a_s[gk * n..(gk + 1) * n];
            let z = &trace.normalized[gk * n..(gk + 1) * n];
            let mut sum_dn = F::zero();
            let mut sum_dn_z = F::zero();
            for i in 0..n {
                let dzi = d_as[gk * n + i] * a[i] * (F::one() - a[i]);
                d_scale[k] += dzi * z[i];
                d_shift[k] += dzi;
                dn[i] = dzi * scale[k];
                sum_dn += dn[i];
                sum_dn_z += dn[i] * z[i];
            }
            let sigma = trace.sigma[gk];
            let denom = sigma + eps;
            let mean_dn = sum_dn / nf;
            // dL/dsigma = -sum_i dN_i (W_i - mu) / denom^2 = -sum_i dN_i z_i / denom
            let d_sigma = -sum_dn_z / denom;
            for i in 0..n {
                let mut g = (dn[i] - mean_dn) / denom;
                if sigma > F::zero() {
                    // (W_i - mu) / (n sigma) = z_i * denom / (n sigma)
                    g += d_sigma * z[i] * denom / (nf * sigma);
                }
                dw[i] = g;
            }
            let c0 = b * d.channels + k * cg;
            for c in 0..cg {
                let base = (c0 + c) * n;
                let f = trace.descriptor[c0 + c];
                let mut df = F::zero();
                for i in 0..n {
                    dx[base + i] += dw[i] * f;
                    df += dw[i] * x[base + i];
                }
                let spread = df / nf;
                for i in 0..n {
                    dx[base + i] += spread;
                }
                dx[base + trace.argmax[c0 + c]] += df;
            }
        }
    }
    (dx, d_scale, d_shift)
}
