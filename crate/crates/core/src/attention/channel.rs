use super::{Dims, ScaParams};
use crate::real::{sigmoid, Real};

/// Forward intermediates of the channel map.
#[derive(Clone, Debug)]
pub struct ChannelTrace<F> {
    /// Gates, `(B, C)`.
    pub a_c: Vec<F>,
    /// Group-normalized average-pooled descriptor before its affine, `(B, C)`.
    pub avg_hat: Vec<F>,
    /// Group-normalized max-pooled descriptor before its affine, `(B, C)`.
    pub max_hat: Vec<F>,
    avg_rstd: Vec<F>,
    max_rstd: Vec<F>,
    argmax: Vec<usize>,
}

/// Group normalization of one sample's `C` descriptor values over `groups`
/// contiguous channel groups, `eps` inside the square root.
/// Writes normalized values into `hat` and returns the per-group `1/sigma`.
fn group_normalize<F: Real>(v: &[F], groups: usize, eps: F, hat: &mut [F]) -> Vec<F> {
    let cg = v.len() / groups;
    let m = F::from_usize(cg).expect("count");
    let mut rstd = Vec::with_capacity(groups);
    for k in 0..groups {
        let seg = &v[k * cg..(k + 1) * cg];
        let mu = seg.iter().copied().sum::<F>() / m;
        let var = seg.iter().map(|&a| (a - mu) * (a - mu)).sum::<F>() / m;
        let r = F::one() / (var + eps).sqrt();
        for (h, &a) in hat[k * cg..(k + 1) * cg].iter_mut().zip(seg) {
            *h = (a - mu) * r;
        }
        rstd.push(r);
    }
    rstd
}

/// `dv` for one sample of [`group_normalize`] given `d_hat`.
fn group_normalize_backward<F: Real>(hat: &[F], rstd: &[F], d_hat: &[F], dv: &mut [F]) {
    let groups = rstd.len();
    let cg = hat.len() / groups;
    let m = F::from_usize(cg).expect("count");
    for k in 0..groups {
        let r = k * cg..(k + 1) * cg;
        let mean_d = d_hat[r.clone()].iter().copied().sum::<F>() / m;
        let mean_dh = d_hat[r.clone()].iter().zip(&hat[r.clone()]).map(|(&g, &h)| g * h).sum::<F>() / m;
        for c in r {
            dv[c] = rstd[k] * (d_hat[c] - mean_d - hat[c] * mean_dh);
        }
    }
}

/// Computes `a_c = sigmoid(GN_max(maxpool(x)) + GN_avg(avgpool(x)))`.
pub fn channel_map<F: Real>(x: &[F], d: Dims, gn_groups: usize, params: &ScaParams<F>, eps: F) -> ChannelTrace<F> {
    let n = d.spatial();
    let c = d.channels;
    let nf = F::from_usize(n).expect("count");
    let mut avg = vec![F::zero(); d.batch * c];
    let mut max = vec![F::zero(); d.batch * c];
    let mut argmax = vec![0usize; d.batch * c];
    for p in 0..d.batch * c {
        let row = &x[p * n..(p + 1) * n];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        avg[p] = row.iter().copied().sum::<F>() / nf;
        max[p] = row[best];
        argmax[p] = best;
    }
    let mut avg_hat = vec![F::zero(); d.batch * c];
    let mut max_hat = vec![F::zero(); d.batch * c];
    let mut avg_rstd = Vec::with_capacity(d.batch * gn_groups);
    let mut max_rstd = Vec::with_capacity(d.batch * gn_groups);
    let mut a_c = vec![F::zero(); d.batch * c];
    for b in 0..d.batch {
        let r = b * c..(b + 1) * c;
        avg_rstd.extend(group_normalize(&avg[r.clone()], gn_groups, eps, &mut avg_hat[r.clone()]));
        max_rstd.extend(group_normalize(&max[r.clone()], gn_groups, eps, &mut max_hat[r.clone()]));
        for ch in 0..c {
            let i = b * c + ch;
            let za = params.gn_avg_gamma[ch] * avg_hat[i] + params.gn_avg_beta[ch];
            let zm = params.gn_max_gamma[ch] * max_hat[i] + params.gn_max_beta[ch];
            a_c[i] = sigmoid(zm + za);
        }
    }
    ChannelTrace { a_c, avg_hat, max_hat, avg_rstd, max_rstd, argmax }
}

/// `x * a_c`, one gate per `(sample, channel)` plane.
pub fn apply_channel_map<F: Real>(x: &[F], d: Dims, a_c: &[F]) -> Vec<F> {
    let n = d.spatial();
    let mut out = x.to_vec();
    for (p, &gate) in a_c.iter().enumerate() {
        out[p * n..(p + 1) * n].iter_mut().for_each(|v| *v *= gate);
    }
    out
}

/// Gradients of [`apply_channel_map`]: returns `(dx, d_a_c)`.
pub(crate) fn apply_channel_map_backward<F: Real>(x: &[F], d: Dims, a_c: &[F], dy: &[F]) -> (Vec<F>, Vec<F>) {
    let n = d.spatial();
    let mut dx = vec![F::zero(); x.len()];
    let mut da = vec![F::zero(); a_c.len()];
    for (p, &gate) in a_c.iter().enumerate() {
        let r = p * n..(p + 1) * n;
        let mut acc = F::zero();
        for i in r {
            dx[i] = dy[i] * gate;
            acc += dy[i] * x[i];
        }
        da[p] = acc;
    }
    (dx, da)
}

/// Back-propagates `d_a_c` through [`channel_map`].
///
/// Returns `dx` and accumulates the four GN affine gradients into `grads`
/// (ordered avg gamma, avg beta, max gamma, max beta).
pub fn channel_map_backward<F: Real>(
    x: &[F],
    d: Dims,
    gn_groups: usize,
    params: &ScaParams<F>,
    trace: &ChannelTrace<F>,
    d_ac: &[F],
    grads: [&mut [F]; 4],
) -> Vec<F> {
    let [d_avg_gamma, d_avg_beta, d_max_gamma, d_max_beta] = grads;
    let n = d.spatial();
    let c = d.channels;
    let nf = F::from_usize(n).expect("count");
    let mut dx = vec![F::zero(); x.len()];
    let mut d_avg_hat = vec![F::zero(); c];
    let mut d_max_hat = vec![F::zero(); c];
    let mut d_avg = vec![F::zero(); c];
    let mut d_max = vec![F::zero(); c];
    for b in 0..d.batch {
        for ch in 0..c {
            let i = b * c + ch;
            let a = trace.a_c[i];
            let dz = d_ac[i] * a * (F::one() - a);
            d_avg_gamma[ch] += dz * trace.avg_hat[i];
            d_avg_beta[ch] += dz;
            d_max_gamma[ch] += dz * trace.max_hat[i];
            d_max_beta[ch] += dz;
            d_avg_hat[ch] = dz * params.gn_avg_gamma[ch];
            d_max_hat[ch] = dz * params.gn_max_gamma[ch];
        }
        let r = b * c..(b + 1) * c;
        let g = b * gn_groups..(b + 1) * gn_groups;
        group_normalize_backward(&trace.avg_hat[r.clone()], &trace.avg_rstd[g.clone()], &d_avg_hat, &mut d_avg);
        group_normalize_backward(&trace.max_hat[r.clone()], &trace.max_rstd[g], &d_max_hat, &mut d_max);
        for ch in 0..c {
            let p = b * c + ch;
            let spread = d_avg[ch] / nf;
            dx[p * n..(p + 1) * n].iter_mut().for_each(|v| *v += spread);
            dx[p * n + trace.argmax[p]] += d_max[ch];
        }
    }
    dx
}
