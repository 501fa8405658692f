//! Squeeze-and-excitation gate: GAP -> FC(C, C/r) -> ReLU -> FC(C/r, C) -> sigmoid.

use crate::kernels::dense::{linear_backward, linear_forward, relu_backward, relu_forward};
use crate::real::{sigmoid, Real};

#[derive(Clone, Debug)]
pub struct SeTrace<F> {
    input: Vec<F>,
    pooled: Vec<F>,
    hidden: Vec<F>,
    pub gates: Vec<F>,
}

/// Parameter views of one SE block. `w1` is `hidden x C`, `w2` is `C x hidden`.
pub struct SeWeights<'a, F> {
    pub w1: &'a [F],
    pub b1: &'a [F],
    pub w2: &'a [F],
    pub b2: &'a [F],
}

pub struct SeGrads<'a, F> {
    pub w1: &'a mut [F],
    pub b1: &'a mut [F],
    pub w2: &'a mut [F],
    pub b2: &'a mut [F],
}

/// Runs the gate on `(batch, channels, spatial)` data and returns the gated output.
pub fn se_forward<F: Real>(
    x: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    hidden: usize,
    w: &SeWeights<'_, F>,
) -> (Vec<F>, SeTrace<F>) {
    let nf = F::from_usize(spatial).expect("count");
    let pooled: Vec<F> = x.chunks(spatial).map(|p| p.iter().copied().sum::<F>() / nf).collect();
    let mut h = vec![F::zero(); batch * hidden];
    linear_forward(&pooled, batch, channels, hidden, w.w1, Some(w.b1), &mut h);
    relu_forward(&mut h);
    let mut z = vec![F::zero(); batch * channels];
    linear_forward(&h, batch, hidden, channels, w.w2, Some(w.b2), &mut z);
    let gates: Vec<F> = z.into_iter().map(sigmoid).collect();
    let mut out = x.to_vec();
    for (plane, &a) in out.chunks_mut(spatial).zip(&gates) {
        plane.iter_mut().for_each(|v| *v *= a);
    }
    let trace = SeTrace { input: x.to_vec(), pooled, hidden: h, gates };
    (out, trace)
}

/// Returns the input gradient; parameter gradients are accumulated into `g`.
#[allow(clippy::too_many_arguments)]
pub fn se_backward<F: Real>(
    trace: &SeTrace<F>,
    batch: usize,
    channels: usize,
    spatial: usize,
    hidden: usize,
    w: &SeWeights<'_, F>,
    dy: &[F],
    g: SeGrads<'_, F>,
) -> Vec<F> {
    let nf = F::from_usize(spatial).expect("count");
    let mut dz = vec![F::zero(); batch * channels];
    for (p, dzp) in dz.iter_mut().enumerate() {
        let r = p * spatial..(p + 1) * spatial;
        let da: F = dy[r.clone()].iter().zip(&trace.input[r]).map(|(&a, &b)| a * b).sum();
        let a = trace.gates[p];
        *dzp = da * a * (F::one() - a);
    }
    let mut dh = vec![F::zero(); batch * hidden];
    linear_backward(&trace.hidden, batch, hidden, channels, w.w2, &dz, Some(&mut dh), g.w2, Some(g.b2));
    relu_backward(&trace.hidden, &mut dh);
    let mut ds = vec![F::zero(); batch * channels];
    linear_backward(&trace.pooled, batch, channels, hidden, w.w1, &dh, Some(&mut ds), g.w1, Some(g.b1));
    let mut dx = vec![F::zero(); dy.len()];
    for p in 0..batch * channels {
        let a = trace.gates[p];
        let spread = ds[p] / nf;
        for i in p * spatial..(p + 1) * spatial {
            dx[i] = dy[i] * a + spread;
        }
    }
    dx
}
