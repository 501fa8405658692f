use super::channel::apply_channel_map_backward;
use super::spatial::apply_spatial_map_backward;
use super::{
    apply_channel_map, apply_spatial_map, channel_map, channel_map_backward, spatial_map, spatial_map_backward,
    Arrangement, ChannelTrace, Dims, ScaConfig, ScaParams, SpatialTrace,
};
use crate::error::{Error, Result};
use crate::real::Real;

/// Gradients have the same layout as the parameters.
pub type ScaGrads<F> = ScaParams<F>;

impl<F: Real> ScaParams<F> {
    pub fn zeros_like(&self) -> Self {
        Self {
            spatial_scale: vec![F::zero(); self.spatial_scale.len()],
            spatial_shift: vec![F::zero(); self.spatial_shift.len()],
            gn_avg_gamma: vec![F::zero(); self.gn_avg_gamma.len()],
            gn_avg_beta: vec![F::zero(); self.gn_avg_beta.len()],
            gn_max_gamma: vec![F::zero(); self.gn_max_gamma.len()],
            gn_max_beta: vec![F::zero(); self.gn_max_beta.len()],
        }
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ScaTrace<F> {
    pub dims: Dims,
    pub cfg: ScaConfig,
    input: Vec<F>,
    /// Input of the second submodule for the sequential arrangements, and
    /// `x * a_s` for the parallel one.
    mid: Vec<F>,
    pub spatial: Option<SpatialTrace<F>>,
    pub channel: Option<ChannelTrace<F>>,
    pub output: Vec<F>,
}

impl<F: Real> ScaTrace<F> {
    /// Channel gates `(B, C)`; all ones without a channel submodule.
    pub fn channel_gates(&self) -> Vec<F> {
        match &self.channel {
            Some(ct) => ct.a_c.clone(),
            None => vec![F::one(); self.dims.batch * self.dims.channels],
        }
    }

    pub fn into_output(self) -> Vec<F> {
        self.output
    }
}

/// Runs the block on raw NCHW data and keeps the intermediates.
pub fn sca_forward_traced<F: Real>(x: &[F], d: Dims, params: &ScaParams<F>, cfg: &ScaConfig) -> Result<ScaTrace<F>> {
    params.check(d.channels, cfg)?;
    if x.len() != d.len() || d.spatial() == 0 {
        return Err(Error::Shape(format!("SCA input of {} values does not match {d:?}", x.len())));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite value in attention input".into()));
    }
    let g = cfg.groups;
    let eps_s = F::lit(cfg.eps_spatial);
    let eps_gn = F::lit(cfg.eps_gn);
    let spatial = |v: &[F]| spatial_map(v, d, g, &params.spatial_scale, &params.spatial_shift, eps_s);
    let channel = |v: &[F]| channel_map(v, d, cfg.gn_groups, params, eps_gn);

    let (st, ct, mid, output) = match cfg.arrangement {
        Arrangement::SpatialOnly => {
            let st = spatial(x);
            let out = apply_spatial_map(x, d, g, &st.a_s);
            (Some(st), None, Vec::new(), out)
        }
        Arrangement::ChannelOnly => {
            let ct = channel(x);
            let out = apply_channel_map(x, d, &ct.a_c);
            (None, Some(ct), Vec::new(), out)
        }
        Arrangement::SpatialThenChannel => {
            let st = spatial(x);
            let xs = apply_spatial_map(x, d, g, &st.a_s);
            let ct = channel(&xs);
            let out = apply_channel_map(&xs, d, &ct.a_c);
            (Some(st), Some(ct), xs, out)
        }
        Arrangement::ChannelThenSpatial => {
            let ct = channel(x);
            let xc = apply_channel_map(x, d, &ct.a_c);
            let st = spatial(&xc);
            let out = apply_spatial_map(&xc, d, g, &st.a_s);
            (Some(st), Some(ct), xc, out)
        }
        Arrangement::Parallel => {
            let st = spatial(x);
            let ct = channel(x);
            let xs = apply_spatial_map(x, d, g, &st.a_s);
            let out = apply_channel_map(&xs, d, &ct.a_c);
            (Some(st), Some(ct), xs, out)
        }
    };
    Ok(ScaTrace { dims: d, cfg: cfg.clone(), input: x.to_vec(), mid, spatial: st, channel: ct, output })
}

/// Back-propagates `dy` (gradient w.r.t. the block output).
/// Returns the input gradient and the parameter gradients.
pub fn sca_backward<F: Real>(trace: &ScaTrace<F>, params: &ScaParams<F>, dy: &[F]) -> (Vec<F>, ScaGrads<F>) {
    let d = trace.dims;
    let cfg = &trace.cfg;
    let g = cfg.groups;
    let eps_s = F::lit(cfg.eps_spatial);
    let mut grads = params.zeros_like();
    let x = &trace.input;

    let spatial_back = |input: &[F], st: &SpatialTrace<F>, d_as: &[F], grads: &mut ScaGrads<F>| {
        let (dx, ds, dsh) = spatial_map_backward(input, d, g, &params.spatial_scale, eps_s, st, d_as);
        grads.spatial_scale.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
        grads.spatial_shift.iter_mut().zip(dsh).for_each(|(a, b)| *a += b);
        dx
    };
    let channel_back = |input: &[F], ct: &ChannelTrace<F>, d_ac: &[F], grads: &mut ScaGrads<F>| {
        let ScaParams { gn_avg_gamma, gn_avg_beta, gn_max_gamma, gn_max_beta, .. } = grads;
        channel_map_backward(
            input,
            d,
            cfg.gn_groups,
            params,
            ct,
            d_ac,
            [gn_avg_gamma, gn_avg_beta, gn_max_gamma, gn_max_beta],
        )
    };
    let add = |a: &mut Vec<F>, b: Vec<F>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);

    let dx = match (cfg.arrangement, &trace.spatial, &trace.channel) {
        (Arrangement::SpatialOnly, Some(st), _) => {
            let (mut dx, das) = apply_spatial_map_backward(x, d, g, &st.a_s, dy);
            add(&mut dx, spatial_back(x, st, &das, &mut grads));
            dx
        }
        (Arrangement::ChannelOnly, _, Some(ct)) => {
            let (mut dx, dac) = apply_channel_map_backward(x, d, &ct.a_c, dy);
            add(&mut dx, channel_back(x, ct, &dac, &mut grads));
            dx
        }
        (Arrangement::SpatialThenChannel, Some(st), Some(ct)) => {
            let (mut dmid, dac) = apply_channel_map_backward(&trace.mid, d, &ct.a_c, dy);
            add(&mut dmid, channel_back(&trace.mid, ct, &dac, &mut grads));
            let (mut dx, das) = apply_spatial_map_backward(x, d, g, &st.a_s, &dmid);
            add(&mut dx, spatial_back(x, st, &das, &mut grads));
            dx
        }
        (Arrangement::ChannelThenSpatial, Some(st), Some(ct)) => {
            let (mut dmid, das) = apply_spatial_map_backward(&trace.mid, d, g, &st.a_s, dy);
            add(&mut dmid, spatial_back(&trace.mid, st, &das, &mut grads));
            let (mut dx, dac) = apply_channel_map_backward(x, d, &ct.a_c, &dmid);
            add(&mut dx, channel_back(x, ct, &dac, &mut grads));
            dx
        }
        (Arrangement::Parallel, Some(st), Some(ct)) => {
            // out = (x * a_s(x)) * a_c(x); both maps read x directly.
            let (dxs, dac) = apply_channel_map_backward(&trace.mid, d, &ct.a_c, dy);
            let (mut dx, das) = apply_spatial_map_backward(x, d, g, &st.a_s, &dxs);
            add(&mut dx, spatial_back(x, st, &das, &mut grads));
            add(&mut dx, channel_back(x, ct, &dac, &mut grads));
            dx
        }
        _ => unreachable!("trace is built to match its arrangement"),
    };
    (dx, grads)
}
