//! Spatial and channel attention (SCA).
//!
//! The spatial submodule splits the channels into `g` groups and, for every
//! position, scores the local `C/g`-dimensional feature against the group's
//! pooled descriptor (average pool plus max pool). The scores are
//! standardized over the `H*W` positions, passed through a per-group affine
//! and a sigmoid, and the resulting map gates every channel of the group.
//!
//! The channel submodule average- and max-pools every channel, group
//! normalizes both descriptors over `G` channel groups (each with its own
//! affine), sums them and applies a sigmoid to obtain one gate per channel.
//!
//! Both submodules are plain functions of `(input, params, config)`; the
//! traced variants keep the intermediates needed by the hand-written
//! backward pass.

mod channel;
mod sca;
mod spatial;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::real::Real;

pub use channel::{apply_channel_map, channel_map, channel_map_backward, ChannelTrace};
pub use sca::{sca_backward, sca_forward_traced, ScaGrads, ScaTrace};
pub use spatial::{apply_spatial_map, spatial_map, spatial_map_backward, SpatialTrace};

/// How the two submodules are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    SpatialOnly,
    ChannelOnly,
    #[default]
    SpatialThenChannel,
    ChannelThenSpatial,
    Parallel,
}

impl Arrangement {
    pub const ALL: [Arrangement; 5] = [
        Arrangement::SpatialOnly,
        Arrangement::ChannelOnly,
        Arrangement::SpatialThenChannel,
        Arrangement::ChannelThenSpatial,
        Arrangement::Parallel,
    ];

    pub fn has_spatial(self) -> bool {
        !matches!(self, Arrangement::ChannelOnly)
    }

    pub fn has_channel(self) -> bool {
        !matches!(self, Arrangement::SpatialOnly)
    }

    pub fn label(self) -> &'static str {
        match self {
            Arrangement::SpatialOnly => "Spatial",
            Arrangement::ChannelOnly => "Channel",
            Arrangement::SpatialThenChannel => "Spatial + Channel",
            Arrangement::ChannelThenSpatial => "Channel + Spatial",
            Arrangement::Parallel => "Channel & Spatial in parallel",
        }
    }
}

/// Structural hyperparameters of one SCA block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaConfig {
    /// Spatial groups `g`.
    pub groups: usize,
    /// Group-normalization groups `G` of the channel submodule.
    pub gn_groups: usize,
    /// Added to the standard deviation of the spatial similarities.
    pub eps_spatial: f64,
    /// Added to the variance inside the GN square root.
    pub eps_gn: f64,
    pub arrangement: Arrangement,
}

impl Default for ScaConfig {
    fn default() -> Self {
        Self { groups: 64, gn_groups: 4, eps_spatial: 1e-5, eps_gn: 1e-5, arrangement: Arrangement::SpatialThenChannel }
    }
}

impl ScaConfig {
    /// Checks that the config can be hosted on a layer with `channels` channels.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if channels == 0 {
            return Err(config_err("SCA host layer has zero channels"));
        }
        if self.groups == 0 || !channels.is_multiple_of(self.groups) {
            return Err(config_err(format!("spatial groups g={} must divide channel count {channels}", self.groups)));
        }
        if self.gn_groups == 0 || !channels.is_multiple_of(self.gn_groups) {
            return Err(config_err(format!("GN groups G={} must divide channel count {channels}", self.gn_groups)));
        }
        if !(self.eps_spatial > 0.0 && self.eps_gn > 0.0) {
            return Err(config_err("epsilon values must be positive"));
        }
        Ok(())
    }

    /// Caps `g` and `G` at the channel count, for narrow layers that cannot
    /// host the nominal group counts.
    pub fn fitted_to(&self, channels: usize) -> ScaConfig {
        ScaConfig { groups: self.groups.min(channels), gn_groups: self.gn_groups.min(channels), ..self.clone() }
    }

    /// Learnable parameter count of one block on a `channels`-wide layer.
    pub fn param_count(&self, channels: usize) -> usize {
        2 * self.groups + 4 * channels
    }
}

/// Shape of a rank-4 activation `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { batch, channels, height, width }
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activation tensor flowing through the attention operations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    dims: Dims,
    data: Vec<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn new(dims: Dims, data: Vec<F>) -> Result<Self> {
        if dims.len() != data.len() {
            return Err(shape_err(format!("{dims:?} needs {} values, got {}", dims.len(), data.len())));
        }
        if dims.spatial() == 0 {
            return Err(shape_err("feature map needs H*W >= 1"));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite value in attention input".into()))
        }
    }
}

/// Per-group spatial gates, shape `(B, g, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionMap<F> {
    pub batch: usize,
    pub groups: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

/// Per-channel gates, shape `(B, C, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionMap<F> {
    pub batch: usize,
    pub channels: usize,
    pub data: Vec<F>,
}

impl<F: Real> ChannelAttentionMap<F> {
    pub fn ones(batch: usize, channels: usize) -> Self {
        Self { batch, channels, data: vec![F::one(); batch * channels] }
    }

    /// Gates of sample `b`.
    pub fn sample(&self, b: usize) -> &[F] {
        &self.data[b * self.channels..(b + 1) * self.channels]
    }
}

/// Learnable affine terms of one SCA block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaParams<F> {
    pub spatial_scale: Vec<F>,
    pub spatial_shift: Vec<F>,
    pub gn_avg_gamma: Vec<F>,
    pub gn_avg_beta: Vec<F>,
    pub gn_max_gamma: Vec<F>,
    pub gn_max_beta: Vec<F>,
}

impl<F: Real> ScaParams<F> {
    pub fn channels(&self) -> usize {
        self.gn_avg_gamma.len()
    }

    pub fn groups(&self) -> usize {
        self.spatial_scale.len()
    }

    pub fn len(&self) -> usize {
        2 * self.groups() + 4 * self.channels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Named views of every parameter vector, in a fixed order.
    pub fn fields(&self) -> [(&'static str, &Vec<F>); 6] {
        [
            ("spatial_scale", &self.spatial_scale),
            ("spatial_shift", &self.spatial_shift),
            ("gn_avg_gamma", &self.gn_avg_gamma),
            ("gn_avg_beta", &self.gn_avg_beta),
            ("gn_max_gamma", &self.gn_max_gamma),
            ("gn_max_beta", &self.gn_max_beta),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Vec<F>); 6] {
        [
            ("spatial_scale", &mut self.spatial_scale),
            ("spatial_shift", &mut self.spatial_shift),
            ("gn_avg_gamma", &mut self.gn_avg_gamma),
            ("gn_avg_beta", &mut self.gn_avg_beta),
            ("gn_max_gamma", &mut self.gn_max_gamma),
            ("gn_max_beta", &mut self.gn_max_beta),
        ]
    }

    fn check(&self, channels: usize, cfg: &ScaConfig) -> Result<()> {
        cfg.validate(channels)?;
        let ok = self.spatial_scale.len() == cfg.groups
            && self.spatial_shift.len() == cfg.groups
            && self.fields()[2..].iter().all(|(_, v)| v.len() == channels);
        if ok {
            Ok(())
        } else {
            Err(shape_err(format!(
                "SCA params sized for g={}, C={} do not match g={}, C={channels}",
                self.groups(),
                self.channels(),
                cfg.groups
            )))
        }
    }
}

/// Identity-initialized parameters: scales and gammas 1, shifts and betas 0.
pub fn init_params<F: Real>(channels: usize, cfg: &ScaConfig) -> Result<ScaParams<F>> {
    cfg.validate(channels)?;
    Ok(ScaParams {
        spatial_scale: vec![F::one(); cfg.groups],
        spatial_shift: vec![F::zero(); cfg.groups],
        gn_avg_gamma: vec![F::one(); channels],
        gn_avg_beta: vec![F::zero(); channels],
        gn_max_gamma: vec![F::one(); channels],
        gn_max_beta: vec![F::zero(); channels],
    })
}

/// Spatial submodule: returns the spatial map and `x` gated by it.
pub fn spatial_attention_forward<F: Real>(
    x: &FeatureMap<F>,
    params: &ScaParams<F>,
    cfg: &ScaConfig,
) -> Result<(SpatialAttentionMap<F>, FeatureMap<F>)> {
    let d = x.dims();
    params.check(d.channels, cfg)?;
    x.check_finite()?;
    let trace =
        spatial_map(x.data(), d, cfg.groups, &params.spatial_scale, &params.spatial_shift, F::lit(cfg.eps_spatial));
    let gated = apply_spatial_map(x.data(), d, cfg.groups, &trace.a_s);
    let map =
        SpatialAttentionMap { batch: d.batch, groups: cfg.groups, height: d.height, width: d.width, data: trace.a_s };
    Ok((map, FeatureMap { dims: d, data: gated }))
}

/// Channel submodule: returns the channel map and `x_s` gated by it.
pub fn channel_attention_forward<F: Real>(
    x_s: &FeatureMap<F>,
    params: &ScaParams<F>,
    cfg: &ScaConfig,
) -> Result<(ChannelAttentionMap<F>, FeatureMap<F>)> {
    let d = x_s.dims();
    params.check(d.channels, cfg)?;
    x_s.check_finite()?;
    let trace = channel_map(x_s.data(), d, cfg.gn_groups, params, F::lit(cfg.eps_gn));
    let gated = apply_channel_map(x_s.data(), d, &trace.a_c);
    let map = ChannelAttentionMap { batch: d.batch, channels: d.channels, data: trace.a_c };
    Ok((map, FeatureMap { dims: d, data: gated }))
}

/// Full block, dispatched on `cfg.arrangement`. The returned channel map is
/// all ones when the arrangement has no channel submodule.
pub fn sca_forward<F: Real>(
    x: &FeatureMap<F>,
    params: &ScaParams<F>,
    cfg: &ScaConfig,
) -> Result<(FeatureMap<F>, ChannelAttentionMap<F>)> {
    let d = x.dims();
    let trace = sca_forward_traced(x.data(), d, params, cfg)?;
    let a_c = ChannelAttentionMap { batch: d.batch, channels: d.channels, data: trace.channel_gates() };
    Ok((FeatureMap { dims: d, data: trace.output }, a_c))
}
