//! Parameter and FLOP accounting, top-1 accuracy, inference latency.
//!
//! FLOPs count multiplies and adds separately: a conv costs
//! `2 k^2 C_in C_out H_out W_out` and a linear layer `2 in out` (biases and
//! residual additions are free). BN, ReLU and pooling are charged per
//! element at configurable rates. BN running statistics are buffers, not
//! parameters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::ScaConfig;
use crate::data::{make_batch, Augment, Normalizer, Split};
use crate::error::{Error, Result};
use crate::kernels::dense::argmax_rows;
use crate::model::{AttentionBlock, Ctx, Layer, LayerKind, ModelGraph, Node};
use crate::tensor::Tensor;

/// Per-element FLOP charges for the non-MAC layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopRates {
    pub bn: u64,
    pub relu: u64,
    /// Per input element visited by each pooling window.
    pub pool: u64,
    pub attention: bool,
}

impl Default for FlopRates {
    fn default() -> Self {
        Self { bn: 2, relu: 1, pool: 1, attention: true }
    }
}

impl FlopRates {
    /// Conv and linear MACs only.
    pub fn mac_only() -> Self {
        Self { bn: 0, relu: 0, pool: 0, attention: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub kind: LayerKind,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }

    fn push(&mut self, id: &str, kind: LayerKind, params: u64, flops: u64) {
        self.params += params;
        self.flops += flops;
        self.layers.push(LayerCost { id: id.to_string(), kind, params, flops });
    }
}

fn node_params(n: &Node) -> u64 {
    let p = match &n.layer {
        Layer::Conv(c) => c.weight.len() + c.bias.as_ref().map_or(0, Tensor::len),
        Layer::BatchNorm(b) => 2 * b.channels,
        Layer::Linear(l) => l.weight.len() + l.bias.as_ref().map_or(0, Tensor::len),
        Layer::Attention(a) => a.param_count(),
        Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) | Layer::Residual(_) => 0,
    };
    p as u64
}

fn node_kind(n: &Node) -> LayerKind {
    match n.layer {
        Layer::Conv(_) => LayerKind::Conv,
        Layer::BatchNorm(_) => LayerKind::Bn,
        Layer::Relu(_) => LayerKind::Relu,
        Layer::MaxPool(_) => LayerKind::MaxPool,
        Layer::GlobalAvgPool(_) => LayerKind::GlobalAvgPool,
        Layer::Linear(_) => LayerKind::Linear,
        Layer::Residual(_) => LayerKind::ResidualBlock,
        Layer::Attention(_) => LayerKind::Attention,
    }
}

/// Learnable parameters, with a per-layer breakdown; FLOPs are left at zero.
pub fn count_params(model: &ModelGraph) -> CostReport {
    let mut r = CostReport::default();
    model.walk(&mut |n, _| r.push(&n.id, node_kind(n), node_params(n), 0));
    r
}

/// BN running statistics (not counted as parameters).
pub fn count_buffers(model: &ModelGraph) -> u64 {
    let mut total = 0;
    model.walk(&mut |n, _| {
        if let Layer::BatchNorm(b) = &n.layer {
            total += 2 * b.channels as u64;
        }
    });
    total
}

/// Approximate cost of one SCA block on a `(c, hw)` map.
fn sca_flops(cfg: &ScaConfig, c: u64, hw: u64) -> u64 {
    let g = cfg.groups as u64;
    let mut f = 0;
    if cfg.arrangement.has_spatial() {
        // avg + max pooling, descriptor sum, similarity MACs, standardization, gate, apply
        f += 2 * c * hw + c + 2 * c * hw + 6 * g * hw + 3 * g * hw + c * hw;
    }
    if cfg.arrangement.has_channel() {
        // avg + max pooling, two group norms, sum, sigmoid, apply
        f += 2 * c * hw + 2 * 6 * c + 2 * c + c * hw;
    }
    f
}

/// Costs of a batch-1 forward pass on `input_shape = (C, H, W)`.
pub fn count_flops(model: &ModelGraph, input_shape: [usize; 3], rates: &FlopRates) -> Result<CostReport> {
    let input = [1, input_shape[0], input_shape[1], input_shape[2]];
    let shapes = model.node_input_shapes(&input)?;
    let mut r = CostReport::default();
    let mut i = 0;
    let mut err = None;
    model.walk(&mut |n, _| {
        let s = &shapes[i].1;
        i += 1;
        let out = match n.out_shape(s) {
            Ok(o) => o,
            Err(e) => {
                err.get_or_insert(e);
                return;
            }
        };
        let elems = |v: &[usize]| v.iter().product::<usize>() as u64;
        let flops = match &n.layer {
            Layer::Conv(c) => {
                2 * (c.kernel * c.kernel * c.in_channels * c.out_channels) as u64 * (out[2] * out[3]) as u64
            }
            Layer::Linear(l) => 2 * (l.in_features * l.out_features) as u64,
            Layer::BatchNorm(_) => rates.bn * elems(&out),
            Layer::Relu(_) => rates.relu * elems(&out),
            Layer::MaxPool(p) => rates.pool * (p.kernel * p.kernel) as u64 * elems(&out),
            Layer::GlobalAvgPool(_) => rates.pool * elems(s),
            // the output ReLU; the addition is free
            Layer::Residual(_) => rates.relu * elems(&out),
            Layer::Attention(a) if rates.attention => {
                let (c, hw) = (s[1] as u64, (s[2] * s[3]) as u64);
                match &a.block {
                    AttentionBlock::Sca(b) => sca_flops(&b.cfg, c, hw),
                    AttentionBlock::Se(b) => {
                        let h = b.hidden as u64;
                        c * hw + 4 * c * h + h + c + c * hw
                    }
                }
            }
            Layer::Attention(_) => 0,
        };
        r.push(&n.id, node_kind(n), node_params(n), flops);
    });
    match err {
        Some(e) => Err(e),
        None => Ok(r),
    }
}

/// Eval-mode top-1 accuracy over a split.
pub fn evaluate_accuracy(model: &mut ModelGraph, split: &Split, norm: &Normalizer, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty split".into()));
    }
    let bs = batch_size.max(1);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(bs) {
        let (x, y) = make_batch(split, chunk, norm, Augment::none(), None);
        let logits = model.forward(x, &mut Ctx::eval())?;
        let pred = argmax_rows(logits.data(), model.meta.num_classes);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
    pub warmup: usize,
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

/// Median wall-clock time of an eval-mode forward pass on a zero input.
pub fn measure_latency(
    model: &mut ModelGraph,
    input_shape: [usize; 4],
    repeats: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if repeats < 10 {
        return Err(Error::Config(format!("latency needs at least 10 repeats, got {repeats}")));
    }
    let x = Tensor::zeros(&input_shape);
    for _ in 0..warmup {
        model.forward(x.clone(), &mut Ctx::eval())?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        model.forward(x.clone(), &mut Ctx::eval())?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median_ms = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
    Ok(LatencyReport {
        median_ms,
        samples_ms: samples,
        warmup,
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
        threads: std::thread::available_parallelism().map_or(1, usize::from),
    })
}
