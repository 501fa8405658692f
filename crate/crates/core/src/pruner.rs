//! Pruning plans and their structural application.
//!
//! Removing output channel `j` of a conv deletes its filter and bias, the
//! matching entries of the BN that follows it, and the matching input
//! slice of the next conv or linear layer in the same sequence. Convs whose
//! output reaches a residual addition are coupled to the shortcut and are
//! never pruned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, ModelGraph, Node};
use crate::stats::ScoreTable;
use crate::tensor::Tensor;

/// Absorbs representation error in `ratio * channels` (e.g. 0.29 * 100).
const FLOOR_SLACK: f64 = 1e-9;

/// Number of channels removed from a `channels`-wide layer at `ratio`.
pub fn removal_count(ratio: f64, channels: usize) -> usize {
    ((ratio * channels as f64) + FLOOR_SLACK).floor() as usize
}

/// Per-layer pruning ratios: a uniform default plus overrides by layer id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ratios {
    pub uniform: f64,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl Ratios {
    pub fn uniform(r: f64) -> Self {
        Self { uniform: r, overrides: BTreeMap::new() }
    }

    pub fn for_layer(&self, id: &str) -> f64 {
        self.overrides.get(id).copied().unwrap_or(self.uniform)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub id: String,
    pub channels: usize,
    pub ratio: f64,
    /// Ascending channel indices to delete.
    pub remove: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub scorer: String,
    /// Digest of the score table the plan was cut from.
    pub scores_digest: String,
    pub layers: Vec<LayerPlan>,
}

impl PruningPlan {
    pub fn layer(&self, id: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn removed_total(&self) -> usize {
        self.layers.iter().map(|l| l.remove.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Cuts the `floor(p_l C_l)` lowest-scoring channels of every scored layer.
pub fn plan_pruning(scores: &ScoreTable, ratios: &Ratios) -> Result<PruningPlan> {
    scores.check()?;
    for id in ratios.overrides.keys() {
        if scores.layer(id).is_none() {
            return Err(Error::Plan(format!("ratio override for unscored layer {id}")));
        }
    }
    let mut layers = Vec::with_capacity(scores.layers.len());
    for l in &scores.layers {
        let ratio = ratios.for_layer(&l.id);
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Plan(format!("layer {}: ratio {ratio} outside [0, 1)", l.id)));
        }
        let c = l.scores.len();
        let k = removal_count(ratio, c);
        if k >= c {
            return Err(Error::Plan(format!("layer {}: ratio {ratio} would empty all {c} channels", l.id)));
        }
        let mut remove = l.order[..k].to_vec();
        remove.sort_unstable();
        layers.push(LayerPlan { id: l.id.clone(), channels: c, ratio, remove });
    }
    Ok(PruningPlan { scorer: scores.scorer.clone(), scores_digest: scores.digest(), layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownLayer,
    NotPrunable,
    ResidualCoupling,
    NoConsumer,
    AttentionPresent,
    ChannelMismatch,
    IndexOutOfRange,
    DuplicateLayer,
    UnsortedIndices,
    RatioMismatch,
    EmptyLayer,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            ViolationKind::UnknownLayer => "unknown layer",
            ViolationKind::NotPrunable => "not prunable",
            ViolationKind::ResidualCoupling => "residual coupling",
            ViolationKind::NoConsumer => "no consumer",
            ViolationKind::AttentionPresent => "attention present",
            ViolationKind::ChannelMismatch => "channel mismatch",
            ViolationKind::IndexOutOfRange => "index out of range",
            ViolationKind::DuplicateLayer => "duplicate layer",
            ViolationKind::UnsortedIndices => "unsorted or repeated indices",
            ViolationKind::RatioMismatch => "ratio mismatch",
            ViolationKind::EmptyLayer => "empty layer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub layer: String,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// `(layer, channels before, channels kept)` for every planned layer.
    pub survivors: Vec<(String, usize, usize)>,
}

impl ValidationReport {
    pub fn is_legal(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

/// Where the channels of a conv go inside its own sequence.
#[derive(Clone, Debug, PartialEq)]
struct Chain {
    bns: Vec<usize>,
    consumer: usize,
}

fn trace_chain(seq: &[Node], conv: usize, in_branch: bool) -> std::result::Result<Chain, ViolationKind> {
    let mut bns = Vec::new();
    for (j, n) in seq.iter().enumerate().skip(conv + 1) {
        match n.layer {
            Layer::BatchNorm(_) => bns.push(j),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) => {}
            Layer::Attention(_) => return Err(ViolationKind::AttentionPresent),
            Layer::Conv(_) | Layer::Linear(_) => return Ok(Chain { bns, consumer: j }),
            Layer::Residual(_) => return Err(ViolationKind::ResidualCoupling),
        }
    }
    Err(if in_branch { ViolationKind::ResidualCoupling } else { ViolationKind::NoConsumer })
}

/// The sequence holding `id`, the node's position in it, and whether the
/// sequence is a residual branch.
fn locate<'a>(nodes: &'a [Node], id: &str, in_branch: bool) -> Option<(&'a [Node], usize, bool)> {
    for (i, n) in nodes.iter().enumerate() {
        if n.id == id {
            return Some((nodes, i, in_branch));
        }
        if let Layer::Residual(b) = &n.layer {
            if let Some(hit) = locate(&b.branch, id, true) {
                return Some(hit);
            }
        }
    }
    None
}

fn locate_mut<'a>(nodes: &'a mut [Node], id: &str) -> Option<(&'a mut [Node], usize)> {
    if let Some(i) = nodes.iter().position(|n| n.id == id) {
        return Some((nodes, i));
    }
    for n in nodes.iter_mut() {
        if let Layer::Residual(b) = &mut n.layer {
            if let Some(hit) = locate_mut(&mut b.branch, id) {
                return Some(hit);
            }
        }
    }
    None
}

/// The first BN between conv `id` and its consumer.
pub(crate) fn following_bn<'a>(model: &'a ModelGraph, id: &str) -> Option<&'a crate::model::BatchNorm2d> {
    let (seq, i, _) = locate(&model.nodes, id, false)?;
    seq[i + 1..]
        .iter()
        .take_while(|n| !matches!(n.layer, Layer::Conv(_) | Layer::Linear(_) | Layer::Residual(_)))
        .find_map(|n| match &n.layer {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        })
}

/// Pure legality check of `plan` against `model`.
pub fn validate_plan(model: &ModelGraph, plan: &PruningPlan) -> ValidationReport {
    let mut r = ValidationReport::default();
    let mut flag = |layer: &str, kind: ViolationKind, detail: String| {
        r.violations.push(Violation { layer: layer.to_string(), kind, detail })
    };
    let atts = model.attention_layers().len();
    if atts > 0 {
        flag("*", ViolationKind::AttentionPresent, format!("{atts} attention layers must be removed first"));
    }
    let mut seen = std::collections::HashSet::new();
    let mut survivors = Vec::new();
    for lp in &plan.layers {
        if !seen.insert(lp.id.as_str()) {
            flag(&lp.id, ViolationKind::DuplicateLayer, "layer planned twice".into());
            continue;
        }
        let Some((seq, i, in_branch)) = locate(&model.nodes, &lp.id, false) else {
            flag(&lp.id, ViolationKind::UnknownLayer, "no such layer".into());
            continue;
        };
        let Layer::Conv(conv) = &seq[i].layer else {
            flag(&lp.id, ViolationKind::NotPrunable, "only conv layers can be pruned".into());
            continue;
        };
        if conv.out_channels != lp.channels {
            flag(
                &lp.id,
                ViolationKind::ChannelMismatch,
                format!("plan assumes {} channels, layer has {}", lp.channels, conv.out_channels),
            );
        }
        let touches = !lp.remove.is_empty();
        match trace_chain(seq, i, in_branch) {
            Err(kind) if touches && kind != ViolationKind::AttentionPresent => {
                flag(&lp.id, kind, "output channels cannot be removed safely".into())
            }
            _ if touches && !conv.prunable => {
                flag(&lp.id, ViolationKind::NotPrunable, "layer is marked non-prunable".into())
            }
            _ => {}
        }
        if lp.remove.windows(2).any(|w| w[0] >= w[1]) {
            flag(&lp.id, ViolationKind::UnsortedIndices, "indices must be strictly ascending".into());
        }
        if let Some(&j) = lp.remove.iter().find(|&&j| j >= conv.out_channels) {
            flag(&lp.id, ViolationKind::IndexOutOfRange, format!("channel {j} of {}", conv.out_channels));
        }
        if lp.remove.len() != removal_count(lp.ratio, lp.channels) {
            flag(
                &lp.id,
                ViolationKind::RatioMismatch,
                format!(
                    "{} removals, ratio {} implies {}",
                    lp.remove.len(),
                    lp.ratio,
                    removal_count(lp.ratio, lp.channels)
                ),
            );
        }
        let kept = conv.out_channels.saturating_sub(lp.remove.len());
        if kept == 0 {
            flag(&lp.id, ViolationKind::EmptyLayer, "no channel would survive".into());
        }
        survivors.push((lp.id.clone(), conv.out_channels, kept));
    }
    r.survivors = survivors;
    r
}

fn complement(n: usize, remove: &[usize]) -> Vec<usize> {
    let mut drop = vec![false; n];
    remove.iter().for_each(|&j| drop[j] = true);
    (0..n).filter(|&j| !drop[j]).collect()
}

/// Removes planned channels and their dependents. The input graph is
/// consumed; BN running statistics of survivors are kept as they are.
pub fn apply_plan(model: ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    let report = validate_plan(&model, plan);
    if let Some(v) = report.violations.first() {
        return Err(Error::Plan(format!("{}: {} ({})", v.layer, v.kind.label(), v.detail)));
    }
    let shapes: BTreeMap<String, Vec<usize>> = model.node_input_shapes(&model.input_shape(1))?.into_iter().collect();
    let mut model = model;
    for lp in plan.layers.iter().filter(|l| !l.remove.is_empty()) {
        let (seq, i) = locate_mut(&mut model.nodes, &lp.id).expect("validated layer");
        let chain = trace_chain(seq, i, false).expect("validated chain");
        let keep = complement(lp.channels, &lp.remove);
        if let Layer::Conv(c) = &mut seq[i].layer {
            c.weight = c.weight.select(0, &keep);
            c.bias = c.bias.as_ref().map(|b| b.select(0, &keep));
            c.out_channels = keep.len();
            c.grad_weight = Tensor::zeros(c.weight.shape());
            c.grad_bias = c.bias.as_ref().map(|b| Tensor::zeros(b.shape()));
        }
        for &b in &chain.bns {
            if let Layer::BatchNorm(bn) = &mut seq[b].layer {
                bn.gamma = bn.gamma.select(0, &keep);
                bn.beta = bn.beta.select(0, &keep);
                bn.running_mean = bn.running_mean.select(0, &keep);
                bn.running_var = bn.running_var.select(0, &keep);
                bn.grad_gamma = Tensor::zeros(bn.gamma.shape());
                bn.grad_beta = Tensor::zeros(bn.beta.shape());
                bn.channels = keep.len();
            }
        }
        let consumer = &mut seq[chain.consumer];
        let in_shape = &shapes[&consumer.id];
        match &mut consumer.layer {
            Layer::Conv(c) => {
                c.weight = c.weight.select(1, &keep);
                c.in_channels = keep.len();
                c.grad_weight = Tensor::zeros(c.weight.shape());
            }
            Layer::Linear(l) => {
                let spatial: usize = in_shape[2..].iter().product();
                let (out, c_old) = (l.out_features, lp.channels);
                let w = l.weight.clone().reshape(vec![out, c_old, spatial])?.select(1, &keep);
                l.weight = w.reshape(vec![out, keep.len() * spatial])?;
                l.in_features = keep.len() * spatial;
                l.grad_weight = Tensor::zeros(l.weight.shape());
            }
            _ => unreachable!("chains end at conv or linear"),
        }
    }
    model.clear_caches();
    model.check()?;
    Ok(model)
}

/// Copy of `model` whose planned channels are forced to zero after their
/// BN (or at the conv output when no BN follows). In eval mode its logits
/// match those of `apply_plan(model, plan)`.
pub fn zero_mask(model: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    let mut m = model.clone();
    for lp in plan.layers.iter().filter(|l| !l.remove.is_empty()) {
        let (seq, i) =
            locate_mut(&mut m.nodes, &lp.id).ok_or_else(|| Error::Plan(format!("unknown layer {}", lp.id)))?;
        let chain = trace_chain(seq, i, true).map_err(|k| Error::Plan(format!("{}: {}", lp.id, k.label())))?;
        match chain.bns.last() {
            Some(&b) => {
                if let Layer::BatchNorm(bn) = &mut seq[b].layer {
                    for &j in &lp.remove {
                        bn.gamma.data_mut()[j] = 0.0;
                        bn.beta.data_mut()[j] = 0.0;
                    }
                }
            }
            None => {
                if let Layer::Conv(c) = &mut seq[i].layer {
                    let per = c.weight.len() / c.out_channels;
                    for &j in &lp.remove {
                        c.weight.data_mut()[j * per..(j + 1) * per].fill(0.0);
                        if let Some(b) = c.bias.as_mut() {
                            b.data_mut()[j] = 0.0;
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}
