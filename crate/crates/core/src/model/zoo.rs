//! CIFAR VGG and ResNet builders, attention insertion and removal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    make_attention, AttentionBlock, AttentionKind, AttentionSite, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear,
    MaxPool2d, ModelGraph, ModelMeta, Node, Relu, ResidualBlock, Shortcut,
};
use crate::error::{Error, Result};

/// Hidden widths of the default VGG classifier: `512 -> 4096 -> classes`.
pub const DEFAULT_VGG_HEAD: [usize; 1] = [4096];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vgg,
    Resnet,
}

/// Everything needed to build a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    pub depth: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub attention: AttentionKind,
    #[serde(default)]
    pub site: AttentionSite,
    /// Hidden layer widths of the VGG classifier head; empty means a single
    /// `512 -> classes` linear layer.
    #[serde(default = "default_head")]
    pub vgg_head: Vec<usize>,
}

fn default_head() -> Vec<usize> {
    DEFAULT_VGG_HEAD.to_vec()
}

impl ArchSpec {
    pub fn vgg(depth: usize, num_classes: usize, attention: AttentionKind) -> Self {
        Self {
            family: Family::Vgg,
            depth,
            num_classes,
            attention,
            site: AttentionSite::default(),
            vgg_head: default_head(),
        }
    }

    pub fn resnet(depth: usize, num_classes: usize, attention: AttentionKind) -> Self {
        Self { family: Family::Resnet, ..Self::vgg(depth, num_classes, attention) }
    }

    pub fn with_site(mut self, site: AttentionSite) -> Self {
        self.site = site;
        self
    }

    pub fn name(&self) -> String {
        match self.family {
            Family::Vgg => format!("vgg{}", self.depth),
            Family::Resnet => format!("resnet{}", self.depth),
        }
    }

    /// Builds the backbone with weights drawn from `seed`.
    pub fn build(&self, seed: u64) -> Result<ModelGraph> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let nodes = match self.family {
            Family::Vgg => vgg_nodes(self.depth, self.num_classes, &self.vgg_head)?,
            Family::Resnet => resnet_nodes(self.depth, self.num_classes)?,
        };
        let meta = ModelMeta {
            arch: self.name(),
            num_classes: self.num_classes,
            input_shape: [3, 32, 32],
            attention: AttentionKind::None,
            site: self.site,
        };
        let mut g = ModelGraph::new(meta, nodes)?;
        init_weights(&mut g, seed);
        if self.attention.is_none() {
            Ok(g)
        } else {
            insert_attention(g, &self.attention, self.site, seed ^ 0x5eed_a77e)
        }
    }
}

/// VGG16/19 for 32x32 inputs; weights drawn from seed 0.
pub fn build_vgg(depth: usize, num_classes: usize, attention: AttentionKind) -> Result<ModelGraph> {
    ArchSpec::vgg(depth, num_classes, attention).build(0)
}

/// CIFAR ResNet with `(depth - 2) / 6` basic blocks per stage; weights drawn from seed 0.
pub fn build_resnet(depth: usize, num_classes: usize, attention: AttentionKind) -> Result<ModelGraph> {
    ArchSpec::resnet(depth, num_classes, attention).build(0)
}

fn vgg_nodes(depth: usize, num_classes: usize, head: &[usize]) -> Result<Vec<Node>> {
    let per_stage: [usize; 5] = match depth {
        16 => [2, 2, 3, 3, 3],
        19 => [2, 2, 4, 4, 4],
        _ => return Err(Error::Config(format!("unsupported VGG depth {depth}; expected 16 or 19"))),
    };
    let widths = [64, 128, 256, 512, 512];
    let mut nodes = Vec::new();
    let mut c_in = 3;
    let mut i = 0;
    for (stage, (&n, &w)) in per_stage.iter().zip(&widths).enumerate() {
        for _ in 0..n {
            i += 1;
            let mut conv = Conv2d::new(c_in, w, 3, 1, 1, true);
            conv.prunable = true;
            nodes.push(Node::new(format!("conv{i}"), Layer::Conv(conv)));
            nodes.push(Node::new(format!("bn{i}"), Layer::BatchNorm(BatchNorm2d::new(w))));
            nodes.push(Node::new(format!("relu{i}"), Layer::Relu(Relu::default())));
            c_in = w;
        }
        nodes.push(Node::new(format!("pool{}", stage + 1), Layer::MaxPool(MaxPool2d::new(2, 2))));
    }
    let mut features = c_in;
    for (j, &h) in head.iter().enumerate() {
        if h == 0 {
            return Err(Error::Config("VGG head widths must be positive".into()));
        }
        nodes.push(Node::new(format!("fc{}", j + 1), Layer::Linear(Linear::new(features, h, true))));
        nodes.push(Node::new(format!("relu_fc{}", j + 1), Layer::Relu(Relu::default())));
        features = h;
    }
    nodes.push(Node::new(format!("fc{}", head.len() + 1), Layer::Linear(Linear::new(features, num_classes, true))));
    Ok(nodes)
}

fn resnet_nodes(depth: usize, num_classes: usize) -> Result<Vec<Node>> {
    if depth < 8 || !(depth - 2).is_multiple_of(6) {
        return Err(Error::Config(format!("unsupported ResNet depth {depth}; need depth = 6n + 2 with n >= 1")));
    }
    let blocks = (depth - 2) / 6;
    let mut nodes = vec![
        Node::new("stem.conv", Layer::Conv(Conv2d::new(3, 16, 3, 1, 1, false))),
        Node::new("stem.bn", Layer::BatchNorm(BatchNorm2d::new(16))),
        Node::new("stem.relu", Layer::Relu(Relu::default())),
    ];
    let mut c_in = 16;
    for (s, &w) in [16usize, 32, 64].iter().enumerate() {
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let id = format!("s{}.b{b}", s + 1);
            let mut conv1 = Conv2d::new(c_in, w, 3, stride, 1, false);
            conv1.prunable = true;
            let branch = vec![
                Node::new(format!("{id}.conv1"), Layer::Conv(conv1)),
                Node::new(format!("{id}.bn1"), Layer::BatchNorm(BatchNorm2d::new(w))),
                Node::new(format!("{id}.relu1"), Layer::Relu(Relu::default())),
                Node::new(format!("{id}.conv2"), Layer::Conv(Conv2d::new(w, w, 3, 1, 1, false))),
                Node::new(format!("{id}.bn2"), Layer::BatchNorm(BatchNorm2d::new(w))),
            ];
            let shortcut = if stride != 1 || c_in != w {
                let extra = w - c_in;
                Shortcut::PadChannels { stride, pad_front: extra / 2, pad_back: extra - extra / 2 }
            } else {
                Shortcut::Identity
            };
            nodes.push(Node::new(id, Layer::Residual(ResidualBlock::new(branch, shortcut))));
            c_in = w;
        }
    }
    nodes.push(Node::new("gap", Layer::GlobalAvgPool(GlobalAvgPool::default())));
    nodes.push(Node::new("fc", Layer::Linear(Linear::new(c_in, num_classes, true))));
    Ok(nodes)
}

fn uniform(rng: &mut ChaCha8Rng, data: &mut [f32], bound: f32) {
    data.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
}

/// Kaiming-normal convs (fan-in, ReLU gain), uniform `1/sqrt(fan_in)`
/// linear layers, unit BN scale, identity SCA.
pub fn init_weights(model: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn rec(nodes: &mut [Node], rng: &mut ChaCha8Rng) {
        for n in nodes {
            match &mut n.layer {
                Layer::Conv(c) => {
                    let fan_in = (c.in_channels * c.kernel * c.kernel) as f32;
                    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
                    c.weight.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
                    if let Some(b) = c.bias.as_mut() {
                        b.fill(0.0);
                    }
                }
                Layer::BatchNorm(b) => {
                    b.gamma.fill(1.0);
                    b.beta.fill(0.0);
                    b.running_mean.fill(0.0);
                    b.running_var.fill(1.0);
                }
                Layer::Linear(l) => {
                    let bound = 1.0 / (l.in_features as f32).sqrt();
                    uniform(rng, l.weight.data_mut(), bound);
                    if let Some(b) = l.bias.as_mut() {
                        uniform(rng, b.data_mut(), bound);
                    }
                }
                Layer::Residual(b) => rec(&mut b.branch, rng),
                Layer::Attention(a) => init_attention(a, rng),
                Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) => {}
            }
        }
    }
    rec(&mut model.nodes, &mut rng);
}

fn init_attention(a: &mut super::Attention, rng: &mut ChaCha8Rng) {
    if let AttentionBlock::Se(b) = &mut a.block {
        let b1 = 1.0 / (b.channels as f32).sqrt();
        let b2 = 1.0 / (b.hidden as f32).sqrt();
        uniform(rng, b.w1.data_mut(), b1);
        uniform(rng, b.b1.data_mut(), b1);
        uniform(rng, b.w2.data_mut(), b2);
        uniform(rng, b.b2.data_mut(), b2);
    }
}

/// Id of the attention layer gating conv `target`.
pub fn attention_id(target: &str) -> String {
    format!("{target}_att")
}

/// Position right after the conv at `i`, its BN, and a ReLU directly after that BN.
fn after_conv_block(nodes: &[Node], i: usize) -> usize {
    let mut j = i + 1;
    if matches!(nodes.get(j).map(|n| &n.layer), Some(Layer::BatchNorm(_))) {
        j += 1;
        if matches!(nodes.get(j).map(|n| &n.layer), Some(Layer::Relu(_))) {
            j += 1;
        }
    }
    j
}

fn insert_into(nodes: &mut Vec<Node>, conv_idx: usize, kind: &AttentionKind, rng: &mut ChaCha8Rng) -> Result<()> {
    let Layer::Conv(c) = &nodes[conv_idx].layer else { unreachable!("caller passes conv positions") };
    let target = nodes[conv_idx].id.clone();
    let mut att = make_attention(target.clone(), c.out_channels, kind)?;
    init_attention(&mut att, rng);
    let pos = after_conv_block(nodes, conv_idx);
    nodes.insert(pos, Node::new(attention_id(&target), Layer::Attention(att)));
    Ok(())
}

/// Inserts one attention block per conv block: after every top-level conv
/// block of a plain network, or at `site` inside every residual block.
/// Backbone tensors are untouched.
pub fn insert_attention(
    mut model: ModelGraph,
    kind: &AttentionKind,
    site: AttentionSite,
    seed: u64,
) -> Result<ModelGraph> {
    if kind.is_none() {
        return Ok(model);
    }
    if !model.attention_layers().is_empty() {
        return Err(Error::Config("model already carries attention blocks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual = model.nodes.iter().any(|n| matches!(n.layer, Layer::Residual(_)));
    if residual {
        for n in &mut model.nodes {
            if let Layer::Residual(b) = &mut n.layer {
                let convs: Vec<usize> =
                    (0..b.branch.len()).filter(|&i| matches!(b.branch[i].layer, Layer::Conv(_))).collect();
                let pick = match site {
                    AttentionSite::BlockOutput => convs.last(),
                    AttentionSite::BlockFirstConv => convs.first(),
                };
                if let Some(&i) = pick {
                    insert_into(&mut b.branch, i, kind, &mut rng)?;
                }
            }
        }
    } else {
        let convs: Vec<usize> =
            (0..model.nodes.len()).filter(|&i| matches!(model.nodes[i].layer, Layer::Conv(_))).collect();
        for &i in convs.iter().rev() {
            insert_into(&mut model.nodes, i, kind, &mut rng)?;
        }
    }
    model.meta.attention = kind.clone();
    model.meta.site = site;
    model.check()?;
    Ok(model)
}

/// Deletes every attention block; all other tensors are kept bit-exactly.
pub fn remove_attention(mut model: ModelGraph) -> ModelGraph {
    fn rec(nodes: &mut Vec<Node>) {
        nodes.retain(|n| !matches!(n.layer, Layer::Attention(_)));
        for n in nodes {
            if let Layer::Residual(b) = &mut n.layer {
                rec(&mut b.branch);
            }
        }
    }
    rec(&mut model.nodes);
    model.meta.attention = AttentionKind::None;
    model
}
