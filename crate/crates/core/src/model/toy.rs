//! Small randomized networks for checking pruning and accounting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    AttentionKind, AttentionSite, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, ModelGraph, ModelMeta,
    Node, Relu, ResidualBlock, Shortcut,
};
use crate::error::Result;

fn meta(input_shape: [usize; 3], num_classes: usize) -> ModelMeta {
    ModelMeta {
        arch: "toy".into(),
        num_classes,
        input_shape,
        attention: AttentionKind::None,
        site: AttentionSite::default(),
    }
}

/// `conv(3->4, k3, bias) - BN - ReLU - conv(4->2, k3, bias) - GAP - linear(2->classes)`.
pub fn toy_net(input_hw: usize, num_classes: usize) -> Result<ModelGraph> {
    let mut c1 = Conv2d::new(3, 4, 3, 1, 1, true);
    c1.prunable = true;
    let nodes = vec![
        Node::new("conv1", Layer::Conv(c1)),
        Node::new("bn1", Layer::BatchNorm(BatchNorm2d::new(4))),
        Node::new("relu1", Layer::Relu(Relu::default())),
        Node::new("conv2", Layer::Conv(Conv2d::new(4, 2, 3, 1, 1, true))),
        Node::new("gap", Layer::GlobalAvgPool(GlobalAvgPool::default())),
        Node::new("fc", Layer::Linear(Linear::new(2, num_classes, true))),
    ];
    ModelGraph::new(meta([3, input_hw, input_hw], num_classes), nodes)
}

/// Random plain/residual net with at most six convs and random weights and
/// BN statistics. Every conv whose output does not reach a residual
/// addition is prunable.
pub fn random_toy_net(rng: &mut ChaCha8Rng) -> Result<ModelGraph> {
    let hw = if rng.random_bool(0.5) { 6 } else { 8 };
    let mut nodes = Vec::new();
    let (mut c, mut s) = (3usize, hw);
    let mut convs = 0;
    let mut unit = 0;
    let mut last_plain: Option<usize> = None;
    while convs < 5 && (unit == 0 || rng.random_bool(0.7)) {
        unit += 1;
        if rng.random_bool(0.3) {
            // the previous conv's output now also feeds the shortcut
            if let Some(Node { layer: Layer::Conv(prev), .. }) = last_plain.and_then(|i| nodes.get_mut(i)) {
                prev.prunable = false;
            }
            last_plain = None;
            let w = rng.random_range(c.max(2)..=c.max(2) + 3);
            let mut conv1 = Conv2d::new(c, w, 3, 1, 1, false);
            conv1.prunable = true;
            let id = format!("u{unit}");
            let branch = vec![
                Node::new(format!("{id}.conv1"), Layer::Conv(conv1)),
                Node::new(format!("{id}.bn1"), Layer::BatchNorm(BatchNorm2d::new(w))),
                Node::new(format!("{id}.relu1"), Layer::Relu(Relu::default())),
                Node::new(format!("{id}.conv2"), Layer::Conv(Conv2d::new(w, w, 3, 1, 1, false))),
                Node::new(format!("{id}.bn2"), Layer::BatchNorm(BatchNorm2d::new(w))),
            ];
            let shortcut = if w == c {
                Shortcut::Identity
            } else {
                Shortcut::PadChannels { stride: 1, pad_front: (w - c) / 2, pad_back: w - c - (w - c) / 2 }
            };
            nodes.push(Node::new(id, Layer::Residual(ResidualBlock::new(branch, shortcut))));
            c = w;
            convs += 2;
        } else {
            let w = rng.random_range(2..=6);
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let mut conv = Conv2d::new(c, w, k, 1, k / 2, rng.random_bool(0.5));
            conv.prunable = true;
            last_plain = Some(nodes.len());
            nodes.push(Node::new(format!("u{unit}.conv"), Layer::Conv(conv)));
            if rng.random_bool(0.8) {
                nodes.push(Node::new(format!("u{unit}.bn"), Layer::BatchNorm(BatchNorm2d::new(w))));
            }
            nodes.push(Node::new(format!("u{unit}.relu"), Layer::Relu(Relu::default())));
            if s >= 4 && rng.random_bool(0.3) {
                nodes.push(Node::new(format!("u{unit}.pool"), Layer::MaxPool(MaxPool2d::new(2, 2))));
                s /= 2;
            }
            c = w;
            convs += 1;
        }
    }
    // A final plain conv gives every earlier layer a consumer.
    let w = rng.random_range(2..=5);
    nodes.push(Node::new("last.conv", Layer::Conv(Conv2d::new(c, w, 3, 1, 1, true))));
    nodes.push(Node::new("last.bn", Layer::BatchNorm(BatchNorm2d::new(w))));
    nodes.push(Node::new("last.relu", Layer::Relu(Relu::default())));
    let classes = rng.random_range(2..=5);
    if rng.random_bool(0.5) {
        nodes.push(Node::new("gap", Layer::GlobalAvgPool(GlobalAvgPool::default())));
        nodes.push(Node::new("fc", Layer::Linear(Linear::new(w, classes, true))));
    } else {
        nodes.push(Node::new("fc", Layer::Linear(Linear::new(w * s * s, classes, true))));
    }
    // Let the last conv be prunable when a linear layer consumes it directly.
    if let Layer::Conv(cv) = &mut nodes.iter_mut().find(|n| n.id == "last.conv").expect("last conv").layer {
        cv.prunable = true;
    }
    let mut m = ModelGraph::new(meta([3, hw, hw], classes), nodes)?;
    randomize(&mut m, rng);
    Ok(m)
}

/// Fills every stored tensor with random values: weights with variance
/// `1 / fan_in`, BN scales and running variances in `[0.5, 1.5)`, the rest
/// in `[-0.5, 0.5)`.
pub fn randomize(model: &mut ModelGraph, rng: &mut ChaCha8Rng) {
    let mut tensors = model.named_tensors();
    for (name, t) in &mut tensors {
        let (lo, hi) = if name.ends_with("running_var") || name.ends_with("gamma") {
            (0.5, 1.5)
        } else if t.shape().len() >= 2 {
            let fan_in: usize = t.shape()[1..].iter().product();
            let a = (3.0 / fan_in as f32).sqrt();
            (-a, a)
        } else {
            (-0.5, 0.5)
        };
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    }
    model.load_tensors(&tensors).expect("same names and shapes");
}
