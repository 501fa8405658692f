//! Layer graph for CIFAR-style backbones: a top-level sequence of nodes,
//! where residual blocks nest their own branch sequence.

pub mod layers;
pub mod se;
pub mod toy;
pub mod zoo;

use serde::{Deserialize, Serialize};

use crate::attention::ScaConfig;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
pub use layers::*;
pub use zoo::*;

/// Attention block family used when building or instrumenting a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttentionKind {
    #[default]
    None,
    Sca(ScaConfig),
    Se {
        reduction: usize,
    },
}

impl AttentionKind {
    pub fn se() -> Self {
        AttentionKind::Se { reduction: 16 }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, AttentionKind::None)
    }

    pub fn label(&self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Sca(_) => "sca",
            AttentionKind::Se { .. } => "se",
        }
    }
}

/// Where attention goes inside a residual block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSite {
    /// After the second conv's BN, before the shortcut addition.
    #[default]
    BlockOutput,
    /// After the first conv's BN and ReLU; scores the prunable conv.
    BlockFirstConv,
}

/// Architecture-level facts kept alongside the layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: String,
    pub num_classes: usize,
    /// `(channels, height, width)` of one input sample.
    pub input_shape: [usize; 3],
    pub attention: AttentionKind,
    #[serde(default)]
    pub site: AttentionSite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Bn,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Linear,
    ResidualBlock,
    Attention,
}

/// Flat, serializable description of one layer. Branch members of a
/// residual block name the block in `parent` and follow it in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default)]
    pub kernel: usize,
    #[serde(default)]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub prunable: bool,
    #[serde(default)]
    pub bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortcut: Option<Shortcut>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "AttentionKind::is_none")]
    pub attention: AttentionKind,
}

impl LayerSpec {
    fn bare(id: &str, kind: LayerKind, parent: Option<&str>) -> Self {
        Self {
            id: id.to_string(),
            kind,
            parent: parent.map(str::to_string),
            in_channels: 0,
            out_channels: 0,
            kernel: 0,
            stride: 0,
            padding: 0,
            prunable: false,
            bias: false,
            shortcut: None,
            target: None,
            attention: AttentionKind::None,
        }
    }

    fn of(node: &Node, parent: Option<&str>) -> Self {
        let mut s = Self::bare(&node.id, LayerKind::Relu, parent);
        match &node.layer {
            Layer::Conv(c) => {
                s.kind = LayerKind::Conv;
                s.in_channels = c.in_channels;
                s.out_channels = c.out_channels;
                s.kernel = c.kernel;
                s.stride = c.stride;
                s.padding = c.padding;
                s.prunable = c.prunable;
                s.bias = c.bias.is_some();
            }
            Layer::BatchNorm(b) => {
                s.kind = LayerKind::Bn;
                s.in_channels = b.channels;
                s.out_channels = b.channels;
            }
            Layer::Relu(_) => {}
            Layer::MaxPool(p) => {
                s.kind = LayerKind::MaxPool;
                s.kernel = p.kernel;
                s.stride = p.stride;
            }
            Layer::GlobalAvgPool(_) => s.kind = LayerKind::GlobalAvgPool,
            Layer::Linear(l) => {
                s.kind = LayerKind::Linear;
                s.in_channels = l.in_features;
                s.out_channels = l.out_features;
                s.bias = l.bias.is_some();
            }
            Layer::Residual(r) => {
                s.kind = LayerKind::ResidualBlock;
                s.shortcut = Some(r.shortcut);
            }
            Layer::Attention(a) => {
                s.kind = LayerKind::Attention;
                s.in_channels = a.channels;
                s.out_channels = a.channels;
                s.target = Some(a.target.clone());
                s.attention = match &a.block {
                    AttentionBlock::Sca(b) => AttentionKind::Sca(b.cfg.clone()),
                    AttentionBlock::Se(b) => AttentionKind::Se { reduction: b.reduction },
                };
            }
        }
        s
    }

    /// Builds a zero-initialized layer from this description.
    fn to_layer(&self) -> Result<Layer> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::Config(format!("layer {}: {what} must be positive", self.id)))
            } else {
                Ok(v)
            }
        };
        Ok(match self.kind {
            LayerKind::Conv => {
                let mut c = Conv2d::new(
                    positive(self.in_channels, "in_channels")?,
                    positive(self.out_channels, "out_channels")?,
                    positive(self.kernel, "kernel")?,
                    positive(self.stride, "stride")?,
                    self.padding,
                    self.bias,
                );
                c.prunable = self.prunable;
                Layer::Conv(c)
            }
            LayerKind::Bn => Layer::BatchNorm(BatchNorm2d::new(positive(self.out_channels, "channels")?)),
            LayerKind::Relu => Layer::Relu(Relu::default()),
            LayerKind::MaxPool => {
                Layer::MaxPool(MaxPool2d::new(positive(self.kernel, "kernel")?, positive(self.stride, "stride")?))
            }
            LayerKind::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::default()),
            LayerKind::Linear => Layer::Linear(Linear::new(
                positive(self.in_channels, "in_features")?,
                positive(self.out_channels, "out_features")?,
                self.bias,
            )),
            LayerKind::ResidualBlock => {
                Layer::Residual(ResidualBlock::new(Vec::new(), self.shortcut.unwrap_or(Shortcut::Identity)))
            }
            LayerKind::Attention => {
                let channels = positive(self.out_channels, "channels")?;
                let target = self.target.clone().unwrap_or_default();
                Layer::Attention(make_attention(target, channels, &self.attention)?)
            }
        })
    }
}

/// Zero-initialized attention layer (SCA starts at its identity init).
pub fn make_attention(target: String, channels: usize, kind: &AttentionKind) -> Result<Attention> {
    let block = match kind {
        AttentionKind::None => return Err(Error::Config("attention kind `none` cannot be instantiated".into())),
        AttentionKind::Sca(cfg) => AttentionBlock::Sca(ScaBlock::new(channels, cfg.fitted_to(channels))?),
        AttentionKind::Se { reduction } => {
            if *reduction == 0 {
                return Err(Error::Config("SE reduction must be positive".into()));
            }
            AttentionBlock::Se(SeBlock::new(channels, *reduction))
        }
    };
    Ok(Attention { target, channels, block })
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub meta: ModelMeta,
    pub nodes: Vec<Node>,
}

impl ModelGraph {
    pub fn new(meta: ModelMeta, nodes: Vec<Node>) -> Result<Self> {
        let g = Self { meta, nodes };
        g.check()?;
        Ok(g)
    }

    /// Verifies unique ids and end-to-end shape consistency.
    pub fn check(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut dup = None;
        self.walk(&mut |n, _| {
            if !seen.insert(n.id.clone()) {
                dup.get_or_insert_with(|| n.id.clone());
            }
        });
        if let Some(id) = dup {
            return Err(shape_err(format!("duplicate layer id {id}")));
        }
        let out = self.output_shape(1)?;
        if out != [1, self.meta.num_classes] {
            return Err(shape_err(format!("model emits {out:?}, expected [1, {}]", self.meta.num_classes)));
        }
        Ok(())
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let [c, h, w] = self.meta.input_shape;
        vec![batch, c, h, w]
    }

    pub fn output_shape(&self, batch: usize) -> Result<Vec<usize>> {
        let mut s = self.input_shape(batch);
        for n in &self.nodes {
            s = n.out_shape(&s)?;
        }
        Ok(s)
    }

    /// Input shape seen by every node for a model input of shape `input`, in walk order.
    pub fn node_input_shapes(&self, input: &[usize]) -> Result<Vec<(String, Vec<usize>)>> {
        fn rec(nodes: &[Node], mut s: Vec<usize>, out: &mut Vec<(String, Vec<usize>)>) -> Result<Vec<usize>> {
            for n in nodes {
                out.push((n.id.clone(), s.clone()));
                if let Layer::Residual(b) = &n.layer {
                    rec(&b.branch, s.clone(), out)?;
                }
                s = n.out_shape(&s)?;
            }
            Ok(s)
        }
        let mut out = Vec::new();
        rec(&self.nodes, input.to_vec(), &mut out)?;
        Ok(out)
    }

    pub fn forward(&mut self, x: Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        let want = self.input_shape(x.batch());
        if x.shape() != want.as_slice() {
            return Err(shape_err(format!("model input {:?}, expected {want:?}", x.shape())));
        }
        let mut h = x;
        for n in &mut self.nodes {
            h = n.forward(h, ctx)?;
        }
        Ok(h)
    }

    /// Eval-mode logits.
    pub fn predict(&mut self, x: Tensor) -> Result<Tensor> {
        self.forward(x, &mut Ctx::eval())
    }

    /// Backpropagates `dlogits`, accumulating parameter gradients.
    pub fn backward(&mut self, dlogits: Tensor) -> Result<()> {
        let mut g = dlogits;
        for n in self.nodes.iter_mut().rev() {
            g = n.backward(g)?;
        }
        Ok(())
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        for n in &mut self.nodes {
            n.visit_params(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, _, g| g.fill(0.0));
    }

    pub fn clear_caches(&mut self) {
        self.nodes.iter_mut().for_each(Node::clear_cache);
    }

    /// Pre-order traversal; the callback also gets the enclosing block id.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Node, Option<&'a str>)) {
        fn rec<'a>(nodes: &'a [Node], parent: Option<&'a str>, f: &mut dyn FnMut(&'a Node, Option<&'a str>)) {
            for n in nodes {
                f(n, parent);
                if let Layer::Residual(b) = &n.layer {
                    rec(&b.branch, Some(&n.id), f);
                }
            }
        }
        rec(&self.nodes, None, f);
    }

    pub fn find(&self, id: &str) -> Option<&Node> {
        let mut hit = None;
        self.walk(&mut |n, _| {
            if hit.is_none() && n.id == id {
                hit = Some(n);
            }
        });
        hit
    }

    pub fn find_mut(&mut self, id: &str) -> Option<&mut Node> {
        fn rec<'a>(nodes: &'a mut [Node], id: &str) -> Option<&'a mut Node> {
            for n in nodes {
                if n.id == id {
                    return Some(n);
                }
                if let Layer::Residual(b) = &mut n.layer {
                    if let Some(hit) = rec(&mut b.branch, id) {
                        return Some(hit);
                    }
                }
            }
            None
        }
        rec(&mut self.nodes, id)
    }

    /// `(id, out_channels)` of every prunable conv, in forward order.
    pub fn prunable_convs(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.walk(&mut |n, _| {
            if let Layer::Conv(c) = &n.layer {
                if c.prunable {
                    out.push((n.id.clone(), c.out_channels));
                }
            }
        });
        out
    }

    pub fn attention_layers(&self) -> Vec<&Attention> {
        let mut out = Vec::new();
        self.walk(&mut |n, _| {
            if let Layer::Attention(a) = &n.layer {
                out.push(a);
            }
        });
        out
    }

    pub fn count_layers(&self, kind: LayerKind) -> usize {
        self.layer_specs().iter().filter(|s| s.kind == kind).count()
    }

    /// Parameters and BN running statistics keyed `layer_id.name`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            n.collect_tensors(&mut out);
        }
        out
    }

    /// Overwrites stored tensors by name; every stored tensor must be provided.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected: Vec<String> = self.named_tensors().into_iter().map(|(k, _)| k).collect();
        if expected.len() != tensors.len() {
            return Err(shape_err(format!("model stores {} tensors, got {}", expected.len(), tensors.len())));
        }
        for (name, t) in tensors {
            let slot = self
                .nodes
                .iter_mut()
                .find_map(|n| n.tensor_slot(name))
                .ok_or_else(|| shape_err(format!("no tensor named {name}")))?;
            slot.assign(t).map_err(|e| shape_err(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        self.walk(&mut |n, parent| out.push(LayerSpec::of(n, parent)));
        out
    }

    /// Rebuilds a zero-initialized graph from its flat description.
    pub fn from_specs(meta: ModelMeta, specs: &[LayerSpec]) -> Result<Self> {
        let mut nodes: Vec<Node> = Vec::new();
        for s in specs {
            let node = Node::new(s.id.clone(), s.to_layer()?);
            match &s.parent {
                None => nodes.push(node),
                Some(p) => match nodes.last_mut() {
                    Some(Node { id, layer: Layer::Residual(b) }) if id == p => b.branch.push(node),
                    _ => {
                        return Err(Error::Config(format!(
                            "layer {}: parent block {p} must directly precede its members",
                            s.id
                        )))
                    }
                },
            }
        }
        Self::new(meta, nodes)
    }
}
