//! Layer types with cached forward state and hand-written backward passes.

use serde::{Deserialize, Serialize};

use crate::attention::{sca_backward, sca_forward_traced, Dims, ScaConfig, ScaParams, ScaTrace};
use crate::error::{shape_err, Error, Result};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::kernels::dense::{linear_backward, linear_forward, relu_backward, relu_forward};
use crate::kernels::norm::{batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, BnCache};
use crate::kernels::pool::{
    global_avgpool_backward, global_avgpool_forward, maxpool_backward, maxpool_forward, pooled_len,
};
use crate::model::se::{se_backward, se_forward, SeGrads, SeTrace, SeWeights};
use crate::tensor::Tensor;

/// Callback receiving `(target layer id, gates (B x C), channels)` from
/// every attention layer during a forward pass.
pub type AttentionProbe<'a> = dyn FnMut(&str, &[f32], usize) + 'a;

/// Per-call forward options.
pub struct Ctx<'a> {
    /// Training mode: batch statistics in BN, caches kept for backward.
    pub train: bool,
    pub probe: Option<&'a mut AttentionProbe<'a>>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self { train: false, probe: None }
    }

    pub fn train() -> Self {
        Self { train: true, probe: None }
    }

    pub fn probing(probe: &'a mut AttentionProbe<'a>) -> Self {
        Self { train: false, probe: Some(probe) }
    }
}

/// Visitor over `(qualified name, value, gradient)` of learnable parameters.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut [f32], &mut [f32]) + 'a;

fn missing_cache(id: &str) -> Error {
    Error::Shape(format!("layer {id}: backward called without a training-mode forward"))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Whether the pruner may remove output channels of this layer.
    pub prunable: bool,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub grad_weight: Tensor,
    pub grad_bias: Option<Tensor>,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let wshape = [out_channels, in_channels, kernel, kernel];
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            prunable: false,
            weight: Tensor::zeros(&wshape),
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
            grad_weight: Tensor::zeros(&wshape),
            grad_bias: bias.then(|| Tensor::zeros(&[out_channels])),
            cache: None,
        }
    }

    pub fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            in_h: h,
            in_w: w,
        }
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        match *s {
            [n, c, h, w]
                if c == self.in_channels
                    && h + 2 * self.padding >= self.kernel
                    && w + 2 * self.padding >= self.kernel =>
            {
                let g = self.geom(h, w);
                Ok(vec![n, self.out_channels, g.out_h(), g.out_w()])
            }
            _ => Err(shape_err(format!(
                "conv {}->{} k{} cannot take input {s:?}",
                self.in_channels, self.out_channels, self.kernel
            ))),
        }
    }

    fn forward(&mut self, x: Tensor, train: bool) -> Result<Tensor> {
        let out_shape = self.out_shape(x.shape())?;
        let (n, _, h, w) = x.dims4()?;
        let mut y = Tensor::zeros(&out_shape);
        conv2d_forward(
            x.data(),
            n,
            &self.geom(h, w),
            self.weight.data(),
            self.bias.as_ref().map(|b| b.data()),
            y.data_mut(),
        );
        self.cache = train.then_some(x);
        Ok(y)
    }

    fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let x = self.cache.take()?;
        let (n, _, h, w) = x.dims4().ok()?;
        let mut dx = Tensor::zeros(x.shape());
        conv2d_backward(
            x.data(),
            n,
            &self.geom(h, w),
            self.weight.data(),
            dy.data(),
            Some(dx.data_mut()),
            self.grad_weight.data_mut(),
            self.grad_bias.as_mut().map(|b| b.data_mut()),
        );
        Some(dx)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub grad_gamma: Tensor,
    pub grad_beta: Tensor,
    cache: Option<BnCache<f32>>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            grad_gamma: Tensor::zeros(&[channels]),
            grad_beta: Tensor::zeros(&[channels]),
            cache: None,
        }
    }

    fn forward(&mut self, x: Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err(format!("batchnorm over {} channels got {c}", self.channels)));
        }
        let mut y = Tensor::zeros(x.shape());
        if train {
            let (mean, var, cache) = batchnorm_forward_train(
                x.data(),
                n,
                c,
                h * w,
                self.gamma.data(),
                self.beta.data(),
                self.eps,
                y.data_mut(),
            );
            let m = (n * h * w) as f32;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = self.momentum;
            for ch in 0..c {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (1.0 - mom) * *rm + mom * mean[ch];
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (1.0 - mom) * *rv + mom * var[ch] * unbias;
            }
            self.cache = Some(cache);
        } else {
            batchnorm_forward_eval(
                x.data(),
                n,
                c,
                h * w,
                self.gamma.data(),
                self.beta.data(),
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
                y.data_mut(),
            );
            self.cache = None;
        }
        Ok(y)
    }

    fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let cache = self.cache.take()?;
        let (n, c, h, w) = dy.dims4().ok()?;
        let mut dx = Tensor::zeros(dy.shape());
        batchnorm_backward(
            dy.data(),
            &cache,
            self.gamma.data(),
            n,
            c,
            h * w,
            dx.data_mut(),
            self.grad_gamma.data_mut(),
            self.grad_beta.data_mut(),
        );
        Some(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub grad_weight: Tensor,
    pub grad_bias: Option<Tensor>,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, bias: bool) -> Self {
        Self {
            in_features,
            out_features,
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: bias.then(|| Tensor::zeros(&[out_features])),
            grad_weight: Tensor::zeros(&[out_features, in_features]),
            grad_bias: bias.then(|| Tensor::zeros(&[out_features])),
            cache: None,
        }
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        let flat: usize = s[1..].iter().product();
        if s.is_empty() || flat != self.in_features {
            return Err(shape_err(format!("linear {} -> {} got input {s:?}", self.in_features, self.out_features)));
        }
        Ok(vec![s[0], self.out_features])
    }

    fn forward(&mut self, x: Tensor, train: bool) -> Result<Tensor> {
        let out_shape = self.out_shape(x.shape())?;
        let n = x.batch();
        let mut y = Tensor::zeros(&out_shape);
        linear_forward(
            x.data(),
            n,
            self.in_features,
            self.out_features,
            self.weight.data(),
            self.bias.as_ref().map(|b| b.data()),
            y.data_mut(),
        );
        self.cache = train.then_some(x);
        Ok(y)
    }

    fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let x = self.cache.take()?;
        let mut dx = Tensor::zeros(x.shape());
        linear_backward(
            x.data(),
            x.batch(),
            self.in_features,
            self.out_features,
            self.weight.data(),
            dy.data(),
            Some(dx.data_mut()),
            self.grad_weight.data_mut(),
            self.grad_bias.as_mut().map(|b| b.data_mut()),
        );
        Some(dx)
    }
}

#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, cache: None }
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        match *s {
            [n, c, h, w] if h >= self.kernel && w >= self.kernel => {
                Ok(vec![n, c, pooled_len(h, self.kernel, self.stride), pooled_len(w, self.kernel, self.stride)])
            }
            _ => Err(shape_err(format!("maxpool k{} cannot take input {s:?}", self.kernel))),
        }
    }

    fn forward(&mut self, x: Tensor, train: bool) -> Result<Tensor> {
        let out_shape = self.out_shape(x.shape())?;
        let (n, c, h, w) = x.dims4()?;
        let mut y = Tensor::zeros(&out_shape);
        let argmax = maxpool_forward(x.data(), n * c, h, w, self.kernel, self.stride, y.data_mut());
        self.cache = train.then(|| (x.shape().to_vec(), argmax));
        Ok(y)
    }

    fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let (shape, argmax) = self.cache.take()?;
        let mut dx = Tensor::zeros(&shape);
        maxpool_backward(dy.data(), &argmax, dx.data_mut());
        Some(dx)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    cache: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    fn forward(&mut self, x: Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let mut y = Tensor::zeros(&[n, c, 1, 1]);
        global_avgpool_forward(x.data(), n * c, h * w, y.data_mut());
        self.cache = train.then(|| x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let shape = self.cache.take()?;
        let mut dx = Tensor::zeros(&shape);
        global_avgpool_backward(dy.data(), shape[0] * shape[1], shape[2] * shape[3], dx.data_mut());
        Some(dx)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    fn forward(&mut self, mut x: Tensor, train: bool) -> Tensor {
        relu_forward(x.data_mut());
        self.cache = train.then(|| x.clone());
        x
    }

    fn backward(&mut self, mut dy: Tensor) -> Option<Tensor> {
        let y = self.cache.take()?;
        relu_backward(y.data(), dy.data_mut());
        Some(dy)
    }
}

/// Parameter-free shortcut of a CIFAR basic block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Shortcut {
    Identity,
    /// Spatial subsampling by `stride` followed by zero channels on both
    /// sides (the parameter-free "option A" projection).
    PadChannels {
        stride: usize,
        pad_front: usize,
        pad_back: usize,
    },
}

impl Shortcut {
    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        match *self {
            Shortcut::Identity => s.to_vec(),
            Shortcut::PadChannels { stride, pad_front, pad_back } => {
                vec![s[0], s[1] + pad_front + pad_back, s[2].div_ceil(stride), s[3].div_ceil(stride)]
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let Shortcut::PadChannels { stride, pad_front, .. } = *self else {
            return Ok(x.clone());
        };
        let (n, c, h, w) = x.dims4()?;
        let os = self.out_shape(x.shape());
        let (oc, oh, ow) = (os[1], os[2], os[3]);
        let mut y = Tensor::zeros(&os);
        let src = x.data();
        let dst = y.data_mut();
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[((b * oc + ch + pad_front) * oh + oy) * ow + ox] =
                            src[((b * c + ch) * h + oy * stride) * w + ox * stride];
                    }
                }
            }
        }
        Ok(y)
    }

    fn backward(&self, dy: &Tensor, in_shape: &[usize]) -> Tensor {
        let Shortcut::PadChannels { stride, pad_front, .. } = *self else {
            return dy.clone();
        };
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let s = dy.shape();
        let (oc, oh, ow) = (s[1], s[2], s[3]);
        let mut dx = Tensor::zeros(in_shape);
        let src = dy.data();
        let dst = dx.data_mut();
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[((b * c + ch) * h + oy * stride) * w + ox * stride] =
                            src[((b * oc + ch + pad_front) * oh + oy) * ow + ox];
                    }
                }
            }
        }
        dx
    }
}

/// `relu(branch(x) + shortcut(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub branch: Vec<Node>,
    pub shortcut: Shortcut,
    relu: Relu,
    in_shape: Option<Vec<usize>>,
}

impl ResidualBlock {
    pub fn new(branch: Vec<Node>, shortcut: Shortcut) -> Self {
        Self { branch, shortcut, relu: Relu::default(), in_shape: None }
    }

    fn forward(&mut self, x: Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        let short = self.shortcut.forward(&x)?;
        let in_shape = x.shape().to_vec();
        let mut h = x;
        for node in &mut self.branch {
            h = node.forward(h, ctx)?;
        }
        if h.shape() != short.shape() {
            return Err(shape_err(format!(
                "residual branch output {:?} does not match shortcut {:?}",
                h.shape(),
                short.shape()
            )));
        }
        h.data_mut().iter_mut().zip(short.data()).for_each(|(a, b)| *a += b);
        self.in_shape = ctx.train.then_some(in_shape);
        Ok(self.relu.forward(h, ctx.train))
    }

    fn backward(&mut self, dy: Tensor) -> Result<Tensor> {
        let in_shape = self.in_shape.take().ok_or_else(|| missing_cache("residual"))?;
        let g = self.relu.backward(dy).ok_or_else(|| missing_cache("residual relu"))?;
        let mut dx = self.shortcut.backward(&g, &in_shape);
        let mut gb = g;
        for node in self.branch.iter_mut().rev() {
            gb = node.backward(gb)?;
        }
        dx.data_mut().iter_mut().zip(gb.data()).for_each(|(a, b)| *a += b);
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct ScaBlock {
    pub cfg: ScaConfig,
    pub params: ScaParams<f32>,
    pub grads: ScaParams<f32>,
    trace: Option<ScaTrace<f32>>,
}

impl ScaBlock {
    pub fn new(channels: usize, cfg: ScaConfig) -> Result<Self> {
        let params = crate::attention::init_params::<f32>(channels, &cfg)?;
        let grads = params.zeros_like();
        Ok(Self { cfg, params, grads, trace: None })
    }
}

#[derive(Clone, Debug)]
pub struct SeBlock {
    pub channels: usize,
    pub hidden: usize,
    pub reduction: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub grads: [Tensor; 4],
    trace: Option<SeTrace<f32>>,
}

impl SeBlock {
    pub fn new(channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        let shapes = [vec![hidden, channels], vec![hidden], vec![channels, hidden], vec![channels]];
        Self {
            channels,
            hidden,
            reduction,
            w1: Tensor::zeros(&shapes[0]),
            b1: Tensor::zeros(&shapes[1]),
            w2: Tensor::zeros(&shapes[2]),
            b2: Tensor::zeros(&shapes[3]),
            grads: shapes.map(|s| Tensor::zeros(&s)),
            trace: None,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.hidden + self.hidden + self.channels
    }
}

#[derive(Clone, Debug)]
pub enum AttentionBlock {
    Sca(ScaBlock),
    Se(SeBlock),
}

/// An attention gate scoring the output channels of layer `target`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub target: String,
    pub channels: usize,
    pub block: AttentionBlock,
}

impl Attention {
    pub fn param_count(&self) -> usize {
        match &self.block {
            AttentionBlock::Sca(b) => b.params.len(),
            AttentionBlock::Se(b) => b.param_count(),
        }
    }

    fn forward(&mut self, x: Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err(format!("attention over {} channels got {c}", self.channels)));
        }
        let shape = x.shape().to_vec();
        let (out, gates) = match &mut self.block {
            AttentionBlock::Sca(b) => {
                let trace = sca_forward_traced(x.data(), Dims::new(n, c, h, w), &b.params, &b.cfg)?;
                let gates = trace.channel_gates();
                let out = if ctx.train {
                    let out = trace.output.clone();
                    b.trace = Some(trace);
                    out
                } else {
                    trace.into_output()
                };
                (out, gates)
            }
            AttentionBlock::Se(b) => {
                let weights = SeWeights { w1: b.w1.data(), b1: b.b1.data(), w2: b.w2.data(), b2: b.b2.data() };
                let (out, trace) = se_forward(x.data(), n, c, h * w, b.hidden, &weights);
                let gates = trace.gates.clone();
                b.trace = ctx.train.then_some(trace);
                (out, gates)
            }
        };
        if let Some(probe) = ctx.probe.as_mut() {
            probe(&self.target, &gates, c);
        }
        Tensor::new(shape, out)
    }

    fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let shape = dy.shape().to_vec();
        let dx = match &mut self.block {
            AttentionBlock::Sca(b) => {
                let trace = b.trace.take()?;
                let (dx, g) = sca_backward(&trace, &b.params, dy.data());
                for ((_, acc), (_, add)) in b.grads.fields_mut().into_iter().zip(g.fields()) {
                    acc.iter_mut().zip(add.iter()).for_each(|(a, v)| *a += v);
                }
                dx
            }
            AttentionBlock::Se(b) => {
                let trace = b.trace.take()?;
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let weights = SeWeights { w1: b.w1.data(), b1: b.b1.data(), w2: b.w2.data(), b2: b.b2.data() };
                let [g1, g2, g3, g4] = &mut b.grads;
                let grads = SeGrads { w1: g1.data_mut(), b1: g2.data_mut(), w2: g3.data_mut(), b2: g4.data_mut() };
                se_backward(&trace, n, c, h * w, b.hidden, &weights, dy.data(), grads)
            }
        };
        Tensor::new(shape, dx).ok()
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu(Relu),
    MaxPool(MaxPool2d),
    GlobalAvgPool(GlobalAvgPool),
    Linear(Linear),
    Residual(ResidualBlock),
    Attention(Attention),
}

/// A layer with a graph-unique id.
#[derive(Clone, Debug)]
pub struct Node {
    pub id: String,
    pub layer: Layer,
}

impl Node {
    pub fn new(id: impl Into<String>, layer: Layer) -> Self {
        Self { id: id.into(), layer }
    }

    pub fn forward(&mut self, x: Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        let train = ctx.train;
        let out = match &mut self.layer {
            Layer::Conv(l) => l.forward(x, train),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::Relu(l) => Ok(l.forward(x, train)),
            Layer::MaxPool(l) => l.forward(x, train),
            Layer::GlobalAvgPool(l) => l.forward(x, train),
            Layer::Linear(l) => l.forward(x, train),
            Layer::Residual(l) => l.forward(x, ctx),
            Layer::Attention(l) => l.forward(x, ctx),
        };
        out.map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("{}: {m}", self.id)),
            other => other,
        })
    }

    pub fn backward(&mut self, dy: Tensor) -> Result<Tensor> {
        let out = match &mut self.layer {
            Layer::Conv(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::MaxPool(l) => l.backward(dy),
            Layer::GlobalAvgPool(l) => l.backward(dy),
            Layer::Linear(l) => l.backward(dy),
            Layer::Residual(l) => return l.backward(dy),
            Layer::Attention(l) => l.backward(dy),
        };
        out.ok_or_else(|| missing_cache(&self.id))
    }

    /// Output shape for an input of shape `s`, without running the layer.
    pub fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        let rank4 = |what: &str| {
            if s.len() == 4 {
                Ok(())
            } else {
                Err(shape_err(format!("{}: {what} needs a rank-4 input, got {s:?}", self.id)))
            }
        };
        match &self.layer {
            Layer::Conv(l) => l.out_shape(s),
            Layer::BatchNorm(l) => {
                rank4("batchnorm")?;
                if s[1] != l.channels {
                    return Err(shape_err(format!("{}: batchnorm over {} channels got {s:?}", self.id, l.channels)));
                }
                Ok(s.to_vec())
            }
            Layer::Relu(_) => Ok(s.to_vec()),
            Layer::MaxPool(l) => l.out_shape(s),
            Layer::GlobalAvgPool(_) => {
                rank4("global pool")?;
                Ok(vec![s[0], s[1], 1, 1])
            }
            Layer::Linear(l) => l.out_shape(s),
            Layer::Residual(block) => {
                rank4("residual block")?;
                let mut h = s.to_vec();
                for node in &block.branch {
                    h = node.out_shape(&h)?;
                }
                let short = block.shortcut.out_shape(s);
                if h != short {
                    return Err(shape_err(format!("{}: branch {h:?} vs shortcut {short:?}", self.id)));
                }
                Ok(h)
            }
            Layer::Attention(l) => {
                rank4("attention")?;
                if s[1] != l.channels {
                    return Err(shape_err(format!("{}: attention over {} channels got {s:?}", self.id, l.channels)));
                }
                Ok(s.to_vec())
            }
        }
    }

    /// Learnable parameters with their gradients.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        let id = self.id.clone();
        let mut emit = |name: &str, v: &mut [f32], g: &mut [f32]| f(&format!("{id}.{name}"), v, g);
        match &mut self.layer {
            Layer::Conv(l) => {
                emit("weight", l.weight.data_mut(), l.grad_weight.data_mut());
                if let (Some(b), Some(g)) = (l.bias.as_mut(), l.grad_bias.as_mut()) {
                    emit("bias", b.data_mut(), g.data_mut());
                }
            }
            Layer::BatchNorm(l) => {
                emit("gamma", l.gamma.data_mut(), l.grad_gamma.data_mut());
                emit("beta", l.beta.data_mut(), l.grad_beta.data_mut());
            }
            Layer::Linear(l) => {
                emit("weight", l.weight.data_mut(), l.grad_weight.data_mut());
                if let (Some(b), Some(g)) = (l.bias.as_mut(), l.grad_bias.as_mut()) {
                    emit("bias", b.data_mut(), g.data_mut());
                }
            }
            Layer::Attention(a) => match &mut a.block {
                AttentionBlock::Sca(b) => {
                    for ((name, v), (_, g)) in b.params.fields_mut().into_iter().zip(b.grads.fields_mut()) {
                        emit(name, v, g);
                    }
                }
                AttentionBlock::Se(b) => {
                    let [g1, g2, g3, g4] = &mut b.grads;
                    emit("fc1_weight", b.w1.data_mut(), g1.data_mut());
                    emit("fc1_bias", b.b1.data_mut(), g2.data_mut());
                    emit("fc2_weight", b.w2.data_mut(), g3.data_mut());
                    emit("fc2_bias", b.b2.data_mut(), g4.data_mut());
                }
            },
            Layer::Residual(block) => {
                for node in &mut block.branch {
                    node.visit_params(f);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    /// Every stored tensor (parameters and BN running statistics) by
    /// qualified name.
    pub fn collect_tensors(&self, out: &mut Vec<(String, Tensor)>) {
        let id = &self.id;
        let mut push = |name: &str, t: &Tensor| out.push((format!("{id}.{name}"), t.clone()));
        match &self.layer {
            Layer::Conv(l) => {
                push("weight", &l.weight);
                if let Some(b) = &l.bias {
                    push("bias", b);
                }
            }
            Layer::BatchNorm(l) => {
                push("gamma", &l.gamma);
                push("beta", &l.beta);
                push("running_mean", &l.running_mean);
                push("running_var", &l.running_var);
            }
            Layer::Linear(l) => {
                push("weight", &l.weight);
                if let Some(b) = &l.bias {
                    push("bias", b);
                }
            }
            Layer::Attention(a) => match &a.block {
                AttentionBlock::Sca(b) => {
                    for (name, v) in b.params.fields() {
                        push(name, &Tensor::new(vec![v.len()], v.clone()).expect("1-d"));
                    }
                }
                AttentionBlock::Se(b) => {
                    push("fc1_weight", &b.w1);
                    push("fc1_bias", &b.b1);
                    push("fc2_weight", &b.w2);
                    push("fc2_bias", &b.b2);
                }
            },
            Layer::Residual(block) => {
                for node in &block.branch {
                    node.collect_tensors(out);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    /// Mutable access to the tensor slot behind a qualified name.
    pub fn tensor_slot(&mut self, name: &str) -> Option<TensorSlot<'_>> {
        if matches!(self.layer, Layer::Residual(_)) {
            let Layer::Residual(block) = &mut self.layer else { unreachable!() };
            return block.branch.iter_mut().find_map(|n| n.tensor_slot(name));
        }
        let local = name.strip_prefix(self.id.as_str())?.strip_prefix('.')?;
        match (&mut self.layer, local) {
            (Layer::Conv(l), "weight") => Some(TensorSlot::Dense(&mut l.weight)),
            (Layer::Conv(l), "bias") => l.bias.as_mut().map(TensorSlot::Dense),
            (Layer::BatchNorm(l), "gamma") => Some(TensorSlot::Dense(&mut l.gamma)),
            (Layer::BatchNorm(l), "beta") => Some(TensorSlot::Dense(&mut l.beta)),
            (Layer::BatchNorm(l), "running_mean") => Some(TensorSlot::Dense(&mut l.running_mean)),
            (Layer::BatchNorm(l), "running_var") => Some(TensorSlot::Dense(&mut l.running_var)),
            (Layer::Linear(l), "weight") => Some(TensorSlot::Dense(&mut l.weight)),
            (Layer::Linear(l), "bias") => l.bias.as_mut().map(TensorSlot::Dense),
            (Layer::Attention(a), local) => match &mut a.block {
                AttentionBlock::Sca(b) => {
                    b.params.fields_mut().into_iter().find(|(n, _)| *n == local).map(|(_, v)| TensorSlot::Vector(v))
                }
                AttentionBlock::Se(b) => match local {
                    "fc1_weight" => Some(TensorSlot::Dense(&mut b.w1)),
                    "fc1_bias" => Some(TensorSlot::Dense(&mut b.b1)),
                    "fc2_weight" => Some(TensorSlot::Dense(&mut b.w2)),
                    "fc2_bias" => Some(TensorSlot::Dense(&mut b.b2)),
                    _ => None,
                },
            },
            _ => None,
        }
    }

    pub fn clear_cache(&mut self) {
        match &mut self.layer {
            Layer::Conv(l) => l.cache = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Relu(l) => l.cache = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::GlobalAvgPool(l) => l.cache = None,
            Layer::Linear(l) => l.cache = None,
            Layer::Residual(b) => {
                b.in_shape = None;
                b.relu.cache = None;
                b.branch.iter_mut().for_each(Node::clear_cache);
            }
            Layer::Attention(a) => match &mut a.block {
                AttentionBlock::Sca(b) => b.trace = None,
                AttentionBlock::Se(b) => b.trace = None,
            },
        }
    }
}

/// Storage behind a named tensor: a shaped tensor or a bare attention vector.
pub enum TensorSlot<'a> {
    Dense(&'a mut Tensor),
    Vector(&'a mut Vec<f32>),
}

impl TensorSlot<'_> {
    pub fn assign(self, src: &Tensor) -> Result<()> {
        match self {
            TensorSlot::Dense(t) => {
                if t.shape() != src.shape() {
                    return Err(shape_err(format!("tensor {:?} cannot take {:?}", t.shape(), src.shape())));
                }
                t.data_mut().copy_from_slice(src.data());
            }
            TensorSlot::Vector(v) => {
                if v.len() != src.len() {
                    return Err(shape_err(format!("vector of {} cannot take {:?}", v.len(), src.shape())));
                }
                v.copy_from_slice(src.data());
            }
        }
        Ok(())
    }
}
