//! Convolutional building blocks and the encoder / bottleneck / decoder /
//! classifier assemblies.
//!
//! Layers own their tensors and never hold graph state. A forward pass binds
//! parameters into a [`Ctx`] (as trainable leaves or constants); train-mode
//! batch norm records its observed moments in the context instead of
//! mutating the layer, and [`apply_bn_updates`] folds them into the running
//! statistics afterwards.

use std::collections::HashMap;

use crate::autodiff::{BatchMoments, BnStats, Gradients, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Visits every tensor of a module (parameters and running statistics) by
/// its full dotted name.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// True for running-statistics buffers, which are never trained.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics receive a momentum update.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics without touching running statistics.
    BatchOnly,
}

/// How one unit (layer group) takes part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitMode {
    pub trainable: bool,
    pub bn: BnMode,
}

impl UnitMode {
    pub const TRAIN: Self = Self {
        trainable: true,
        bn: BnMode::Train,
    };
    pub const FROZEN: Self = Self {
        trainable: false,
        bn: BnMode::Eval,
    };
    pub const BATCH_STATS: Self = Self {
        trainable: false,
        bn: BnMode::BatchOnly,
    };
}

/// Forward-pass context: the graph plus the parameters bound as trainable
/// and the batch-norm moments observed along the way.
pub struct Ctx {
    pub graph: Graph,
    bound: Vec<(String, Var)>,
    bn_updates: Vec<(String, BatchMoments)>,
}

impl Default for Ctx {
    fn default() -> Self {
        Self::new()
    }
}

impl Ctx {
    pub fn new() -> Self {
        Self {
            graph: Graph::new(),
            bound: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if trainable {
            let v = self.graph.param(value.clone());
            self.bound.push((name.to_string(), v));
            v
        } else {
            self.graph.constant(value.clone())
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    /// Names of parameters bound as trainable, in binding order.
    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.bound.iter().map(|(n, _)| n.as_str())
    }

    pub fn bn_updates(&self) -> &[(String, BatchMoments)] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchMoments)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Runs backward from `loss` and collects gradients of every trainable
    /// binding, summed over repeated bindings of the same name.
    pub fn gradients(&self, loss: Var) -> Result<HashMap<String, Tensor>> {
        let grads: Gradients = self.graph.backward(loss)?;
        let mut out: HashMap<String, Tensor> = HashMap::new();
        for (name, v) in &self.bound {
            let g = grads.get(*v).expect("trainable leaf has a gradient");
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(out)
    }
}

/// Folds recorded batch moments into the running statistics of `module`.
pub fn apply_bn_updates(
    module: &mut dyn Module,
    updates: &[(String, BatchMoments)],
    momentum: f32,
) {
    if updates.is_empty() {
        return;
    }
    let mut by_layer: HashMap<&str, Vec<&BatchMoments>> = HashMap::new();
    for (name, m) in updates {
        by_layer.entry(name.as_str()).or_default().push(m);
    }
    let m = momentum as f64;
    module.visit_mut(&mut |name, t| {
        let (layer, which) = match name.rsplit_once('.') {
            Some(p) => p,
            None => return,
        };
        let Some(list) = by_layer.get(layer) else {
            return;
        };
        for mo in list {
            let d = t.data_mut();
            match which {
                "running_mean" => {
                    for (r, &b) in d.iter_mut().zip(&mo.mean) {
                        *r = ((1.0 - m) * *r as f64 + m * b) as f32;
                    }
                }
                "running_var" => {
                    let unbias = mo.count as f64 / (mo.count as f64 - 1.0).max(1.0);
                    for (r, &b) in d.iter_mut().zip(&mo.var) {
                        *r = ((1.0 - m) * *r as f64 + m * b * unbias) as f32;
                    }
                }
                _ => {}
            }
        }
    });
}

fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    rng.normal(shape, 0.0, (2.0 / fan_in as f64).sqrt())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    /// `[out_ch, in_ch, kh, kw]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// "Same"-padded square convolution with He-normal weights.
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(invalid("conv2d", "kernel size must be odd"));
        }
        Ok(Self {
            name: name.to_string(),
            weight: he_normal(rng, &[cout, cin, k, k], cin * k * k)?,
            bias: if bias {
                Some(Tensor::zeros(&[cout])?)
            } else {
                None
            },
            stride,
            padding: (k - 1) / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, trainable: bool) -> Result<Var> {
        let xs = ctx.graph.shape(x);
        if xs.len() != 4 || xs[1] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let w = ctx.bind(&format!("{}.weight", self.name), &self.weight, trainable);
        let b = self
            .bias
            .as_ref()
            .map(|b| ctx.bind(&format!("{}.bias", self.name), b, trainable));
        ctx.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.weight", self.name), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize, eps: f32) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(invalid("batchnorm", "eps must be > 0"));
        }
        Ok(Self {
            name: name.to_string(),
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            eps,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mode: UnitMode) -> Result<Var> {
        let g = ctx.bind(&format!("{}.gamma", self.name), &self.gamma, mode.trainable);
        let b = ctx.bind(&format!("{}.beta", self.name), &self.beta, mode.trainable);
        let eps = self.eps as f64;
        let stats = match mode.bn {
            BnMode::Eval => BnStats::Running {
                mean: self.running_mean.data(),
                var: self.running_var.data(),
                eps,
            },
            BnMode::Train | BnMode::BatchOnly => BnStats::Batch { eps },
        };
        let (y, moments) = ctx.graph.batchnorm(x, g, b, stats)?;
        if mode.bn == BnMode::Train {
            if let Some(m) = moments {
                ctx.bn_updates.push((self.name.clone(), m));
            }
        }
        Ok(y)
    }
}

impl Module for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
        f(&format!("{}.running_mean", self.name), &self.running_mean);
        f(&format!("{}.running_var", self.name), &self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
        f(
            &format!("{}.running_mean", self.name),
            &mut self.running_mean,
        );
        f(&format!("{}.running_var", self.name), &mut self.running_var);
    }
}

/// `x[n,in] * weight[in,out] + bias`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            name: name.to_string(),
            weight: rng.uniform(&[fan_in, fan_out], -bound, bound)?,
            bias: Tensor::zeros(&[fan_out])?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, trainable: bool) -> Result<Var> {
        let w = ctx.bind(&format!("{}.weight", self.name), &self.weight, trainable);
        let b = ctx.bind(&format!("{}.bias", self.name), &self.bias, trainable);
        ctx.graph.linear(x, w, b)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

/// conv3x3(stride) - BN - ReLU - conv3x3 - BN, plus identity or projection
/// shortcut, then ReLU.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResBlock {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        eps: f32,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(
                    &format!("{name}.shortcut.conv"),
                    cin,
                    cout,
                    1,
                    stride,
                    false,
                    rng,
                )?,
                BatchNorm::new(&format!("{name}.shortcut.bn"), cout, eps)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, false, rng)?,
            bn1: BatchNorm::new(&format!("{name}.bn1"), cout, eps)?,
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, false, rng)?,
            bn2: BatchNorm::new(&format!("{name}.bn2"), cout, eps)?,
            shortcut,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mode: UnitMode) -> Result<Var> {
        let h = self.conv1.forward(ctx, x, mode.trainable)?;
        let h = self.bn1.forward(ctx, h, mode)?;
        let h = ctx.graph.relu(h);
        let h = self.conv2.forward(ctx, h, mode.trainable)?;
        let h = self.bn2.forward(ctx, h, mode)?;
        let s = match &self.shortcut {
            Some((c, bn)) => {
                let s = c.forward(ctx, x, mode.trainable)?;
                bn.forward(ctx, s, mode)?
            }
            None => x,
        };
        let sum = ctx.graph.add(h, s)?;
        Ok(ctx.graph.relu(sum))
    }
}

impl Module for ResBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((c, b)) = &self.shortcut {
            c.visit(f);
            b.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

/// Backbone dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneDims {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Output channels of each encoder block; its length is the depth `L`.
    pub widths: Vec<usize>,
    pub image_size: usize,
    pub classes: usize,
    pub bn_eps: f32,
}

impl Default for BackboneDims {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            widths: vec![32, 64, 128],
            image_size: 32,
            classes: 4,
            bn_eps: 1e-5,
        }
    }
}

impl BackboneDims {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty()
            || self.widths.contains(&0)
            || self.stem_channels == 0
            || self.classes < 2
        {
            return Err(invalid(
                "backbone",
                "widths, stem and classes must be positive (classes >= 2)",
            ));
        }
        if !self.image_size.is_multiple_of(1 << self.depth()) {
            return Err(invalid(
                "backbone",
                format!(
                    "image size {} not divisible by 2^{}",
                    self.image_size,
                    self.depth()
                ),
            ));
        }
        Ok(())
    }
}

/// Ordered per-layer features `f^1..f^L`.
pub type FeaturePyramid = Vec<Var>;

/// Stem conv followed by `L` stride-2 residual blocks. Block `l` halves the
/// spatial size and emits feature `f^l`. The stem is adapted together with
/// block 1.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<ResBlock>,
}

impl Encoder {
    pub fn new(name: &str, dims: &BackboneDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let stem = Conv2d::new(
            &format!("{name}.stem.conv"),
            dims.in_channels,
            dims.stem_channels,
            3,
            1,
            false,
            rng,
        )?;
        let stem_bn = BatchNorm::new(&format!("{name}.stem.bn"), dims.stem_channels, dims.bn_eps)?;
        let mut blocks = Vec::with_capacity(dims.depth());
        let mut cin = dims.stem_channels;
        for (i, &w) in dims.widths.iter().enumerate() {
            blocks.push(ResBlock::new(
                &format!("{name}.block{}", i + 1),
                cin,
                w,
                2,
                dims.bn_eps,
                rng,
            )?);
            cin = w;
        }
        Ok(Self {
            stem,
            stem_bn,
            blocks,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// `modes[l]` governs block `l` (and the stem for `l == 0`).
    pub fn forward(&self, ctx: &mut Ctx, x: Var, modes: &[UnitMode]) -> Result<FeaturePyramid> {
        if modes.len() != self.depth() {
            return Err(invalid(
                "encoder",
                format!("{} unit modes for {} blocks", modes.len(), self.depth()),
            ));
        }
        let s = ctx.graph.shape(x).to_vec();
        let div = 1 << self.depth();
        if s.len() != 4 || !s[2].is_multiple_of(div) || !s[3].is_multiple_of(div) {
            return Err(invalid(
                "encoder",
                format!("input {s:?} spatial size not divisible by {div}"),
            ));
        }
        let h = self.stem.forward(ctx, x, modes[0].trainable)?;
        let h = self.stem_bn.forward(ctx, h, modes[0])?;
        let mut h = ctx.graph.relu(h);
        let mut out = Vec::with_capacity(self.depth());
        for (b, &m) in self.blocks.iter().zip(modes) {
            h = b.forward(ctx, h, m)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Same mode for every unit.
    pub fn forward_uniform(&self, ctx: &mut Ctx, x: Var, mode: UnitMode) -> Result<FeaturePyramid> {
        self.forward(ctx, x, &vec![mode; self.depth()])
    }

    /// Visits the tensors belonging to unit `l` (block `l`, plus the stem for
    /// `l == 0`).
    pub fn visit_unit(&self, l: usize, f: &mut dyn FnMut(&str, &Tensor)) {
        if l == 0 {
            self.stem.visit(f);
            self.stem_bn.visit(f);
        }
        self.blocks[l].visit(f);
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit(f);
        self.stem_bn.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut(f);
        self.stem_bn.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

/// One residual block on `f^L`, shape-preserving.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub block: ResBlock,
}

impl Bottleneck {
    pub fn new(name: &str, dims: &BackboneDims, rng: &mut Rng) -> Result<Self> {
        let c = dims.feature_dim();
        Ok(Self {
            block: ResBlock::new(&format!("{name}.block"), c, c, 1, dims.bn_eps, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mode: UnitMode) -> Result<Var> {
        self.block.forward(ctx, x, mode)
    }
}

impl Module for Bottleneck {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.block.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.block.visit_mut(f);
    }
}

/// Mirror of the encoder. Stage 1 works at the resolution of `f^L`; each
/// later stage upsamples 2x (nearest) and maps to the channel count of the
/// next shallower encoder feature.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<ResBlock>,
}

impl Decoder {
    pub fn new(name: &str, dims: &BackboneDims, rng: &mut Rng) -> Result<Self> {
        let l = dims.depth();
        let mut stages = Vec::with_capacity(l);
        let mut cin = dims.feature_dim();
        for s in 0..l {
            let cout = dims.widths[l - 1 - s];
            stages.push(ResBlock::new(
                &format!("{name}.stage{}", s + 1),
                cin,
                cout,
                1,
                dims.bn_eps,
                rng,
            )?);
            cin = cout;
        }
        Ok(Self { stages })
    }

    /// Returns decoder features reordered so index `l` aligns with `f^l`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, mode: UnitMode) -> Result<FeaturePyramid> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for (s, st) in self.stages.iter().enumerate() {
            if s > 0 {
                h = ctx.graph.upsample2x(h)?;
            }
            h = st.forward(ctx, h, mode)?;
            out.push(h);
        }
        out.reverse();
        Ok(out)
    }
}

impl Module for Decoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for s in &self.stages {
            s.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for s in &mut self.stages {
            s.visit_mut(f);
        }
    }
}

/// Global average pool over `f^L` followed by a linear layer to class logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc: Linear,
}

impl ClassifierHead {
    pub fn new(name: &str, dims: &BackboneDims, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(&format!("{name}.fc"), dims.feature_dim(), dims.classes, rng)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.fc.weight.shape()[1]
    }

    pub fn forward(&self, ctx: &mut Ctx, feat: Var, trainable: bool) -> Result<Var> {
        let s = ctx.graph.shape(feat);
        if s.len() != 4 || s[1] != self.fc.weight.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "classify",
                left: s.to_vec(),
                right: self.fc.weight.shape().to_vec(),
            });
        }
        let pooled = ctx.graph.global_avgpool(feat)?;
        self.fc.forward(ctx, pooled, trainable)
    }
}

impl Module for ClassifierHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc.visit_mut(f);
    }
}

/// Copies every tensor into a name-keyed map.
pub fn collect_tensors(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

/// Overwrites tensors of `m` from a name-keyed source. Every tensor of `m`
/// must be present with a matching shape.
pub fn load_tensors(m: &mut dyn Module, src: &HashMap<String, Tensor>) -> Result<()> {
    let mut err = None;
    m.visit_mut(&mut |n, t| {
        if err.is_some() {
            return;
        }
        match src.get(n) {
            Some(s) if s.shape() == t.shape() => *t = s.clone(),
            Some(s) => {
                err = Some(Error::ShapeMismatch {
                    op: "load_tensors",
                    left: t.shape().to_vec(),
                    right: s.shape().to_vec(),
                })
            }
            None => err = Some(Error::UnknownParameter(n.to_string())),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Applies `opt` to every tensor of `m` that has a gradient.
pub fn apply_gradients(
    m: &mut dyn Module,
    grads: &HashMap<String, Tensor>,
    opt: &mut crate::autodiff::Sgd,
) -> Result<()> {
    let mut err = None;
    m.visit_mut(&mut |n, t| {
        if let Some(g) = grads.get(n) {
            if let Err(e) = opt.update(n, t, g) {
                err.get_or_insert(e);
            }
        }
    });
    err.map_or(Ok(()), Err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims_small() -> BackboneDims {
        BackboneDims {
            stem_channels: 4,
            widths: vec![4, 8, 8],
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn conv_identity_and_bias() {
        let mut rng = Rng::new(0);
        let mut c = Conv2d::new("c", 2, 2, 1, 1, true, &mut rng).unwrap();
        c.weight = Tensor::new(&[2, 2, 1, 1], vec![1., 0., 0., 1.]).unwrap();
        let x = rng.normal::<f32>(&[1, 2, 3, 3], 0.0, 1.0).unwrap();
        let mut ctx = Ctx::new();
        let xv = ctx.input(x.clone());
        let y = c.forward(&mut ctx, xv, false).unwrap();
        assert_eq!(ctx.graph.value(y), &x);

        c.bias = Some(Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        let z = ctx.input(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
        let y = c.forward(&mut ctx, z, false).unwrap();
        let d = ctx.graph.value(y).data();
        assert!(d[..9].iter().all(|&v| v == 0.5));
        assert!(d[9..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn conv_sliding_sum() {
        let mut rng = Rng::new(0);
        let mut c = Conv2d::new("c", 1, 1, 3, 1, true, &mut rng).unwrap();
        c.weight = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let mut ctx = Ctx::new();
        let x = ctx.input(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let y = c.forward(&mut ctx, x, false).unwrap();
        assert_eq!(
            ctx.graph.value(y).data(),
            &[4., 6., 4., 6., 9., 6., 4., 6., 4.]
        );
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut rng = Rng::new(0);
        let c = Conv2d::new("c", 3, 2, 3, 1, false, &mut rng).unwrap();
        let mut ctx = Ctx::new();
        let x = ctx.input(Tensor::ones(&[1, 2, 4, 4]).unwrap());
        assert!(c.forward(&mut ctx, x, false).is_err());
    }

    #[test]
    fn batchnorm_modes() {
        let bn = BatchNorm::new("bn", 2, 1e-5).unwrap();
        // constant per channel -> zeros in train mode
        let x = Tensor::new(&[2, 2, 1, 2], vec![3., 3., 7., 7., 3., 3., 7., 7.]).unwrap();
        let mut ctx = Ctx::new();
        let xv = ctx.input(x.clone());
        let y = bn.forward(&mut ctx, xv, UnitMode::TRAIN).unwrap();
        assert!(ctx.graph.value(y).data().iter().all(|v| v.abs() < 1e-6));
        assert_eq!(ctx.bn_updates().len(), 1);

        // eval with (0, 1) running stats ~ identity
        let mut ctx = Ctx::new();
        let xv = ctx.input(x.clone());
        let y = bn.forward(&mut ctx, xv, UnitMode::FROZEN).unwrap();
        for (a, b) in ctx.graph.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
        assert!(ctx.bn_updates().is_empty());

        // batch of one in train mode is an error
        let mut ctx = Ctx::new();
        let one = ctx.input(Tensor::ones(&[1, 2, 2, 2]).unwrap());
        assert!(bn.forward(&mut ctx, one, UnitMode::TRAIN).is_err());
    }

    #[test]
    fn batchnorm_train_output_statistics() {
        let mut rng = Rng::new(3);
        let bn = BatchNorm::new("bn", 3, 1e-5).unwrap();
        let x = rng.normal::<f32>(&[8, 3, 4, 4], 2.0, 3.0).unwrap();
        let mut ctx = Ctx::new();
        let xv = ctx.input(x);
        let y = bn.forward(&mut ctx, xv, UnitMode::TRAIN).unwrap();
        let yv = ctx.graph.value(y);
        let (mean, var) = crate::kernels::channel_stats(yv.data(), 8, 3, 16);
        for c in 0..3 {
            assert!(mean[c].abs() <= 1e-5);
            // var(xhat) = var / (var + eps)
            assert!((var[c] - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn running_stats_update() {
        let mut bn = BatchNorm::new("bn", 1, 1e-5).unwrap();
        let mut ctx = Ctx::new();
        let x = ctx.input(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut ctx, x, UnitMode::TRAIN).unwrap();
        let ups = ctx.take_bn_updates();
        apply_bn_updates(&mut bn, &ups, 0.1);
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-6);
        // unbiased var = 2, 0.9 * 1 + 0.1 * 2
        assert!((bn.running_var.data()[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn encoder_and_decoder_shapes() {
        let dims = dims_small();
        let mut rng = Rng::new(1);
        let enc = Encoder::new("e", &dims, &mut rng).unwrap();
        let bott = Bottleneck::new("b", &dims, &mut rng).unwrap();
        let dec = Decoder::new("d", &dims, &mut rng).unwrap();
        let mut ctx = Ctx::new();
        let x = ctx.input(rng.uniform(&[2, 3, 32, 32], 0.0, 1.0).unwrap());
        let pyr = enc.forward_uniform(&mut ctx, x, UnitMode::FROZEN).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.iter().map(|&v| ctx.graph.shape(v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 4, 16, 16], vec![2, 8, 8, 8], vec![2, 8, 4, 4]]
        );
        let b = bott.forward(&mut ctx, pyr[2], UnitMode::FROZEN).unwrap();
        assert_eq!(ctx.graph.shape(b), ctx.graph.shape(pyr[2]));
        let dp = dec.forward(&mut ctx, b, UnitMode::FROZEN).unwrap();
        for (e, d) in pyr.iter().zip(&dp) {
            assert_eq!(ctx.graph.shape(*e), ctx.graph.shape(*d));
        }
    }

    #[test]
    fn encoder_rejects_indivisible_input() {
        let dims = dims_small();
        let mut rng = Rng::new(1);
        let enc = Encoder::new("e", &dims, &mut rng).unwrap();
        let mut ctx = Ctx::new();
        let x = ctx.input(Tensor::zeros(&[1, 3, 20, 20]).unwrap());
        assert!(enc.forward_uniform(&mut ctx, x, UnitMode::FROZEN).is_err());
    }

    #[test]
    fn head_zero_weights_and_linearity() {
        let dims = dims_small();
        let mut rng = Rng::new(2);
        let mut head = ClassifierHead::new("h", &dims, &mut rng).unwrap();
        let f = rng.normal::<f32>(&[1, 8, 4, 4], 0.0, 1.0).unwrap();
        let mut ctx = Ctx::new();
        let fv = ctx.input(f.clone());
        let y1 = head.forward(&mut ctx, fv, false).unwrap();
        let f2 = ctx.input(f.scale(2.0));
        let y2 = head.forward(&mut ctx, f2, false).unwrap();
        for (a, b) in ctx
            .graph
            .value(y1)
            .data()
            .iter()
            .zip(ctx.graph.value(y2).data())
        {
            assert!((2.0 * a - b).abs() < 1e-5);
        }
        head.fc.weight = head.fc.weight.zeros_like();
        let y = head.forward(&mut ctx, fv, false).unwrap();
        assert!(ctx.graph.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_and_collect_roundtrip() {
        let dims = dims_small();
        let mut rng = Rng::new(4);
        let a = Encoder::new("e", &dims, &mut rng).unwrap();
        let mut b = Encoder::new("e", &dims, &mut rng).unwrap();
        let map: HashMap<_, _> = collect_tensors(&a).into_iter().collect();
        load_tensors(&mut b, &map).unwrap();
        let (ta, tb) = (collect_tensors(&a), collect_tensors(&b));
        assert!(ta
            .iter()
            .zip(&tb)
            .all(|((na, x), (nb, y))| na == nb && x.bitwise_eq(y)));
    }
}
