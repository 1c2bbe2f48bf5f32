//! The cross-reconstruction model: a frozen encoder, two trainable encoders
//! with their classifier heads, and a shared bottleneck + decoder.
//!
//! Reconstruction streams (x' is the horizontally flipped batch):
//!
//! | stream | decoded from | compared against |
//! |--------|--------------|------------------|
//! | s1     | enc1(x)      | frozen(x)        |
//! | s2     | frozen(x)    | enc1(x)          |
//! | s3     | enc2(x')     | frozen(x')       |
//! | s4     | frozen(x')   | enc2(x')         |
//!
//! Every stream is a global cosine loss with a stop-gradient on the compared
//! (encoder) side, so gradients only reach an encoder through the decoder.
//!
//! Phase semantics: in `Train` everything except the frozen encoder is
//! updated; in `Adapt` only the first `adapt_depth` units of the trainable
//! encoders change, and they are restored after every batch; in `Infer`
//! nothing changes.

use std::collections::HashMap;
use std::fmt;

use crate::autodiff::{Sgd, Var};
use crate::data::{hflip, Batch};
use crate::error::{invalid, Error, Result};
use crate::losses::{self, KlDirection, LossWeights};
use crate::nn::{
    self, apply_bn_updates, apply_gradients, BackboneDims, Bottleneck, ClassifierHead, Ctx,
    Decoder, Encoder, FeaturePyramid, Module, UnitMode,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Adapt,
    Infer,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Adapt => "adapt",
            Phase::Infer => "infer",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn expect_phase(actual: Phase, expected: Phase) -> Result<()> {
    if actual != expected {
        return Err(Error::PhaseMismatch {
            expected: expected.name(),
            actual: actual.name(),
        });
    }
    Ok(())
}

/// An encoder with its own classifier head.
#[derive(Clone, Debug)]
pub struct Branch {
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl Branch {
    /// Encoder tensors are named `{enc}.*`, head tensors `{head}.*`.
    pub fn new(enc: &str, head: &str, dims: &BackboneDims, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(enc, dims, rng)?,
            head: ClassifierHead::new(head, dims, rng)?,
        })
    }

    pub fn logits(
        &self,
        ctx: &mut Ctx,
        x: Var,
        modes: &[UnitMode],
        head_trainable: bool,
    ) -> Result<(FeaturePyramid, Var)> {
        let pyr = self.encoder.forward(ctx, x, modes)?;
        let top = *pyr.last().expect("non-empty pyramid");
        let logits = self.head.forward(ctx, top, head_trainable)?;
        Ok((pyr, logits))
    }
}

impl Module for Branch {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Copies all tensors of `src` into `dst`, mapping the leading name
/// component `from` to `to`.
pub fn copy_renamed(src: &dyn Module, from: &str, dst: &mut dyn Module, to: &str) -> Result<()> {
    let map: HashMap<String, Tensor> = nn::collect_tensors(src)
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix(from).map(|rest| (format!("{to}{rest}"), t)))
        .collect();
    nn::load_tensors(dst, &map)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dims: BackboneDims,
    /// Second encoder on the flipped view plus its head. Off gives the
    /// single-encoder objective (CE + two reconstruction streams).
    pub two_encoders: bool,
    pub weights: LossWeights,
    pub kl_direction: KlDirection,
    pub use_aux: bool,
    pub use_kl: bool,
    pub bn_momentum: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: BackboneDims::default(),
            two_encoders: true,
            weights: LossWeights::default(),
            kl_direction: KlDirection::Symmetric,
            use_aux: true,
            use_kl: true,
            bn_momentum: 0.1,
        }
    }
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f32,
    pub ce1: f32,
    pub ce2: f32,
    pub aux: f32,
    pub kl: f32,
}

/// Encoder features of one batch for both views.
pub struct Views {
    pub frozen: FeaturePyramid,
    pub frozen_flip: FeaturePyramid,
    pub enc1: FeaturePyramid,
    pub enc2: Option<FeaturePyramid>,
}

/// Per-stream loss values and their sum.
pub struct AuxOutput {
    pub loss: Var,
    pub streams: Vec<f32>,
}

/// Class probabilities `[B, C]` with their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn from_probs(probs: Tensor) -> Self {
        let c = probs.shape()[1];
        let labels = probs.data().chunks_exact(c).map(argmax).collect();
        Self { probs, labels }
    }

    pub fn correct(&self, labels: &[usize]) -> usize {
        self.labels
            .iter()
            .zip(labels)
            .filter(|(a, b)| a == b)
            .count()
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Test-time adaptation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOptions {
    pub iterations: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Number of leading encoder units (stem + block 1 count as unit 1)
    /// updated during adaptation.
    pub depth: usize,
    /// Running-statistic momentum of the adapted batch-norm layers; 1
    /// replaces the statistics with those of the test batch.
    pub bn_momentum: f32,
    /// Also compute the auxiliary loss at the adapted weights.
    pub track_aux_after: bool,
    /// Iterations at which to capture pooled `f^L` features of enc1.
    pub feature_iters: Vec<usize>,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            iterations: 20,
            lr: 0.005,
            momentum: 0.0,
            depth: 3,
            bn_momentum: 1.0,
            track_aux_after: true,
            feature_iters: Vec::new(),
        }
    }
}

/// Result of adapting to one batch.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    /// Two-encoder ensemble prediction with the adapted weights.
    pub ensemble: Prediction,
    /// First-encoder prediction with the adapted weights.
    pub single: Prediction,
    /// Auxiliary loss at the initial weights.
    pub aux_before: f32,
    /// Auxiliary loss at the adapted weights, when tracked.
    pub aux_after: Option<f32>,
    pub features: Vec<(usize, Tensor)>,
}

/// Frozen-encoder features and reconstructions of one test batch.
#[derive(Clone, Debug)]
pub struct FrozenCache {
    x: Tensor,
    xf: Tensor,
    views: Vec<(Vec<Tensor>, Vec<Tensor>)>,
}

/// Copies of every tensor that adaptation may change.
#[derive(Clone, Debug)]
pub struct Snapshot {
    enc1: Encoder,
    enc2: Option<Encoder>,
}

#[derive(Clone, Debug)]
pub struct RecTttModel {
    pub cfg: ModelConfig,
    pub frozen: Encoder,
    pub branch1: Branch,
    pub branch2: Option<Branch>,
    pub bottleneck: Bottleneck,
    pub decoder: Decoder,
    phase: Phase,
}

impl Module for RecTttModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.frozen.visit(f);
        self.branch1.visit(f);
        if let Some(b) = &self.branch2 {
            b.visit(f);
        }
        self.bottleneck.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.frozen.visit_mut(f);
        self.branch1.visit_mut(f);
        if let Some(b) = &mut self.branch2 {
            b.visit_mut(f);
        }
        self.bottleneck.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

fn unit_modes(depth: usize, adapted: usize) -> Vec<UnitMode> {
    (0..depth)
        .map(|l| {
            if l < adapted {
                UnitMode::TRAIN
            } else {
                UnitMode::FROZEN
            }
        })
        .collect()
}

impl RecTttModel {
    /// Randomly initialised model. The frozen encoder is only meaningful
    /// after [`Self::from_pretrained`].
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.dims.validate()?;
        let frozen = Encoder::new("frozen", &cfg.dims, rng)?;
        let branch1 = Branch::new("enc1", "head1", &cfg.dims, rng)?;
        let branch2 = if cfg.two_encoders {
            Some(Branch::new("enc2", "head2", &cfg.dims, rng)?)
        } else {
            None
        };
        let bottleneck = Bottleneck::new("bottleneck", &cfg.dims, rng)?;
        let decoder = Decoder::new("decoder", &cfg.dims, rng)?;
        let model = Self {
            cfg,
            frozen,
            branch1,
            branch2,
            bottleneck,
            decoder,
            phase: Phase::Train,
        };
        model.check_mirror()?;
        Ok(model)
    }

    /// Frozen encoder and both trainable branches start from a source
    /// backbone whose tensors are named `{enc}.*` / `{head}.*`.
    pub fn from_pretrained(
        cfg: ModelConfig,
        backbone: &Branch,
        enc: &str,
        head: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut m = Self::new(cfg, rng)?;
        copy_renamed(&backbone.encoder, enc, &mut m.frozen, "frozen")?;
        copy_renamed(&backbone.encoder, enc, &mut m.branch1.encoder, "enc1")?;
        copy_renamed(&backbone.head, head, &mut m.branch1.head, "head1")?;
        if let Some(b2) = &mut m.branch2 {
            copy_renamed(&backbone.encoder, enc, &mut b2.encoder, "enc2")?;
            copy_renamed(&backbone.head, head, &mut b2.head, "head2")?;
        }
        Ok(m)
    }

    /// Decoder stage `l` must produce the shape of encoder feature `f^l`.
    fn check_mirror(&self) -> Result<()> {
        let n = self.cfg.dims.image_size;
        let mut ctx = Ctx::new();
        let x = ctx.input(Tensor::zeros(&[1, self.cfg.dims.in_channels, n, n])?);
        let pyr = self.frozen.forward_uniform(&mut ctx, x, UnitMode::FROZEN)?;
        let b = self.bottleneck.forward(
            &mut ctx,
            *pyr.last().expect("depth >= 1"),
            UnitMode::FROZEN,
        )?;
        let dec = self.decoder.forward(&mut ctx, b, UnitMode::FROZEN)?;
        for (e, d) in pyr.iter().zip(&dec) {
            if ctx.graph.shape(*e) != ctx.graph.shape(*d) {
                return Err(Error::ShapeMismatch {
                    op: "decoder mirror",
                    left: ctx.graph.shape(*e).to_vec(),
                    right: ctx.graph.shape(*d).to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, p: Phase) {
        self.phase = p;
    }

    pub fn depth(&self) -> usize {
        self.cfg.dims.depth()
    }

    /// Runs the frozen encoder on both views and the trainable encoders on
    /// their view (enc1 on x, enc2 on x').
    pub fn encode(&self, ctx: &mut Ctx, x: &Tensor, enc_modes: &[UnitMode]) -> Result<Views> {
        let xf = hflip(x);
        let xv = ctx.input(x.clone());
        let xfv = ctx.input(xf);
        let frozen = self.frozen.forward_uniform(ctx, xv, UnitMode::FROZEN)?;
        let frozen_flip = self.frozen.forward_uniform(ctx, xfv, UnitMode::FROZEN)?;
        let enc1 = self.branch1.encoder.forward(ctx, xv, enc_modes)?;
        let enc2 = match &self.branch2 {
            Some(b) => Some(b.encoder.forward(ctx, xfv, enc_modes)?),
            None => None,
        };
        Ok(Views {
            frozen,
            frozen_flip,
            enc1,
            enc2,
        })
    }

    /// Bottleneck + decoder on the deepest feature of a pyramid.
    pub fn decode(
        &self,
        ctx: &mut Ctx,
        pyr: &FeaturePyramid,
        mode: UnitMode,
    ) -> Result<FeaturePyramid> {
        let top = *pyr.last().expect("non-empty pyramid");
        let b = self.bottleneck.forward(ctx, top, mode)?;
        self.decoder.forward(ctx, b, mode)
    }

    /// Sum of the reconstruction streams for already-encoded views.
    pub fn reconstruct(&self, ctx: &mut Ctx, v: &Views, dec_mode: UnitMode) -> Result<AuxOutput> {
        let mut pairs: Vec<(&FeaturePyramid, &FeaturePyramid)> =
            vec![(&v.enc1, &v.frozen), (&v.frozen, &v.enc1)];
        if let Some(e2) = &v.enc2 {
            pairs.push((e2, &v.frozen_flip));
            pairs.push((&v.frozen_flip, e2));
        }
        let mut terms = Vec::with_capacity(pairs.len());
        for (src, target) in pairs {
            let dec = self.decode(ctx, src, dec_mode)?;
            terms.push(losses::global_cosine_loss(
                &mut ctx.graph,
                target,
                &dec,
                true,
            )?);
        }
        let streams = terms.iter().map(|&t| ctx.graph.value(t).item()).collect();
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = ctx.graph.add(loss, t)?;
        }
        Ok(AuxOutput { loss, streams })
    }

    /// Auxiliary loss on a batch with the given encoder and decoder modes.
    pub fn aux_forward(
        &self,
        ctx: &mut Ctx,
        x: &Tensor,
        enc_modes: &[UnitMode],
        dec_mode: UnitMode,
    ) -> Result<AuxOutput> {
        let v = self.encode(ctx, x, enc_modes)?;
        self.reconstruct(ctx, &v, dec_mode)
    }

    /// One optimisation step of the joint objective.
    pub fn train_step(&mut self, batch: &Batch, opt: &mut Sgd) -> Result<StepLosses> {
        expect_phase(self.phase, Phase::Train)?;
        let mut ctx = Ctx::new();
        let modes = vec![UnitMode::TRAIN; self.depth()];
        let views = self.encode(&mut ctx, &batch.x, &modes)?;
        let top1 = *views.enc1.last().expect("pyramid");
        let logits1 = self.branch1.head.forward(&mut ctx, top1, true)?;
        let ce1 = losses::cross_entropy(&mut ctx.graph, logits1, &batch.labels)?;
        let mut out = StepLosses {
            ce1: ctx.graph.value(ce1).item(),
            ..Default::default()
        };
        let mut ce_terms = vec![ce1];
        let mut kl = None;
        if let (Some(b2), Some(e2)) = (&self.branch2, &views.enc2) {
            let top2 = *e2.last().expect("pyramid");
            let logits2 = b2.head.forward(&mut ctx, top2, true)?;
            let ce2 = losses::cross_entropy(&mut ctx.graph, logits2, &batch.labels)?;
            out.ce2 = ctx.graph.value(ce2).item();
            ce_terms.push(ce2);
            if self.cfg.use_kl {
                let p = ctx.graph.softmax(logits1);
                let q = ctx.graph.softmax(logits2);
                let k = losses::consistency(&mut ctx.graph, p, q, self.cfg.kl_direction)?;
                out.kl = ctx.graph.value(k).item();
                kl = Some(k);
            }
        }
        let aux = if self.cfg.use_aux {
            let a = self.reconstruct(&mut ctx, &views, UnitMode::TRAIN)?;
            out.aux = ctx.graph.value(a.loss).item();
            Some(a.loss)
        } else {
            None
        };
        let total = losses::train_loss(&mut ctx.graph, &ce_terms, aux, kl, self.cfg.weights)?;
        out.total = ctx.graph.value(total).item();
        if !out.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {out:?}")));
        }
        let grads = ctx.gradients(total)?;
        let updates = ctx.take_bn_updates();
        let momentum = self.cfg.bn_momentum;
        apply_gradients(self, &grads, opt)?;
        apply_bn_updates(self, &updates, momentum);
        Ok(out)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            enc1: self.branch1.encoder.clone(),
            enc2: self.branch2.as_ref().map(|b| b.encoder.clone()),
        }
    }

    pub fn restore(&mut self, s: &Snapshot) {
        self.branch1.encoder = s.enc1.clone();
        if let (Some(b), Some(e)) = (&mut self.branch2, &s.enc2) {
            b.encoder = e.clone();
        }
    }

    fn trainable_encoders_mut(&mut self) -> (&mut Encoder, Option<&mut Encoder>) {
        (
            &mut self.branch1.encoder,
            self.branch2.as_mut().map(|b| &mut b.encoder),
        )
    }

    /// Adapts the trainable encoders to one unlabeled batch with the
    /// auxiliary loss only, predicts with the adapted weights, then restores
    /// the weights the call started from.
    pub fn adapt_batch(&mut self, x: &Tensor, opts: &AdaptOptions) -> Result<AdaptOutcome> {
        expect_phase(self.phase, Phase::Adapt)?;
        if x.rank() != 4 {
            return Err(invalid(
                "adapt_batch",
                format!("expected an image batch, got {:?}", x.shape()),
            ));
        }
        if opts.depth == 0 || opts.depth > self.depth() {
            return Err(invalid(
                "adapt_batch",
                format!("adapt depth {} outside 1..={}", opts.depth, self.depth()),
            ));
        }
        let snap = self.snapshot();
        let result = self.adapt_inner(x, opts);
        self.restore(&snap);
        result
    }

    /// Frozen-side features of `x` and `hflip(x)` and their
    /// reconstructions. They do not change while adapting to one batch.
    pub fn frozen_cache(&self, x: &Tensor) -> Result<FrozenCache> {
        let xf = hflip(x);
        let mut ctx = Ctx::new();
        let mut views = Vec::new();
        let inputs: Vec<&Tensor> = if self.branch2.is_some() {
            vec![x, &xf]
        } else {
            vec![x]
        };
        for v in inputs {
            let xv = ctx.input(v.clone());
            let pyr = self
                .frozen
                .forward_uniform(&mut ctx, xv, UnitMode::FROZEN)?;
            let dec = self.decode(&mut ctx, &pyr, UnitMode::FROZEN)?;
            let vals = |p: &FeaturePyramid| p.iter().map(|&v| ctx.graph.value(v).clone()).collect();
            views.push((vals(&pyr), vals(&dec)));
        }
        Ok(FrozenCache {
            x: x.clone(),
            xf,
            views,
        })
    }

    /// One adaptation update of the first `opts.depth` units of the
    /// trainable encoders. Returns the auxiliary loss before the update. Does
    /// not restore anything; [`Self::adapt_batch`] wraps this with the reset.
    pub fn adapt_step(
        &mut self,
        cache: &FrozenCache,
        opts: &AdaptOptions,
        opt: &mut Sgd,
    ) -> Result<f32> {
        expect_phase(self.phase, Phase::Adapt)?;
        let modes = unit_modes(self.depth(), opts.depth);
        let mut ctx = Ctx::new();
        let loss = self.adaptation_loss(&mut ctx, cache, &modes)?;
        let lv = ctx.graph.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite("auxiliary loss during adaptation".into()));
        }
        let grads = ctx.gradients(loss)?;
        let updates = ctx.take_bn_updates();
        let momentum = opts.bn_momentum;
        let (e1, e2) = self.trainable_encoders_mut();
        apply_gradients(e1, &grads, opt)?;
        apply_bn_updates(e1, &updates, momentum);
        if let Some(e2) = e2 {
            apply_gradients(e2, &grads, opt)?;
            apply_bn_updates(e2, &updates, momentum);
        }
        Ok(lv)
    }

    /// Auxiliary loss at the current weights with adaptation-mode units.
    pub fn adaptation_aux(&self, cache: &FrozenCache, depth: usize) -> Result<f32> {
        let modes = unit_modes(self.depth(), depth);
        let mut ctx = Ctx::new();
        let l = self.adaptation_loss(&mut ctx, cache, &modes)?;
        Ok(ctx.graph.value(l).item())
    }

    fn adapt_inner(&mut self, x: &Tensor, opts: &AdaptOptions) -> Result<AdaptOutcome> {
        let cache = self.frozen_cache(x)?;
        let mut opt = Sgd::new(opts.lr, opts.momentum, 0.0);
        let mut aux_before = None;
        let mut features = Vec::new();
        for t in 0..opts.iterations {
            if opts.feature_iters.contains(&t) {
                features.push((t, self.pooled_features(x)?));
            }
            let lv = self.adapt_step(&cache, opts, &mut opt)?;
            aux_before.get_or_insert(lv);
        }
        if opts.feature_iters.contains(&opts.iterations) {
            features.push((opts.iterations, self.pooled_features(x)?));
        }
        let aux_before = match aux_before {
            Some(v) => v,
            None => self.adaptation_aux(&cache, opts.depth)?,
        };
        let ensemble = self.predict_ensemble(x)?;
        let single = self.predict_single(x)?;
        let aux_after = if opts.track_aux_after {
            Some(self.adaptation_aux(&cache, opts.depth)?)
        } else {
            None
        };
        Ok(AdaptOutcome {
            ensemble,
            single,
            aux_before,
            aux_after,
            features,
        })
    }

    /// Auxiliary loss in adaptation mode, reusing cached frozen-side
    /// tensors. Decoder, bottleneck and frozen encoder are constants.
    fn adaptation_loss(
        &self,
        ctx: &mut Ctx,
        cache: &FrozenCache,
        modes: &[UnitMode],
    ) -> Result<Var> {
        let mut branches: Vec<(&Encoder, &Tensor)> = vec![(&self.branch1.encoder, &cache.x)];
        if let Some(b2) = &self.branch2 {
            branches.push((&b2.encoder, &cache.xf));
        }
        let mut total: Option<Var> = None;
        for ((enc, input), (frozen_feats, frozen_dec)) in branches.into_iter().zip(&cache.views) {
            let xv = ctx.input(input.clone());
            let e = enc.forward(ctx, xv, modes)?;
            let target: Vec<Var> = frozen_feats.iter().map(|t| ctx.input(t.clone())).collect();
            let dec = self.decode(ctx, &e, UnitMode::FROZEN)?;
            let s_a = losses::global_cosine_loss(&mut ctx.graph, &target, &dec, true)?;
            let fdec: Vec<Var> = frozen_dec.iter().map(|t| ctx.input(t.clone())).collect();
            let s_b = losses::global_cosine_loss(&mut ctx.graph, &e, &fdec, true)?;
            let pair = ctx.graph.add(s_a, s_b)?;
            total = Some(match total {
                Some(t) => ctx.graph.add(t, pair)?,
                None => pair,
            });
        }
        Ok(total.expect("at least one branch"))
    }

    fn probs(&self, ctx: &mut Ctx, branch: &Branch, x: &Tensor, mode: UnitMode) -> Result<Tensor> {
        let xv = ctx.input(x.clone());
        let modes = vec![mode; self.depth()];
        let (_, logits) = branch.logits(ctx, xv, &modes, false)?;
        let p = ctx.graph.softmax(logits);
        Ok(ctx.graph.value(p).clone())
    }

    /// Average of softmax(head1(enc1(x))) and softmax(head2(enc2(x'))),
    /// with batch norm in the given mode (`Eval` for inference, `BatchOnly`
    /// for test-batch statistics).
    pub fn predict_ensemble_with(&self, x: &Tensor, mode: UnitMode) -> Result<Prediction> {
        let mut ctx = Ctx::new();
        let p1 = self.probs(&mut ctx, &self.branch1, x, mode)?;
        let probs = match &self.branch2 {
            Some(b2) => {
                let p2 = self.probs(&mut ctx, b2, &hflip(x), mode)?;
                p1.add(&p2)?.scale(0.5)
            }
            None => p1,
        };
        Ok(Prediction::from_probs(probs))
    }

    pub fn predict_ensemble(&self, x: &Tensor) -> Result<Prediction> {
        self.predict_ensemble_with(x, UnitMode::FROZEN)
    }

    /// First encoder and head only.
    pub fn predict_single(&self, x: &Tensor) -> Result<Prediction> {
        let mut ctx = Ctx::new();
        Ok(Prediction::from_probs(self.probs(
            &mut ctx,
            &self.branch1,
            x,
            UnitMode::FROZEN,
        )?))
    }

    /// Globally pooled `f^L` of the first encoder, `[B, C_L]`.
    pub fn pooled_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new();
        let xv = ctx.input(x.clone());
        let pyr = self
            .branch1
            .encoder
            .forward_uniform(&mut ctx, xv, UnitMode::FROZEN)?;
        let p = ctx.graph.global_avgpool(*pyr.last().expect("pyramid"))?;
        Ok(ctx.graph.value(p).clone())
    }

    /// Tensor names that may change in the given phase.
    pub fn mutable_names(&self, phase: Phase, adapt_depth: usize) -> Vec<String> {
        let mut out = Vec::new();
        match phase {
            Phase::Infer => {}
            Phase::Train => {
                self.visit(&mut |n, _| {
                    if !n.starts_with("frozen.") {
                        out.push(n.to_string());
                    }
                });
            }
            Phase::Adapt => {
                let mut encs = vec![&self.branch1.encoder];
                if let Some(b) = &self.branch2 {
                    encs.push(&b.encoder);
                }
                for e in encs {
                    for l in 0..adapt_depth.min(e.depth()) {
                        e.visit_unit(l, &mut |n, _| out.push(n.to_string()));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, stack, RenderConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            dims: BackboneDims {
                stem_channels: 4,
                widths: vec![4, 8, 8],
                image_size: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let cfg = RenderConfig {
            image_size: 16,
            ..Default::default()
        };
        let d = gen_dataset(&mut Rng::new(seed), n, &cfg).unwrap();
        stack(&d.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn ensemble_of_disagreeing_heads_is_uniform() {
        let p1 = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let p2 = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let pred = Prediction::from_probs(p1.add(&p2).unwrap().scale(0.5));
        assert_eq!(pred.probs.data(), &[0.5, 0.5]);
        assert_eq!(pred.labels, vec![0]);
    }

    #[test]
    fn phase_guards() {
        let mut m = RecTttModel::new(tiny_cfg(), &mut Rng::new(0)).unwrap();
        let b = batch(4, 1);
        m.set_phase(Phase::Infer);
        assert!(matches!(
            m.train_step(&b, &mut Sgd::plain(0.1)),
            Err(Error::PhaseMismatch { .. })
        ));
        assert!(m.adapt_batch(&b.x, &AdaptOptions::default()).is_err());
    }

    #[test]
    fn aux_loss_in_range() {
        let m = RecTttModel::new(tiny_cfg(), &mut Rng::new(0)).unwrap();
        let b = batch(4, 1);
        let mut ctx = Ctx::new();
        let out = m
            .aux_forward(&mut ctx, &b.x, &[UnitMode::FROZEN; 3], UnitMode::FROZEN)
            .unwrap();
        let v = ctx.graph.value(out.loss).item();
        assert_eq!(out.streams.len(), 4);
        assert!((0.0..=8.0 * 3.0).contains(&v));
    }

    #[test]
    fn zero_lr_step_changes_only_bn_buffers() {
        let mut m = RecTttModel::new(tiny_cfg(), &mut Rng::new(0)).unwrap();
        let before = nn::collect_tensors(&m);
        let l = m.train_step(&batch(4, 1), &mut Sgd::plain(0.0)).unwrap();
        assert!(l.total.is_finite());
        let after = nn::collect_tensors(&m);
        for ((n, a), (_, b)) in before.iter().zip(&after) {
            if !nn::is_buffer(n) {
                assert!(a.bitwise_eq(b), "{n} changed");
            }
        }
    }

    #[test]
    fn zero_iterations_match_source_predictions() {
        let mut m = RecTttModel::new(tiny_cfg(), &mut Rng::new(0)).unwrap();
        let b = batch(4, 2);
        let src = m.predict_ensemble(&b.x).unwrap();
        m.set_phase(Phase::Adapt);
        let opts = AdaptOptions {
            iterations: 0,
            ..Default::default()
        };
        let out = m.adapt_batch(&b.x, &opts).unwrap();
        assert!(out.ensemble.probs.bitwise_eq(&src.probs));
    }

    #[test]
    fn mirror_check_rejects_bad_decoder() {
        let mut m = RecTttModel::new(tiny_cfg(), &mut Rng::new(0)).unwrap();
        m.decoder.stages.pop();
        assert!(m.check_mirror().is_err());
    }
}
