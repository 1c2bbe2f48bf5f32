//! Evaluation routines: source-only, test-batch batch norm (PTBN), the
//! cross-reconstruction method, and a SimSiam-style TTT model.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Sgd, Var};
use crate::data::{hflip, Batch};
use crate::error::{invalid, Error, Result};
use crate::losses::{self, NORM_FLOOR};
use crate::model::{AdaptOptions, Branch, Phase, Prediction, RecTttModel, StepLosses};
use crate::nn::{
    apply_bn_updates, apply_gradients, BackboneDims, BatchNorm, Ctx, Encoder, Linear, Module,
    UnitMode,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Recttt,
    Source,
    Ptbn,
    SimsiamTtt,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Recttt,
        Method::Source,
        Method::Ptbn,
        Method::SimsiamTtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Recttt => "recttt",
            Method::Source => "source",
            Method::Ptbn => "ptbn",
            Method::SimsiamTtt => "simsiam_ttt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid("method", format!("unknown method `{s}`")))
    }
}

/// Counts accumulated over a stream of batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tally {
    pub correct: usize,
    /// First-encoder-only predictions (equal to `correct` when the method
    /// has a single classifier).
    pub single_correct: usize,
    pub total: usize,
    pub aux_before: Vec<f32>,
    pub aux_after: Vec<f32>,
}

impl Tally {
    fn add(&mut self, ens: &Prediction, single: &Prediction, labels: &[usize]) {
        self.correct += ens.correct(labels);
        self.single_correct += single.correct(labels);
        self.total += labels.len();
    }

    /// Percentage in [0, 100].
    pub fn accuracy(&self) -> f64 {
        pct(self.correct, self.total)
    }

    pub fn single_accuracy(&self) -> f64 {
        pct(self.single_correct, self.total)
    }

    pub fn mean_aux_before(&self) -> Option<f64> {
        mean(&self.aux_before)
    }

    pub fn mean_aux_after(&self) -> Option<f64> {
        mean(&self.aux_after)
    }

    /// Fraction of batches whose auxiliary loss went down.
    pub fn aux_descent_fraction(&self) -> Option<f64> {
        if self.aux_after.is_empty() {
            return None;
        }
        let down = self
            .aux_before
            .iter()
            .zip(&self.aux_after)
            .filter(|(b, a)| a < b)
            .count();
        Some(down as f64 / self.aux_after.len() as f64)
    }
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

fn mean(v: &[f32]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64)
}

/// Ensemble predictions with no adaptation and eval-mode batch norm.
pub fn eval_source(model: &RecTttModel, batches: &[Batch]) -> Result<Tally> {
    let mut t = Tally::default();
    for b in batches {
        let ens = model.predict_ensemble(&b.x)?;
        let single = model.predict_single(&b.x)?;
        t.add(&ens, &single, &b.labels);
    }
    Ok(t)
}

/// Predictions normalised with each test batch's own statistics. Running
/// statistics are never read or written.
pub fn eval_ptbn(model: &RecTttModel, batches: &[Batch]) -> Result<Tally> {
    let mut t = Tally::default();
    for b in batches {
        if b.labels.len() < 2 {
            return Err(invalid(
                "eval_ptbn",
                "test batch statistics need at least 2 samples",
            ));
        }
        let ens = model.predict_ensemble_with(&b.x, UnitMode::BATCH_STATS)?;
        let single = {
            let mut ctx = Ctx::new();
            let x = ctx.input(b.x.clone());
            let modes = vec![UnitMode::BATCH_STATS; model.depth()];
            let (_, logits) = model.branch1.logits(&mut ctx, x, &modes, false)?;
            let p = ctx.graph.softmax(logits);
            Prediction::from_probs(ctx.graph.value(p).clone())
        };
        t.add(&ens, &single, &b.labels);
    }
    Ok(t)
}

/// Per-batch adaptation with reset, in stream order.
pub fn eval_recttt(
    model: &mut RecTttModel,
    batches: &[Batch],
    opts: &AdaptOptions,
) -> Result<Tally> {
    let prev = model.phase();
    model.set_phase(Phase::Adapt);
    let mut t = Tally::default();
    let res = (|| {
        for b in batches {
            let out = model.adapt_batch(&b.x, opts)?;
            t.add(&out.ensemble, &out.single, &b.labels);
            t.aux_before.push(out.aux_before);
            if let Some(a) = out.aux_after {
                t.aux_after.push(a);
            }
        }
        Ok(())
    })();
    model.set_phase(prev);
    res.map(|_| t)
}

/// Linear - BN - ReLU - Linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub bn: BatchNorm,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        name: &str,
        fin: usize,
        hidden: usize,
        fout: usize,
        eps: f32,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(&format!("{name}.l1"), fin, hidden, rng)?,
            bn: BatchNorm::new(&format!("{name}.bn"), hidden, eps)?,
            l2: Linear::new(&format!("{name}.l2"), hidden, fout, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mode: UnitMode) -> Result<Var> {
        let h = self.l1.forward(ctx, x, mode.trainable)?;
        let h = self.bn.forward(ctx, h, mode)?;
        let h = ctx.graph.relu(h);
        self.l2.forward(ctx, h, mode.trainable)
    }
}

impl Module for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.l1.visit(f);
        self.bn.visit(f);
        self.l2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.l1.visit_mut(f);
        self.bn.visit_mut(f);
        self.l2.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSiamConfig {
    pub dims: BackboneDims,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
    pub ssl_weight: f32,
    pub bn_momentum: f32,
}

impl Default for SimSiamConfig {
    fn default() -> Self {
        Self {
            dims: BackboneDims::default(),
            proj_hidden: 128,
            proj_out: 64,
            pred_hidden: 64,
            ssl_weight: 1.0,
            bn_momentum: 0.1,
        }
    }
}

/// `-(cos(p1, sg z2) + cos(p2, sg z1)) / 2`, each cosine averaged over the
/// batch. In [-1, 1].
pub fn simsiam_loss<T: Scalar>(
    g: &mut Graph<T>,
    p1: Var,
    z1: Var,
    p2: Var,
    z2: Var,
) -> Result<Var> {
    let n = g.shape(p1)[0] as f64;
    let mut half = |p: Var, z: Var| -> Result<Var> {
        let zs = g.stop_gradient(z);
        let pn = g.normalize_rows(p, NORM_FLOOR);
        let zn = g.normalize_rows(zs, NORM_FLOOR);
        g.dot(pn, zn)
    };
    let a = half(p1, z2)?;
    let b = half(p2, z1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::from_f64(-0.5 / n)))
}

/// Single encoder with projector and predictor heads on the pooled
/// deepest feature.
#[derive(Clone, Debug)]
pub struct SimSiamModel {
    pub cfg: SimSiamConfig,
    pub branch: Branch,
    pub projector: Mlp,
    pub predictor: Mlp,
    phase: Phase,
}

impl Module for SimSiamModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.branch.visit(f);
        self.projector.visit(f);
        self.predictor.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.branch.visit_mut(f);
        self.projector.visit_mut(f);
        self.predictor.visit_mut(f);
    }
}

impl SimSiamModel {
    pub fn new(cfg: SimSiamConfig, rng: &mut Rng) -> Result<Self> {
        cfg.dims.validate()?;
        let eps = cfg.dims.bn_eps;
        let branch = Branch::new("enc", "head", &cfg.dims, rng)?;
        let projector = Mlp::new(
            "proj",
            cfg.dims.feature_dim(),
            cfg.proj_hidden,
            cfg.proj_out,
            eps,
            rng,
        )?;
        let predictor = Mlp::new(
            "pred",
            cfg.proj_out,
            cfg.pred_hidden,
            cfg.proj_out,
            eps,
            rng,
        )?;
        Ok(Self {
            cfg,
            branch,
            projector,
            predictor,
            phase: Phase::Train,
        })
    }

    /// Encoder and head start from a source backbone named `{enc}.*` /
    /// `{head}.*`.
    pub fn from_pretrained(
        cfg: SimSiamConfig,
        backbone: &Branch,
        enc: &str,
        head: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut m = Self::new(cfg, rng)?;
        crate::model::copy_renamed(&backbone.encoder, enc, &mut m.branch.encoder, "enc")?;
        crate::model::copy_renamed(&backbone.head, head, &mut m.branch.head, "head")?;
        Ok(m)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, p: Phase) {
        self.phase = p;
    }

    fn depth(&self) -> usize {
        self.cfg.dims.depth()
    }

    /// SimSiam loss on `x` and its flip; also returns the pooled features of
    /// the unflipped view.
    fn ssl_forward(
        &self,
        ctx: &mut Ctx,
        x: &Tensor,
        enc_modes: &[UnitMode],
        head_mode: UnitMode,
    ) -> Result<(Var, Var)> {
        let mut zp = Vec::new();
        let mut top = None;
        for view in [x.clone(), hflip(x)] {
            let xv = ctx.input(view);
            let pyr = self.branch.encoder.forward(ctx, xv, enc_modes)?;
            let last = *pyr.last().expect("pyramid");
            top.get_or_insert(last);
            let pooled = ctx.graph.global_avgpool(last)?;
            let z = self.projector.forward(ctx, pooled, head_mode)?;
            let p = self.predictor.forward(ctx, z, head_mode)?;
            zp.push((z, p));
        }
        let loss = simsiam_loss(&mut ctx.graph, zp[0].1, zp[0].0, zp[1].1, zp[1].0)?;
        Ok((loss, top.expect("two views")))
    }

    /// Cross-entropy plus weighted SimSiam loss.
    pub fn train_step(&mut self, batch: &Batch, opt: &mut Sgd) -> Result<StepLosses> {
        if self.phase != Phase::Train {
            return Err(Error::PhaseMismatch {
                expected: "train",
                actual: self.phase.name(),
            });
        }
        let mut ctx = Ctx::new();
        let modes = vec![UnitMode::TRAIN; self.depth()];
        let (ssl, top) = self.ssl_forward(&mut ctx, &batch.x, &modes, UnitMode::TRAIN)?;
        let logits = self.branch.head.forward(&mut ctx, top, true)?;
        let ce = losses::cross_entropy(&mut ctx.graph, logits, &batch.labels)?;
        let ws = ctx.graph.scale(ssl, self.cfg.ssl_weight);
        let total = ctx.graph.add(ce, ws)?;
        let out = StepLosses {
            total: ctx.graph.value(total).item(),
            ce1: ctx.graph.value(ce).item(),
            aux: ctx.graph.value(ssl).item(),
            ..Default::default()
        };
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

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let mut ctx = Ctx::new();
        let xv = ctx.input(x.clone());
        let modes = vec![UnitMode::FROZEN; self.depth()];
        let (_, logits) = self.branch.logits(&mut ctx, xv, &modes, false)?;
        let p = ctx.graph.softmax(logits);
        Ok(Prediction::from_probs(ctx.graph.value(p).clone()))
    }

    fn ssl_value(&self, x: &Tensor, modes: &[UnitMode]) -> Result<f32> {
        let mut ctx = Ctx::new();
        let (l, _) = self.ssl_forward(&mut ctx, x, modes, UnitMode::FROZEN)?;
        Ok(ctx.graph.value(l).item())
    }

    /// Same discipline as the cross-reconstruction adaptation: SimSiam loss
    /// only, first `depth` encoder units updated, projector, predictor and
    /// head frozen, weights restored afterwards.
    pub fn adapt_batch(
        &mut self,
        x: &Tensor,
        opts: &AdaptOptions,
    ) -> Result<(Prediction, f32, Option<f32>)> {
        if self.phase != Phase::Adapt {
            return Err(Error::PhaseMismatch {
                expected: "adapt",
                actual: self.phase.name(),
            });
        }
        if opts.depth == 0 || opts.depth > self.depth() {
            return Err(invalid(
                "adapt_batch",
                format!("adapt depth {} outside 1..={}", opts.depth, self.depth()),
            ));
        }
        let saved: Encoder = self.branch.encoder.clone();
        let res = self.adapt_inner(x, opts);
        self.branch.encoder = saved;
        res
    }

    fn adapt_inner(
        &mut self,
        x: &Tensor,
        opts: &AdaptOptions,
    ) -> Result<(Prediction, f32, Option<f32>)> {
        let modes: Vec<UnitMode> = (0..self.depth())
            .map(|l| {
                if l < opts.depth {
                    UnitMode::TRAIN
                } else {
                    UnitMode::FROZEN
                }
            })
            .collect();
        let mut opt = Sgd::new(opts.lr, opts.momentum, 0.0);
        let mut before = None;
        for _ in 0..opts.iterations {
            let mut ctx = Ctx::new();
            let (loss, _) = self.ssl_forward(&mut ctx, x, &modes, UnitMode::FROZEN)?;
            let lv = ctx.graph.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite("SimSiam loss during adaptation".into()));
            }
            before.get_or_insert(lv);
            let grads = ctx.gradients(loss)?;
            let updates = ctx.take_bn_updates();
            apply_gradients(&mut self.branch.encoder, &grads, &mut opt)?;
            apply_bn_updates(&mut self.branch.encoder, &updates, opts.bn_momentum);
        }
        let before = match before {
            Some(v) => v,
            None => self.ssl_value(x, &modes)?,
        };
        let pred = self.predict(x)?;
        let after = if opts.track_aux_after {
            Some(self.ssl_value(x, &modes)?)
        } else {
            None
        };
        Ok((pred, before, after))
    }
}

/// Per-batch SimSiam adaptation with reset.
pub fn eval_simsiam(
    model: &mut SimSiamModel,
    batches: &[Batch],
    opts: &AdaptOptions,
) -> Result<Tally> {
    let prev = model.phase();
    model.set_phase(Phase::Adapt);
    let mut t = Tally::default();
    let res = (|| {
        for b in batches {
            let (pred, before, after) = model.adapt_batch(&b.x, opts)?;
            t.add(&pred, &pred, &b.labels);
            t.aux_before.push(before);
            if let Some(a) = after {
                t.aux_after.push(a);
            }
        }
        Ok(())
    })();
    model.set_phase(prev);
    res.map(|_| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simsiam_equal_branches_is_minus_one() {
        let mut rng = Rng::new(3);
        let mut g = Graph::<f32>::new();
        let z = rng.normal::<f32>(&[5, 8], 0.0, 1.0).unwrap();
        let p1 = g.param(z.clone());
        let z1 = g.param(z.clone());
        let p2 = g.param(z.clone());
        let z2 = g.param(z);
        let l = simsiam_loss(&mut g, p1, z1, p2, z2).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-6);
        let gr = g.backward(l).unwrap();
        assert!(gr.get(z1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gr.get(z2).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gr.get(p1).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("tent".parse::<Method>().is_err());
    }

    #[test]
    fn tally_percentages() {
        let t = Tally {
            correct: 3,
            single_correct: 1,
            total: 4,
            aux_before: vec![1.0, 2.0],
            aux_after: vec![0.5, 2.5],
        };
        assert_eq!(t.accuracy(), 75.0);
        assert_eq!(t.single_accuracy(), 25.0);
        assert_eq!(t.aux_descent_fraction(), Some(0.5));
        assert_eq!(Tally::default().accuracy(), 0.0);
    }
}
