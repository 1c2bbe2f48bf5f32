//! Epoch loops: source pretraining of a single backbone and the joint
//! training stage of the cross-reconstruction model.

use crate::autodiff::Sgd;
use crate::data::{batch_iter, Batch, ShapeSample};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{Branch, Phase, RecTttModel, StepLosses};
use crate::nn::{apply_bn_updates, apply_gradients, BackboneDims, Ctx, UnitMode};
use crate::rng::Rng;

/// SGD schedule with multiplicative decay at fixed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub milestones: Vec<usize>,
    pub gamma: f32,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![25, 35],
            gamma: 0.1,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub steps: usize,
    pub mean: StepLosses,
}

/// Runs `sched.epochs` epochs of `step` over shuffled batches. Batches of
/// one sample are skipped since train-mode batch norm needs two.
pub fn fit(
    data: &[ShapeSample],
    sched: &Schedule,
    rng: &mut Rng,
    mut step: impl FnMut(&Batch, &mut Sgd) -> Result<StepLosses>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let mut opt = Sgd::new(sched.lr, sched.momentum, sched.weight_decay);
    let mut logs = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        opt.lr = sched.lr_at(epoch);
        let mut sum = StepLosses::default();
        let mut steps = 0;
        for batch in batch_iter(data, sched.batch_size, Some(rng))? {
            let batch = batch?;
            if batch.labels.len() < 2 {
                continue;
            }
            let l = step(&batch, &mut opt)?;
            if !l.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} step {steps}: {l:?}"
                )));
            }
            sum.total += l.total;
            sum.ce1 += l.ce1;
            sum.ce2 += l.ce2;
            sum.aux += l.aux;
            sum.kl += l.kl;
            steps += 1;
        }
        let n = steps.max(1) as f32;
        let log = EpochLog {
            epoch,
            lr: opt.lr,
            steps,
            mean: StepLosses {
                total: sum.total / n,
                ce1: sum.ce1 / n,
                ce2: sum.ce2 / n,
                aux: sum.aux / n,
                kl: sum.kl / n,
            },
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// One cross-entropy step on a single encoder + head.
pub fn branch_step(
    branch: &mut Branch,
    batch: &Batch,
    opt: &mut Sgd,
    bn_momentum: f32,
) -> Result<StepLosses> {
    let mut ctx = Ctx::new();
    let x = ctx.input(batch.x.clone());
    let modes = vec![UnitMode::TRAIN; branch.encoder.depth()];
    let (_, logits) = branch.logits(&mut ctx, x, &modes, true)?;
    let ce = losses::cross_entropy(&mut ctx.graph, logits, &batch.labels)?;
    let v = ctx.graph.value(ce).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("cross-entropy".into()));
    }
    let grads = ctx.gradients(ce)?;
    let updates = ctx.take_bn_updates();
    apply_gradients(branch, &grads, opt)?;
    apply_bn_updates(branch, &updates, bn_momentum);
    Ok(StepLosses {
        total: v,
        ce1: v,
        ..Default::default()
    })
}

/// Supervised source training of the backbone that becomes the frozen
/// encoder. Tensors are named `backbone.*` and `backbone_head.*`.
pub fn pretrain_backbone(
    dims: &BackboneDims,
    data: &[ShapeSample],
    sched: &Schedule,
    bn_momentum: f32,
    rng: &mut Rng,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Branch, Vec<EpochLog>)> {
    let mut branch = Branch::new("backbone", "backbone_head", dims, &mut rng.derive(1))?;
    let mut shuffle = rng.derive(2);
    let logs = fit(
        data,
        sched,
        &mut shuffle,
        |b, opt| branch_step(&mut branch, b, opt, bn_momentum),
        on_epoch,
    )?;
    Ok((branch, logs))
}

/// Joint training stage of the cross-reconstruction model.
pub fn fit_recttt(
    model: &mut RecTttModel,
    data: &[ShapeSample],
    sched: &Schedule,
    rng: &mut Rng,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    model.set_phase(Phase::Train);
    fit(
        data,
        sched,
        rng,
        |b, opt| model.train_step(b, opt),
        on_epoch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decay() {
        let s = Schedule::default();
        assert_eq!(s.lr_at(0), 0.05);
        assert_eq!(s.lr_at(24), 0.05);
        assert!((s.lr_at(25) - 0.005).abs() < 1e-9);
        assert!((s.lr_at(39) - 0.0005).abs() < 1e-9);
    }
}
