use std::collections::HashMap;

use recttt_core::autodiff::Sgd;
use recttt_core::baselines::{
    eval_ptbn, eval_recttt, eval_simsiam, eval_source, SimSiamConfig, SimSiamModel,
};
use recttt_core::data::{gen_dataset, stack, Batch, RenderConfig};
use recttt_core::model::{AdaptOptions, ModelConfig, RecTttModel};
use recttt_core::nn::{self, BackboneDims};
use recttt_core::{Rng, Tensor};

fn dims() -> BackboneDims {
    BackboneDims {
        stem_channels: 4,
        widths: vec![4, 8, 8],
        image_size: 16,
        ..Default::default()
    }
}

fn batches(n: usize, bs: usize, seed: u64) -> Vec<Batch> {
    let rc = RenderConfig {
        image_size: 16,
        ..Default::default()
    };
    let d = gen_dataset(&mut Rng::new(seed), n, &rc).unwrap();
    d.chunks(bs)
        .map(|c| stack(&c.iter().collect::<Vec<_>>()).unwrap())
        .collect()
}

fn warmed() -> RecTttModel {
    let mut m = RecTttModel::new(
        ModelConfig {
            dims: dims(),
            ..Default::default()
        },
        &mut Rng::new(1),
    )
    .unwrap();
    let mut opt = Sgd::new(0.05, 0.9, 0.0);
    for b in batches(32, 8, 2) {
        m.train_step(&b, &mut opt).unwrap();
    }
    m
}

#[test]
fn source_equals_zero_iteration_adaptation() {
    let mut m = warmed();
    let bs = batches(24, 8, 3);
    let src = eval_source(&m, &bs).unwrap();
    let opts = AdaptOptions {
        iterations: 0,
        ..Default::default()
    };
    let t0 = eval_recttt(&mut m, &bs, &opts).unwrap();
    assert_eq!(src.correct, t0.correct);
    assert_eq!(src.single_correct, t0.single_correct);
    assert_eq!(eval_source(&m, &bs).unwrap(), src);
}

#[test]
fn ptbn_leaves_running_statistics_alone() {
    let m = warmed();
    let before: HashMap<String, Tensor> = nn::collect_tensors(&m).into_iter().collect();
    let t = eval_ptbn(&m, &batches(16, 8, 4)).unwrap();
    assert_eq!(t.total, 16);
    for (n, v) in nn::collect_tensors(&m) {
        assert!(before[&n].bitwise_eq(&v), "{n}");
    }
    assert!(eval_ptbn(&m, &batches(1, 1, 5)).is_err());
}

#[test]
fn simsiam_trains_and_resets() {
    let cfg = SimSiamConfig {
        dims: dims(),
        proj_hidden: 16,
        proj_out: 8,
        pred_hidden: 8,
        ..Default::default()
    };
    let mut m = SimSiamModel::new(cfg, &mut Rng::new(6)).unwrap();
    let mut opt = Sgd::new(0.05, 0.9, 0.0);
    for b in batches(32, 8, 7) {
        let l = m.train_step(&b, &mut opt).unwrap();
        assert!((-1.0..=1.0).contains(&l.aux));
    }
    let before: HashMap<String, Tensor> = nn::collect_tensors(&m).into_iter().collect();
    let opts = AdaptOptions {
        iterations: 3,
        lr: 0.05,
        ..Default::default()
    };
    let t = eval_simsiam(&mut m, &batches(16, 8, 8), &opts).unwrap();
    assert_eq!(t.total, 16);
    assert_eq!(t.aux_after.len(), 2);
    for (n, v) in nn::collect_tensors(&m) {
        assert!(before[&n].bitwise_eq(&v), "{n}");
    }
}
