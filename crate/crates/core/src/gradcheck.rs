//! Central finite-difference checks of every tape op and loss, run in
//! `f64`.
//!
//! Non-scalar outputs are projected onto a fixed random direction so every
//! check compares gradients of a scalar. An element passes when
//! `|a - n| <= abs` or `|a - n| <= rel * max(|a|, |n|)`.

use crate::autodiff::{BnStats, Graph, Var};
use crate::baselines::simsiam_loss;
use crate::error::Result;
use crate::losses::{self, KlDirection, LossWeights, NORM_FLOOR};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub eps: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            rel: 1e-3,
            abs: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub elements: usize,
    /// Largest relative error among elements outside the absolute band.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.elements > 0
    }
}

type Gen = Box<dyn Fn(&mut Rng) -> Result<Vec<Tensor<f64>>>>;
type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One op under test: an input generator, which inputs are differentiated,
/// and the graph builder.
pub struct Case {
    pub name: &'static str,
    gen: Gen,
    wrt: Vec<bool>,
    build: Build,
}

impl Case {
    pub fn new(
        name: &'static str,
        wrt: &[bool],
        gen: impl Fn(&mut Rng) -> Result<Vec<Tensor<f64>>> + 'static,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            gen: Box::new(gen),
            wrt: wrt.to_vec(),
            build: Box::new(build),
        }
    }
}

fn forward(
    case: &Case,
    inputs: &[Tensor<f64>],
    proj: Option<&Tensor<f64>>,
) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.wrt)
        .map(|(t, &w)| g.leaf(t.clone(), w))
        .collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = match proj {
        Some(r) => {
            let rv = g.constant(r.clone());
            let flat = g.flatten(out)?;
            let rf = g.flatten(rv)?;
            g.dot(flat, rf)?
        }
        None => out,
    };
    Ok((g, vars, loss))
}

/// Runs `instances` random instances of one case.
pub fn check_case(
    case: &Case,
    instances: usize,
    tol: Tolerance,
    rng: &mut Rng,
) -> Result<CheckReport> {
    let mut rep = CheckReport {
        name: case.name.to_string(),
        instances,
        elements: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        failures: 0,
    };
    for _ in 0..instances {
        let inputs = (case.gen)(rng)?;
        let (g0, _, out0) = forward(case, &inputs, None)?;
        let shape = g0.shape(out0).to_vec();
        let proj = if shape.iter().product::<usize>() == 1 {
            None
        } else {
            Some(rng.normal::<f64>(&shape, 0.0, 1.0)?)
        };
        let (g, vars, loss) = forward(case, &inputs, proj.as_ref())?;
        let grads = g.backward(loss)?;
        for (i, input) in inputs.iter().enumerate() {
            if !case.wrt[i] {
                continue;
            }
            let analytic = grads.get(vars[i]).expect("leaf gradient").clone();
            for j in 0..input.len() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut pert = inputs.clone();
                    pert[i].data_mut()[j] += delta;
                    let (g, _, l) = forward(case, &pert, proj.as_ref())?;
                    Ok(g.value(l).item())
                };
                let numeric = (eval(tol.eps)? - eval(-tol.eps)?) / (2.0 * tol.eps);
                let a = analytic.data()[j];
                let err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                rep.elements += 1;
                rep.max_abs_err = rep.max_abs_err.max(err);
                if err > tol.abs {
                    rep.max_rel_err = rep.max_rel_err.max(err / scale.max(f64::MIN_POSITIVE));
                    if err > tol.rel * scale {
                        rep.failures += 1;
                    }
                }
            }
        }
    }
    Ok(rep)
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    rng.normal(shape, 0.0, 1.0)
}

/// Normal values pushed at least `gap` away from `at`, for ops with a kink.
fn away_from(rng: &mut Rng, shape: &[usize], at: f64, gap: f64) -> Result<Tensor<f64>> {
    let t = normal(rng, shape)?;
    Ok(t.map(|v| {
        let d = v - at;
        if d.abs() < gap {
            at + gap.copysign(d) + d
        } else {
            v
        }
    }))
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    rng.uniform(shape, 0.5, 2.0)
}

fn labels_for(rng: &mut Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(c)).collect()
}

/// The full suite: every tape op and every loss.
pub fn suite() -> Vec<Case> {
    let t = true;
    let f = false;
    vec![
        Case::new(
            "add",
            &[t, t],
            |r| Ok(vec![normal(r, &[2, 3])?, normal(r, &[2, 3])?]),
            |g, v| g.add(v[0], v[1]),
        ),
        Case::new(
            "sub",
            &[t, t],
            |r| Ok(vec![normal(r, &[2, 3])?, normal(r, &[2, 3])?]),
            |g, v| g.sub(v[0], v[1]),
        ),
        Case::new(
            "mul",
            &[t, t],
            |r| Ok(vec![normal(r, &[2, 3])?, normal(r, &[2, 3])?]),
            |g, v| g.mul(v[0], v[1]),
        ),
        Case::new(
            "div",
            &[t, t],
            |r| {
                let b = positive(r, &[2, 3])?;
                let sign = normal(r, &[2, 3])?.map(f64::signum);
                Ok(vec![normal(r, &[2, 3])?, b.mul(&sign)?])
            },
            |g, v| g.div(v[0], v[1]),
        ),
        Case::new(
            "scale",
            &[t],
            |r| Ok(vec![normal(r, &[3, 2])?]),
            |g, v| Ok(g.scale(v[0], -1.7)),
        ),
        Case::new(
            "add_scalar",
            &[t],
            |r| Ok(vec![normal(r, &[4])?]),
            |g, v| Ok(g.add_scalar(v[0], 0.3)),
        ),
        Case::new(
            "matmul",
            &[t, t],
            |r| Ok(vec![normal(r, &[2, 3])?, normal(r, &[3, 4])?]),
            |g, v| g.matmul(v[0], v[1]),
        ),
        Case::new(
            "conv2d_s1_p1_bias",
            &[t, t, t],
            |r| {
                Ok(vec![
                    normal(r, &[2, 2, 4, 4])?,
                    normal(r, &[3, 2, 3, 3])?,
                    normal(r, &[3])?,
                ])
            },
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        Case::new(
            "conv2d_s2_p1",
            &[t, t],
            |r| Ok(vec![normal(r, &[1, 2, 5, 5])?, normal(r, &[2, 2, 3, 3])?]),
            |g, v| g.conv2d(v[0], v[1], None, 2, 1),
        ),
        Case::new(
            "conv2d_1x1_s2",
            &[t, t],
            |r| Ok(vec![normal(r, &[2, 3, 4, 4])?, normal(r, &[2, 3, 1, 1])?]),
            |g, v| g.conv2d(v[0], v[1], None, 2, 0),
        ),
        Case::new(
            "batchnorm_batch",
            &[t, t, t],
            |r| {
                Ok(vec![
                    normal(r, &[3, 2, 2, 2])?,
                    positive(r, &[2])?,
                    normal(r, &[2])?,
                ])
            },
            |g, v| {
                Ok(g.batchnorm(v[0], v[1], v[2], BnStats::Batch { eps: 1e-5 })?
                    .0)
            },
        ),
        Case::new(
            "batchnorm_batch_rank2",
            &[t, t, t],
            |r| {
                Ok(vec![
                    normal(r, &[4, 3])?,
                    positive(r, &[3])?,
                    normal(r, &[3])?,
                ])
            },
            |g, v| {
                Ok(g.batchnorm(v[0], v[1], v[2], BnStats::Batch { eps: 1e-5 })?
                    .0)
            },
        ),
        Case::new(
            "batchnorm_running",
            &[t, t, t],
            |r| {
                Ok(vec![
                    normal(r, &[2, 2, 2, 2])?,
                    positive(r, &[2])?,
                    normal(r, &[2])?,
                ])
            },
            |g, v| {
                let stats = BnStats::Running {
                    mean: &[0.3, -0.2],
                    var: &[1.5, 0.7],
                    eps: 1e-5,
                };
                Ok(g.batchnorm(v[0], v[1], v[2], stats)?.0)
            },
        ),
        Case::new(
            "relu",
            &[t],
            |r| Ok(vec![away_from(r, &[3, 4], 0.0, 0.05)?]),
            |g, v| Ok(g.relu(v[0])),
        ),
        Case::new(
            "avgpool2d",
            &[t],
            |r| Ok(vec![normal(r, &[1, 2, 4, 4])?]),
            |g, v| g.avgpool2d(v[0], 2),
        ),
        Case::new(
            "global_avgpool",
            &[t],
            |r| Ok(vec![normal(r, &[2, 3, 2, 2])?]),
            |g, v| g.global_avgpool(v[0]),
        ),
        Case::new(
            "upsample2x",
            &[t],
            |r| Ok(vec![normal(r, &[1, 2, 2, 3])?]),
            |g, v| g.upsample2x(v[0]),
        ),
        Case::new(
            "linear",
            &[t, t, t],
            |r| {
                Ok(vec![
                    normal(r, &[3, 4])?,
                    normal(r, &[4, 5])?,
                    normal(r, &[5])?,
                ])
            },
            |g, v| g.linear(v[0], v[1], v[2]),
        ),
        Case::new(
            "reshape",
            &[t],
            |r| Ok(vec![normal(r, &[2, 6])?]),
            |g, v| g.reshape(v[0], &[3, 4]),
        ),
        Case::new(
            "flatten",
            &[t],
            |r| Ok(vec![normal(r, &[2, 2, 3])?]),
            |g, v| g.flatten(v[0]),
        ),
        Case::new(
            "concat",
            &[t, t],
            |r| Ok(vec![normal(r, &[2, 1, 3])?, normal(r, &[2, 2, 3])?]),
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        Case::new(
            "dot",
            &[t, t],
            |r| Ok(vec![normal(r, &[5])?, normal(r, &[5])?]),
            |g, v| g.dot(v[0], v[1]),
        ),
        Case::new(
            "norm2",
            &[t],
            |r| Ok(vec![normal(r, &[6])?]),
            |g, v| Ok(g.norm2(v[0])),
        ),
        Case::new(
            "sum",
            &[t],
            |r| Ok(vec![normal(r, &[2, 3])?]),
            |g, v| Ok(g.sum(v[0])),
        ),
        Case::new(
            "mean",
            &[t],
            |r| Ok(vec![normal(r, &[2, 3])?]),
            |g, v| Ok(g.mean(v[0])),
        ),
        Case::new(
            "log",
            &[t],
            |r| Ok(vec![positive(r, &[5])?]),
            |g, v| Ok(g.log(v[0])),
        ),
        Case::new(
            "exp",
            &[t],
            |r| Ok(vec![normal(r, &[5])?]),
            |g, v| Ok(g.exp(v[0])),
        ),
        Case::new(
            "clamp_min",
            &[t],
            |r| Ok(vec![away_from(r, &[6], 0.1, 0.05)?]),
            |g, v| Ok(g.clamp_min(v[0], 0.1)),
        ),
        Case::new(
            "softmax",
            &[t],
            |r| Ok(vec![normal(r, &[3, 4])?]),
            |g, v| Ok(g.softmax(v[0])),
        ),
        Case::new(
            "log_softmax",
            &[t],
            |r| Ok(vec![normal(r, &[3, 4])?]),
            |g, v| Ok(g.log_softmax(v[0])),
        ),
        Case::new(
            "normalize_rows",
            &[t],
            |r| Ok(vec![normal(r, &[3, 4])?]),
            |g, v| Ok(g.normalize_rows(v[0], NORM_FLOOR)),
        ),
        Case::new(
            "stop_gradient",
            &[t, f],
            |r| Ok(vec![normal(r, &[4])?, normal(r, &[4])?]),
            |g, v| {
                // d/da of a * sg(b): b only reaches the loss through sg.
                let s = g.stop_gradient(v[1]);
                let m = g.mul(v[0], s)?;
                Ok(g.sum(m))
            },
        ),
        Case::new(
            "elementwise_tanh",
            &[t],
            |r| Ok(vec![normal(r, &[5])?]),
            |g, v| Ok(g.elementwise(v[0], f64::tanh, |x: f64| 1.0 - x.tanh().powi(2))),
        ),
        Case::new(
            "global_cosine_loss_sg",
            &[f, f, t, t],
            |r| {
                Ok(vec![
                    normal(r, &[2, 2, 3, 3])?,
                    normal(r, &[2, 4, 2, 2])?,
                    normal(r, &[2, 2, 3, 3])?,
                    normal(r, &[2, 4, 2, 2])?,
                ])
            },
            |g, v| losses::global_cosine_loss(g, &v[..2], &v[2..], true),
        ),
        Case::new(
            "global_cosine_loss",
            &[t, t],
            |r| Ok(vec![normal(r, &[2, 3, 2, 2])?, normal(r, &[2, 3, 2, 2])?]),
            |g, v| losses::global_cosine_loss(g, &v[..1], &v[1..], false),
        ),
        Case::new(
            "cross_entropy",
            &[t, f],
            |r| {
                let labels = labels_for(r, 4, 4).into_iter().map(|l| l as f64).collect();
                Ok(vec![normal(r, &[4, 4])?, Tensor::new(&[4], labels)?])
            },
            |g, v| {
                let labels: Vec<usize> = g.value(v[1]).data().iter().map(|&l| l as usize).collect();
                losses::cross_entropy(g, v[0], &labels)
            },
        ),
        Case::new(
            "kl_divergence",
            &[t, t],
            |r| Ok(vec![normal(r, &[3, 4])?, normal(r, &[3, 4])?]),
            |g, v| {
                let p = g.softmax(v[0]);
                let q = g.softmax(v[1]);
                losses::kl_divergence(g, p, q)
            },
        ),
        Case::new(
            "kl_symmetric",
            &[t, t],
            |r| Ok(vec![normal(r, &[3, 4])?, normal(r, &[3, 4])?]),
            |g, v| {
                let p = g.softmax(v[0]);
                let q = g.softmax(v[1]);
                losses::consistency(g, p, q, KlDirection::Symmetric)
            },
        ),
        Case::new(
            "train_loss",
            &[t, t, f, t],
            |r| {
                Ok(vec![
                    normal(r, &[3, 4])?,
                    normal(r, &[3, 4])?,
                    normal(r, &[3, 2, 2, 2])?,
                    normal(r, &[3, 2, 2, 2])?,
                ])
            },
            |g, v| {
                let labels = [0, 3, 1];
                let ce1 = losses::cross_entropy(g, v[0], &labels)?;
                let ce2 = losses::cross_entropy(g, v[1], &labels)?;
                let p = g.softmax(v[0]);
                let q = g.softmax(v[1]);
                let kl = losses::consistency(g, p, q, KlDirection::Symmetric)?;
                let aux = losses::global_cosine_loss(g, &v[2..3], &v[3..4], true)?;
                let w = LossWeights {
                    ce: 1.0,
                    aux: 0.5,
                    kl: 2.0,
                };
                losses::train_loss(g, &[ce1, ce2], Some(aux), Some(kl), w)
            },
        ),
        Case::new(
            "simsiam_loss",
            &[t, f, t, f],
            |r| {
                Ok(vec![
                    normal(r, &[3, 4])?,
                    normal(r, &[3, 4])?,
                    normal(r, &[3, 4])?,
                    normal(r, &[3, 4])?,
                ])
            },
            |g, v| simsiam_loss(g, v[0], v[1], v[2], v[3]),
        ),
    ]
}

/// Largest absolute gradient reaching the parameters of an encoder whose
/// pyramid is compared to a decoder-side pyramid by the global cosine loss,
/// with and without the stop-gradient on the encoder side.
pub fn stop_gradient_contract(seed: u64) -> Result<(f64, f64)> {
    use crate::nn::{BackboneDims, Ctx, Encoder, UnitMode};
    let dims = BackboneDims {
        stem_channels: 4,
        widths: vec![4, 8],
        image_size: 8,
        ..Default::default()
    };
    let mut rng = Rng::new(seed);
    let enc = Encoder::new("enc", &dims, &mut rng)?;
    let other = Encoder::new("dec", &dims, &mut rng)?;
    let x = rng.normal::<f32>(&[2, 3, 8, 8], 0.0, 1.0)?;
    let run = |block: bool| -> Result<f64> {
        let mut ctx = Ctx::new();
        let xv = ctx.input(x.clone());
        let e = enc.forward_uniform(&mut ctx, xv, UnitMode::TRAIN)?;
        let d = other.forward_uniform(&mut ctx, xv, UnitMode::TRAIN)?;
        let loss = losses::global_cosine_loss(&mut ctx.graph, &e, &d, block)?;
        let grads = ctx.gradients(loss)?;
        Ok(grads
            .iter()
            .filter(|(n, _)| n.starts_with("enc."))
            .map(|(_, g)| g.max_abs() as f64)
            .fold(0.0, f64::max))
    };
    Ok((run(true)?, run(false)?))
}

/// `tanh` paired with a wrong derivative; must be reported as a failure.
pub fn negative_control() -> Case {
    Case::new(
        "negative_control",
        &[true],
        |r| Ok(vec![normal(r, &[5])?]),
        |g, v| Ok(g.elementwise(v[0], f64::tanh, |x: f64| 1.0 - x.tanh())),
    )
}

/// Runs the whole suite with `instances` per case.
pub fn run_suite(instances: usize, tol: Tolerance, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = Rng::new(seed);
    suite()
        .iter()
        .map(|c| check_case(c, instances, tol, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_control_fails() {
        let rep = check_case(
            &negative_control(),
            5,
            Tolerance::default(),
            &mut Rng::new(1),
        )
        .unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn sg_blocks_encoder_gradient() {
        let (blocked, open) = stop_gradient_contract(3).unwrap();
        assert_eq!(blocked, 0.0);
        assert!(open > 0.0);
    }

    #[test]
    fn add_passes() {
        let rep = check_case(&suite()[0], 3, Tolerance::default(), &mut Rng::new(1)).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
