//! Training bundles, evaluation jobs and sweeps.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use recttt_core::baselines::{
    eval_ptbn, eval_recttt, eval_simsiam, eval_source, Method, SimSiamConfig, SimSiamModel, Tally,
};
use recttt_core::data::{
    corrupt_dataset, gen_dataset, stack, Batch, CorruptionKind, CorruptionSpec, ShapeSample,
};
use recttt_core::model::{AdaptOptions, Phase, RecTttModel};
use recttt_core::nn::{self, Module};
use recttt_core::rng::derive_seed;
use recttt_core::training::{fit, pretrain_backbone, EpochLog};
use recttt_core::{par, Rng};

use crate::checkpoint::{Checkpoint, Metadata};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::report::Record;

// Random streams derived from each run seed.
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_RECTTT: u64 = 3;
const STREAM_SIMSIAM: u64 = 4;
const STREAM_SINGLE: u64 = 5;
const STREAM_TEST_DATA: u64 = 100;
const STREAM_CORRUPTION: u64 = 200;

/// Every model trained for one seed.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub seed: u64,
    pub recttt: RecTttModel,
    pub simsiam: Option<SimSiamModel>,
    /// Same objective with one trainable encoder.
    pub single: Option<RecTttModel>,
}

/// One epoch of one training stage.
#[derive(Clone, Debug)]
pub struct StageLog {
    pub stage: &'static str,
    pub seed: u64,
    pub log: EpochLog,
}

pub fn simsiam_config(cfg: &ExperimentConfig) -> SimSiamConfig {
    SimSiamConfig {
        dims: cfg.dims(),
        proj_hidden: cfg.simsiam.proj_hidden,
        proj_out: cfg.simsiam.proj_out,
        pred_hidden: cfg.simsiam.pred_hidden,
        ssl_weight: cfg.simsiam.ssl_weight,
        bn_momentum: cfg.model.bn_momentum,
    }
}

pub fn train_set(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ShapeSample>> {
    let mut rng = Rng::new(derive_seed(seed, STREAM_TRAIN_DATA));
    Ok(gen_dataset(&mut rng, cfg.data.train_size, &cfg.render())?)
}

/// Clean test set; ids continue after the training ids.
pub fn test_set(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ShapeSample>> {
    let mut rng = Rng::new(derive_seed(seed, STREAM_TEST_DATA));
    let mut d = gen_dataset(&mut rng, cfg.data.test_size, &cfg.render())?;
    for s in &mut d {
        s.id += cfg.data.train_size;
    }
    Ok(d)
}

pub fn corrupted_test_set(
    cfg: &ExperimentConfig,
    seed: u64,
    kind: CorruptionKind,
) -> Result<Vec<ShapeSample>> {
    let spec = CorruptionSpec::new(kind, cfg.corruptions.severity)?;
    let idx = CorruptionKind::ALL
        .iter()
        .position(|&k| k == kind)
        .expect("listed") as u64;
    let clean = test_set(cfg, seed)?;
    Ok(corrupt_dataset(
        &clean,
        spec,
        derive_seed(seed, STREAM_CORRUPTION + idx),
    )?)
}

/// Consecutive batches in dataset order; every method sees the same ones.
pub fn batches(data: &[ShapeSample], batch_size: usize) -> Result<Vec<Batch>> {
    data.chunks(batch_size)
        .map(|c| stack(&c.iter().collect::<Vec<_>>()).map_err(Into::into))
        .collect()
}

/// Pretrains the source backbone, then the joint model and the optional
/// baselines starting from it.
pub fn train_bundle(
    cfg: &ExperimentConfig,
    seed: u64,
    on_log: &mut dyn FnMut(StageLog),
) -> Result<Bundle> {
    let data = train_set(cfg, seed)?;
    let sched = cfg.schedule();
    let mut pre_rng = Rng::new(derive_seed(seed, STREAM_PRETRAIN));
    let (backbone, _) = pretrain_backbone(
        &cfg.dims(),
        &data,
        &cfg.pretrain_schedule(),
        cfg.model.bn_momentum,
        &mut pre_rng,
        |l| {
            on_log(StageLog {
                stage: "pretrain",
                seed,
                log: l.clone(),
            })
        },
    )?;

    let train_variant = |two: bool,
                         stream: u64,
                         stage: &'static str,
                         on_log: &mut dyn FnMut(StageLog)|
     -> Result<RecTttModel> {
        let rng = Rng::new(derive_seed(seed, stream));
        let mut m = RecTttModel::from_pretrained(
            cfg.model_config(two),
            &backbone,
            "backbone",
            "backbone_head",
            &mut rng.derive(1),
        )?;
        m.set_phase(Phase::Train);
        fit(
            &data,
            &sched,
            &mut rng.derive(2),
            |b, opt| m.train_step(b, opt),
            |l| {
                on_log(StageLog {
                    stage,
                    seed,
                    log: l.clone(),
                })
            },
        )?;
        m.set_phase(Phase::Infer);
        Ok(m)
    };
    let recttt = train_variant(true, STREAM_RECTTT, "recttt", on_log)?;
    let single = if cfg.train.with_single_encoder {
        Some(train_variant(false, STREAM_SINGLE, "single", on_log)?)
    } else {
        None
    };
    let simsiam = if cfg.train.with_simsiam {
        let rng = Rng::new(derive_seed(seed, STREAM_SIMSIAM));
        let mut m = SimSiamModel::from_pretrained(
            simsiam_config(cfg),
            &backbone,
            "backbone",
            "backbone_head",
            &mut rng.derive(1),
        )?;
        m.set_phase(Phase::Train);
        fit(
            &data,
            &sched,
            &mut rng.derive(2),
            |b, opt| m.train_step(b, opt),
            |l| {
                on_log(StageLog {
                    stage: "simsiam",
                    seed,
                    log: l.clone(),
                })
            },
        )?;
        m.set_phase(Phase::Infer);
        Some(m)
    } else {
        None
    };
    Ok(Bundle {
        seed,
        recttt,
        simsiam,
        single,
    })
}

/// Trains one bundle per configured seed.
pub fn train_all(cfg: &ExperimentConfig, on_log: &mut dyn FnMut(StageLog)) -> Result<Vec<Bundle>> {
    cfg.seeds
        .iter()
        .map(|&s| train_bundle(cfg, s, on_log))
        .collect()
}

pub fn to_checkpoint(cfg: &ExperimentConfig, bundles: &[Bundle]) -> Checkpoint {
    let mut ck = Checkpoint::new(Metadata {
        config_hash: cfg.hash(),
        seed: cfg.seeds[0],
        epoch: cfg.train.epochs,
        config: Some(serde_json::to_value(cfg).expect("config serializes")),
    });
    for b in bundles {
        ck.insert_all(
            &format!("seed{}/recttt", b.seed),
            nn::collect_tensors(&b.recttt),
        );
        if let Some(m) = &b.simsiam {
            ck.insert_all(&format!("seed{}/simsiam", b.seed), nn::collect_tensors(m));
        }
        if let Some(m) = &b.single {
            ck.insert_all(&format!("seed{}/single", b.seed), nn::collect_tensors(m));
        }
    }
    ck
}

fn load_into(m: &mut dyn Module, ck: &Checkpoint, prefix: &str) -> Result<()> {
    nn::load_tensors(m, &ck.group(prefix)).map_err(|e| {
        HarnessError::Config(format!(
            "checkpoint group {prefix} does not match config: {e}"
        ))
    })
}

/// Rebuilds the bundles of every configured seed. Shapes come from `cfg`.
pub fn from_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Vec<Bundle>> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let p = format!("seed{seed}");
        if !ck.has_group(&format!("{p}/recttt")) {
            return Err(HarnessError::Config(format!(
                "checkpoint has no models for seed {seed}"
            )));
        }
        let mut rng = Rng::new(0);
        let mut recttt = RecTttModel::new(cfg.model_config(true), &mut rng)?;
        load_into(&mut recttt, ck, &format!("{p}/recttt"))?;
        recttt.set_phase(Phase::Infer);
        let single = if ck.has_group(&format!("{p}/single")) {
            let mut m = RecTttModel::new(cfg.model_config(false), &mut rng)?;
            load_into(&mut m, ck, &format!("{p}/single"))?;
            m.set_phase(Phase::Infer);
            Some(m)
        } else {
            None
        };
        let simsiam = if ck.has_group(&format!("{p}/simsiam")) {
            let mut m = SimSiamModel::new(simsiam_config(cfg), &mut rng)?;
            load_into(&mut m, ck, &format!("{p}/simsiam"))?;
            m.set_phase(Phase::Infer);
            Some(m)
        } else {
            None
        };
        out.push(Bundle {
            seed,
            recttt,
            simsiam,
            single,
        });
    }
    Ok(out)
}

/// Which trained model a job evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    TwoEncoders,
    SingleEncoder,
}

/// Which prediction of the tally is reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    Ensemble,
    FirstEncoder,
}

/// One evaluation over every corruption and seed. A job may report more
/// than one readout of the same run.
#[derive(Clone, Debug)]
pub struct Job {
    pub method: Method,
    pub variant: Variant,
    pub opts: AdaptOptions,
    pub batch_size: usize,
    /// (method label, setting, readout)
    pub outputs: Vec<(String, String, Readout)>,
}

impl Job {
    fn new(cfg: &ExperimentConfig, method: Method, setting: &str) -> Self {
        let readout = if cfg.ablation.single_encoder_inference {
            Readout::FirstEncoder
        } else {
            Readout::Ensemble
        };
        Self {
            method,
            variant: Variant::TwoEncoders,
            opts: cfg.adapt_options(),
            batch_size: cfg.adapt.batch_size,
            outputs: vec![(method.name().into(), setting.into(), readout)],
        }
    }
}

/// The plain `eval` job for `cfg.method`.
pub fn eval_jobs(cfg: &ExperimentConfig, method: Method) -> Vec<Job> {
    vec![Job::new(cfg, method, "default")]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Iterations,
    BatchSize,
    Depth,
    Ensemble,
}

impl std::str::FromStr for Axis {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterations" => Ok(Axis::Iterations),
            "batch_size" => Ok(Axis::BatchSize),
            "depth" => Ok(Axis::Depth),
            "ensemble" => Ok(Axis::Ensemble),
            _ => Err(HarnessError::Config(format!(
                "unknown sweep axis `{s}` (iterations, batch_size, depth, ensemble)"
            ))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Iterations => "iterations",
            Axis::BatchSize => "batch_size",
            Axis::Depth => "depth",
            Axis::Ensemble => "ensemble",
        }
    }
}

/// Grid of one sweep axis. The batch-size sweep pairs every setting with
/// PTBN; the ensemble sweep has settings two, one_train and one_infer.
pub fn sweep_jobs(cfg: &ExperimentConfig, axis: Axis) -> Vec<Job> {
    let mut jobs = Vec::new();
    match axis {
        Axis::Iterations => {
            for &t in &cfg.ablation.iterations {
                let mut j = Job::new(cfg, Method::Recttt, &format!("T={t}"));
                j.opts.iterations = t;
                jobs.push(j);
            }
        }
        Axis::BatchSize => {
            for &b in &cfg.ablation.batch_sizes {
                for m in [Method::Recttt, Method::Ptbn] {
                    let mut j = Job::new(cfg, m, &format!("bs={b}"));
                    j.batch_size = b;
                    jobs.push(j);
                }
            }
        }
        Axis::Depth => {
            for &d in &cfg.ablation.depths {
                let mut j = Job::new(cfg, Method::Recttt, &format!("depth={d}"));
                j.opts.depth = d;
                jobs.push(j);
            }
        }
        Axis::Ensemble => {
            let mut two = Job::new(cfg, Method::Recttt, "two");
            two.outputs = vec![
                ("recttt".into(), "two".into(), Readout::Ensemble),
                ("recttt".into(), "one_infer".into(), Readout::FirstEncoder),
            ];
            jobs.push(two);
            let mut one = Job::new(cfg, Method::Recttt, "one_train");
            one.variant = Variant::SingleEncoder;
            one.outputs = vec![("recttt".into(), "one_train".into(), Readout::Ensemble)];
            jobs.push(one);
        }
    }
    jobs
}

/// Number of report records a job list yields.
pub fn grid_size(cfg: &ExperimentConfig, jobs: &[Job]) -> usize {
    let outputs: usize = jobs.iter().map(|j| j.outputs.len()).sum();
    outputs * cfg.seeds.len() * cfg.corruptions.kinds.len()
}

fn run_one(bundle: &Bundle, job: &Job, batches: &[Batch]) -> Result<Tally> {
    let two_encoder = || -> Result<RecTttModel> {
        match job.variant {
            Variant::TwoEncoders => Ok(bundle.recttt.clone()),
            Variant::SingleEncoder => bundle.single.clone().ok_or_else(|| {
                HarnessError::Config(
                    "checkpoint has no single-encoder model (train.with_single_encoder)".into(),
                )
            }),
        }
    };
    let t = match job.method {
        Method::Source => eval_source(&two_encoder()?, batches)?,
        Method::Ptbn => eval_ptbn(&two_encoder()?, batches)?,
        Method::Recttt => eval_recttt(&mut two_encoder()?, batches, &job.opts)?,
        Method::SimsiamTtt => {
            let mut m = bundle.simsiam.clone().ok_or_else(|| {
                HarnessError::Config("checkpoint has no SimSiam model (train.with_simsiam)".into())
            })?;
            eval_simsiam(&mut m, batches, &job.opts)?
        }
    };
    Ok(t)
}

/// Runs every job on every (seed, corruption). Scenarios run in parallel,
/// each on its own model clone; records come back in a fixed order.
pub fn run_jobs(cfg: &ExperimentConfig, bundles: &[Bundle], jobs: &[Job]) -> Result<Vec<Record>> {
    let kinds = cfg.kinds()?;
    let mut scenarios = Vec::new();
    for (bi, b) in bundles.iter().enumerate() {
        for &k in &kinds {
            scenarios.push((bi, k, corrupted_test_set(cfg, b.seed, k)?));
        }
    }
    let mut tasks = Vec::new();
    for (ji, _) in jobs.iter().enumerate() {
        for si in 0..scenarios.len() {
            tasks.push((ji, si));
        }
    }
    let results = par::map_slice(&tasks, |&(ji, si)| -> Result<Vec<Record>> {
        let (bi, kind, data) = &scenarios[si];
        let job = &jobs[ji];
        let bundle = &bundles[*bi];
        let bs = batches(data, job.batch_size)?;
        let start = Instant::now();
        let tally = run_one(bundle, job, &bs)?;
        let wall = start.elapsed().as_secs_f64();
        Ok(job
            .outputs
            .iter()
            .map(|(method, setting, readout)| {
                let aux = job.method == Method::Recttt || job.method == Method::SimsiamTtt;
                Record {
                    method: method.clone(),
                    setting: setting.clone(),
                    corruption: kind.name().into(),
                    severity: cfg.corruptions.severity,
                    seed: bundle.seed,
                    n: tally.total,
                    accuracy: match readout {
                        Readout::Ensemble => tally.accuracy(),
                        Readout::FirstEncoder => tally.single_accuracy(),
                    },
                    aux_before: aux.then(|| tally.mean_aux_before()).flatten(),
                    aux_after: aux.then(|| tally.mean_aux_after()).flatten(),
                    aux_descent_frac: aux.then(|| tally.aux_descent_fraction()).flatten(),
                    wall_time_s: wall,
                }
            })
            .collect())
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Writes one CSV per corruption (`features_<kind>.csv`) with pooled
/// first-encoder features at each of `cfg.adapt.feature_iters`, for the
/// first bundle.
pub fn dump_features(
    cfg: &ExperimentConfig,
    bundle: &Bundle,
    out: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut opts = cfg.adapt_options();
    opts.feature_iters = cfg.adapt.feature_iters.clone();
    opts.iterations = opts
        .iterations
        .max(opts.feature_iters.iter().copied().max().unwrap_or(0));
    opts.track_aux_after = false;
    let mut paths = Vec::new();
    for kind in cfg.kinds()? {
        let data = corrupted_test_set(cfg, bundle.seed, kind)?;
        let mut model = bundle.recttt.clone();
        model.set_phase(Phase::Adapt);
        let mut text = String::new();
        let dim = cfg.dims().feature_dim();
        text.push_str("id,label,iteration");
        for i in 0..dim {
            let _ = write!(text, ",f{i}");
        }
        text.push('\n');
        for b in batches(&data, cfg.adapt.batch_size)? {
            let outcome = model.adapt_batch(&b.x, &opts)?;
            for (iter, feats) in &outcome.features {
                for (row, (id, label)) in feats.data().chunks(dim).zip(b.ids.iter().zip(&b.labels))
                {
                    let _ = write!(text, "{id},{label},{iter}");
                    for v in row {
                        let _ = write!(text, ",{v}");
                    }
                    text.push('\n');
                }
            }
        }
        let path = out.join(format!("features_{}.csv", kind.name()));
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
