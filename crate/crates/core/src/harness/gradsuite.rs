//! Finite-difference gradient suite over every differentiable operation, the
//! model components and a miniature two-stage pipeline (all in f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::Result;
use crate::loss::{multistage_loss, stage_loss, LossConfig};
use crate::tensor::gradcheck::{self, project, GradCheckReport, Target};
use crate::tensor::nn::BatchNorm2d;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::tpgsr::{ForwardMode, ModelConfig, StagePlan, TpGuidedBlock, TpTransformer, Tpgsr};

/// Maximum relative error accepted for single operations.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Maximum relative error accepted for composed models.
pub const PIPELINE_TOL: f64 = 1e-3;

/// Minimum random draws for each single-operation check.
pub const PRIMITIVE_TRIALS: u64 = 20;

/// Elements probed per target tensor.
const PROBES: usize = 24;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.checked > 0
            && self.max_rel_error < self.tolerance
            && self.kinks as f64 <= gradcheck::MAX_KINK_FRACTION * (self.checked + self.kinks) as f64
    }
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

fn positive_rows(rows: usize, k: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::uniform(&[1, rows, k], 0.05, 1.0, r);
    for row in t.data_mut().chunks_exact_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

type Build = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    build: Build,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs: Box::new(inputs),
        build: Box::new(build),
    }
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// Every case draws its shapes as well as its values from the trial RNG.
fn primitive_cases() -> Vec<Case> {
    vec![
        case(
            "conv2d",
            |r| {
                let (b, ci, co) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
                let (h, w) = (dim(r, 3, 6), dim(r, 3, 6));
                vec![randn(&[b, ci, h, w], r), randn(&[co, ci, 3, 3], r), randn(&[co], r)]
            },
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), (2, 1), (1, 1))?;
                project(g, y, 1)
            },
        ),
        case(
            "deconv2d",
            |r| {
                let (b, ci, co) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
                let (h, w) = (dim(r, 2, 4), dim(r, 2, 5));
                vec![randn(&[b, ci, h, w], r), randn(&[ci, co, 3, 3], r), randn(&[co], r)]
            },
            |g, v| {
                let y = g.deconv2d(v[0], v[1], Some(v[2]), (2, 1), (1, 1), (1, 0))?;
                project(g, y, 2)
            },
        ),
        case(
            "max_pool2d",
            |r| {
                let (b, c) = (dim(r, 1, 2), dim(r, 1, 3));
                vec![randn(&[b, c, 2 * dim(r, 1, 3), 2 * dim(r, 1, 3)], r)]
            },
            |g, v| {
                let y = g.max_pool2d(v[0], (2, 2))?;
                project(g, y, 3)
            },
        ),
        case(
            "relu",
            |r| vec![randn(&[dim(r, 1, 4), dim(r, 1, 8)], r)],
            |g, v| {
                let y = g.relu(v[0]);
                project(g, y, 4)
            },
        ),
        case(
            "add/sub/mul/scale",
            |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 6)];
                vec![randn(&s, r), randn(&s, r)]
            },
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let s = g.sub(a, v[1])?;
                let m = g.mul(s, v[1])?;
                let y = g.scale(m, -1.5);
                project(g, y, 5)
            },
        ),
        case(
            "concat_channels",
            |r| {
                let (b, h, w) = (dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4));
                vec![randn(&[b, dim(r, 1, 3), h, w], r), randn(&[b, dim(r, 1, 3), h, w], r)]
            },
            |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                project(g, y, 6)
            },
        ),
        case(
            "reshape/transpose",
            |r| vec![randn(&[dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 5)], r)],
            |g, v| {
                let t = g.transpose_last2(v[0])?;
                let n = g.shape(t).iter().product::<usize>();
                let y = g.reshape(t, &[n])?;
                project(g, y, 7)
            },
        ),
        case(
            "softmax",
            |r| vec![randn(&[dim(r, 1, 2), dim(r, 1, 4), dim(r, 2, 8)], r)],
            |g, v| {
                let y = g.softmax_lastdim(v[0])?;
                project(g, y, 8)
            },
        ),
        case(
            "pixel_shuffle",
            |r| vec![randn(&[dim(r, 1, 2), 4 * dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3)], r)],
            |g, v| {
                let y = g.pixel_shuffle(v[0], 2)?;
                project(g, y, 9)
            },
        ),
        case(
            "bicubic_resize",
            |r| vec![randn(&[dim(r, 1, 2), dim(r, 1, 2), dim(r, 2, 5), dim(r, 2, 6)], r)],
            |g, v| {
                let up = g.bicubic_resize(v[0], 7, 11)?;
                let down = g.bicubic_resize(up, 3, 4)?;
                let a = project(g, up, 10)?;
                let b = project(g, down, 11)?;
                g.add(a, b)
            },
        ),
        case(
            "l1_loss",
            |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 5)];
                vec![randn(&s, r), randn(&s, r)]
            },
            |g, v| g.l1_loss(v[0], v[1]),
        ),
        case(
            "kl_prior",
            |r| {
                let rows = dim(r, 1, 6);
                vec![positive_rows(rows, NUM_CLASSES, r), positive_rows(rows, NUM_CLASSES, r)]
            },
            |g, v| g.kl_prior(v[0], v[1], 1e-6),
        ),
        case(
            "cross_entropy",
            |r| vec![randn(&[dim(r, 1, 5), dim(r, 2, 7)], r)],
            |g, v| {
                let (rows, k) = (g.shape(v[0])[0], g.shape(v[0])[1]);
                let labels: Vec<usize> = (0..rows).map(|i| (3 * i + 1) % k).collect();
                g.cross_entropy(v[0], &labels)
            },
        ),
        case(
            "sum/mean",
            |r| vec![randn(&[dim(r, 1, 4), dim(r, 1, 5)], r)],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let a = g.sum(sq);
                let b = g.mean(v[0]);
                g.add(a, b)
            },
        ),
    ]
}

fn entry(name: impl Into<String>, tolerance: f64, report: GradCheckReport) -> SuiteEntry {
    SuiteEntry {
        name: name.into(),
        tolerance,
        checked: report.checked,
        kinks: report.kinks,
        max_rel_error: report.max_rel_error,
        worst: report.worst,
    }
}

/// All trainable parameters of `store`.
fn param_targets(store: &ParamStore<f64>) -> Vec<Target> {
    store
        .iter()
        .filter(|(_, p)| p.tensor.requires_grad())
        .map(|(id, _)| Target::Param(id))
        .collect()
}

/// Redraws every trainable parameter, so zero-initialized layers are exercised too.
fn randomize(store: &mut ParamStore<f64>, std: f64, r: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        if p.tensor.requires_grad() {
            let fresh = Tensor::randn(p.tensor.shape(), std, r).with_grad();
            p.tensor = fresh;
        }
    }
}

fn batch_norm_entries(trials: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for train in [true, false] {
        let mut total = GradCheckReport::default();
        for t in 0..trials {
            let mut r = ChaCha8Rng::seed_from_u64(200 + t);
            let mut store = ParamStore::new();
            let bn = BatchNorm2d::new(&mut store, "bn", 3)?;
            randomize(&mut store, 1.0, &mut r);
            *store.tensor_mut(bn.params.running_var) = Tensor::uniform(&[3], 0.5, 2.0, &mut r);
            *store.tensor_mut(bn.params.running_mean) = randn(&[3], &mut r);
            let (b, h, w) = (dim(&mut r, 2, 4), dim(&mut r, 1, 3), dim(&mut r, 1, 4));
            let inputs = vec![randn(&[b, 3, h, w], &mut r)];
            let mut targets = vec![Target::Input(0)];
            targets.extend(param_targets(&store));
            let rep = gradcheck::check(&mut store, &inputs, &targets, PROBES, t, |g, v| {
                let y = bn.forward(g, v[0], train)?;
                project(g, y, 12)
            })?;
            total.merge(rep);
        }
        out.push(entry(if train { "batch_norm (train)" } else { "batch_norm (eval)" }, PRIMITIVE_TOL, total));
    }
    Ok(out)
}

/// Full stage loss against the SR image and `t_L`; `t_H` is a constant.
fn stage_loss_entry(trials: u64) -> Result<SuiteEntry> {
    let mut total = GradCheckReport::default();
    for t in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(250 + t);
        let inputs = vec![
            randn(&[2, 1, 3, 5], &mut r),
            randn(&[2, 1, 3, 5], &mut r),
            positive_rows(6, NUM_CLASSES, &mut r).reshape(&[2, 3, NUM_CLASSES])?,
            positive_rows(6, NUM_CLASSES, &mut r).reshape(&[2, 3, NUM_CLASSES])?,
        ];
        let cfg = LossConfig {
            alpha: 0.7,
            beta: 1.3,
            ..LossConfig::default()
        };
        let mut store = ParamStore::new();
        let rep = gradcheck::check(&mut store, &inputs, &[Target::Input(0), Target::Input(2)], PROBES, t, |g, v| {
            Ok(stage_loss(g, v[0], v[1], Some(v[2]), Some(v[3]), &cfg)?.total)
        })?;
        total.merge(rep);
    }
    Ok(entry("stage_loss", PRIMITIVE_TOL, total))
}

fn transformer_entry(trials: u64) -> Result<SuiteEntry> {
    let mut total = GradCheckReport::default();
    for t in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(300 + t);
        let cfg = ModelConfig::miniature().tpt;
        let mut store = ParamStore::new();
        let tpt = TpTransformer::new(&mut store, "tpt.", cfg.clone(), &mut r)?;
        // Unit-variance inputs keep batch statistics well conditioned.
        let inputs = vec![randn(&[2, cfg.frames, NUM_CLASSES], &mut r)];
        let mut targets = vec![Target::Input(0)];
        targets.extend(param_targets(&store));
        let rep = gradcheck::check(&mut store, &inputs, &targets, PROBES, t, |g, v| {
            let y = tpt.forward(g, v[0], true)?;
            project(g, y, 13)
        })?;
        total.merge(rep);
    }
    Ok(entry("tp_transformer", PRIMITIVE_TOL, total))
}

fn block_entry(trials: u64) -> Result<SuiteEntry> {
    let mut total = GradCheckReport::default();
    for t in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(400 + t);
        let mut store = ParamStore::new();
        let block = TpGuidedBlock::new(&mut store, "blk.", 3, 4, &mut r)?;
        randomize(&mut store, 0.5, &mut r);
        let inputs = vec![randn(&[2, 3, 4, 6], &mut r), randn(&[2, 4, 3, 8], &mut r)];
        let mut targets = vec![Target::Input(0), Target::Input(1)];
        targets.extend(param_targets(&store));
        let rep = gradcheck::check(&mut store, &inputs, &targets, PROBES, t, |g, v| {
            let y = block.forward(g, v[0], Some(v[1]), true)?;
            project(g, y, 14)
        })?;
        total.merge(rep);
    }
    Ok(entry("tp_guided_block", PRIMITIVE_TOL, total))
}

/// Two-stage miniature model, tuned recognizers, full weighted loss,
/// checked against the LR input and every trainable parameter. Gradients
/// flow between stages here: finite differences see the composed function,
/// which a stop-gradient would deliberately not match.
fn pipeline_entry(trials: u64) -> Result<SuiteEntry> {
    let mut total = GradCheckReport::default();
    for t in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(500 + t);
        let config = ModelConfig::miniature();
        let mut plan = StagePlan::with_stages(2)?;
        plan.share_sr = false;
        plan.stop_grad = false;
        let mut store = ParamStore::new();
        let model = Tpgsr::new(&mut store, config.clone(), plan, &mut r)?;
        randomize(&mut store, 0.3, &mut r);
        let (lh, lw) = config.lr_hw;
        let (hh, hw) = config.hr_hw();
        let frames = config.rec.frames;
        let inputs = vec![
            Tensor::uniform(&[2, 1, lh, lw], 0.0, 1.0, &mut r),
            Tensor::uniform(&[2, 1, hh, hw], 0.0, 1.0, &mut r),
            positive_rows(2 * frames, NUM_CLASSES, &mut r).reshape(&[2, frames, NUM_CLASSES])?,
        ];
        let mut targets = vec![Target::Input(0)];
        targets.extend(param_targets(&store));
        let loss_cfg = LossConfig::default();
        let mode = ForwardMode {
            train: true,
            rec_train: true,
            use_tp: true,
        };
        let rep = gradcheck::check(&mut store, &inputs, &targets, PROBES / 3, t, |g, v| {
            let hr = g.detach(v[1]);
            let t_h = g.detach(v[2]);
            let outs = model.multistage_forward(g, v[0], mode)?;
            let mut totals = Vec::new();
            for o in &outs {
                totals.push(stage_loss(g, o.sr, hr, o.tp, Some(t_h), &loss_cfg)?.total);
            }
            multistage_loss(g, &totals, &model.plan.lambdas)
        })?;
        total.merge(rep);
    }
    Ok(entry("pipeline (2 stages, miniature)", PIPELINE_TOL, total))
}

/// Runs the whole suite with `trials` random draws per check.
pub fn run_suite(trials: u64) -> Result<Vec<SuiteEntry>> {
    let trials = trials.max(1);
    let mut out = Vec::new();
    let op_trials = trials.max(PRIMITIVE_TRIALS);
    for c in primitive_cases() {
        let mut total = GradCheckReport::default();
        for t in 0..op_trials {
            let mut r = ChaCha8Rng::seed_from_u64(100 + t);
            let inputs = (c.inputs)(&mut r);
            let targets: Vec<Target> = (0..inputs.len()).map(Target::Input).collect();
            let mut store = ParamStore::new();
            total.merge(gradcheck::check(&mut store, &inputs, &targets, PROBES, t, &c.build)?);
        }
        out.push(entry(c.name, PRIMITIVE_TOL, total));
    }
    out.extend(batch_norm_entries(op_trials)?);
    out.push(stage_loss_entry(op_trials)?);
    out.push(transformer_entry(trials)?);
    out.push(block_entry(trials)?);
    out.push(pipeline_entry(trials)?);
    Ok(out)
}
