//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. The training criteria run on the desk preset.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpgsr::data::NUM_CLASSES;
use tpgsr::harness::{self, gradsuite, ModelPreset, RunConfig, Scorer, TrainData, Trained};
use tpgsr::loss::{kl_tp, multistage_loss, stage_loss, LossConfig};
use tpgsr::metrics::{psnr, ssim, PSNR_CAP_DB};
use tpgsr::tpgsr::*;
use tpgsr::{Graph, ParamStore, Tensor};

const GRAD_PRIMITIVE_TOL: f64 = 1e-4;
const GRAD_PIPELINE_TOL: f64 = 1e-3;
const GRAD_BUDGET_S: f64 = 120.0;
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_INSTANCES: usize = 120;
const SSIM_TOL: f64 = 1e-6;
const PSNR_HALF_DB: f64 = 6.0206;
const PSNR_HALF_TOL: f64 = 1e-3;
const HR_ACC_MIN: f64 = 0.85;
const BICUBIC_BAND: (f64, f64) = (0.20, 0.60);
const TIE_BAND: f64 = 0.005;
const BUDGET_S: f64 = 45.0 * 60.0;

const SEEDS: [u64; 3] = [1, 2, 3];
const TRAIN_N: usize = 2000;
const TEST_N: usize = 300;
const DATA_SEED: u64 = 7;
const EPOCHS: usize = 7;
const LR_HALVE_EPOCH: usize = 5;
const FINETUNE_EPOCHS: usize = 1;
const REC_EPOCHS: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn line(id: usize, name: &str, o: &Outcome) -> bool {
    println!("[{}] {id}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let entries = match gradsuite::run_suite(3) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = t0.elapsed().as_secs_f64();
    let worst = |pipeline: bool| {
        entries
            .iter()
            .filter(|e| (e.tolerance > GRAD_PRIMITIVE_TOL) == pipeline)
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    };
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    let (prim, pipe) = (worst(false), worst(true));
    let pass = failed.is_empty() && prim < GRAD_PRIMITIVE_TOL && pipe < GRAD_PIPELINE_TOL && secs < GRAD_BUDGET_S;
    outcome(
        pass,
        format!(
            "{} checks, primitives max {prim:.2e} (< {GRAD_PRIMITIVE_TOL:.0e}), pipeline {pipe:.2e} (< {GRAD_PIPELINE_TOL:.0e}), {secs:.0} s (< {GRAD_BUDGET_S:.0} s), failed {failed:?}",
            entries.len()
        ),
    )
}

// ------------------------------------------------------------------- losses

fn prob_rows(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * NUM_CLASSES).map(|_| r.random_range(0.0..1.0f64).powi(2)).collect();
    for row in v.chunks_exact_mut(NUM_CLASSES) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    v
}

fn kl_loop(t_l: &[f64], t_h: &[f64], batch: usize, eps: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..t_l.len() {
        s += t_h[i] * ((t_h[i] + eps) / (t_l[i] + eps)).ln();
    }
    s / batch as f64
}

fn l1_loop(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

fn loss_oracles() -> tpgsr::Result<Outcome> {
    let mut r = rng(21);
    let (mut kl_err, mut stage_err, mut multi_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut kl_self_zero = true;
    for _ in 0..ORACLE_INSTANCES {
        let (b, l, h, w) = (r.random_range(1..4), r.random_range(1..17), r.random_range(1..5), r.random_range(1..7));
        let (t_l, t_h) = (prob_rows(b * l, &mut r), prob_rows(b * l, &mut r));
        let sr: Vec<f64> = (0..b * h * w).map(|_| r.random_range(-0.2..1.2)).collect();
        let hr: Vec<f64> = (0..b * h * w).map(|_| r.random_range(0.0..1.0)).collect();
        let cfg = LossConfig {
            alpha: r.random_range(0.0..2.0),
            beta: r.random_range(0.0..2.0),
            epsilon: 1e-6,
        };
        let k = r.random_range(1..5);
        let mut lambdas: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
        let total: f64 = lambdas.iter().sum();
        lambdas.iter_mut().for_each(|x| *x /= total);
        let parts: Vec<f64> = (0..k).map(|_| r.random_range(0.0..3.0)).collect();

        let mut store = ParamStore::<f64>::new();
        let mut g = Graph::new(&mut store);
        let (img, pri) = ([b, 1, h, w], [b, l, NUM_CLASSES]);
        let (sv, hv) = (g.input(Tensor::new(&img, sr.clone())?), g.input(Tensor::new(&img, hr.clone())?));
        let (lv, tv) = (g.input(Tensor::new(&pri, t_l.clone())?), g.input(Tensor::new(&pri, t_h.clone())?));
        let kl = kl_tp(&mut g, lv, tv, cfg.epsilon)?;
        kl_err = kl_err.max((g.value(kl).item() - kl_loop(&t_l, &t_h, b, cfg.epsilon)).abs());
        let same = kl_tp(&mut g, tv, tv, cfg.epsilon)?;
        kl_self_zero &= g.value(same).item() == 0.0;
        let st = stage_loss(&mut g, sv, hv, Some(lv), Some(tv), &cfg)?.total;
        let want = l1_loop(&sr, &hr) + cfg.alpha * l1_loop(&t_h, &t_l) + cfg.beta * kl_loop(&t_l, &t_h, b, cfg.epsilon);
        stage_err = stage_err.max((g.value(st).item() - want).abs());
        let vars: Vec<_> = parts.iter().map(|&p| g.input(Tensor::scalar(p))).collect();
        let ms = multistage_loss(&mut g, &vars, &lambdas)?;
        let want: f64 = parts.iter().zip(&lambdas).map(|(p, l)| p * l).sum();
        multi_err = multi_err.max((g.value(ms).item() - want).abs());
    }
    let mut store = ParamStore::<f64>::new();
    let mut g = Graph::new(&mut store);
    let v = g.input(Tensor::scalar(1.0));
    let rejects = [vec![0.5, 0.6], vec![1.5, -0.5], vec![f64::NAN, 1.0], vec![1.0]]
        .iter()
        .all(|bad| multistage_loss(&mut g, &[v, v], bad).is_err())
        && validate_lambdas(&[0.25, 0.25, 0.5]).is_ok()
        && validate_lambdas(&[0.25, 0.25, 0.5 + 1e-6]).is_err();
    let pass = kl_err < ORACLE_TOL && stage_err < ORACLE_TOL && multi_err < ORACLE_TOL && kl_self_zero && rejects;
    Ok(outcome(
        pass,
        format!(
            "{ORACLE_INSTANCES} instances each, max |err| kl {kl_err:.1e}, stage {stage_err:.1e}, multistage {multi_err:.1e} (< {ORACLE_TOL:.0e}); kl(t,t)=0 {kl_self_zero}; weight checks {rejects}"
        ),
    ))
}

// ---------------------------------------------------------------- contracts

fn bits<T: tpgsr::Element>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.as_f64().to_bits()).collect()
}

fn scramble(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for (_, p) in store.iter_mut() {
        if p.tensor.requires_grad() {
            p.tensor = Tensor::randn(p.tensor.shape(), 0.3, &mut r).with_grad();
        }
    }
}

const TRAIN_ALL: ForwardMode = ForwardMode {
    train: true,
    rec_train: true,
    use_tp: true,
};

fn transformer_shape() -> tpgsr::Result<bool> {
    let mut store = ParamStore::<f32>::new();
    let tpt = TpTransformer::new(&mut store, "tpt.", ModelConfig::standard().tpt, &mut rng(31))?;
    let mut g = Graph::new(&mut store);
    let tp = g.input(Tensor::full(&[3, 16, NUM_CLASSES], 1.0 / NUM_CLASSES as f32));
    let y = tpt.forward(&mut g, tp, false)?;
    Ok(g.shape(y) == [3, 32, 16, 128])
}

fn zero_fusion_bitwise() -> tpgsr::Result<bool> {
    let mut store = ParamStore::<f32>::new();
    let block = TpGuidedBlock::new(&mut store, "b.", 8, 32, &mut rng(32))?;
    block.zero_projection(&mut store);
    let mut r = rng(33);
    let x = Tensor::randn(&[2, 8, 16, 64], 1.0, &mut r);
    let tp = Tensor::randn(&[2, 32, 16, 128], 1.0, &mut r);
    let mut g = Graph::new(&mut store);
    let (xv, tv) = (g.input(x), g.input(tp));
    let fused = block.forward(&mut g, xv, Some(tv), true)?;
    let base = block.forward(&mut g, xv, None, true)?;
    Ok(bits(g.value(fused)) == bits(g.value(base)))
}

fn one_stage_bitwise() -> tpgsr::Result<bool> {
    let cfg = ModelConfig::miniature();
    let mut r = rng(34);
    let lr = Tensor::<f64>::uniform(&[2, 1, 8, 16], 0.0, 1.0, &mut r);
    let hr = Tensor::<f64>::uniform(&[2, 1, 16, 32], 0.0, 1.0, &mut r);
    let t_h = Tensor::new(&[2, cfg.rec.frames, NUM_CLASSES], prob_rows(2 * cfg.rec.frames, &mut r))?;
    let run = |plan: StagePlan, multi: bool| -> tpgsr::Result<(Vec<u64>, Vec<Vec<u64>>)> {
        let mut store = ParamStore::<f64>::new();
        let model = Tpgsr::new(&mut store, cfg.clone(), plan, &mut rng(35))?;
        scramble(&mut store, 36);
        let value = {
            let mut g = Graph::new(&mut store);
            let (x, y, t) = (g.input(lr.clone()), g.input(hr.clone()), g.input(t_h.clone()));
            let o = if multi {
                model.multistage_forward(&mut g, x, TRAIN_ALL)?.remove(0)
            } else {
                model.stage_forward(&mut g, 1, x, None, TRAIN_ALL)?
            };
            let mut l = stage_loss(&mut g, o.sr, y, o.tp, Some(t), &LossConfig::default())?.total;
            if multi {
                l = multistage_loss(&mut g, &[l], &model.plan.lambdas)?;
            }
            let mut v = bits(g.value(o.sr));
            v.push(g.value(l).item().to_bits());
            g.backward(l)?;
            v
        };
        let grads = store.iter().map(|(_, p)| p.tensor.grad().map_or(Vec::new(), |g| g.iter().map(|v| v.to_bits()).collect())).collect();
        Ok((value, grads))
    };
    let a = run(StagePlan::single(), false)?;
    let b = run(StagePlan::new(1, vec![1.0])?, true)?;
    Ok(a == b)
}

fn stage_one_gradient_is_zero() -> tpgsr::Result<bool> {
    let mut plan = StagePlan::with_stages(2)?;
    plan.share_sr = false;
    let mut store = ParamStore::<f64>::new();
    let model = Tpgsr::new(&mut store, ModelConfig::miniature(), plan, &mut rng(37))?;
    scramble(&mut store, 38);
    let mut r = rng(39);
    let lr = Tensor::uniform(&[2, 1, 8, 16], 0.0, 1.0, &mut r);
    let hr = Tensor::uniform(&[2, 1, 16, 32], 0.0, 1.0, &mut r);
    {
        let mut g = Graph::new(&mut store);
        let (x, y) = (g.input(lr), g.input(hr));
        let outs = model.multistage_forward(&mut g, x, TRAIN_ALL)?;
        let l = g.l1_loss(outs[1].sr, y)?;
        g.backward(l)?;
    }
    let zero = |prefix: &str| {
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .all(|(_, p)| p.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)))
    };
    Ok(zero("tpg.stage1.") && !zero("tpg.stage2.sr."))
}

fn contracts() -> tpgsr::Result<Outcome> {
    let checks = [
        ("transformer [B,37,1,16]->[B,32,16,128]", transformer_shape()?),
        ("zero-projection fusion bitwise", zero_fusion_bitwise()?),
        ("N=1 equals single stage bitwise", one_stage_bitwise()?),
        ("stop-gradient isolation", stage_one_gradient_is_zero()?),
    ];
    let pass = checks.iter().all(|c| c.1);
    let detail = checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "BROKEN" })).collect::<Vec<_>>().join("; ");
    Ok(outcome(pass, detail))
}

// ------------------------------------------------------------------ metrics

fn metric_sanity() -> tpgsr::Result<Outcome> {
    let mut r = rng(41);
    let x: Vec<f32> = (0..32 * 128).map(|_| r.random_range(0.0..1.0)).collect();
    let s = ssim(&x, &x, 32, 128)?;
    let cap = psnr(&x, &x)?;
    let zeros = vec![0.0f32; 32 * 128];
    let halves = vec![0.5f32; 32 * 128];
    let half = psnr(&zeros, &halves)?;
    let pass = (s - 1.0).abs() <= SSIM_TOL && cap == PSNR_CAP_DB && (half - PSNR_HALF_DB).abs() <= PSNR_HALF_TOL;
    Ok(outcome(
        pass,
        format!("SSIM(x,x) = {s:.9} (1 ± {SSIM_TOL:.0e}); PSNR(x,x) = {cap} dB (cap {PSNR_CAP_DB}); PSNR(0, 0.5) = {half:.5} dB ({PSNR_HALF_DB} ± {PSNR_HALF_TOL})"),
    ))
}

// ----------------------------------------------------------------- training

fn desk_config(dir: &Path, seed: u64) -> RunConfig {
    RunConfig {
        model: ModelPreset::Desk,
        dataset: dir.join("desk.tpgd"),
        recognizer: dir.join("rec").join(harness::RECOGNIZER_CKPT),
        run_dir: dir.join("run"),
        seed,
        epochs: EPOCHS,
        lr_halve_epoch: LR_HALVE_EPOCH,
        finetune_epochs: FINETUNE_EPOCHS,
        rec_epochs: REC_EPOCHS,
        eval_every: 0,
        grid_samples: 0,
        ..RunConfig::default()
    }
}

/// Final-stage SR accuracy on the test split, scored after the last epoch.
fn accuracy(t: &Trained) -> tpgsr::Result<f64> {
    t.metrics
        .last()
        .and_then(|m| m.acc)
        .ok_or_else(|| tpgsr::Error::Config("final epoch was not evaluated".into()))
}

struct SeedResult {
    seed: u64,
    no_tp: f64,
    fixed: f64,
    tuned: f64,
    n1: f64,
    n3: f64,
}

fn arm(base: &RunConfig, use_tp: bool, tuned: bool, stages: usize) -> RunConfig {
    let mut c = base.clone();
    c.use_tp = use_tp;
    c.tuned = tuned;
    c.stages = stages;
    c.lambdas = None;
    c
}

fn seed_run(base: &RunConfig, data: &TrainData<'_>, scorer: &mut Scorer) -> tpgsr::Result<SeedResult> {
    let timed = |name: &str, cfg: &RunConfig, single: Option<&Trained>, scorer: &mut Scorer| -> tpgsr::Result<(Trained, f64)> {
        let t0 = Instant::now();
        let t = match single {
            None => harness::train_single_stage(cfg, data, scorer, &mut |_| {})?,
            Some(s) => harness::finetune(cfg, s, data, scorer, &mut |_| {})?,
        };
        let acc = accuracy(&t)?;
        println!("      seed {} {name:<6} acc {:6.2}%  ({:.0} s)", cfg.seed, 100.0 * acc, t0.elapsed().as_secs_f64());
        Ok((t, acc))
    };
    let (_, no_tp) = timed("no-TP", &arm(base, false, false, 1), None, scorer)?;
    let (_, fixed) = timed("fixed", &arm(base, true, false, 1), None, scorer)?;
    let (single, tuned) = timed("tuned", &arm(base, true, true, 1), None, scorer)?;
    let (_, n1) = timed("N=1", &arm(base, true, true, 1), Some(&single), scorer)?;
    let (_, n3) = timed("N=3", &arm(base, true, true, 3), Some(&single), scorer)?;
    Ok(SeedResult {
        seed: base.seed,
        no_tp,
        fixed,
        tuned,
        n1,
        n3,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn table_1a(results: &[SeedResult], secs: f64) -> Outcome {
    let (no_tp, fixed, tuned) = (
        mean(results.iter().map(|r| r.no_tp)),
        mean(results.iter().map(|r| r.fixed)),
        mean(results.iter().map(|r| r.tuned)),
    );
    let wins = results.iter().filter(|r| r.tuned > r.fixed).count();
    let pass = fixed > no_tp && tuned > fixed && wins >= 2 && secs < BUDGET_S;
    let per: Vec<String> = results
        .iter()
        .map(|r| format!("s{} {:.1}/{:.1}/{:.1}", r.seed, 100.0 * r.no_tp, 100.0 * r.fixed, 100.0 * r.tuned))
        .collect();
    outcome(
        pass,
        format!(
            "mean acc no-TP {:.2}% < fixed {:.2}% < tuned {:.2}%, tuned wins {wins}/3 [{}]; runtime {:.1} min on 1 core (< 45)",
            100.0 * no_tp,
            100.0 * fixed,
            100.0 * tuned,
            per.join(", "),
            secs / 60.0
        ),
    )
}

fn table_1b(results: &[SeedResult]) -> Outcome {
    let (n1, n3) = (mean(results.iter().map(|r| r.n1)), mean(results.iter().map(|r| r.n3)));
    let diffs: Vec<f64> = results.iter().map(|r| r.n3 - r.n1).collect();
    let tie = diffs.iter().all(|d| d.abs() <= TIE_BAND) && !diffs.iter().all(|&d| d < 0.0);
    let per: Vec<String> = results.iter().map(|r| format!("s{} {:.1}/{:.1}", r.seed, 100.0 * r.n1, 100.0 * r.n3)).collect();
    outcome(
        n3 >= n1 || tie,
        format!("mean acc N=1 {:.2}%, N=3 {:.2}% [{}]", 100.0 * n1, 100.0 * n3, per.join(", ")),
    )
}

fn determinism(dir: &Path, recognizer: &Path) -> tpgsr::Result<Outcome> {
    let data = dir.join("det.tpgd");
    harness::gen_data(240, 60, 11, &data)?;
    let run = |name: &str| -> tpgsr::Result<PathBuf> {
        let mut c = desk_config(dir, 5);
        c.dataset = data.clone();
        c.recognizer = recognizer.to_path_buf();
        c.run_dir = dir.join(name);
        c.stages = 2;
        c.epochs = 2;
        c.finetune_epochs = 1;
        c.eval_every = 1;
        c.grid_samples = 4;
        harness::run_train(&c, &mut |_| {})?;
        Ok(c.run_dir)
    };
    let (a, b) = (run("det_a")?, run("det_b")?);
    let files = [harness::FINAL_CKPT, harness::SINGLE_CKPT, harness::METRICS_FILE, "eval_sr.csv", "eval_bicubic.csv", "eval_hr.csv"];
    let mut differing = Vec::new();
    for f in files {
        if std::fs::read(a.join(f))? != std::fs::read(b.join(f))? {
            differing.push(f);
        }
    }
    Ok(outcome(
        differing.is_empty(),
        format!("two two-phase N=2 runs, {} artifacts compared bytewise, differing {differing:?}", files.len()),
    ))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut all = true;
    let guard = |r: tpgsr::Result<Outcome>| r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));

    all &= line(1, "gradient suite", &gradient_suite());
    all &= line(2, "loss oracles", &guard(loss_oracles()));
    all &= line(3, "shape and identity contracts", &guard(contracts()));
    all &= line(7, "metric sanity", &guard(metric_sanity()));

    let dir = tempfile::tempdir().expect("temp dir");
    let training = Instant::now();
    let base = desk_config(dir.path(), SEEDS[0]);
    let prepared = (|| -> tpgsr::Result<_> {
        harness::gen_data(TRAIN_N, TEST_N, DATA_SEED, &base.dataset)?;
        let mut rc = base.clone();
        rc.run_dir = dir.path().join("rec");
        let pre = harness::run_pretrain(&rc, &mut |_| {})?;
        Ok(pre)
    })();
    let pre = match prepared {
        Ok(p) => p,
        Err(e) => {
            for (id, name) in [(4, "tuned > fixed > no-TP"), (5, "N=3 >= N=1"), (6, "recognizer"), (8, "determinism")] {
                line(id, name, &outcome(false, format!("setup error: {e}")));
            }
            return ExitCode::FAILURE;
        }
    };
    let (hr, bic) = (pre.hr_test_accuracy, pre.bicubic_test_accuracy);
    all &= line(
        6,
        "recognizer smoke target",
        &outcome(
            hr >= HR_ACC_MIN && (BICUBIC_BAND.0..=BICUBIC_BAND.1).contains(&bic),
            format!(
                "HR {:.2}% (>= {:.0}%), bicubic {:.2}% (in [{:.0}%, {:.0}%])",
                100.0 * hr,
                100.0 * HR_ACC_MIN,
                100.0 * bic,
                100.0 * BICUBIC_BAND.0,
                100.0 * BICUBIC_BAND.1
            ),
        ),
    );

    let ablation = (|| -> tpgsr::Result<Vec<SeedResult>> {
        let ds = harness::open_dataset(&base.dataset)?;
        let mut scorer = harness::load_scorer(&base)?;
        let data = TrainData {
            train: &ds.train,
            test: &ds.test,
        };
        SEEDS.iter().map(|&s| seed_run(&desk_config(dir.path(), s), &data, &mut scorer)).collect()
    })();
    let secs = training.elapsed().as_secs_f64();
    match ablation {
        Ok(results) => {
            all &= line(4, "tuned > fixed > no-TP", &table_1a(&results, secs));
            all &= line(5, "N=3 >= N=1", &table_1b(&results));
        }
        Err(e) => {
            all &= line(4, "tuned > fixed > no-TP", &outcome(false, format!("error: {e}")));
            all &= line(5, "N=3 >= N=1", &outcome(false, format!("error: {e}")));
        }
    }

    all &= line(8, "determinism", &guard(determinism(dir.path(), &base.recognizer)));
    println!("acceptance: {} in {:.1} min", if all { "all criteria passed" } else { "FAILED" }, start.elapsed().as_secs_f64() / 60.0);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
