//! Reproducible runs: data generation, recognizer pretraining, TPGSR
//! training, evaluation, inference and ablations, each writing a run directory.

pub mod config;
pub mod gradsuite;
pub mod images;
pub mod train;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{ModelPreset, Precision, RunConfig};
pub use train::{finetune, metrics_csv, train, train_single_stage, EpochMetrics, Scorer, TrainData, Trained, REC_PREFIX};

use crate::data::{batch_lr, build_dataset, Dataset, DatasetManifest, SamplePair, HR_HEIGHT, HR_WIDTH, LR_HEIGHT, LR_WIDTH};
use crate::error::{invalid, Error, Result};
use crate::eval::{baseline_report, bicubic_images, evaluate, EvalReport, BICUBIC, HR};
use crate::recognizer::{decode_batch, pretrain, recognize, PretrainReport, Recognizer};
use crate::tensor::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::tpgsr::{ForwardMode, Tpgsr};
use images::{load_gray, save_gray, Grid};

pub const THREADS_ENV: &str = "TPGSR_THREADS";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const SINGLE_CKPT: &str = "single_stage.ckpt";
pub const RECOGNIZER_CKPT: &str = "recognizer.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GRID_FILE: &str = "grid.pgm";

/// Worker thread cap from `TPGSR_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", dir.display()))))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::other(format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Generates and writes a dataset file.
pub fn gen_data(n_train: usize, n_test: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    let ds = build_dataset(n_train, n_test, seed, worker_threads())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.save(out)?;
    Ok(ds.manifest)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub report: PretrainReport,
    pub hr_test_accuracy: f64,
    pub bicubic_test_accuracy: f64,
    pub checkpoint: PathBuf,
}

/// Pretrains a recognizer on the HR training images and writes
/// `recognizer.ckpt`, `pretrain.csv`, `config.txt` and the HR/bicubic test
/// reports into `cfg.run_dir`.
pub fn run_pretrain(cfg: &RunConfig, progress: &mut dyn FnMut(&crate::recognizer::PretrainEpoch)) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    create_dir(&cfg.run_dir)?;
    write_file(&cfg.run_dir.join(CONFIG_FILE), cfg.echo())?;
    let rec_cfg = cfg.model_config().rec;
    let mut store = ParamStore::<f32>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let rec = Recognizer::new(&mut store, REC_PREFIX, rec_cfg.clone(), &mut rng)?;
    let report = pretrain(&mut store, &rec, &ds.train, &cfg.pretrain_config(), progress)?;
    let mut csv = String::from("epoch,first_batch_loss,mean_loss,last_batch_loss,val_accuracy,val_loss\n");
    for e in &report.epochs {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.first_batch_loss, e.mean_loss, e.last_batch_loss, e.val_accuracy, e.val_loss
        ));
    }
    write_file(&cfg.run_dir.join("pretrain.csv"), csv)?;
    let ckpt = cfg.run_dir.join(RECOGNIZER_CKPT);
    let steps = report.epochs.len() as u64;
    save_checkpoint(&ckpt, &store, &CheckpointMeta {
        seed: cfg.seed,
        step: steps,
        config_hash: cfg.hash(),
    })?;
    let mut scorer = Scorer::new(store, rec_cfg)?;
    let hr = baseline_report(HR, &ds.test, (HR_HEIGHT, HR_WIDTH), &mut scorer.store, &scorer.rec)?;
    let bicubic = baseline_report(BICUBIC, &ds.test, (HR_HEIGHT, HR_WIDTH), &mut scorer.store, &scorer.rec)?;
    let table = EvalReport {
        methods: vec![bicubic.clone(), hr.clone()],
    };
    write_file(&cfg.run_dir.join("report.txt"), table.to_table())?;
    Ok(PretrainOutcome {
        hr_test_accuracy: hr.average().acc,
        bicubic_test_accuracy: bicubic.average().acc,
        report,
        checkpoint: ckpt,
    })
}

/// Loads the frozen scoring recognizer named by `cfg.recognizer`.
pub fn load_scorer(cfg: &RunConfig) -> Result<Scorer> {
    let ck = load_checkpoint(&cfg.recognizer).map_err(|e| with_path(&cfg.recognizer, e))?;
    Scorer::from_checkpoint(&ck, cfg.model_config().rec)
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::other(format!("{}: {io}", path.display()))),
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: EvalReport,
    pub metrics: Vec<EpochMetrics>,
    pub single: Trained,
    pub full: Trained,
}

/// Comparison grid: one row per sample, columns LR | bicubic | SR per stage | HR.
pub fn comparison_grid(store: &mut ParamStore<f32>, model: &Tpgsr, use_tp: bool, samples: &[&SamplePair]) -> Result<Grid> {
    let (hh, hw) = model.config.hr_hw();
    let (lh, lw) = model.config.lr_hw;
    let stages = crate::eval::super_resolve(store, model, samples, use_tp, 16)?;
    let bicubic = bicubic_images(samples, (hh, hw))?;
    let mut grid = Grid::new(samples.len(), stages.len() + 3, hh, hw);
    let per = hh * hw;
    for (i, s) in samples.iter().enumerate() {
        grid.put(i, 0, lh, lw, &s.lr);
        grid.put(i, 1, hh, hw, &bicubic.data()[i * per..(i + 1) * per]);
        for (k, sr) in stages.iter().enumerate() {
            grid.put(i, 2 + k, hh, hw, &sr.data()[i * per..(i + 1) * per]);
        }
        grid.put(i, stages.len() + 2, hh, hw, &s.hr);
    }
    Ok(grid)
}

/// Writes config echo, metrics, checkpoints, evaluation reports and the grid.
pub fn write_run_artifacts(dir: &Path, cfg: &RunConfig, summary: &RunSummary, test: &[SamplePair]) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.echo())?;
    write_file(&dir.join(METRICS_FILE), metrics_csv(&summary.metrics))?;
    write_file(&dir.join(SINGLE_CKPT), summary.single.checkpoint_bytes(cfg)?)?;
    write_file(&dir.join(FINAL_CKPT), summary.full.checkpoint_bytes(cfg)?)?;
    write_eval_report(dir, &summary.report)?;
    let picks: Vec<&SamplePair> = test.iter().take(cfg.grid_samples).collect();
    if !picks.is_empty() {
        let mut store = summary.full.store.clone();
        comparison_grid(&mut store, &summary.full.model, cfg.use_tp, &picks)?.save(&dir.join(GRID_FILE))?;
    }
    Ok(())
}

/// `eval_<method>.csv` per method plus `report.txt`.
pub fn write_eval_report(dir: &Path, report: &EvalReport) -> Result<()> {
    for m in &report.methods {
        write_file(&dir.join(format!("eval_{}.csv", m.method)), m.to_csv())?;
    }
    write_file(&dir.join("report.txt"), report.to_table())
}

/// Trains on an already loaded dataset and evaluates on its test split.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    ds: &Dataset,
    scorer: &mut Scorer,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunSummary> {
    let data = TrainData {
        train: &ds.train,
        test: &ds.test,
    };
    let (single, full) = train(cfg, &data, scorer, progress)?;
    finish(cfg, ds, scorer, single, full)
}

fn finish(cfg: &RunConfig, ds: &Dataset, scorer: &mut Scorer, single: Trained, full: Trained) -> Result<RunSummary> {
    let mut store = full.store.clone();
    let report = evaluate(&mut store, &full.model, cfg.use_tp, &ds.test, &mut scorer.store, &scorer.rec)?;
    Ok(RunSummary {
        report,
        metrics: full.metrics.clone(),
        single,
        full,
    })
}

/// The `train` command: both phases, then artifacts in `cfg.run_dir`.
pub fn run_train(cfg: &RunConfig, progress: &mut dyn FnMut(&EpochMetrics)) -> Result<RunSummary> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let mut scorer = load_scorer(cfg)?;
    let summary = train_and_evaluate(cfg, &ds, &mut scorer, progress)?;
    write_run_artifacts(&cfg.run_dir, cfg, &summary, &ds.test)?;
    Ok(summary)
}

/// Rebuilds the trained model of a run directory from its config echo and final checkpoint.
pub fn load_run(run_dir: &Path) -> Result<(RunConfig, ParamStore<f32>, Tpgsr)> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let model = Tpgsr::new(&mut store, cfg.model_config(), cfg.plan()?, &mut rng)?;
    let path = run_dir.join(FINAL_CKPT);
    load_checkpoint(&path).map_err(|e| with_path(&path, e))?.load_into(&mut store)?;
    Ok((cfg, store, model))
}

/// The `eval` command: evaluates a run's final model on a dataset's test
/// split (the run's own dataset unless `dataset` is given). Reads only.
pub fn run_eval(run_dir: &Path, dataset: Option<&Path>) -> Result<EvalReport> {
    let (cfg, mut store, model) = load_run(run_dir)?;
    let ds = load_dataset(dataset.unwrap_or(&cfg.dataset))?;
    let mut scorer = load_scorer(&cfg)?;
    evaluate(&mut store, &model, cfg.use_tp, &ds.test, &mut scorer.store, &scorer.rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferStage {
    pub stage: usize,
    pub text: String,
    pub output: PathBuf,
}

/// The `infer` command: super-resolves one image (resized to the LR size if
/// needed), writes each stage's output into `out_dir` and decodes it with the
/// scoring recognizer.
pub fn run_infer(run_dir: &Path, image: &Path, out_dir: &Path) -> Result<Vec<InferStage>> {
    let (cfg, mut store, model) = load_run(run_dir)?;
    let mut scorer = load_scorer(&cfg)?;
    let (h, w, pixels) = load_gray(image)?;
    let (lh, lw) = model.config.lr_hw;
    let mut g = Graph::new(&mut store);
    let x = g.input(Tensor::new(&[1, 1, h, w], pixels)?);
    let x = if (h, w) == (lh, lw) { x } else { g.bicubic_resize(x, lh, lw)? };
    let mode = ForwardMode {
        use_tp: cfg.use_tp,
        ..ForwardMode::EVAL
    };
    let outs = model.multistage_forward(&mut g, x, mode)?;
    let srs: Vec<Tensor<f32>> = outs
        .iter()
        .map(|o| {
            let mut t = g.value(o.sr).clone();
            t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            t
        })
        .collect();
    drop(g);
    create_dir(out_dir)?;
    let ext = image.extension().and_then(|e| e.to_str()).filter(|e| e.eq_ignore_ascii_case("png")).map_or("pgm", |_| "png");
    let (hh, hw) = model.config.hr_hw();
    let mut result = Vec::new();
    for (k, sr) in srs.iter().enumerate() {
        let text = recognize(&mut scorer.store, &scorer.rec, sr, 1)?.pop().unwrap_or_default();
        let output = out_dir.join(format!("sr_stage{}.{ext}", k + 1));
        save_gray(&output, hh, hw, sr.data())?;
        result.push(InferStage {
            stage: k + 1,
            text,
            output,
        });
    }
    Ok(result)
}

/// Stage priors of an LR batch decoded directly (what each stage's recognizer reads).
pub fn decode_stage_priors(store: &mut ParamStore<f32>, model: &Tpgsr, samples: &[&SamplePair]) -> Result<Vec<Vec<String>>> {
    let mut g = Graph::new(store);
    let lr = g.input(batch_lr(samples));
    let outs = model.multistage_forward(&mut g, lr, ForwardMode::EVAL)?;
    Ok(outs.iter().filter_map(|o| o.tp).map(|tp| decode_batch(g.value(tp))).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// `none`, `fixed` or `tuned` prior generator.
    Tuned,
    /// Stage counts.
    Stages,
    /// `sr`, `tpg`, `both` or `none` shared across stages.
    Sharing,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tuned" => Ok(Self::Tuned),
            "stages" => Ok(Self::Stages),
            "sharing" => Ok(Self::Sharing),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}` (tuned, stages, sharing)"))),
        }
    }
}

/// `cfg` with one ablation setting applied.
pub fn ablation_config(cfg: &RunConfig, axis: AblationAxis, value: &str) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match (axis, value) {
        (AblationAxis::Tuned, "none") => c.use_tp = false,
        (AblationAxis::Tuned, "fixed") => (c.use_tp, c.tuned) = (true, false),
        (AblationAxis::Tuned, "tuned") => (c.use_tp, c.tuned) = (true, true),
        (AblationAxis::Stages, v) => {
            c.stages = v.parse().map_err(|_| Error::Config(format!("stage count `{v}` is not a number")))?;
            c.lambdas = None;
        }
        (AblationAxis::Sharing, "sr") => (c.share_sr, c.share_tpg) = (true, false),
        (AblationAxis::Sharing, "tpg") => (c.share_sr, c.share_tpg) = (false, true),
        (AblationAxis::Sharing, "both") => (c.share_sr, c.share_tpg) = (true, true),
        (AblationAxis::Sharing, "none") => (c.share_sr, c.share_tpg) = (false, false),
        (a, v) => return Err(Error::Config(format!("value `{v}` is not valid for axis {a:?}"))),
    }
    c.validate()?;
    Ok(c)
}

/// Echo of the settings phase one depends on; runs with equal keys share it.
fn single_stage_key(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.stages = 1;
    c.lambdas = None;
    c.share_sr = true;
    c.share_tpg = false;
    c.finetune_epochs = 0;
    c.run_dir = PathBuf::new();
    c.echo()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub value: String,
    pub report: EvalReport,
}

/// Trains and evaluates one configuration per value. Each row is written to
/// `run_dir/<axis>-<value>` and equals a standalone `train` with that config;
/// runs with identical single-stage settings reuse the first phase.
pub fn run_ablation(
    cfg: &RunConfig,
    ds: &Dataset,
    scorer: &mut Scorer,
    axis: AblationAxis,
    values: &[String],
    progress: &mut dyn FnMut(&str, &EpochMetrics),
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(invalid("ablation needs at least one value"));
    }
    let mut cache: HashMap<String, Trained> = HashMap::new();
    let mut rows = Vec::new();
    for v in values {
        let mut c = ablation_config(cfg, axis, v)?;
        c.run_dir = cfg.run_dir.join(format!("{}-{v}", format!("{axis:?}").to_lowercase()));
        let data = TrainData {
            train: &ds.train,
            test: &ds.test,
        };
        let key = single_stage_key(&c);
        let single = match cache.get(&key) {
            Some(s) => s.clone(),
            None => {
                let s = train_single_stage(&c, &data, scorer, &mut |m| progress(v, m))?;
                cache.insert(key, s.clone());
                s
            }
        };
        let full = if c.stages == 1 && c.finetune_epochs == 0 {
            single.clone()
        } else {
            finetune(&c, &single, &data, scorer, &mut |m| progress(v, m))?
        };
        let summary = finish(&c, ds, scorer, single, full)?;
        write_run_artifacts(&c.run_dir, &c, &summary, &ds.test)?;
        rows.push(AblationRow {
            value: v.clone(),
            report: summary.report,
        });
    }
    Ok(rows)
}

/// `value,acc,psnr_db,ssim` rows of the final-stage SR average.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("value,acc,psnr_db,ssim\n");
    for r in rows {
        if let Some(m) = r.report.method(crate::eval::SR) {
            let a = m.average();
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.value, a.acc, a.psnr_db, a.ssim));
        }
    }
    s
}

/// Loads a dataset, failing with the path on error.
pub fn open_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path)
}

/// LR-sized image check used by inference callers.
pub fn lr_size() -> (usize, usize) {
    (LR_HEIGHT, LR_WIDTH)
}
