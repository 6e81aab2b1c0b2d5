//! Two-phase TPGSR training: a single-stage model first, then multi-stage
//! fine-tuning initialized from it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Precision, RunConfig};
use crate::data::{batch_hr, batch_lr, SamplePair, NUM_CLASSES};
use crate::error::{invalid, Error, Result};
use crate::eval::{score_images, super_resolve, SR};
use crate::loss::{multistage_loss, stage_loss};
use crate::recognizer::{Recognizer, RecognizerConfig};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
use crate::tensor::{AdamState, Element, Graph, ParamStore, Tensor};
use crate::tpgsr::{ForwardMode, StagePlan, Tpgsr};

/// Prefix of a standalone recognizer's parameters.
pub const REC_PREFIX: &str = "rec.";

/// Frozen pretrained recognizer: scores SR output and supplies HR priors.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub store: ParamStore<f32>,
    pub rec: Recognizer,
}

impl Scorer {
    pub fn new(store: ParamStore<f32>, config: RecognizerConfig) -> Result<Self> {
        let mut store = store;
        let rec = Recognizer::attach(&store, REC_PREFIX, config)?;
        store.set_trainable(REC_PREFIX, false);
        Ok(Self { store, rec })
    }

    /// Loads a recognizer checkpoint into a fresh store of the given shape.
    pub fn from_checkpoint(ck: &Checkpoint, config: RecognizerConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Recognizer::new(&mut store, REC_PREFIX, config.clone(), &mut rng)?;
        ck.load_into(&mut store)?;
        Self::new(store, config)
    }

    /// Eval-mode priors of the HR images, `L * 37` values per sample.
    pub fn hr_priors(&mut self, samples: &[SamplePair]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(samples.len() * self.rec.config.frames * NUM_CLASSES);
        for chunk in samples.chunks(64) {
            let refs: Vec<&SamplePair> = chunk.iter().collect();
            let mut g = Graph::new(&mut self.store);
            let x = g.input(batch_hr(&refs));
            let tp = self.rec.generate_tp(&mut g, x, false)?;
            out.extend_from_slice(g.value(tp).data());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub stages: usize,
    pub lr: f64,
    /// Mean weighted total loss over the epoch's batches.
    pub loss: f64,
    /// Stage-weighted means of the individual terms.
    pub image_l1: f64,
    pub tp_l1: f64,
    pub kl: f64,
    /// Final-stage test metrics; absent on epochs without evaluation.
    pub acc: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
}

pub const METRICS_HEADER: &str = "phase,epoch,stages,lr,loss,image_l1,tp_l1,kl,acc,psnr_db,ssim";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:e},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.phase,
            self.epoch,
            self.stages,
            self.lr,
            self.loss,
            self.image_l1,
            self.tp_l1,
            self.kl,
            opt(self.acc),
            opt(self.psnr_db),
            opt(self.ssim)
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// A trained model in training precision converted to f32.
#[derive(Clone, Debug)]
pub struct Trained {
    pub store: ParamStore<f32>,
    pub model: Tpgsr,
    pub metrics: Vec<EpochMetrics>,
    pub steps: u64,
}

impl Trained {
    pub fn checkpoint_bytes(&self, cfg: &RunConfig) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let meta = CheckpointMeta {
            seed: cfg.seed,
            step: self.steps,
            config_hash: cfg.hash(),
        };
        write_checkpoint(&mut buf, &self.store, &meta)?;
        Ok(buf)
    }
}

pub struct TrainData<'a> {
    pub train: &'a [SamplePair],
    pub test: &'a [SamplePair],
}

/// Canonical single-stage plan: one recognizer, one transformer, one SR module.
pub fn single_stage_plan(cfg: &RunConfig) -> StagePlan {
    let mut plan = StagePlan::single();
    plan.stop_grad = cfg.stop_grad;
    plan
}

fn mode(cfg: &RunConfig, train: bool) -> ForwardMode {
    ForwardMode {
        train,
        rec_train: train && cfg.use_tp && cfg.tuned,
        use_tp: cfg.use_tp,
    }
}

/// Copies the pretrained recognizer into every recognizer of `model` and
/// applies the prior and tuning switches.
fn prepare<T: Element>(store: &mut ParamStore<T>, model: &Tpgsr, scorer: &Scorer, cfg: &RunConfig) -> Result<()> {
    let pretrained = scorer.store.cast::<T>();
    for rec in model.recognizers() {
        let n = store.copy_from(&pretrained, |name| name.strip_prefix(REC_PREFIX).map(|r| format!("{}{r}", rec.prefix)))?;
        if n == 0 {
            return Err(invalid("pretrained recognizer checkpoint is empty"));
        }
    }
    model.set_recognizers_trainable(store, cfg.use_tp && cfg.tuned);
    if !cfg.use_tp {
        model.disable_prior(store);
    }
    Ok(())
}

struct Phase<'a> {
    name: &'static str,
    epochs: usize,
    stream: u64,
    cfg: &'a RunConfig,
    data: &'a TrainData<'a>,
    priors: &'a [f32],
}

fn gather_priors<T: Element>(priors: &[f32], idx: &[usize], frames: usize) -> Tensor<T> {
    let per = frames * NUM_CLASSES;
    let data = idx.iter().flat_map(|&i| priors[i * per..(i + 1) * per].iter().map(|&v| T::of(v as f64))).collect();
    Tensor::new(&[idx.len(), frames, NUM_CLASSES], data).expect("prior cache layout")
}

fn run_phase<T: Element>(
    phase: &Phase<'_>,
    store: &mut ParamStore<T>,
    model: &Tpgsr,
    scorer: &mut Scorer,
    step: &mut u64,
    metrics: &mut Vec<EpochMetrics>,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<()> {
    let cfg = phase.cfg;
    let train = phase.data.train;
    let frames = model.config.rec.frames;
    let mut adam = AdamState::<T>::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(phase.stream);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let train_mode = mode(cfg, true);
    for epoch in 1..=phase.epochs {
        adam.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut sums, mut batches) = ([0.0f64; 4], 0usize);
        for idx in order.chunks(cfg.batch) {
            let refs: Vec<&SamplePair> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new(store);
            let lr = g.input(batch_lr(&refs).cast::<T>());
            let hr = g.input(batch_hr(&refs).cast::<T>());
            let t_h = cfg.use_tp.then(|| g.input(gather_priors::<T>(phase.priors, idx, frames)));
            let outs = model.multistage_forward(&mut g, lr, train_mode)?;
            let mut totals = Vec::with_capacity(outs.len());
            let mut terms = [0.0f64; 3];
            for (o, &w) in outs.iter().zip(&model.plan.lambdas) {
                let l = stage_loss(&mut g, o.sr, hr, o.tp, t_h, &cfg.loss)?;
                totals.push(l.total);
                terms[0] += w * l.image_l1;
                terms[1] += w * l.tp_l1;
                terms[2] += w * l.kl;
            }
            let loss = multistage_loss(&mut g, &totals, &model.plan.lambdas)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(*step as usize));
            }
            g.backward(loss)?;
            drop(g);
            adam.step(store);
            *step += 1;
            sums[0] += value;
            for k in 0..3 {
                sums[k + 1] += terms[k];
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let mut m = EpochMetrics {
            phase: phase.name.to_string(),
            epoch,
            stages: model.plan.stages,
            lr: adam.lr,
            loss: sums[0] / n,
            image_l1: sums[1] / n,
            tp_l1: sums[2] / n,
            kl: sums[3] / n,
            acc: None,
            psnr_db: None,
            ssim: None,
        };
        let due = cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
        if (due || epoch == phase.epochs) && !phase.data.test.is_empty() {
            let mut f32_store = store.cast::<f32>();
            let refs: Vec<&SamplePair> = phase.data.test.iter().collect();
            let sr = super_resolve(&mut f32_store, model, &refs, cfg.use_tp, 32)?.pop().expect("one stage at least");
            let r = score_images(SR, &sr, phase.data.test, &mut scorer.store, &scorer.rec)?;
            let avg = r.average();
            (m.acc, m.psnr_db, m.ssim) = (Some(avg.acc), Some(avg.psnr_db), Some(avg.ssim));
        }
        progress(&m);
        metrics.push(m);
    }
    Ok(())
}

fn check_data(cfg: &RunConfig, data: &TrainData<'_>) -> Result<()> {
    cfg.validate()?;
    let mc = cfg.model_config();
    if data.train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let lr_len = mc.lr_hw.0 * mc.lr_hw.1;
    if data.train.iter().chain(data.test).any(|s| s.lr.len() != lr_len) {
        return Err(invalid("dataset image size does not match the model"));
    }
    Ok(())
}

fn train_single_generic<T: Element>(
    cfg: &RunConfig,
    data: &TrainData<'_>,
    scorer: &mut Scorer,
    priors: &[f32],
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<Trained> {
    let mut store = ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Tpgsr::new(&mut store, cfg.model_config(), single_stage_plan(cfg), &mut rng)?;
    prepare(&mut store, &model, scorer, cfg)?;
    let phase = Phase {
        name: "single",
        epochs: cfg.epochs,
        stream: 1,
        cfg,
        data,
        priors,
    };
    let (mut step, mut metrics) = (0, Vec::new());
    run_phase(&phase, &mut store, &model, scorer, &mut step, &mut metrics, progress)?;
    Ok(Trained {
        store: store.cast(),
        model,
        metrics,
        steps: step,
    })
}

fn finetune_generic<T: Element>(
    cfg: &RunConfig,
    single: &Trained,
    data: &TrainData<'_>,
    scorer: &mut Scorer,
    priors: &[f32],
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<Trained> {
    let mut store = ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Tpgsr::new(&mut store, cfg.model_config(), cfg.plan()?, &mut rng)?;
    let ck = read_checkpoint(&single.checkpoint_bytes(cfg)?[..])?;
    model.init_from_single(&mut store, &ck)?;
    model.set_recognizers_trainable(&mut store, cfg.use_tp && cfg.tuned);
    if !cfg.use_tp {
        model.disable_prior(&mut store);
    }
    let phase = Phase {
        name: "multi",
        epochs: cfg.finetune_epochs,
        stream: 2,
        cfg,
        data,
        priors,
    };
    let mut step = single.steps;
    let mut metrics = single.metrics.clone();
    run_phase(&phase, &mut store, &model, scorer, &mut step, &mut metrics, progress)?;
    Ok(Trained {
        store: store.cast(),
        model,
        metrics,
        steps: step,
    })
}

/// Phase one: trains the single-stage model for `cfg.epochs`.
pub fn train_single_stage(
    cfg: &RunConfig,
    data: &TrainData<'_>,
    scorer: &mut Scorer,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<Trained> {
    check_data(cfg, data)?;
    let priors = if cfg.use_tp { scorer.hr_priors(data.train)? } else { Vec::new() };
    match cfg.precision {
        Precision::F32 => train_single_generic::<f32>(cfg, data, scorer, &priors, progress),
        Precision::F64 => train_single_generic::<f64>(cfg, data, scorer, &priors, progress),
    }
}

/// Phase two: builds the `cfg.stages`-stage model from `single` and
/// fine-tunes it for `cfg.finetune_epochs`. Metrics continue those of `single`.
pub fn finetune(
    cfg: &RunConfig,
    single: &Trained,
    data: &TrainData<'_>,
    scorer: &mut Scorer,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<Trained> {
    check_data(cfg, data)?;
    let priors = if cfg.use_tp { scorer.hr_priors(data.train)? } else { Vec::new() };
    match cfg.precision {
        Precision::F32 => finetune_generic::<f32>(cfg, single, data, scorer, &priors, progress),
        Precision::F64 => finetune_generic::<f64>(cfg, single, data, scorer, &priors, progress),
    }
}

/// Both phases. The second is skipped for a single stage without fine-tuning epochs.
pub fn train(cfg: &RunConfig, data: &TrainData<'_>, scorer: &mut Scorer, progress: &mut dyn FnMut(&EpochMetrics)) -> Result<(Trained, Trained)> {
    let single = train_single_stage(cfg, data, scorer, progress)?;
    let full = if cfg.stages == 1 && cfg.finetune_epochs == 0 {
        single.clone()
    } else {
        finetune(cfg, &single, data, scorer, progress)?
    };
    Ok((single, full))
}
