//! Test-set evaluation: recognition accuracy, PSNR and SSIM per difficulty.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{batch_hr, batch_lr, Difficulty, SamplePair};
use crate::error::{invalid, Result};
use crate::metrics::{psnr, ssim};
use crate::recognizer::{recognize, Recognizer};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::tpgsr::{ForwardMode, Tpgsr};

pub const CSV_HEADER: &str = "split,n,acc,psnr_db,ssim";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    pub n: usize,
    pub acc: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-difficulty rows followed by an `average` row for one image source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub rows: Vec<MetricRow>,
}

impl MethodReport {
    pub fn average(&self) -> &MetricRow {
        self.rows.last().expect("reports always carry an average row")
    }

    pub fn split(&self, name: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.split == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.split, r.n, r.acc, r.psnr_db, r.ssim).expect("string write");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Final-stage SR accuracy averaged over all samples.
    pub fn sr_accuracy(&self) -> f64 {
        self.method(SR).map_or(0.0, |m| m.average().acc)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:<8} {:>5} {:>8} {:>9} {:>7}\n", "method", "split", "n", "acc", "psnr_db", "ssim");
        for m in &self.methods {
            for r in &m.rows {
                writeln!(
                    s,
                    "{:<10} {:<8} {:>5} {:>7.2}% {:>9.3} {:>7.4}",
                    m.method,
                    r.split,
                    r.n,
                    100.0 * r.acc,
                    r.psnr_db,
                    r.ssim
                )
                .expect("string write");
            }
        }
        s
    }
}

pub const SR: &str = "sr";
pub const BICUBIC: &str = "bicubic";
pub const HR: &str = "hr";

/// Scores images already at HR size against the samples' labels and HR images.
pub fn score_images(
    method: &str,
    images: &Tensor<f32>,
    samples: &[SamplePair],
    scorer_store: &mut ParamStore<f32>,
    scorer: &Recognizer,
) -> Result<MethodReport> {
    if samples.is_empty() {
        return Err(invalid("cannot evaluate an empty dataset"));
    }
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let per = h * w;
    let predictions = recognize(scorer_store, scorer, images, 64)?;
    let mut per_sample = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let img = &images.data()[i * per..(i + 1) * per];
        let hit = predictions[i].eq_ignore_ascii_case(&s.label);
        per_sample.push((s.difficulty, hit, psnr(img, &s.hr)?, ssim(img, &s.hr, h, w)?));
    }
    let row = |split: &str, items: &[&(Difficulty, bool, f64, f64)]| {
        let n = items.len() as f64;
        MetricRow {
            split: split.to_string(),
            n: items.len(),
            acc: items.iter().filter(|r| r.1).count() as f64 / n,
            psnr_db: items.iter().map(|r| r.2).sum::<f64>() / n,
            ssim: items.iter().map(|r| r.3).sum::<f64>() / n,
        }
    };
    let mut rows = Vec::new();
    for d in Difficulty::ALL {
        let items: Vec<_> = per_sample.iter().filter(|r| r.0 == d).collect();
        if !items.is_empty() {
            rows.push(row(d.name(), &items));
        }
    }
    let all: Vec<_> = per_sample.iter().collect();
    rows.push(row("average", &all));
    Ok(MethodReport {
        method: method.to_string(),
        rows,
    })
}

/// Bicubic upsampling of every LR image to HR size.
pub fn bicubic_images(samples: &[&SamplePair], hr_hw: (usize, usize)) -> Result<Tensor<f32>> {
    let mut store = ParamStore::<f32>::new();
    let mut g = Graph::new(&mut store);
    let x = g.input(batch_lr(samples));
    let up = g.bicubic_resize(x, hr_hw.0, hr_hw.1)?;
    Ok(clamp01(g.value(up).clone()))
}

fn clamp01(mut t: Tensor<f32>) -> Tensor<f32> {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    t
}

/// Eval-mode SR output of every stage, clamped to [0,1]: `result[k]` is stage `k + 1`.
pub fn super_resolve(
    store: &mut ParamStore<f32>,
    model: &Tpgsr,
    samples: &[&SamplePair],
    use_tp: bool,
    batch: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut per_stage: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); model.plan.stages];
    let mode = ForwardMode { use_tp, ..ForwardMode::EVAL };
    for chunk in samples.chunks(batch.max(1)) {
        let mut g = Graph::new(store);
        let lr = g.input(batch_lr(chunk));
        let outs = model.multistage_forward(&mut g, lr, mode)?;
        for (k, o) in outs.iter().enumerate() {
            per_stage[k].push(clamp01(g.value(o.sr).clone()));
        }
    }
    per_stage.iter().map(|parts| Tensor::stack0(parts)).collect()
}

/// Full report: final-stage SR, the bicubic baseline and the HR upper bound,
/// all scored by the frozen `scorer`.
pub fn evaluate(
    store: &mut ParamStore<f32>,
    model: &Tpgsr,
    use_tp: bool,
    samples: &[SamplePair],
    scorer_store: &mut ParamStore<f32>,
    scorer: &Recognizer,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(invalid("cannot evaluate an empty dataset"));
    }
    let refs: Vec<&SamplePair> = samples.iter().collect();
    let sr = super_resolve(store, model, &refs, use_tp, 32)?.pop().expect("at least one stage");
    Ok(EvalReport {
        methods: vec![
            score_images(SR, &sr, samples, scorer_store, scorer)?,
            baseline_report(BICUBIC, samples, model.config.hr_hw(), scorer_store, scorer)?,
            baseline_report(HR, samples, model.config.hr_hw(), scorer_store, scorer)?,
        ],
    })
}

/// Rows for the bicubic baseline or the HR images themselves.
pub fn baseline_report(
    method: &str,
    samples: &[SamplePair],
    hr_hw: (usize, usize),
    scorer_store: &mut ParamStore<f32>,
    scorer: &Recognizer,
) -> Result<MethodReport> {
    let refs: Vec<&SamplePair> = samples.iter().collect();
    let images = match method {
        BICUBIC => bicubic_images(&refs, hr_hw)?,
        HR => batch_hr(&refs),
        other => return Err(invalid(format!("unknown baseline `{other}`"))),
    };
    score_images(method, &images, samples, scorer_store, scorer)
}
