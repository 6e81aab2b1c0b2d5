//! Convolutional frame classifier that turns a text image into a text prior:
//! one categorical distribution over the alphabet per horizontal frame.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_frame_targets, batch_hr, gaussian_blur, GrayImage, Alphabet, SamplePair, BLANK, HR_HEIGHT, HR_WIDTH, NUM_CLASSES};
use crate::error::{invalid, Error, Result};
use crate::tensor::nn::{BatchNorm2d, Conv2d};
use crate::tensor::{AdamState, Element, Graph, ParamId, ParamStore, Tensor, Var};

/// Layer widths and pooling schedule. The product of the height pools must
/// equal the input height and the width pools must map the input width to
/// `frames`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub channels: [usize; 4],
    pub pools: [(usize, usize); 4],
    pub input_hw: (usize, usize),
    pub frames: usize,
}

impl RecognizerConfig {
    /// 32x128 input, 16 frames, widths 32/64/128/128.
    pub fn standard() -> Self {
        Self {
            channels: [32, 64, 128, 128],
            pools: [(2, 2), (2, 2), (2, 2), (4, 1)],
            input_hw: (HR_HEIGHT, HR_WIDTH),
            frames: 16,
        }
    }

    pub fn with_channels(mut self, channels: [usize; 4]) -> Self {
        self.channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ph: usize = self.pools.iter().map(|p| p.0).product();
        let pw: usize = self.pools.iter().map(|p| p.1).product();
        if self.channels.contains(&0) || ph != self.input_hw.0 || self.input_hw.1 != pw * self.frames {
            return Err(invalid(format!("recognizer config {self:?} does not collapse to 1 x frames")));
        }
        Ok(())
    }
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self::standard()
    }
}

/// Parameter handles of one recognizer; all names start with `prefix`.
#[derive(Clone, Debug)]
pub struct Recognizer {
    pub config: RecognizerConfig,
    pub prefix: String,
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm2d>,
    head: Conv2d,
}

impl Recognizer {
    /// Registers a fresh He-initialized recognizer under `prefix` (e.g. `"rec."`).
    pub fn new<T: Element, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: RecognizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{prefix}conv{i}"), cin, c, 3, rng)?);
            bns.push(BatchNorm2d::new(store, &format!("{prefix}bn{i}"), c)?);
            cin = c;
        }
        let head = Conv2d::new(store, &format!("{prefix}head"), cin, NUM_CLASSES, 1, rng)?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            convs,
            bns,
            head,
        })
    }

    /// Handles for a recognizer already present in `store` under `prefix`,
    /// laid out as [`Recognizer::new`] would create it.
    pub fn attach<T: Element>(store: &ParamStore<T>, prefix: &str, config: RecognizerConfig) -> Result<Self> {
        config.validate()?;
        let id = |n: String| store.id(&n).ok_or(Error::MissingParam(n));
        let conv = |name: String| -> Result<Conv2d> {
            let weight = id(format!("{name}.weight"))?;
            let k = store.tensor(weight).shape()[2];
            Ok(Conv2d {
                weight,
                bias: id(format!("{name}.bias"))?,
                stride: (1, 1),
                padding: (k / 2, k / 2),
            })
        };
        let bn = |name: String| -> Result<BatchNorm2d> {
            Ok(BatchNorm2d {
                params: crate::tensor::BnParams {
                    gamma: id(format!("{name}.weight"))?,
                    beta: id(format!("{name}.bias"))?,
                    running_mean: id(format!("{name}.running_mean"))?,
                    running_var: id(format!("{name}.running_var"))?,
                },
            })
        };
        Ok(Self {
            convs: (0..4).map(|i| conv(format!("{prefix}conv{i}"))).collect::<Result<_>>()?,
            bns: (0..4).map(|i| bn(format!("{prefix}bn{i}"))).collect::<Result<_>>()?,
            head: conv(format!("{prefix}head"))?,
            config,
            prefix: prefix.to_string(),
        })
    }

    /// Per-frame logits `[B, frames, 37]` for images already at `input_hw`.
    pub fn logits<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, train: bool) -> Result<Var> {
        let mut h = x;
        for ((conv, bn), &pool) in self.convs.iter().zip(&self.bns).zip(&self.config.pools) {
            h = conv.forward(g, h)?;
            h = bn.forward(g, h, train)?;
            h = g.relu(h);
            if pool != (1, 1) {
                h = g.max_pool2d(h, pool)?;
            }
        }
        h = self.head.forward(g, h)?;
        let b = g.shape(h)[0];
        let h = g.reshape(h, &[b, NUM_CLASSES, self.config.frames])?;
        g.transpose_last2(h)
    }

    /// Text prior `[B, frames, 37]`: images are bicubically resized to the
    /// recognizer input size when needed, then classified; rows are softmaxed.
    pub fn generate_tp<T: Element>(&self, g: &mut Graph<'_, T>, image: Var, train: bool) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(invalid(format!("recognizer expects [B,1,H,W] images, got {s:?}")));
        }
        let (h, w) = self.config.input_hw;
        let x = if (s[2], s[3]) == (h, w) { image } else { g.bicubic_resize(image, h, w)? };
        let logits = self.logits(g, x, train)?;
        g.softmax_lastdim(logits)
    }

    pub fn param_ids<T: Element>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.ids_with_prefix(&self.prefix)
    }
}

/// Freezes (`tuned = false`) or unfreezes every recognizer weight. Values are untouched.
pub fn set_trainable<T: Element>(store: &mut ParamStore<T>, rec: &Recognizer, tuned: bool) {
    store.set_trainable(&rec.prefix, tuned);
    if !tuned {
        for id in rec.param_ids(store) {
            store.tensor_mut(id).zero_grad();
        }
    }
}

/// Greedy decoding of one prior given as `frames x 37` row-major probabilities
/// (or logits): per-frame argmax, merge repeats, drop blanks.
pub fn decode<T: Element>(rows: &[T]) -> String {
    let best: Vec<usize> = rows
        .chunks_exact(NUM_CLASSES)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect();
    decode_indices(&best)
}

/// Collapse rule on per-frame class indices.
pub fn decode_indices(frames: &[usize]) -> String {
    let mut out = String::new();
    let mut prev = usize::MAX;
    for &c in frames {
        if c != prev && c != BLANK {
            out.extend(Alphabet.symbol(c));
        }
        prev = c;
    }
    out
}

/// Decodes every prior of a `[B, frames, 37]` tensor.
pub fn decode_batch<T: Element>(tp: &Tensor<T>) -> Vec<String> {
    let per = tp.shape()[1] * NUM_CLASSES;
    tp.data().chunks_exact(per).map(decode).collect()
}

/// Eval-mode recognition of `[N,1,H,W]` images in chunks of `batch`.
pub fn recognize(store: &mut ParamStore<f32>, rec: &Recognizer, images: &Tensor<f32>, batch: usize) -> Result<Vec<String>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(batch.max(1)) {
        let chunk = images.narrow0(start, (start + batch).min(n))?;
        let mut g = Graph::new(store);
        let x = g.input(chunk);
        let logits = rec.generate_tp(&mut g, x, false)?;
        out.extend(decode_batch(g.value(logits)));
    }
    Ok(out)
}

/// Fraction of `predictions` equal to `labels` (case-insensitive).
pub fn exact_match(predictions: &[String], labels: &[&str]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.eq_ignore_ascii_case(l))
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Trailing fraction of the training samples held out for model selection.
    pub val_fraction: f64,
    pub seed: u64,
    /// Each training image is blurred with probability one half by a Gaussian
    /// of sigma drawn from `[0, blur_augment]`; 0 disables.
    pub blur_augment: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch: 32,
            val_fraction: 0.1,
            seed: 0,
            blur_augment: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub first_batch_loss: f64,
    pub mean_loss: f64,
    pub last_batch_loss: f64,
    pub val_accuracy: f64,
    /// Mean per-frame cross-entropy on the held-out HR images.
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    /// Epoch (1-based) whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Per-frame cross-entropy training on HR images only. The store ends up
/// holding the weights with the best held-out HR exact-match accuracy,
/// ties broken by the lower held-out loss.
pub fn pretrain(
    store: &mut ParamStore<f32>,
    rec: &Recognizer,
    samples: &[SamplePair],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<PretrainReport> {
    if samples.is_empty() {
        return Err(invalid("cannot pretrain on an empty dataset"));
    }
    let mut report = PretrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let n_val = ((samples.len() as f64 * cfg.val_fraction).round() as usize).min(samples.len() - 1);
    let (train, val) = samples.split_at(samples.len() - n_val);
    let val_refs: Vec<&SamplePair> = val.iter().collect();
    let val_images = batch_hr(&val_refs);
    let val_labels: Vec<&str> = val.iter().map(|s| s.label.as_str()).collect();
    let val_targets = batch_frame_targets(&val_refs);
    // Exact match saturates on clean HR images, so ties go to the lower
    // held-out cross-entropy.
    let score = |store: &mut ParamStore<f32>| -> Result<(f64, f64)> {
        if val.is_empty() {
            return Ok((0.0, 0.0));
        }
        let acc = exact_match(&recognize(store, rec, &val_images, 64)?, &val_labels);
        let per = rec.config.frames;
        let mut total = 0.0;
        for (start, chunk) in (0..val.len()).step_by(64).zip(val_targets.chunks(64 * per)) {
            let n = chunk.len() / per;
            let mut g = Graph::new(store);
            let x = g.input(val_images.narrow0(start, start + n)?);
            let logits = rec.logits(&mut g, x, false)?;
            let flat = g.reshape(logits, &[chunk.len(), NUM_CLASSES])?;
            let loss = g.cross_entropy(flat, chunk)?;
            total += g.value(loss).item() as f64 * n as f64;
        }
        Ok((acc, total / val.len() as f64))
    };
    let better = |a: (f64, f64), b: (f64, f64)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);

    let mut best = (score(store)?, store.clone(), 0);
    let mut adam = AdamState::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for idx in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<&SamplePair> = idx.iter().map(|&i| &train[i]).collect();
            let mut x = batch_hr(&batch);
            if cfg.blur_augment > 0.0 {
                augment_blur(&mut x, cfg.blur_augment, &mut rng);
            }
            let targets = batch_frame_targets(&batch);
            let mut g = Graph::new(store);
            let xv = g.input(x);
            let logits = rec.logits(&mut g, xv, true)?;
            let flat = g.reshape(logits, &[targets.len(), NUM_CLASSES])?;
            let loss = g.cross_entropy(flat, &targets)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(adam.step_count() as usize));
            }
            g.backward(loss)?;
            drop(g);
            adam.step(store);
            losses.push(value);
        }
        let (val_accuracy, val_loss) = score(store)?;
        let log = PretrainEpoch {
            epoch,
            first_batch_loss: losses[0],
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            last_batch_loss: *losses.last().expect("nonempty"),
            val_accuracy,
            val_loss,
        };
        on_epoch(&log);
        report.epochs.push(log);
        if better((val_accuracy, val_loss), best.0) || val.is_empty() {
            best = ((val_accuracy, val_loss), store.clone(), epoch);
        }
    }
    *store = best.1;
    report.best_epoch = best.2;
    report.best_val_accuracy = best.0 .0;
    Ok(report)
}

fn augment_blur<R: rand::Rng + ?Sized>(x: &mut Tensor<f32>, max_sigma: f64, rng: &mut R) {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    for img in x.data_mut().chunks_exact_mut(h * w) {
        if !rng.random_bool(0.5) {
            continue;
        }
        let sigma = rng.random_range(0.05..=max_sigma.max(0.05));
        let src = GrayImage {
            height: h,
            width: w,
            pixels: img.iter().map(|&v| v as f64).collect(),
        };
        for (d, s) in img.iter_mut().zip(gaussian_blur(&src, sigma).pixels) {
            *d = s as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(frames: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; frames.len() * NUM_CLASSES];
        for (i, &c) in frames.iter().enumerate() {
            v[i * NUM_CLASSES + c] = 1.0;
        }
        v
    }

    #[test]
    fn collapse_rule() {
        let (a, b, c) = (Alphabet.index('a'), Alphabet.index('b'), Alphabet.index('c'));
        assert_eq!(decode(&one_hot(&[a, a, BLANK, b])), "ab");
        assert_eq!(decode(&one_hot(&[BLANK; 5])), "");
        assert_eq!(decode(&one_hot(&[BLANK, c, c, BLANK, c])), "cc");
    }

    #[test]
    fn configs_validate() {
        RecognizerConfig::standard().validate().unwrap();
        let bad = RecognizerConfig {
            frames: 8,
            ..RecognizerConfig::standard()
        };
        assert!(bad.validate().is_err());
    }
}
