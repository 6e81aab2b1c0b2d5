//! Sample generation and the packed dataset file.
//!
//! ```text
//! "TPGD" | manifest_len u32 | manifest JSON
//! records: label_len u8 | label | frame_labels u8 x 16 | lr f32 x 1024 | hr f32 x 4096 | difficulty u8
//! ```
//!
//! Little-endian throughout. Manifest offsets are relative to the first record.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::alphabet::Alphabet;
use super::render::{
    degrade, frame_labels, render_hr, Difficulty, NoiseLevels, FRAMES, HR_HEIGHT, HR_WIDTH, LR_HEIGHT, LR_WIDTH,
    MAX_LABEL_LEN,
};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TPGD";
pub const FORMAT_VERSION: u32 = 1;
const LR_LEN: usize = LR_HEIGHT * LR_WIDTH;
const HR_LEN: usize = HR_HEIGHT * HR_WIDTH;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `LR_HEIGHT x LR_WIDTH`, row-major.
    pub lr: Vec<f32>,
    /// `HR_HEIGHT x HR_WIDTH`, row-major.
    pub hr: Vec<f32>,
    pub label: String,
    pub frame_labels: Vec<u8>,
    pub difficulty: Difficulty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurRanges {
    pub easy: (f64, f64),
    pub medium: (f64, f64),
    pub hard: (f64, f64),
}

impl Default for BlurRanges {
    fn default() -> Self {
        Self {
            easy: Difficulty::Easy.blur_range(),
            medium: Difficulty::Medium.blur_range(),
            hard: Difficulty::Hard.blur_range(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub splits: SplitCounts,
    pub seed: u64,
    pub frames: usize,
    pub blur_sigma: BlurRanges,
    pub noise: NoiseLevels,
    /// Byte offset of each record relative to the first.
    pub offsets: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

fn to_f32(p: &[f64]) -> Vec<f32> {
    p.iter().map(|&v| v as f32).collect()
}

/// Independent RNG stream for sample `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn random_label<R: Rng + ?Sized>(rng: &mut R) -> String {
    let len = rng.random_range(1..=MAX_LABEL_LEN);
    let symbols: Vec<char> = Alphabet.symbols().collect();
    (0..len).map(|_| symbols[rng.random_range(0..symbols.len())]).collect()
}

/// Generates one pair from its own stream.
pub fn generate_sample(seed: u64, index: u64, difficulty: Difficulty, noise: NoiseLevels) -> SamplePair {
    let mut rng = sample_rng(seed, index);
    let label = random_label(&mut rng);
    let hr = render_hr(&label, noise.render_sigma, &mut rng).expect("generated labels are valid");
    let lr = degrade(&hr, difficulty, noise.degrade_sigma, &mut rng);
    SamplePair {
        lr: to_f32(&lr.pixels),
        hr: to_f32(&hr.pixels),
        frame_labels: frame_labels(&label, FRAMES).expect("generated labels fit"),
        label,
        difficulty,
    }
}

/// Generates samples `indices`, splitting work across `threads` workers.
/// Output does not depend on the thread count.
fn generate_range(seed: u64, indices: std::ops::Range<usize>, first: usize, noise: NoiseLevels, threads: usize) -> Vec<SamplePair> {
    let make = |i: usize| generate_sample(seed, i as u64, Difficulty::ALL[(i - first) % 3], noise);
    let threads = threads.max(1).min(indices.len().max(1));
    if threads == 1 {
        return indices.map(make).collect();
    }
    let chunk = indices.len().div_ceil(threads);
    let starts: Vec<usize> = indices.clone().step_by(chunk).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = starts
            .iter()
            .map(|&a| {
                let b = (a + chunk).min(indices.end);
                s.spawn(move || (a..b).map(make).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generator thread panicked")).collect()
    })
}

/// Builds a dataset in memory. Difficulties cycle easy/medium/hard within
/// each split, so the test split is stratified.
pub fn build_dataset(n_train: usize, n_test: usize, seed: u64, threads: usize) -> Result<Dataset> {
    build_dataset_with(n_train, n_test, seed, NoiseLevels::default(), threads)
}

pub fn build_dataset_with(n_train: usize, n_test: usize, seed: u64, noise: NoiseLevels, threads: usize) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(invalid("train and test sizes must both be at least 1"));
    }
    let train = generate_range(seed, 0..n_train, 0, noise, threads);
    let test = generate_range(seed, n_train..n_train + n_test, n_train, noise, threads);
    let mut offsets = Vec::with_capacity(n_train + n_test);
    let mut at = 0u64;
    for s in train.iter().chain(&test) {
        offsets.push(at);
        at += record_len(s) as u64;
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            version: FORMAT_VERSION,
            count: n_train + n_test,
            splits: SplitCounts {
                train: n_train,
                test: n_test,
            },
            seed,
            frames: FRAMES,
            blur_sigma: BlurRanges::default(),
            noise,
            offsets,
        },
        train,
        test,
    })
}

fn record_len(s: &SamplePair) -> usize {
    1 + s.label.len() + FRAMES + 4 * (LR_LEN + HR_LEN) + 1
}

fn encode_record(s: &SamplePair, out: &mut Vec<u8>) {
    out.push(s.label.len() as u8);
    out.extend_from_slice(s.label.as_bytes());
    out.extend_from_slice(&s.frame_labels);
    for v in s.lr.iter().chain(&s.hr) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(s.difficulty.code());
}

impl Dataset {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let json = serde_json::to_vec(&self.manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for s in self.train.iter().chain(&self.test) {
            buf.clear();
            encode_record(s, &mut buf);
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        parse(bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        parse(&bytes)
    }

    pub fn samples(&self) -> impl Iterator<Item = &SamplePair> {
        self.train.iter().chain(&self.test)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let raw = self.take(4 * n, what)?;
        let v: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        if let Some(i) = v.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Corrupt {
                offset: (start + 4 * i) as u64,
                reason: format!("{what} pixel {} outside [0,1]", v[i]),
            });
        }
        Ok(v)
    }
}

fn parse(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            reason: "bad magic, not a dataset file".into(),
        });
    }
    let len = u32::from_le_bytes(r.take(4, "manifest length")?.try_into().expect("4 bytes")) as usize;
    let manifest_at = r.pos;
    let manifest: DatasetManifest = serde_json::from_slice(r.take(len, "manifest")?).map_err(|e| Error::Corrupt {
        offset: manifest_at as u64,
        reason: format!("manifest JSON: {e}"),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(invalid(format!("unsupported dataset version {}", manifest.version)));
    }
    if manifest.frames != FRAMES
        || manifest.splits.train + manifest.splits.test != manifest.count
        || manifest.offsets.len() != manifest.count
        || manifest.offsets.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::Corrupt {
            offset: manifest_at as u64,
            reason: "inconsistent manifest counts or offsets".into(),
        });
    }
    let base = r.pos;
    let mut samples = Vec::with_capacity(manifest.count);
    for &off in &manifest.offsets {
        if (r.pos - base) as u64 != off {
            return Err(r.err(format!("record expected at relative offset {off}")));
        }
        let n = r.take(1, "label length")?[0] as usize;
        let label_at = r.pos;
        let label = std::str::from_utf8(r.take(n, "label")?)
            .ok()
            .and_then(|l| Alphabet.normalize(l).filter(|norm| norm == l && (1..=MAX_LABEL_LEN).contains(&l.len())))
            .ok_or_else(|| Error::Corrupt {
                offset: label_at as u64,
                reason: "invalid label".into(),
            })?;
        let frames_at = r.pos;
        let frame_labels = r.take(FRAMES, "frame labels")?.to_vec();
        if frame_labels.iter().any(|&f| f as usize >= Alphabet.len()) {
            return Err(Error::Corrupt {
                offset: frames_at as u64,
                reason: "frame label out of range".into(),
            });
        }
        let lr = r.floats(LR_LEN, "lr")?;
        let hr = r.floats(HR_LEN, "hr")?;
        let code = r.take(1, "difficulty")?[0];
        let difficulty = Difficulty::from_code(code).ok_or_else(|| Error::Corrupt {
            offset: r.pos as u64 - 1,
            reason: format!("difficulty code {code}"),
        })?;
        samples.push(SamplePair {
            lr,
            hr,
            label,
            frame_labels,
            difficulty,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last record"));
    }
    let test = samples.split_off(manifest.splits.train);
    Ok(Dataset {
        manifest,
        train: samples,
        test,
    })
}

/// Stacks LR images into `[B,1,16,64]`.
pub fn batch_lr(samples: &[&SamplePair]) -> Tensor<f32> {
    stack(samples, |s| &s.lr, LR_HEIGHT, LR_WIDTH)
}

/// Stacks HR images into `[B,1,32,128]`.
pub fn batch_hr(samples: &[&SamplePair]) -> Tensor<f32> {
    stack(samples, |s| &s.hr, HR_HEIGHT, HR_WIDTH)
}

/// Concatenated frame labels, `B * FRAMES` entries.
pub fn batch_frame_targets(samples: &[&SamplePair]) -> Vec<usize> {
    samples.iter().flat_map(|s| s.frame_labels.iter().map(|&f| f as usize)).collect()
}

fn stack(samples: &[&SamplePair], pick: impl Fn(&SamplePair) -> &Vec<f32>, h: usize, w: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        data.extend_from_slice(pick(s));
    }
    Tensor::new(&[samples.len(), 1, h, w], data).expect("fixed image sizes")
}
