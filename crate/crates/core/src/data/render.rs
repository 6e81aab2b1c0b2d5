//! Clean text rendering and synthetic degradation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::alphabet::{Alphabet, BLANK};
use super::font::{glyph_mask, CELL_HEIGHT, CELL_WIDTH};
use crate::error::{invalid, Result};

pub const HR_HEIGHT: usize = 32;
pub const HR_WIDTH: usize = 128;
pub const LR_HEIGHT: usize = HR_HEIGHT / 2;
pub const LR_WIDTH: usize = HR_WIDTH / 2;
/// Recognizer frames per image.
pub const FRAMES: usize = 16;
pub const MAX_LABEL_LEN: usize = 8;
/// HR pixels per recognizer frame.
pub const FRAME_WIDTH: usize = HR_WIDTH / FRAMES;

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    fn clamp01(&mut self) {
        self.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    /// Blur sigma range in HR pixels.
    pub fn blur_range(self) -> (f64, f64) {
        match self {
            Difficulty::Easy => (0.5, 1.0),
            Difficulty::Medium => (1.0, 1.5),
            Difficulty::Hard => (1.5, 2.5),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Difficulty {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| invalid(format!("unknown difficulty `{s}`")))
    }
}

/// Noise levels; zero turns the corresponding noise off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub render_sigma: f64,
    pub degrade_sigma: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self {
            render_sigma: 0.02,
            degrade_sigma: 0.01,
        }
    }
}

/// Frame index of each label character: character `i` (1-based) of an
/// `n`-character label goes to frame `floor((i - 0.5) * frames / n)`.
pub fn frame_positions(len: usize, frames: usize) -> Vec<usize> {
    (1..=len).map(|i| ((2 * i - 1) * frames) / (2 * len)).collect()
}

/// Per-frame class indices with the label spread across `frames`, blanks elsewhere.
pub fn frame_labels(label: &str, frames: usize) -> Result<Vec<u8>> {
    let chars = checked_label(label)?;
    if chars.len() > frames / 2 {
        return Err(invalid(format!("label `{label}` does not fit {frames} frames")));
    }
    let mut out = vec![BLANK as u8; frames];
    for (&f, &c) in frame_positions(chars.len(), frames).iter().zip(&chars) {
        out[f] = Alphabet.index(c) as u8;
    }
    Ok(out)
}

fn checked_label(label: &str) -> Result<Vec<char>> {
    let chars: Vec<char> = label.chars().collect();
    if chars.is_empty() || chars.len() > MAX_LABEL_LEN {
        return Err(invalid(format!("label length {} outside 1..={MAX_LABEL_LEN}", chars.len())));
    }
    if let Some(&c) = chars.iter().find(|&&c| Alphabet.index(c) == BLANK) {
        return Err(invalid(format!("label `{label}` contains `{c}`, which is not in the alphabet")));
    }
    Ok(chars)
}

/// Where and how a label was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// Left pixel column of each glyph cell.
    pub glyph_left: Vec<i64>,
    pub top: usize,
    pub foreground: f64,
    pub background: f64,
}

/// Draws `label` without noise. Glyph `i` is centred on its frame (see
/// [`frame_positions`]) and the whole line is shifted by one random offset of
/// up to 8 px, limited so every glyph stays inside the image and inside its frame.
pub fn layout_label<R: Rng + ?Sized>(label: &str, rng: &mut R) -> Result<Layout> {
    let chars = checked_label(label)?;
    let centres: Vec<i64> = frame_positions(chars.len(), FRAMES)
        .iter()
        .map(|&f| (f * FRAME_WIDTH + FRAME_WIDTH / 2) as i64)
        .collect();
    let half = (CELL_WIDTH / 2) as i64;
    let lo = (-(FRAME_WIDTH as i64) / 2).max(half - centres[0]);
    let hi = (FRAME_WIDTH as i64 / 2 - 1).min(HR_WIDTH as i64 - half - centres[centres.len() - 1]);
    let shift = rng.random_range(lo..=hi);
    let contrast = rng.random_range(0.4..=1.0);
    let background = rng.random_range(contrast..=1.0);
    Ok(Layout {
        glyph_left: centres.iter().map(|c| c - half + shift).collect(),
        top: (HR_HEIGHT - CELL_HEIGHT) / 2,
        foreground: background - contrast,
        background,
    })
}

/// Renders the noise-free image of a layout.
pub fn draw(label: &str, layout: &Layout) -> GrayImage {
    let mut img = GrayImage::filled(HR_HEIGHT, HR_WIDTH, layout.background);
    for (c, &left) in label.chars().zip(&layout.glyph_left) {
        let mask = glyph_mask(c).expect("label checked by layout");
        for (dy, row) in mask.iter().enumerate() {
            for (dx, &on) in row.iter().enumerate() {
                let x = left + dx as i64;
                if on && (0..HR_WIDTH as i64).contains(&x) {
                    img.pixels[(layout.top + dy) * HR_WIDTH + x as usize] = layout.foreground;
                }
            }
        }
    }
    img
}

fn add_noise<R: Rng + ?Sized>(img: &mut GrayImage, sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        img.pixels.iter_mut().for_each(|p| *p += n.sample(rng));
    }
    img.clamp01();
}

/// Clean HR rendering of `label` with pixel noise, values in [0,1].
pub fn render_hr<R: Rng + ?Sized>(label: &str, noise_sigma: f64, rng: &mut R) -> Result<GrayImage> {
    let layout = layout_label(label, rng)?;
    let mut img = draw(label, &layout);
    add_noise(&mut img, noise_sigma, rng);
    Ok(img)
}

/// Normalized 1-D Gaussian taps over `[-r, r]` with `r = ceil(4 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian blur with edge-clamped borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as i64;
    let (h, w) = (img.height as i64, img.width as i64);
    let mut tmp = GrayImage::filled(img.height, img.width, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sx = (x + k as i64 - r).clamp(0, w - 1);
                acc += t * img.pixels[(y * w + sx) as usize];
            }
            tmp.pixels[(y * w + x) as usize] = acc;
        }
    }
    let mut out = GrayImage::filled(img.height, img.width, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sy = (y + k as i64 - r).clamp(0, h - 1);
                acc += t * tmp.pixels[(sy * w + x) as usize];
            }
            out.pixels[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Averages non-overlapping 2x2 blocks.
pub fn box_downsample(img: &GrayImage) -> GrayImage {
    let (oh, ow) = (img.height / 2, img.width / 2);
    let mut out = GrayImage::filled(oh, ow, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            let s = img.at(2 * y, 2 * x) + img.at(2 * y, 2 * x + 1) + img.at(2 * y + 1, 2 * x) + img.at(2 * y + 1, 2 * x + 1);
            out.pixels[y * ow + x] = 0.25 * s;
        }
    }
    out
}

/// Blur with a difficulty-dependent sigma, 2x2 box downsample, add noise, clamp.
pub fn degrade<R: Rng + ?Sized>(hr: &GrayImage, difficulty: Difficulty, noise_sigma: f64, rng: &mut R) -> GrayImage {
    let (lo, hi) = difficulty.blur_range();
    let sigma = rng.random_range(lo..=hi);
    let mut lr = box_downsample(&gaussian_blur(hr, sigma));
    add_noise(&mut lr, noise_sigma, rng);
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_positions_never_touch() {
        for len in 1..=MAX_LABEL_LEN {
            let p = frame_positions(len, FRAMES);
            assert!(p.windows(2).all(|w| w[1] >= w[0] + 2), "{len}: {p:?}");
            assert!(*p.last().unwrap() < FRAMES);
        }
        assert_eq!(frame_positions(2, 16), vec![4, 12]);
    }

    #[test]
    fn glyphs_stay_inside_image_and_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 1..=MAX_LABEL_LEN {
            let label: String = "w".repeat(len);
            for _ in 0..50 {
                let l = layout_label(&label, &mut rng).unwrap();
                for (&left, &f) in l.glyph_left.iter().zip(&frame_positions(len, FRAMES)) {
                    assert!(left >= 0 && left + CELL_WIDTH as i64 <= HR_WIDTH as i64);
                    let centre = left + CELL_WIDTH as i64 / 2;
                    assert_eq!(centre as usize / FRAME_WIDTH, f);
                }
            }
        }
    }
}
