//! 8-bit grayscale image files (binary PGM or PNG) and comparison grids.

use std::path::Path;

use image::codecs::pnm::{PnmSubtype, SampleEncoding};
use image::{GrayImage, ImageFormat, Luma};

use crate::error::{invalid, Error, Result};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

/// Writes `[0,1]` pixels as PGM (P5) or PNG, chosen by extension.
pub fn save_gray(path: &Path, height: usize, width: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(invalid(format!("{} pixels for a {height}x{width} image", pixels.len())));
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| Luma([to_u8(pixels[y as usize * width + x as usize])]));
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e)),
        "pgm" => {
            let file = std::io::BufWriter::new(std::fs::File::create(path)?);
            let enc = image::codecs::pnm::PnmEncoder::new(file).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
            img.write_with_encoder(enc).map_err(|e| image_err(path, e))
        }
        _ => Err(invalid(format!("{}: expected a .pgm or .png file name", path.display()))),
    }
}

/// Reads a PGM or PNG image as `(height, width, pixels in [0,1])`; color input is converted to luma.
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.pixels().map(|p| p.0[0] as f32 / 255.0).collect()))
}

/// Row-major canvas that tiles equally sized panels with a gap between them.
pub struct Grid {
    pub panel_h: usize,
    pub panel_w: usize,
    pub rows: usize,
    pub cols: usize,
    gap: usize,
    pub pixels: Vec<f32>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, panel_h: usize, panel_w: usize) -> Self {
        let gap = 2;
        let (h, w) = (rows * (panel_h + gap) - gap, cols * (panel_w + gap) - gap);
        Self {
            panel_h,
            panel_w,
            rows,
            cols,
            gap,
            pixels: vec![1.0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.rows * (self.panel_h + self.gap) - self.gap
    }

    pub fn width(&self) -> usize {
        self.cols * (self.panel_w + self.gap) - self.gap
    }

    /// Places an `h x w` image in cell (`row`, `col`), scaled up by pixel
    /// repetition when smaller than the panel.
    pub fn put(&mut self, row: usize, col: usize, h: usize, w: usize, img: &[f32]) {
        let (sy, sx) = ((self.panel_h / h).max(1), (self.panel_w / w).max(1));
        let width = self.width();
        let (oy, ox) = (row * (self.panel_h + self.gap), col * (self.panel_w + self.gap));
        for y in 0..self.panel_h.min(h * sy) {
            for x in 0..self.panel_w.min(w * sx) {
                self.pixels[(oy + y) * width + ox + x] = img[(y / sy) * w + x / sx];
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_gray(path, self.height(), self.width(), &self.pixels)
    }
}
