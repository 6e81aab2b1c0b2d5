//! Embedded 5x7 bitmap font, drawn at 2x to give 10x14 glyph cells.

use super::alphabet::Alphabet;

pub const GLYPH_COLS: usize = 5;
pub const GLYPH_ROWS: usize = 7;
/// Pixel scale applied when drawing.
pub const GLYPH_SCALE: usize = 2;
pub const CELL_WIDTH: usize = GLYPH_COLS * GLYPH_SCALE;
pub const CELL_HEIGHT: usize = GLYPH_ROWS * GLYPH_SCALE;

// One row per byte, bit 4 is the leftmost column. Letters use capital shapes.
const ROWS: [[u8; GLYPH_ROWS]; 36] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E], // 1
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C], // 9
    [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11], // a
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // b
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E], // c
    [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C], // d
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // e
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10], // f
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F], // g
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // h
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E], // i
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C], // j
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // k
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // l
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11], // m
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11], // n
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // o
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10], // p
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D], // q
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // r
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E], // s
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // t
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // u
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04], // v
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A], // w
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // x
    [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04], // y
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // z
];

/// Binary mask of a glyph at drawing scale, row-major `CELL_HEIGHT x CELL_WIDTH`.
/// `None` for characters outside the alphabet.
pub fn glyph_mask(c: char) -> Option<[[bool; CELL_WIDTH]; CELL_HEIGHT]> {
    let class = Alphabet.index(c);
    if class == 0 {
        return None;
    }
    let rows = &ROWS[class - 1];
    let mut mask = [[false; CELL_WIDTH]; CELL_HEIGHT];
    for (y, row) in mask.iter_mut().enumerate() {
        let bits = rows[y / GLYPH_SCALE];
        for (x, px) in row.iter_mut().enumerate() {
            *px = bits & (0x10 >> (x / GLYPH_SCALE)) != 0;
        }
    }
    Some(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_pairwise_distinct() {
        let masks: Vec<_> = Alphabet.symbols().map(|c| glyph_mask(c).unwrap()).collect();
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j], "{i} vs {j}");
            }
        }
        assert!(glyph_mask('?').is_none());
        assert_eq!(glyph_mask('A'), glyph_mask('a'));
    }
}
