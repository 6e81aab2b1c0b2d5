use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpgsr::data::*;
use tpgsr::recognizer::decode_indices;
use tpgsr::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn single_glyph_foreground_is_the_font_mask_at_the_layout_offset() {
    let mut r = rng(7);
    let layout = layout_label("a", &mut r).unwrap();
    let img = draw("a", &layout);
    let mask = glyph_mask('a').unwrap();
    let left = layout.glyph_left[0] as usize;
    for y in 0..HR_HEIGHT {
        for x in 0..HR_WIDTH {
            let inside = (layout.top..layout.top + CELL_HEIGHT).contains(&y) && (left..left + CELL_WIDTH).contains(&x);
            let on = inside && mask[y - layout.top][x - left];
            let want = if on { layout.foreground } else { layout.background };
            assert_eq!(img.at(y, x), want, "pixel ({y},{x})");
        }
    }
    assert!(layout.background - layout.foreground >= 0.4 - 1e-12);
}

#[test]
fn every_alphabet_symbol_has_a_glyph_and_others_do_not() {
    for c in Alphabet.symbols() {
        assert!(glyph_mask(c).is_some(), "{c}");
    }
    for c in ['-', ' ', '!', 'é'] {
        assert!(glyph_mask(c).is_none(), "{c}");
    }
}

#[test]
fn invalid_labels_are_rejected() {
    let mut r = rng(0);
    assert!(matches!(render_hr("", 0.02, &mut r), Err(Error::InvalidArgument(_))));
    assert!(render_hr("0123456789", 0.02, &mut r).is_err());
    assert!(render_hr("ab-c", 0.02, &mut r).is_err());
    assert!(render_hr("abcdefgh", 0.02, &mut r).is_ok());
}

#[test]
fn rendered_pixels_are_in_unit_range() {
    let mut r = rng(3);
    for _ in 0..20 {
        let label = random_label(&mut r);
        let img = render_hr(&label, 0.02, &mut r).unwrap();
        assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn degrading_a_constant_image_stays_constant() {
    let mut r = rng(11);
    for d in Difficulty::ALL {
        for value in [0.0, 0.3, 1.0] {
            let hr = GrayImage::filled(HR_HEIGHT, HR_WIDTH, value);
            let lr = degrade(&hr, d, 0.01, &mut r);
            assert_eq!((lr.height, lr.width), (LR_HEIGHT, LR_WIDTH));
            let worst = lr.pixels.iter().map(|p| (p - value).abs()).fold(0.0, f64::max);
            assert!(worst < 0.05, "{d} {value}: {worst}");
        }
    }
}

/// Direct 2-D summation of a Gaussian with clamped borders, normalized over the window.
fn blur_oracle(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let weight = |d: i64| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
    let norm: f64 = (-r..=r).map(weight).sum::<f64>().powi(2);
    let (h, w) = (img.height as i64, img.width as i64);
    let mut out = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = (y + dy).clamp(0, h - 1);
                    let sx = (x + dx).clamp(0, w - 1);
                    acc += weight(dy) * weight(dx) * img.pixels[(sy * w + sx) as usize];
                }
            }
            out[(y * w + x) as usize] = acc / norm;
        }
    }
    out
}

#[test]
fn blur_of_an_impulse_matches_direct_summation() {
    for (y, x) in [(16, 64), (0, 0), (2, 126)] {
        let mut img = GrayImage::filled(HR_HEIGHT, HR_WIDTH, 0.0);
        img.pixels[y * HR_WIDTH + x] = 1.0;
        let got = gaussian_blur(&img, 1.0);
        let want = blur_oracle(&img, 1.0);
        let worst = got.pixels.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "impulse at ({y},{x}): {worst}");
    }
}

#[test]
fn box_downsample_averages_blocks() {
    let img = GrayImage {
        height: 2,
        width: 4,
        pixels: vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 0.25, 0.75],
    };
    let d = box_downsample(&img);
    assert_eq!((d.height, d.width), (1, 2));
    assert_eq!(d.pixels, vec![0.5, 0.5]);
}

fn bytes_of(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    ds.write_to(&mut buf).unwrap();
    buf
}

#[test]
fn build_is_deterministic_and_stratified() {
    let a = build_dataset(100, 30, 7, 1).unwrap();
    let b = build_dataset(100, 30, 7, 3).unwrap();
    assert_eq!(bytes_of(&a), bytes_of(&b));
    assert_eq!(a.manifest.splits, SplitCounts { train: 100, test: 30 });
    assert_eq!(a.manifest.count, 130);
    for d in Difficulty::ALL {
        assert_eq!(a.test.iter().filter(|s| s.difficulty == d).count(), 10, "{d}");
    }
    let c = build_dataset(100, 30, 8, 1).unwrap();
    assert_ne!(bytes_of(&a), bytes_of(&c));
}

#[test]
fn zero_sized_splits_are_rejected() {
    assert!(build_dataset(0, 10, 1, 1).is_err());
    assert!(build_dataset(10, 0, 1, 1).is_err());
}

#[test]
fn two_character_label_spreads_over_frames() {
    let f = frame_labels("ab", FRAMES).unwrap();
    let mut want = vec![BLANK as u8; FRAMES];
    want[4] = Alphabet.index('a') as u8;
    want[12] = Alphabet.index('b') as u8;
    assert_eq!(f, want);
}

#[test]
fn file_round_trip_is_bitwise() {
    let ds = build_dataset(12, 6, 5, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.tpgd");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    for (a, b) in ds.samples().zip(back.samples()) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.frame_labels, b.frame_labels);
        assert_eq!(a.difficulty, b.difficulty);
        assert!(a.lr.iter().zip(&b.lr).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.hr.iter().zip(&b.hr).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let offs = &ds.manifest.offsets;
    assert!(offs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn truncated_or_corrupt_files_cite_an_offset() {
    let ds = build_dataset(3, 3, 2, 1).unwrap();
    let bytes = bytes_of(&ds);
    for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
        match Dataset::from_bytes(&bytes[..cut]) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset <= cut as u64, "cut {cut} offset {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Corrupt { offset: 0, .. })));
    // Difficulty byte of the last record.
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] = 9;
    match Dataset::from_bytes(&bad) {
        Err(Error::Corrupt { offset, reason }) => {
            assert_eq!(offset, last as u64);
            assert!(reason.contains("difficulty"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(Dataset::from_bytes(&extra), Err(Error::Corrupt { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_samples_decode_to_their_label(seed in 0u64..1000, index in 0u64..10_000, d in 0u8..3) {
        let s = generate_sample(seed, index, Difficulty::from_code(d).unwrap(), NoiseLevels::default());
        let idx: Vec<usize> = s.frame_labels.iter().map(|&v| v as usize).collect();
        prop_assert_eq!(decode_indices(&idx), s.label.clone());
        prop_assert_eq!(s.lr.len() * 4, s.hr.len());
        prop_assert!(s.lr.iter().chain(&s.hr).all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn frame_labels_round_trip_any_valid_label(label in "[0-9a-z]{1,8}") {
        let f = frame_labels(&label, FRAMES).unwrap();
        let idx: Vec<usize> = f.iter().map(|&v| v as usize).collect();
        prop_assert_eq!(decode_indices(&idx), label);
    }
}
