//! Separable bicubic resampling (Keys kernel, `a = -0.5`).

use crate::tensor::Element;

const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn keys_cubic(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// One-axis resampling operator: each output sample is a 4-tap combination
/// of edge-clamped input samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Resample1d {
    pub src: usize,
    pub dst: usize,
    /// `dst * 4` (index, weight) pairs.
    pub taps: Vec<(usize, f64)>,
}

impl Resample1d {
    /// Half-pixel (align-corners = false) sampling grid.
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut taps = Vec::with_capacity(dst * 4);
        for o in 0..dst {
            let pos = (o as f64 + 0.5) * scale - 0.5;
            let base = pos.floor();
            let t = pos - base;
            let weights = [keys_cubic(t + 1.0), keys_cubic(t), keys_cubic(1.0 - t), keys_cubic(2.0 - t)];
            for (j, w) in weights.into_iter().enumerate() {
                let idx = (base as isize - 1 + j as isize).clamp(0, src as isize - 1) as usize;
                taps.push((idx, w));
            }
        }
        Self { src, dst, taps }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }
}

/// Resamples `planes` images `[h, w]` to `[rh.dst, rw.dst]`.
pub fn resize_forward<T: Element>(x: &[T], planes: usize, rh: &Resample1d, rw: &Resample1d, out: &mut [T]) {
    let (h, w, oh, ow) = (rh.src, rw.src, rh.dst, rw.dst);
    let wt: Vec<(usize, T)> = rw.taps.iter().map(|&(i, v)| (i, T::of(v))).collect();
    let ht: Vec<(usize, T)> = rh.taps.iter().map(|&(i, v)| (i, T::of(v))).collect();
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for ox in 0..ow {
                let t = &wt[ox * 4..ox * 4 + 4];
                tmp[y * ow + ox] = t[0].1 * row[t[0].0] + t[1].1 * row[t[1].0] + t[2].1 * row[t[2].0] + t[3].1 * row[t[3].0];
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let t = &ht[oy * 4..oy * 4 + 4];
            let d = &mut dst[oy * ow..(oy + 1) * ow];
            d.fill(T::zero());
            for &(iy, wgt) in t {
                let r = &tmp[iy * ow..(iy + 1) * ow];
                d.iter_mut().zip(r).for_each(|(a, &b)| *a += wgt * b);
            }
        }
    }
}

/// Adjoint of [`resize_forward`], accumulating into `dx`.
pub fn resize_backward<T: Element>(dout: &[T], planes: usize, rh: &Resample1d, rw: &Resample1d, dx: &mut [T]) {
    let (h, w, oh, ow) = (rh.src, rw.src, rh.dst, rw.dst);
    let wt: Vec<(usize, T)> = rw.taps.iter().map(|&(i, v)| (i, T::of(v))).collect();
    let ht: Vec<(usize, T)> = rh.taps.iter().map(|&(i, v)| (i, T::of(v))).collect();
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        tmp.fill(T::zero());
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let grow = &g[oy * ow..(oy + 1) * ow];
            for &(iy, wgt) in &ht[oy * 4..oy * 4 + 4] {
                tmp[iy * ow..(iy + 1) * ow].iter_mut().zip(grow).for_each(|(a, &b)| *a += wgt * b);
            }
        }
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &mut d[y * w..(y + 1) * w];
            for ox in 0..ow {
                let v = tmp[y * ow + ox];
                for &(ix, wgt) in &wt[ox * 4..ox * 4 + 4] {
                    row[ix] += wgt * v;
                }
            }
        }
    }
}
