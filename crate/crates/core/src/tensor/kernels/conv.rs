//! Convolution and transposed convolution over NCHW buffers.
//!
//! Both directions lower to `im2col` + GEMM. A transposed convolution is
//! computed as the data-gradient of the convolution whose geometry maps the
//! transposed output back onto its input, so the two share every kernel.

use crate::tensor::element::{gemm, Element, MatRef};

/// Spatial geometry of a convolution from an `img` plane to a `col` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub img_h: usize,
    pub img_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(img: (usize, usize), k: (usize, usize), s: (usize, usize), p: (usize, usize)) -> Option<Self> {
        let (h, w) = img;
        if h + 2 * p.0 < k.0 || w + 2 * p.1 < k.1 || s.0 == 0 || s.1 == 0 {
            return None;
        }
        Some(Self {
            img_h: h,
            img_w: w,
            kh: k.0,
            kw: k.1,
            sh: s.0,
            sw: s.1,
            ph: p.0,
            pw: p.1,
            out_h: (h + 2 * p.0 - k.0) / s.0 + 1,
            out_w: (w + 2 * p.1 - k.1) / s.1 + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    fn col_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output range `[lo, hi)` for kernel offset `k` along one axis.
    #[inline]
    fn valid_range(k: usize, pad: usize, stride: usize, img: usize, out: usize) -> (usize, usize) {
        // need 0 <= o*stride + k - pad < img
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if img + pad > k { ((img + pad - k - 1) / stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfolds `img [c, img_h, img_w]` into `cols [c*kh*kw, out_h*out_w]`.
pub fn im2col<T: Element>(img: &[T], c: usize, g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_len();
    debug_assert_eq!(cols.len(), c * g.kh * g.kw * n);
    for ci in 0..c {
        let plane = &img[ci * g.img_h * g.img_w..(ci + 1) * g.img_h * g.img_w];
        for ki in 0..g.kh {
            let (ylo, yhi) = ConvGeom::valid_range(ki, g.ph, g.sh, g.img_h, g.out_h);
            for kj in 0..g.kw {
                let (xlo, xhi) = ConvGeom::valid_range(kj, g.pw, g.sw, g.img_w, g.out_w);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                dst[..ylo * g.out_w].fill(T::zero());
                dst[yhi * g.out_w..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.sh + ki - g.ph;
                    let src = &plane[iy * g.img_w..(iy + 1) * g.img_w];
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    d[..xlo].fill(T::zero());
                    d[xhi..].fill(T::zero());
                    if g.sw == 1 {
                        let x0 = xlo + kj - g.pw;
                        d[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            d[ox] = src[ox * g.sw + kj - g.pw];
                        }
                    }
                }
            }
        }
    }
}

/// Folds `cols` back onto `img`, accumulating overlapping contributions.
pub fn col2im<T: Element>(cols: &[T], c: usize, g: &ConvGeom, img: &mut [T]) {
    let n = g.col_len();
    debug_assert_eq!(cols.len(), c * g.kh * g.kw * n);
    for ci in 0..c {
        let plane = &mut img[ci * g.img_h * g.img_w..(ci + 1) * g.img_h * g.img_w];
        for ki in 0..g.kh {
            let (ylo, yhi) = ConvGeom::valid_range(ki, g.ph, g.sh, g.img_h, g.out_h);
            for kj in 0..g.kw {
                let (xlo, xhi) = ConvGeom::valid_range(kj, g.pw, g.sw, g.img_w, g.out_w);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in ylo..yhi {
                    let iy = oy * g.sh + ki - g.ph;
                    let dst = &mut plane[iy * g.img_w..(iy + 1) * g.img_w];
                    let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.sw == 1 {
                        let x0 = xlo + kj - g.pw;
                        dst[x0..x0 + (xhi - xlo)]
                            .iter_mut()
                            .zip(&s[xlo..xhi])
                            .for_each(|(a, &b)| *a += b);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox * g.sw + kj - g.pw] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of a convolution call; `weight` is `[cout, cin, kh, kw]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

/// `out[b] = W * im2col(x[b]) + bias`.
pub fn conv_forward<T: Element>(d: &ConvDims, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let g = &d.geom;
    let k = d.cin * g.kh * g.kw;
    let n = g.col_len();
    let in_len = d.cin * g.img_h * g.img_w;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..d.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * d.cout * n..(b + 1) * d.cout * n];
        let colv: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, d.cin, g, &mut cols);
            &cols
        };
        gemm(d.cout, k, n, MatRef::rows(w, k), MatRef::rows(colv, n), T::zero(), ob);
        if let Some(bias) = bias {
            for (row, &bv) in ob.chunks_exact_mut(n).zip(bias) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Accumulates gradients of a convolution. Any output slot may be skipped.
pub fn conv_backward<T: Element>(
    d: &ConvDims,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let g = &d.geom;
    let k = d.cin * g.kh * g.kw;
    let n = g.col_len();
    let in_len = d.cin * g.img_h * g.img_w;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * n] };
    let mut dcols = if dx.is_some() && !pointwise { vec![T::zero(); k * n] } else { Vec::new() };
    for b in 0..d.batch {
        let db = &dout[b * d.cout * n..(b + 1) * d.cout * n];
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let colv: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, d.cin, g, &mut cols);
                &cols
            };
            gemm(d.cout, n, k, MatRef::rows(db, n), MatRef::transposed(colv, n), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(k, d.cout, n, MatRef::transposed(w, k), MatRef::rows(db, n), T::one(), dxb);
            } else {
                gemm(k, d.cout, n, MatRef::transposed(w, k), MatRef::rows(db, n), T::zero(), &mut dcols);
                col2im(&dcols, d.cin, g, dxb);
            }
        }
    }
    if let Some(dbias) = dbias {
        for b in 0..d.batch {
            let db = &dout[b * d.cout * n..(b + 1) * d.cout * n];
            for (acc, row) in dbias.iter_mut().zip(db.chunks_exact(n)) {
                *acc += row.iter().copied().sum::<T>();
            }
        }
    }
}

/// Shapes of a transposed convolution; `weight` is `[cin, cout, kh, kw]`.
///
/// `geom` describes the *adjoint* convolution: its image is the transposed
/// output `[cout, out_h, out_w]` and its column plane is the input grid.
#[derive(Clone, Copy, Debug)]
pub struct DeconvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

pub fn deconv_forward<T: Element>(d: &DeconvDims, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let g = &d.geom;
    let k = d.cout * g.kh * g.kw;
    let n = g.col_len();
    let out_len = d.cout * g.img_h * g.img_w;
    let mut cols = vec![T::zero(); k * n];
    out.fill(T::zero());
    for b in 0..d.batch {
        let xb = &x[b * d.cin * n..(b + 1) * d.cin * n];
        gemm(k, d.cin, n, MatRef::transposed(w, k), MatRef::rows(xb, n), T::zero(), &mut cols);
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        col2im(&cols, d.cout, g, ob);
        if let Some(bias) = bias {
            let plane = g.img_h * g.img_w;
            for (chunk, &bv) in ob.chunks_exact_mut(plane).zip(bias) {
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

pub fn deconv_backward<T: Element>(
    d: &DeconvDims,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let g = &d.geom;
    let k = d.cout * g.kh * g.kw;
    let n = g.col_len();
    let out_len = d.cout * g.img_h * g.img_w;
    let mut dcols = vec![T::zero(); k * n];
    for b in 0..d.batch {
        let db = &dout[b * out_len..(b + 1) * out_len];
        im2col(db, d.cout, g, &mut dcols);
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * d.cin * n..(b + 1) * d.cin * n];
            gemm(d.cin, k, n, MatRef::rows(w, k), MatRef::rows(&dcols, n), T::one(), dxb);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * d.cin * n..(b + 1) * d.cin * n];
            gemm(d.cin, n, k, MatRef::rows(xb, n), MatRef::transposed(&dcols, n), T::one(), dw);
        }
    }
    if let Some(dbias) = dbias {
        let plane = g.img_h * g.img_w;
        for b in 0..d.batch {
            let db = &dout[b * out_len..(b + 1) * out_len];
            for (acc, chunk) in dbias.iter_mut().zip(db.chunks_exact(plane)) {
                *acc += chunk.iter().copied().sum::<T>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], cin: usize, cout: usize, g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; cout * g.out_h * g.out_w];
        for co in 0..cout {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                                let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                                if iy < 0 || ix < 0 || iy >= g.img_h as isize || ix >= g.img_w as isize {
                                    continue;
                                }
                                s += x[(ci * g.img_h + iy as usize) * g.img_w + ix as usize]
                                    * w[((co * cin + ci) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[(co * g.out_h + oy) * g.out_w + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(h, w, k, s, p) in &[(5, 7, 3, 1, 1), (6, 5, 3, 2, 1), (4, 4, 1, 1, 0), (7, 9, 3, 2, 0), (5, 5, 5, 3, 2)] {
            let g = ConvGeom::new((h, w), (k, k), (s, s), (p, p)).unwrap();
            let (cin, cout) = (2, 3);
            let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
            let mut out = vec![0.0; cout * g.out_h * g.out_w];
            let d = ConvDims { batch: 1, cin, cout, geom: g };
            conv_forward(&d, &x, &wt, None, &mut out);
            assert_eq!(out, naive_conv(&x, &wt, cin, cout, &g), "geom {g:?}");
        }
    }

    #[test]
    fn valid_range_covers_exactly_in_bounds_outputs() {
        for img in 1..9 {
            for k in 0..5 {
                for pad in 0..3 {
                    for stride in 1..4 {
                        let out = 12;
                        let (lo, hi) = ConvGeom::valid_range(k, pad, stride, img, out);
                        for o in 0..out {
                            let pos = (o * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && pos < img as isize;
                            assert_eq!(inside, o >= lo && o < hi, "img={img} k={k} pad={pad} s={stride} o={o}");
                        }
                    }
                }
            }
        }
    }
}
