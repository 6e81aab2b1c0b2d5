use crate::tensor::Element;

/// Depth-to-space: `[b, c*r*r, h, w] -> [b, c, h*r, w*r]`.
pub fn pixel_shuffle<T: Element>(x: &[T], b: usize, c: usize, h: usize, w: usize, r: usize, out: &mut [T]) {
    for_each_pair(b, c, h, w, r, |src, dst| out[dst] = x[src]);
}

pub fn pixel_shuffle_backward<T: Element>(dout: &[T], b: usize, c: usize, h: usize, w: usize, r: usize, dx: &mut [T]) {
    for_each_pair(b, c, h, w, r, |src, dst| dx[src] += dout[dst]);
}

fn for_each_pair(b: usize, c: usize, h: usize, w: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (oh, ow) = (h * r, w * r);
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ci * r * r + dy * r + dx;
                    let src_base = (bi * c * r * r + src_c) * h * w;
                    let dst_base = (bi * c + ci) * oh * ow;
                    for y in 0..h {
                        for x in 0..w {
                            f(src_base + y * w + x, dst_base + (y * r + dy) * ow + x * r + dx);
                        }
                    }
                }
            }
        }
    }
}
