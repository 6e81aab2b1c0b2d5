use crate::tensor::Element;

/// Non-overlapping max pooling over `[planes, h, w]` with window `(kh, kw)`.
///
/// Returns the flat input index of each selected maximum; ties keep the
/// first element in scan order.
pub fn max_pool<T: Element>(x: &[T], planes: usize, h: usize, w: usize, kh: usize, kw: usize, out: &mut [T]) -> Vec<u32> {
    let (oh, ow) = (h / kh, w / kw);
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for dy in 0..kh {
                    let row = base + (oy * kh + dy) * w + ox * kw;
                    for dx in 0..kw {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_i = row + dx;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    arg
}
