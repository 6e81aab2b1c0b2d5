use crate::tensor::Element;

/// Batch statistics saved by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance, used for normalization.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel mean and biased variance of an NCHW buffer (f64 accumulation).
pub fn channel_stats<T: Element>(x: &[T], batch: usize, c: usize, plane: usize, eps: f64) -> BatchStats<T> {
    let count = (batch * plane) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * c + ch) * plane;
            s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0;
        for b in 0..batch {
            let off = (b * c + ch) * plane;
            ss += x[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        let v = ss / count;
        mean[ch] = T::of(m);
        var[ch] = T::of(v);
        inv_std[ch] = T::of(1.0 / (v + eps).sqrt());
    }
    BatchStats { mean, var, inv_std }
}

/// `y = gamma * (x - mean) * inv_std + beta`, writing the normalized values to `xhat`.
#[allow(clippy::too_many_arguments)]
pub fn normalize<T: Element>(
    x: &[T],
    batch: usize,
    c: usize,
    plane: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    xhat: &mut [T],
    y: &mut [T],
) {
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + plane {
                let h = (x[i] - m) * is;
                xhat[i] = h;
                y[i] = g * h + bt;
            }
        }
    }
}

/// Training-mode backward. Accumulates into whichever outputs are given.
#[allow(clippy::too_many_arguments)]
pub fn backward_train<T: Element>(
    dy: &[T],
    xhat: &[T],
    batch: usize,
    c: usize,
    plane: usize,
    inv_std: &[T],
    gamma: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let count = (batch * plane) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (mut s, mut sx) = (0.0, 0.0);
            for i in off..off + plane {
                let d = dy[i].as_f64();
                s += d;
                sx += d * xhat[i].as_f64();
            }
            sum_dy[ch] += s;
            sum_dy_xhat[ch] += sx;
        }
    }
    if let Some(dg) = dgamma {
        dg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &v)| *a += T::of(v));
    }
    if let Some(dbt) = dbeta {
        dbt.iter_mut().zip(&sum_dy).for_each(|(a, &v)| *a += T::of(v));
    }
    if let Some(dx) = dx {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch] / T::of(count);
            let n = T::of(count);
            let (s, sx) = (T::of(sum_dy[ch]), T::of(sum_dy_xhat[ch]));
            for b in 0..batch {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dx[i] += k * (n * dy[i] - s - xhat[i] * sx);
                }
            }
        }
    }
}
