use std::collections::HashMap;

use super::{Element, ParamId, ParamKind, ParamStore};

/// Adam with bias correction. `beta1 = 0.9` is the momentum term.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Element> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable weight holding a gradient, then
    /// clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let one = T::one();
        for (id, p) in store.iter_mut() {
            if p.kind != ParamKind::Weight || !p.tensor.requires_grad() {
                p.tensor.zero_grad();
                continue;
            }
            let Some(grad) = p.tensor.take_grad() else { continue };
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, state: &mut AdamState<T>) {
    state.step(store)
}
