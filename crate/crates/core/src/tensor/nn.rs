//! Layer handles: each owns [`ParamId`]s into a [`ParamStore`].

use rand::Rng;

use super::graph::{BnParams, Graph, Var};
use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::Result;

/// He-normal standard deviation for a given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    /// Square `k x k` kernel, "same" padding for odd `k` at stride 1.
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::randn(&[cout, cin, k, k], he_std(cin * k * k), rng);
        Ok(Self {
            weight: store.add_weight(format!("{name}.weight"), w)?,
            bias: store.add_weight(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            stride: (1, 1),
            padding: (k / 2, k / 2),
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// 3x3 transposed convolution with padding 1 and output padding `stride - 1`,
/// so every spatial axis scales exactly by its stride.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
}

impl Deconv2d {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::randn(&[cin, cout, 3, 3], he_std(cin * 9), rng);
        Ok(Self {
            weight: store.add_weight(format!("{name}.weight"), w)?,
            bias: store.add_weight(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            stride,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let op = (self.stride.0 - 1, self.stride.1 - 1);
        g.deconv2d(x, w, Some(b), self.stride, (1, 1), op)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub params: BnParams,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            params: BnParams {
                gamma: store.add_weight(format!("{name}.weight"), Tensor::full(&[c], T::one()))?,
                beta: store.add_weight(format!("{name}.bias"), Tensor::zeros(&[c]))?,
                running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
                running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], T::one()))?,
            },
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, train: bool) -> Result<Var> {
        g.batch_norm(x, self.params, train)
    }
}
