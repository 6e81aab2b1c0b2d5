//! Deconvolution stack lifting a `[B, L, 37]` prior into a spatial feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{invalid, Result};
use crate::tensor::nn::{BatchNorm2d, Deconv2d};
use crate::tensor::{Element, Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TptConfig {
    /// Output channels of the four blocks; the last is the fused prior width.
    pub channels: [usize; 4],
    pub strides: [(usize, usize); 4],
    pub frames: usize,
}

impl TptConfig {
    /// 37 -> 64 -> 64 -> 64 -> 32 with strides (2,2) x 3 then (2,1).
    pub fn standard(frames: usize) -> Self {
        Self {
            channels: [64, 64, 64, 32],
            strides: [(2, 2), (2, 2), (2, 2), (2, 1)],
            frames,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.channels[3]
    }

    /// Spatial size of the output for a `1 x frames` input.
    pub fn out_hw(&self) -> (usize, usize) {
        self.strides.iter().fold((1, self.frames), |(h, w), s| (h * s.0, w * s.1))
    }
}

#[derive(Clone, Debug)]
pub struct TpTransformer {
    pub config: TptConfig,
    pub prefix: String,
    deconvs: Vec<Deconv2d>,
    bns: Vec<BatchNorm2d>,
}

impl TpTransformer {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, config: TptConfig, rng: &mut R) -> Result<Self> {
        let mut deconvs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = NUM_CLASSES;
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            deconvs.push(Deconv2d::new(store, &format!("{prefix}deconv{i}"), cin, c, s, rng)?);
            bns.push(BatchNorm2d::new(store, &format!("{prefix}bn{i}"), c)?);
            cin = c;
        }
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            deconvs,
            bns,
        })
    }

    /// `tp` is `[B, L, 37]`; it is laid out as `[B, 37, 1, L]` (classes as
    /// channels) and returned as `[B, C_out, H_out, W_out]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, tp: Var, train: bool) -> Result<Var> {
        let s = g.shape(tp).to_vec();
        if s.len() != 3 || s[1] != self.config.frames || s[2] != NUM_CLASSES {
            return Err(invalid(format!(
                "TP transformer expects [B, {}, {NUM_CLASSES}] priors, got {s:?}",
                self.config.frames
            )));
        }
        let t = g.transpose_last2(tp)?;
        let mut h = g.reshape(t, &[s[0], NUM_CLASSES, 1, s[1]])?;
        for (d, bn) in self.deconvs.iter().zip(&self.bns) {
            h = d.forward(g, h)?;
            h = bn.forward(g, h, train)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}
