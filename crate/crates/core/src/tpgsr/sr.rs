//! The super-resolution branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::TpGuidedBlock;
use crate::error::{invalid, Result};
use crate::tensor::nn::{BatchNorm2d, Conv2d};
use crate::tensor::{Element, Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrConfig {
    pub channels: usize,
    pub blocks: usize,
    pub tp_channels: usize,
    /// Adds the bicubic upsampling of the input to the output, so the network
    /// learns a residual over bicubic.
    #[serde(default)]
    pub bicubic_skip: bool,
    /// Starts every fusion projection at zero, so training begins from the
    /// prior-free network.
    #[serde(default)]
    pub zero_init_fusion: bool,
}

impl SrConfig {
    pub fn standard() -> Self {
        Self {
            channels: 64,
            blocks: 5,
            tp_channels: 32,
            bicubic_skip: false,
            zero_init_fusion: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SrModule {
    pub config: SrConfig,
    pub prefix: String,
    head: Conv2d,
    pub blocks: Vec<TpGuidedBlock>,
    body: Conv2d,
    body_bn: BatchNorm2d,
    up: Conv2d,
    tail: Conv2d,
}

impl SrModule {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, config: SrConfig, rng: &mut R) -> Result<Self> {
        if config.channels == 0 || config.blocks == 0 {
            return Err(invalid("SR module needs at least one channel and one block"));
        }
        let c = config.channels;
        let head = Conv2d::new(store, &format!("{prefix}head"), 1, c, 3, rng)?;
        let blocks = (0..config.blocks)
            .map(|i| TpGuidedBlock::new(store, &format!("{prefix}block{i}."), c, config.tp_channels, rng))
            .collect::<Result<_>>()?;
        let body = Conv2d::new(store, &format!("{prefix}body"), c, c, 3, rng)?;
        let body_bn = BatchNorm2d::new(store, &format!("{prefix}body_bn"), c)?;
        let up = Conv2d::new(store, &format!("{prefix}up"), c, 4 * c, 3, rng)?;
        let tail = Conv2d::new(store, &format!("{prefix}tail"), c, 1, 3, rng)?;
        if config.bicubic_skip {
            // Start exactly at the bicubic upsampling.
            store.tensor_mut(tail.weight).data_mut().fill(T::zero());
        }
        let module = Self {
            head,
            blocks,
            body,
            body_bn,
            up,
            tail,
            config,
            prefix: prefix.to_string(),
        };
        if module.config.zero_init_fusion {
            module.zero_projections(store);
        }
        Ok(module)
    }

    /// `[B,1,h,w]` -> `[B,1,2h,2w]`, every block guided by `tp_feat` when given.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, lr: Var, tp_feat: Option<Var>, train: bool) -> Result<Var> {
        let h0 = self.head.forward(g, lr)?;
        let h0 = g.relu(h0);
        let mut h = h0;
        for b in &self.blocks {
            h = b.forward(g, h, tp_feat, train)?;
        }
        let h = self.body.forward(g, h)?;
        let h = self.body_bn.forward(g, h, train)?;
        let h = g.add(h, h0)?;
        let h = self.up.forward(g, h)?;
        let h = g.pixel_shuffle(h, 2)?;
        let out = self.tail.forward(g, h)?;
        if !self.config.bicubic_skip {
            return Ok(out);
        }
        let s = g.shape(lr).to_vec();
        let up = g.bicubic_resize(lr, 2 * s[2], 2 * s[3])?;
        g.add(out, up)
    }

    pub fn zero_projections<T: Element>(&self, store: &mut ParamStore<T>) {
        self.blocks.iter().for_each(|b| b.zero_projection(store));
    }

    pub fn set_projections_trainable<T: Element>(&self, store: &mut ParamStore<T>, trainable: bool) {
        for b in &self.blocks {
            for id in b.projection_ids() {
                store.tensor_mut(id).set_requires_grad(trainable);
            }
        }
    }
}
