//! Residual SR block with additive text-prior fusion.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::nn::{BatchNorm2d, Conv2d};
use crate::tensor::{Element, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TpGuidedBlock {
    pub channels: usize,
    pub tp_channels: usize,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    /// 1x1 projection of `[features, prior]` back to `channels`.
    pub proj: Conv2d,
}

impl TpGuidedBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        tp_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            tp_channels,
            conv1: Conv2d::new(store, &format!("{prefix}conv1"), channels, channels, 3, rng)?,
            bn1: BatchNorm2d::new(store, &format!("{prefix}bn1"), channels)?,
            conv2: Conv2d::new(store, &format!("{prefix}conv2"), channels, channels, 3, rng)?,
            bn2: BatchNorm2d::new(store, &format!("{prefix}bn2"), channels)?,
            proj: Conv2d::new(store, &format!("{prefix}proj"), channels + tp_channels, channels, 1, rng)?,
        })
    }

    /// conv-BN-ReLU-conv-BN plus identity.
    pub fn base_forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, train: bool) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h, train)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h, train)?;
        g.add(h, x)
    }

    /// Resizes `tp_feat` to the feature size, projects the concatenation,
    /// adds the projection to `x`, then runs the base block. Without a prior
    /// this is the base block.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, tp_feat: Option<Var>, train: bool) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(invalid(format!("block expects {} feature channels, got {s:?}", self.channels)));
        }
        let Some(tp) = tp_feat else {
            return self.base_forward(g, x, train);
        };
        let ts = g.shape(tp).to_vec();
        if ts.len() != 4 || ts[1] != self.tp_channels {
            return Err(invalid(format!("block expects {} prior channels, got {ts:?}", self.tp_channels)));
        }
        let aligned = g.bicubic_resize(tp, s[2], s[3])?;
        let cat = g.concat_channels(&[x, aligned])?;
        let p = self.proj.forward(g, cat)?;
        let fused = g.add(x, p)?;
        self.base_forward(g, fused, train)
    }

    /// Sets the projection to exactly zero, so the block ignores the prior.
    pub fn zero_projection<T: Element>(&self, store: &mut ParamStore<T>) {
        for id in [self.proj.weight, self.proj.bias] {
            let shape = store.tensor(id).shape().to_vec();
            let rg = store.tensor(id).requires_grad();
            let mut z = Tensor::zeros(&shape);
            z.set_requires_grad(rg);
            *store.tensor_mut(id) = z;
        }
    }

    pub fn projection_ids(&self) -> [crate::tensor::ParamId; 2] {
        [self.proj.weight, self.proj.bias]
    }
}
