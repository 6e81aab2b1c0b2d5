//! Image and text-prior losses.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Element, Graph, Var};
use crate::tpgsr::validate_lambdas;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the mean absolute prior difference.
    pub alpha: f64,
    /// Weight of the KL term.
    pub beta: f64,
    /// Smoothing inside the KL logarithm.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.epsilon > 0.0) {
            return Err(invalid(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

/// `sum_ij t_H ln((t_H + eps) / (t_L + eps))` over the `L x |A|` cells of
/// each prior, averaged over the batch. Priors are `[B, L, |A|]`.
pub fn kl_tp<T: Element>(g: &mut Graph<'_, T>, t_l: Var, t_h: Var, epsilon: f64) -> Result<Var> {
    let shape = g.shape(t_l).to_vec();
    if shape.len() != 3 {
        return Err(invalid(format!("priors must be [B, L, |A|], got {shape:?}")));
    }
    let total = g.kl_prior(t_l, t_h, epsilon)?;
    Ok(g.scale(total, 1.0 / shape[0] as f64))
}

/// Loss terms of one stage; the scalars are for logging.
#[derive(Clone, Copy, Debug)]
pub struct StageLoss {
    pub total: Var,
    pub image_l1: f64,
    pub tp_l1: f64,
    pub kl: f64,
}

/// `L1(sr, hr) + alpha * L1(t_H, t_L) + beta * KL(t_L || t_H)`. The prior
/// terms vanish when either prior is absent; `t_H` is detached.
pub fn stage_loss<T: Element>(
    g: &mut Graph<'_, T>,
    sr: Var,
    hr: Var,
    t_l: Option<Var>,
    t_h: Option<Var>,
    cfg: &LossConfig,
) -> Result<StageLoss> {
    let image = g.l1_loss(sr, hr)?;
    let image_l1 = g.value(image).item().as_f64();
    let (Some(t_l), Some(t_h)) = (t_l, t_h) else {
        return Ok(StageLoss {
            total: image,
            image_l1,
            tp_l1: 0.0,
            kl: 0.0,
        });
    };
    let t_h = g.detach(t_h);
    let l1 = g.l1_loss(t_h, t_l)?;
    let kl = kl_tp(g, t_l, t_h, cfg.epsilon)?;
    let (tp_l1, kl_value) = (g.value(l1).item().as_f64(), g.value(kl).item().as_f64());
    let mut total = image;
    if cfg.alpha != 0.0 {
        let t = g.scale(l1, cfg.alpha);
        total = g.add(total, t)?;
    }
    if cfg.beta != 0.0 {
        let t = g.scale(kl, cfg.beta);
        total = g.add(total, t)?;
    }
    Ok(StageLoss {
        total,
        image_l1,
        tp_l1,
        kl: kl_value,
    })
}

/// `sum_i lambda_i L_i`; the weights must sum to one.
pub fn multistage_loss<T: Element>(g: &mut Graph<'_, T>, losses: &[Var], lambdas: &[f64]) -> Result<Var> {
    if losses.len() != lambdas.len() || losses.is_empty() {
        return Err(invalid(format!("{} stage losses for {} weights", losses.len(), lambdas.len())));
    }
    validate_lambdas(lambdas)?;
    if let [only] = losses {
        return Ok(*only);
    }
    let mut total = g.scale(losses[0], lambdas[0]);
    for (&l, &w) in losses.iter().zip(lambdas).skip(1) {
        let t = g.scale(l, w);
        total = g.add(total, t)?;
    }
    Ok(total)
}
