//! Stage plans and the multi-stage pipeline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sr::{SrConfig, SrModule};
use super::transformer::{TptConfig, TpTransformer};
use crate::error::{invalid, Result};
use crate::recognizer::{set_trainable, Recognizer, RecognizerConfig};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Element, Graph, ParamStore, Var};

/// Tolerance on the stage weights summing to one.
pub const LAMBDA_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: usize,
    pub lambdas: Vec<f64>,
    pub share_sr: bool,
    pub share_tpg: bool,
    pub stop_grad: bool,
}

impl StagePlan {
    pub fn new(stages: usize, lambdas: Vec<f64>) -> Result<Self> {
        let plan = Self {
            stages,
            lambdas,
            share_sr: true,
            share_tpg: false,
            stop_grad: true,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Plan with [`default_lambdas`].
    pub fn with_stages(stages: usize) -> Result<Self> {
        Self::new(stages, default_lambdas(stages)?)
    }

    pub fn single() -> Self {
        Self::with_stages(1).expect("one stage is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(invalid("a stage plan needs at least one stage"));
        }
        if self.lambdas.len() != self.stages {
            return Err(invalid(format!("{} stage weights for {} stages", self.lambdas.len(), self.stages)));
        }
        validate_lambdas(&self.lambdas)
    }
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::with_stages(3).expect("three stages are valid")
    }
}

pub fn validate_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(invalid(format!("stage weights must be finite and nonnegative, got {lambdas:?}")));
    }
    let sum: f64 = lambdas.iter().sum();
    if (sum - 1.0).abs() > LAMBDA_SUM_TOL {
        return Err(invalid(format!("stage weights {lambdas:?} sum to {sum}, not 1")));
    }
    Ok(())
}

/// Final stage weighs 1/2 and earlier stages split the other half evenly:
/// (1), (1/2, 1/2), (1/4, 1/4, 1/2), ...
pub fn default_lambdas(stages: usize) -> Result<Vec<f64>> {
    match stages {
        0 => Err(invalid("a stage plan needs at least one stage")),
        1 => Ok(vec![1.0]),
        n => {
            let early = 0.5 / (n - 1) as f64;
            Ok((0..n).map(|i| if i + 1 == n { 0.5 } else { early }).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// LR input size; outputs are twice as large.
    pub lr_hw: (usize, usize),
    pub sr: SrConfig,
    pub tpt: TptConfig,
    pub rec: RecognizerConfig,
}

impl ModelConfig {
    /// 16x64 -> 32x128, C = 64, transformer 64/64/64/32, recognizer 32/64/128/128.
    pub fn standard() -> Self {
        Self {
            lr_hw: (16, 64),
            sr: SrConfig::standard(),
            tpt: TptConfig::standard(16),
            rec: RecognizerConfig::standard(),
        }
    }

    /// Narrower layers sized for single-core CPU training.
    pub fn desk() -> Self {
        Self {
            lr_hw: (16, 64),
            sr: SrConfig {
                channels: 16,
                blocks: 5,
                tp_channels: 32,
                bicubic_skip: true,
                zero_init_fusion: true,
            },
            tpt: TptConfig {
                channels: [16, 16, 16, 32],
                ..TptConfig::standard(16)
            },
            rec: RecognizerConfig::standard().with_channels([16, 32, 64, 64]),
        }
    }

    /// 8x16 images, C = 8, L = 4: small enough for finite differences.
    pub fn miniature() -> Self {
        Self {
            lr_hw: (8, 16),
            sr: SrConfig {
                channels: 8,
                blocks: 5,
                tp_channels: 32,
                bicubic_skip: true,
                zero_init_fusion: true,
            },
            tpt: TptConfig {
                channels: [8, 8, 8, 32],
                ..TptConfig::standard(4)
            },
            rec: RecognizerConfig {
                channels: [4, 4, 8, 8],
                pools: [(2, 2), (2, 2), (2, 2), (2, 1)],
                input_hw: (16, 32),
                frames: 4,
            },
        }
    }

    pub fn hr_hw(&self) -> (usize, usize) {
        (2 * self.lr_hw.0, 2 * self.lr_hw.1)
    }

    pub fn validate(&self) -> Result<()> {
        self.rec.validate()?;
        if self.rec.input_hw != self.hr_hw() || self.tpt.frames != self.rec.frames || self.sr.tp_channels != self.tpt.out_channels() {
            return Err(invalid("recognizer, transformer and SR configs disagree"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard()
    }
}

/// How a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    /// Batch statistics in the SR module and transformer.
    pub train: bool,
    /// Batch statistics in the recognizers (only meaningful when they are tuned).
    pub rec_train: bool,
    /// Compute and fuse the prior; off gives the prior-free baseline.
    pub use_tp: bool,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode {
        train: false,
        rec_train: false,
        use_tp: true,
    };
}

pub struct StageOutput {
    /// Super-resolved image `[B,1,2h,2w]`.
    pub sr: Var,
    /// Prior `[B, L, 37]` the stage was guided by, absent without prior.
    pub tp: Option<Var>,
}

pub fn stage_prefix(stage: usize, shared: bool, part: &str) -> String {
    if shared {
        format!("tpg.shared.{part}.")
    } else {
        format!("tpg.stage{stage}.{part}.")
    }
}

/// Handles of a full multi-stage model inside one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Tpgsr {
    pub config: ModelConfig,
    pub plan: StagePlan,
    srs: Vec<SrModule>,
    recs: Vec<Recognizer>,
    tpts: Vec<TpTransformer>,
}

impl Tpgsr {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: ModelConfig, plan: StagePlan, rng: &mut R) -> Result<Self> {
        config.validate()?;
        plan.validate()?;
        let copies = |shared: bool| if shared { 1 } else { plan.stages };
        let mut recs = Vec::new();
        let mut tpts = Vec::new();
        for k in 1..=copies(plan.share_tpg) {
            recs.push(Recognizer::new(store, &stage_prefix(k, plan.share_tpg, "rec"), config.rec.clone(), rng)?);
            tpts.push(TpTransformer::new(store, &stage_prefix(k, plan.share_tpg, "tpt"), config.tpt.clone(), rng)?);
        }
        let srs = (1..=copies(plan.share_sr))
            .map(|k| SrModule::new(store, &stage_prefix(k, plan.share_sr, "sr"), config.sr.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            plan,
            srs,
            recs,
            tpts,
        })
    }

    fn pick<M>(v: &[M], stage: usize) -> &M {
        if v.len() == 1 {
            &v[0]
        } else {
            &v[stage - 1]
        }
    }

    /// SR module used by `stage` (1-based).
    pub fn sr(&self, stage: usize) -> &SrModule {
        Self::pick(&self.srs, stage)
    }

    pub fn recognizer(&self, stage: usize) -> &Recognizer {
        Self::pick(&self.recs, stage)
    }

    pub fn transformer(&self, stage: usize) -> &TpTransformer {
        Self::pick(&self.tpts, stage)
    }

    pub fn sr_modules(&self) -> &[SrModule] {
        &self.srs
    }

    pub fn recognizers(&self) -> &[Recognizer] {
        &self.recs
    }

    /// Freezes or unfreezes every recognizer copy.
    pub fn set_recognizers_trainable<T: Element>(&self, store: &mut ParamStore<T>, tuned: bool) {
        self.recs.iter().for_each(|r| set_trainable(store, r, tuned));
    }

    /// Zeroes and freezes every fusion projection, giving the prior-free baseline.
    pub fn disable_prior<T: Element>(&self, store: &mut ParamStore<T>) {
        for sr in &self.srs {
            sr.zero_projections(store);
            sr.set_projections_trainable(store, false);
        }
    }

    /// One stage. Stage 1 reads its prior from the bicubically upsampled LR
    /// image and must get `prev = None`; later stages read it from the
    /// previous SR image, detached when the plan stops gradients. The SR
    /// module always consumes the original LR image.
    pub fn stage_forward<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        stage: usize,
        lr: Var,
        prev: Option<Var>,
        mode: ForwardMode,
    ) -> Result<StageOutput> {
        if stage == 0 || stage > self.plan.stages {
            return Err(invalid(format!("stage {stage} outside 1..={}", self.plan.stages)));
        }
        let s = g.shape(lr).to_vec();
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != self.config.lr_hw {
            return Err(invalid(format!("expected [B,1,{},{}] LR images, got {s:?}", self.config.lr_hw.0, self.config.lr_hw.1)));
        }
        let tp = if mode.use_tp {
            let source = match (stage, prev) {
                (1, None) => {
                    let (h, w) = self.config.hr_hw();
                    g.bicubic_resize(lr, h, w)?
                }
                (k, Some(p)) if k > 1 => {
                    if self.plan.stop_grad {
                        g.detach(p)
                    } else {
                        p
                    }
                }
                _ => return Err(invalid(format!("stage {stage} got the wrong kind of prior input"))),
            };
            Some(self.recognizer(stage).generate_tp(g, source, mode.rec_train)?)
        } else {
            if (stage == 1) != prev.is_none() {
                return Err(invalid(format!("stage {stage} got the wrong kind of prior input")));
            }
            None
        };
        let tp_feat = match tp {
            Some(t) => Some(self.transformer(stage).forward(g, t, mode.train)?),
            None => None,
        };
        let sr = self.sr(stage).forward(g, lr, tp_feat, mode.train)?;
        Ok(StageOutput { sr, tp })
    }

    /// Runs every stage in order; the last output is the final SR image.
    pub fn multistage_forward<T: Element>(&self, g: &mut Graph<'_, T>, lr: Var, mode: ForwardMode) -> Result<Vec<StageOutput>> {
        let mut outs: Vec<StageOutput> = Vec::with_capacity(self.plan.stages);
        for k in 1..=self.plan.stages {
            let prev = outs.last().map(|o| o.sr);
            outs.push(self.stage_forward(g, k, lr, prev, mode)?);
        }
        Ok(outs)
    }

    /// Fills this model from a single-stage checkpoint: the SR module is
    /// loaded once and the recognizer and transformer are copied into every
    /// stage. Fails on the first parameter the checkpoint lacks.
    pub fn init_from_single<T: Element>(&self, store: &mut ParamStore<T>, single: &Checkpoint) -> Result<()> {
        single.load_into_mapped(store, single_stage_source)
    }
}

/// Name in a single-stage checkpoint that seeds parameter `name` of a multi-stage model.
pub fn single_stage_source(name: &str) -> String {
    for part in ["rec", "tpt", "sr"] {
        let target = stage_prefix(1, part == "sr", part);
        if let Some(rest) = name.strip_prefix(&format!("tpg.shared.{part}.")) {
            return format!("{target}{rest}");
        }
        if let Some(after) = name.strip_prefix("tpg.stage") {
            if let Some((_, rest)) = after.split_once(&format!(".{part}.")) {
                return format!("{target}{rest}");
            }
        }
    }
    name.to_string()
}
