//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpgsr::data::{HR_HEIGHT, HR_WIDTH, LR_HEIGHT, LR_WIDTH};
use tpgsr::loss::multistage_loss;
use tpgsr::tpgsr::{default_lambdas, ForwardMode, ModelConfig, StagePlan, Tpgsr};
use tpgsr::{Graph, ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random `[b,1,16,64]` LR and `[b,1,32,128]` HR batches in `[0,1]`.
pub fn image_batch(b: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut r = rng(seed);
    let lr = Tensor::uniform(&[b, 1, LR_HEIGHT, LR_WIDTH], 0.0, 1.0, &mut r);
    let hr = Tensor::uniform(&[b, 1, HR_HEIGHT, HR_WIDTH], 0.0, 1.0, &mut r);
    (lr, hr)
}

/// Desk-preset model with `stages` stages and default weights.
pub fn desk_model(stages: usize, seed: u64) -> (ParamStore<f32>, Tpgsr) {
    let plan = StagePlan::new(stages, default_lambdas(stages).expect("weights")).expect("plan");
    let mut store = ParamStore::new();
    let model = Tpgsr::new(&mut store, ModelConfig::desk(), plan, &mut rng(seed)).expect("model");
    (store, model)
}

/// One training forward and backward pass with the multi-stage L1 loss.
/// Returns the loss value.
pub fn train_pass(store: &mut ParamStore<f32>, model: &Tpgsr, lr: &Tensor<f32>, hr: &Tensor<f32>) -> f32 {
    let mode = ForwardMode {
        train: true,
        rec_train: true,
        use_tp: true,
    };
    let lambdas = default_lambdas(model.plan.stages).expect("weights");
    let mut g = Graph::new(store);
    let x = g.input(lr.clone());
    let y = g.input(hr.clone());
    let outs = model.multistage_forward(&mut g, x, mode).expect("forward");
    let losses: Vec<_> = outs.iter().map(|o| g.l1_loss(o.sr, y).expect("l1")).collect();
    let loss = multistage_loss(&mut g, &losses, &lambdas).expect("loss");
    let v = g.value(loss).item();
    g.backward(loss).expect("backward");
    v
}

/// Eval-mode forward; returns the final SR image.
pub fn infer_pass(store: &mut ParamStore<f32>, model: &Tpgsr, lr: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new(store);
    let x = g.input(lr.clone());
    let outs = model.multistage_forward(&mut g, x, ForwardMode::EVAL).expect("forward");
    g.value(outs.last().expect("a stage").sr).clone()
}
