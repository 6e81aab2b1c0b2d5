//! Central finite-difference verification of analytic gradients (f64).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::{ParamId, ParamStore, Tensor};
use crate::error::Result;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely.
const REL_FLOOR: f64 = 1e-5;

/// Probes missing the analytic value by more than this are re-measured with
/// half the step.
const RECHECK: f64 = 5e-5;

/// On a smooth function the two central differences agree to O(h^2); a
/// larger gap means the step straddles a kink (ReLU, L1, max pool) and the
/// probe says nothing about the analytic gradient, so it is skipped.
const KINK_TOL: f64 = 1e-4;

/// Probes skipped as kinks beyond this fraction fail the check.
pub const MAX_KINK_FRACTION: f64 = 0.05;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Probes dropped because the function is not smooth within one step.
    pub kinks: usize,
    pub max_rel_error: f64,
    /// (target label, flat index, analytic, numeric) of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, idx: usize, a: f64, n: f64) {
        self.checked += 1;
        let e = relative_error(a, n);
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((label.to_string(), idx, a, n));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.or(self.worst.take());
        }
    }

    pub fn kink_fraction(&self) -> f64 {
        self.kinks as f64 / (self.checked + self.kinks).max(1) as f64
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol && self.kink_fraction() <= MAX_KINK_FRACTION
    }
}

/// What to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Target {
    Input(usize),
    Param(ParamId),
}

/// Checks `d loss / d target` for the given inputs and stored parameters.
///
/// `build` records a scalar loss given one leaf per input. At most
/// `max_per_target` elements of each target are probed (chosen by `seed`).
pub fn check<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    targets: &[Target],
    max_per_target: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &mut ParamStore<f64>, inputs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.detached();
                t.set_requires_grad(want_grad);
                g.leaf(t)
            })
            .collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).item();
        let mut grads = Vec::new();
        if want_grad {
            g.backward(loss)?;
            grads = vars
                .iter()
                .zip(inputs)
                .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect();
        }
        Ok((value, grads))
    };

    store.zero_grads();
    let (_, input_grads) = eval(store, inputs, true)?;
    let param_grads: Vec<Option<Vec<f64>>> = targets
        .iter()
        .map(|t| match t {
            Target::Param(id) => Some(
                store
                    .tensor(*id)
                    .grad()
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.tensor(*id).numel()]),
            ),
            Target::Input(_) => None,
        })
        .collect();
    store.zero_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut inputs = inputs.to_vec();
    for (ti, target) in targets.iter().enumerate() {
        let (numel, label) = match target {
            Target::Input(i) => (inputs[*i].numel(), format!("input{i}")),
            Target::Param(id) => (store.tensor(*id).numel(), store.get(*id).name.clone()),
        };
        let picks: Vec<usize> = if numel <= max_per_target {
            (0..numel).collect()
        } else {
            let mut v = sample(&mut rng, numel, max_per_target).into_vec();
            v.sort_unstable();
            v
        };
        for idx in picks {
            let analytic = match target {
                Target::Input(i) => input_grads[*i][idx],
                Target::Param(_) => param_grads[ti].as_ref().expect("param grad")[idx],
            };
            let numeric = {
                let poke = |store: &mut ParamStore<f64>, inputs: &mut [Tensor<f64>], delta: f64| match target {
                    Target::Input(i) => inputs[*i].data_mut()[idx] += delta,
                    Target::Param(id) => store.tensor_mut(*id).data_mut()[idx] += delta,
                };
                let mut central = |store: &mut ParamStore<f64>, h: f64| -> Result<f64> {
                    poke(store, &mut inputs, h);
                    let (plus, _) = eval(store, &inputs, false)?;
                    poke(store, &mut inputs, -2.0 * h);
                    let (minus, _) = eval(store, &inputs, false)?;
                    poke(store, &mut inputs, h);
                    Ok((plus - minus) / (2.0 * h))
                };
                let full = central(store, FD_STEP)?;
                if relative_error(analytic, full) > RECHECK {
                    let half = central(store, FD_STEP / 2.0)?;
                    if relative_error(full, half) > KINK_TOL {
                        report.kinks += 1;
                        continue;
                    }
                }
                full
            };
            report.record(&label, idx, analytic, numeric);
        }
    }
    store.zero_grads();
    Ok(report)
}

/// `sum(x * r)` with a fixed random projection `r` of variance `1/n`, turning
/// any output into a well-conditioned scalar of order one.
pub fn project(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.shape(x).iter().product::<usize>().max(1);
    let r = Tensor::randn(g.shape(x), 1.0 / (n as f64).sqrt(), &mut rng);
    let r = g.input(r);
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}
