//! Adam optimization and finite-difference gradient verification.

use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Per-parameter Adam state with the usual bias-corrected update.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Completed step count.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One Adam update in place:
/// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`, bias-corrected,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState) {
    assert_eq!(theta.len(), grad.len(), "adam_step shapes");
    assert_eq!(theta.len(), state.m.len(), "adam_step state shapes");
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Adam across every parameter in a store.
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let states = store
            .iter()
            .map(|(_, _, t)| AdamState::new(t.numel(), lr))
            .collect();
        Adam { states }
    }

    /// Applies one update from the store's accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        for (i, state) in self.states.iter_mut().enumerate() {
            let tensor = store.get_mut(crate::params::ParamId(i));
            let grad = tensor
                .grad()
                .expect("gradients must be allocated before an Adam step")
                .to_vec();
            adam_step(tensor.data_mut(), &grad, state);
        }
    }
}

/// A scalar function of the parameters that can also produce its analytic
/// gradient. The gradient side accumulates into the store's buffers.
pub trait Objective {
    fn value(&mut self, store: &ParamStore) -> f64;
    fn value_and_grad(&mut self, store: &mut ParamStore) -> f64;
}

/// [`Objective`] built from a closure that wires a tape graph. The closure
/// binds whatever parameters it uses and returns the scalar loss node.
pub struct TapeObjective<F>
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    pub build: F,
}

impl<F> TapeObjective<F>
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    pub fn new(build: F) -> Self {
        TapeObjective { build }
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    fn value(&mut self, store: &ParamStore) -> f64 {
        let mut tape = Tape::new();
        let loss = (self.build)(&mut tape, store);
        tape.value(loss).item()
    }

    fn value_and_grad(&mut self, store: &mut ParamStore) -> f64 {
        let mut tape = Tape::new();
        let loss = (self.build)(&mut tape, store);
        tape.backward(loss);
        tape.accumulate_param_grads(store);
        tape.value(loss).item()
    }
}

/// Worst relative gradient error within one named parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Result of [`grad_check`]: per-group and overall worst relative error.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// The group with the largest error, if any parameters were checked.
    pub fn worst_group(&self) -> Option<&GroupCheck> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Verifies the objective's analytic gradients against central finite
/// differences at every scalar parameter.
///
/// Returns the max over parameters of
/// `|analytic - central| / max(1, |central|)`, overall and per group.
/// Parameter values are restored exactly after probing.
pub fn grad_check(
    store: &mut ParamStore,
    objective: &mut dyn Objective,
    eps: f64,
) -> GradCheckReport {
    store.zero_grads();
    objective.value_and_grad(store);
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, _, t)| t.grad().expect("grads allocated").to_vec())
        .collect();
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();

    let mut groups = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for (pi, name) in names.iter().enumerate() {
        let id = crate::params::ParamId(pi);
        let mut group_worst: f64 = 0.0;
        for (k, &grad_k) in analytic[pi].iter().enumerate() {
            let original = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = original + eps;
            let plus = objective.value(store);
            store.get_mut(id).data_mut()[k] = original - eps;
            let minus = objective.value(store);
            store.get_mut(id).data_mut()[k] = original;
            let central = (plus - minus) / (2.0 * eps);
            let rel = (grad_k - central).abs() / central.abs().max(1.0);
            group_worst = group_worst.max(rel);
        }
        overall = overall.max(group_worst);
        groups.push(GroupCheck {
            name: name.clone(),
            max_rel_err: group_worst,
        });
    }
    GradCheckReport {
        groups,
        max_rel_err: overall,
    }
}
