use super::{ParamGrads, ParamStore, Tensor};
use crate::{Error, Result};

/// Moment estimates for [`adam_step`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments shaped like every parameter in `store`.
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.tensor.shape()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(Error::invalid(format!(
            "optimizer state tracks {} parameters, model has {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    for id in store.ids() {
        let p = store.get(id);
        let g = grads
            .get(id)
            .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        if g.shape() != p.tensor.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                shapes: vec![p.tensor.shape().to_vec(), g.shape().to_vec()],
            });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    for id in store.ids().collect::<Vec<_>>() {
        let g = grads.get(id).expect("checked above").data();
        let m = state.first_moment[id.0].data_mut();
        let v = state.second_moment[id.0].data_mut();
        let w = store.tensor_mut(id).data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
