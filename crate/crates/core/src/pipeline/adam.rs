use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam moments, keyed like the parameters they track.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam step, applied in parameter-name order.
pub fn adam_update(
    state: &mut AdamState,
    params: &mut ModelParameters,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<()> {
    for (name, p) in &params.tensors {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid("adam_update", format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_update", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "adam_update" });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let g = &grads[name];
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = BETA1 * md[i] + (1.0 - BETA1) * gi;
            vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Ok(())
}
