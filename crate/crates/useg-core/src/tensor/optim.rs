//! AdamW with decoupled weight decay and the cosine learning-rate
//! schedule used by the training harness.

use std::collections::BTreeMap;

use super::{Elem, ParameterStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment accumulators, keyed by parameter name.
/// `step` counts completed optimizer steps and drives bias correction.
#[derive(Debug, Clone, Default)]
pub struct AdamWState<T: Elem> {
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Elem> AdamWState<T> {
    pub fn new() -> Self {
        AdamWState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One AdamW update over every parameter in the store.
///
/// Parameters absent from `grads` are treated as having zero gradient:
/// they still decay and their moments still shrink, which matches the
/// update rule rather than freezing them. Gradient names that match no
/// parameter are an error.
pub fn adamw_step<T: Elem>(
    store: &mut ParameterStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamWState<T>,
    hp: &AdamWParams,
) -> Result<()> {
    for name in grads.keys() {
        if !store.contains(name) {
            return Err(TensorError::UnknownParameter(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let (b1, b2) = (T::from_f64_lossy(hp.beta1), T::from_f64_lossy(hp.beta2));
    let one_m_b1 = T::from_f64_lossy(1.0 - hp.beta1);
    let one_m_b2 = T::from_f64_lossy(1.0 - hp.beta2);
    let lr = T::from_f64_lossy(hp.lr);
    let eps = T::from_f64_lossy(hp.eps);
    let decay = T::from_f64_lossy(hp.lr * hp.weight_decay);
    let inv_bc1 = T::from_f64_lossy(1.0 / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);

    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for name in names {
        let p = store.get_mut(&name)?;
        let n = p.numel();
        if let Some(g) = grads.get(&name) {
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "gradient for {name} has shape {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let zeros;
        let gdata: &[T] = match grads.get(&name) {
            Some(g) => g.data(),
            None => {
                zeros = vec![T::zero(); n];
                &zeros
            }
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); n]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); n]);
        let pdata = p.data_mut();
        for i in 0..n {
            let g = gdata[i];
            // Decoupled decay acts on the weight directly, outside the
            // moment-normalized step.
            pdata[i] = pdata[i] - decay * pdata[i];
            m[i] = b1 * m[i] + one_m_b1 * g;
            v[i] = b2 * v[i] + one_m_b2 * g * g;
            let mhat = m[i] * inv_bc1;
            let vhat = v[i] * inv_bc2;
            pdata[i] = pdata[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
#[derive(Debug, Clone)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn at(&self, step: u64) -> Result<f64> {
        cosine_lr(step, self.total_steps, self.lr_max, self.lr_min)
    }
}

pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(TensorError::InvalidAttr(
            "schedule needs total_steps >= 1".into(),
        ));
    }
    if step > total_steps {
        return Err(TensorError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
