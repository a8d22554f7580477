use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Per-parameter learning-rate multipliers and freeze set, matched by name prefix.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrPolicy {
    /// `(prefix, multiplier)`; the longest matching prefix wins.
    #[serde(default)]
    pub multipliers: Vec<(String, f64)>,
    /// Parameters whose name starts with any of these are not updated.
    #[serde(default)]
    pub frozen: Vec<String>,
}

impl LrPolicy {
    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        self.multipliers
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(1.0, |(_, m)| *m)
    }
}

/// One plain SGD step: `p -= lr * mult(p) * (grad + weight_decay * p)`.
///
/// Every storage is visited once, so a shared parameter is updated a single
/// time with its accumulated gradient. Gradients are left untouched; call
/// [`ParamStore::zero_grad`] before the next backward pass.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, lr: f64, weight_decay: f64, policy: &LrPolicy) -> Result<()> {
    if !(lr >= 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::invalid(format!(
            "learning rate {lr} and weight decay {weight_decay} must be non-negative"
        )));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFinite {
            op: format!("gradient of {} (step rejected)", p.name),
        });
    }
    let wd = T::from_f64_lossy(weight_decay);
    for p in store.iter_mut() {
        if policy.is_frozen(&p.name) {
            continue;
        }
        let step = T::from_f64_lossy(lr * policy.multiplier(&p.name));
        let grad = p.grad.data();
        for (v, &g) in p.value.data_mut().iter_mut().zip(grad) {
            *v -= step * (g + wd * *v);
        }
    }
    Ok(())
}
