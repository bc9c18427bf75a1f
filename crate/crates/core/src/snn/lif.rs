use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Firing threshold and leak of one LIF layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub threshold: f64,
    pub leak: f64,
}

impl LifParams {
    pub fn new(threshold: f64, leak: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::invalid(format!("LIF threshold must be > 0, got {threshold}")));
        }
        if !(0.0..=1.0).contains(&leak) {
            return Err(Error::invalid(format!("LIF leak must lie in [0, 1], got {leak}")));
        }
        Ok(LifParams { threshold, leak })
    }
}

/// One LIF update: `u = leak * u_prev + input`, spike where `u > threshold`,
/// hard reset to 0 at spiking cells. Returns `(spikes, u_next)`.
pub fn lif_step(u_prev: &Tensor, input: &Tensor, params: &LifParams) -> Result<(Tensor, Tensor)> {
    if u_prev.shape() != input.shape() {
        return Err(Error::shape(format!(
            "LIF potential {:?} vs input {:?}",
            u_prev.shape(),
            input.shape()
        )));
    }
    let mut u = u_prev.clone();
    let mut spikes = Tensor::zeros(input.shape());
    integrate_fire(u.data_mut(), input.data(), spikes.data_mut(), params);
    Ok((spikes, u))
}

/// In-place LIF update on raw slices; `u` holds the previous (post-reset)
/// potential on entry and the next one on exit.
#[inline]
pub(crate) fn integrate_fire(u: &mut [f64], input: &[f64], spikes: &mut [f64], p: &LifParams) {
    for ((u, &x), o) in u.iter_mut().zip(input).zip(spikes.iter_mut()) {
        let v = p.leak * *u + x;
        if v > p.threshold {
            *o = 1.0;
            *u = 0.0;
        } else {
            *o = 0.0;
            *u = v;
        }
    }
}
