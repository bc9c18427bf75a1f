//! Hand-written gradients: softmax cross-entropy, spatio-temporal
//! backpropagation through LIF layers, and plain backprop for ReLU nets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::ops::{avgpool2d_backward, conv2d_backward, linear_backward};
use crate::numerics::Tensor;
use crate::snn::{bias_key, gamma_key, weight_key, AnnRun, Cache, LayerSpec, Model, NormMode, SnnRun, Trajectory};

/// Gradients keyed by tensor name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let b = labels.len();
    if b == 0 || logits.ndim() != 2 || logits.dim0() != b {
        return Err(Error::shape(format!("logits {:?} for {b} labels", logits.shape())));
    }
    let classes = logits.shape()[1];
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for ((row, g), &y) in logits
        .data()
        .chunks_exact(classes)
        .zip(grad.data_mut().chunks_exact_mut(classes))
        .zip(labels)
    {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} outside [0, {classes})")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        loss += max + sum.ln() - row[y];
        for (k, (gk, z)) in g.iter_mut().zip(row).enumerate() {
            *gk = ((z - max).exp() / sum - f64::from(u8::from(k == y))) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

#[inline]
fn surrogate(u: f64, threshold: f64) -> f64 {
    (1.0 - ((u - threshold) / threshold).abs()).max(0.0)
}

/// Piecewise-linear stand-in for the spike derivative:
/// `max(0, 1 - |(u - threshold) / threshold|)`.
pub fn surrogate_grad(u: f64, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be > 0, got {threshold}")));
    }
    Ok(surrogate(u, threshold))
}

/// Zero gradients for every trainable tensor of the model.
pub fn zero_gradients(model: &Model) -> Gradients {
    model
        .spec
        .tensor_shapes()
        .into_iter()
        .filter(|(k, _)| !k.ends_with(".running_mean") && !k.ends_with(".running_var"))
        .map(|(k, s)| (k, Tensor::zeros(&s)))
        .collect()
}

fn batched(batch: usize, shape: &[usize]) -> Vec<usize> {
    std::iter::once(batch).chain(shape.iter().copied()).collect()
}

fn weighted_backward(
    model: &Model,
    layer: &LayerSpec,
    input: &Tensor,
    grad: &Tensor,
    in_shape: &[usize],
    grads: &mut Gradients,
    need_dx: bool,
) -> Result<Option<Tensor>> {
    let (name, has_bias) = match layer {
        LayerSpec::Conv { name, bias, .. } | LayerSpec::Linear { name, bias, .. } => (name, *bias),
        _ => unreachable!(),
    };
    let w = model.tensor(&weight_key(name))?;
    let mut dw = grads.remove(&weight_key(name)).expect("weight gradient slot");
    let mut db = if has_bias { grads.remove(&bias_key(name)) } else { None };
    let dx = match layer {
        LayerSpec::Conv { stride, padding, .. } => {
            let k = w.shape()[2];
            let oh = (in_shape[2] + 2 * padding - k) / stride + 1;
            let ow = (in_shape[3] + 2 * padding - k) / stride + 1;
            let g = grad.reshaped(&[in_shape[0], w.shape()[0], oh, ow])?;
            conv2d_backward(input, w, &g, *stride, *padding, &mut dw, db.as_mut(), need_dx)?
        }
        LayerSpec::Linear { .. } => {
            let g = grad.reshaped(&[in_shape[0], w.shape()[0]])?;
            linear_backward(input, w, &g, &mut dw, db.as_mut(), need_dx)?
                .map(|dx| dx.reshape(in_shape))
                .transpose()?
        }
        _ => unreachable!(),
    };
    grads.insert(weight_key(name), dw);
    if let Some(db) = db {
        grads.insert(bias_key(name), db);
    }
    Ok(dx)
}

#[allow(clippy::too_many_arguments)]
fn norm_backward(
    model: &Model,
    name: &str,
    channels: usize,
    step: usize,
    mode: NormMode,
    xhat: &Tensor,
    inv_std: &[f64],
    grad: &Tensor,
    grads: &mut Gradients,
) -> Result<Tensor> {
    let gamma = &model.tensor(&gamma_key(name))?.data()[step * channels..(step + 1) * channels];
    let batch = grad.dim0();
    let spatial = grad.len() / (batch * channels).max(1);
    let n = (batch * spatial) as f64;
    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels];
    for (k, (g, x)) in grad
        .data()
        .chunks_exact(spatial)
        .zip(xhat.data().chunks_exact(spatial))
        .enumerate()
    {
        let c = k % channels;
        sum_g[c] += g.iter().sum::<f64>();
        sum_gx[c] += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    let dgamma = grads.get_mut(&gamma_key(name)).expect("gamma gradient slot");
    for c in 0..channels {
        dgamma.data_mut()[step * channels + c] += sum_gx[c];
    }
    let mut dx = Tensor::zeros(grad.shape());
    for (k, ((d, g), x)) in dx
        .data_mut()
        .chunks_exact_mut(spatial)
        .zip(grad.data().chunks_exact(spatial))
        .zip(xhat.data().chunks_exact(spatial))
        .enumerate()
    {
        let c = k % channels;
        let scale = gamma[c] * inv_std[c];
        match mode {
            NormMode::Running => d.iter_mut().zip(g).for_each(|(d, g)| *d = scale * g),
            NormMode::Batch => {
                // the dxhat means carry the gamma factor
                let mg = sum_g[c] / n;
                let mgx = sum_gx[c] / n;
                for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                    *d = scale * (g - mg - x * mgx);
                }
            }
        }
    }
    Ok(dx)
}

/// Gradients of a loss whose gradient w.r.t. the accumulated output
/// potential `U_L^T` is `d_potential`.
///
/// Hidden LIF layers combine the spatial path through the surrogate with the
/// temporal carry `leak * (1 - o_t)`, so the hard reset blocks gradient flow
/// at cells that fired.
pub fn stbp_backward_from(model: &Model, traj: &Trajectory, d_potential: &Tensor) -> Result<Gradients> {
    let spec = &model.spec;
    let n = spec.layers.len();
    if traj.caches.len() != traj.time_steps || traj.caches.iter().any(|c| c.len() != n) {
        return Err(Error::MissingTrajectory(format!(
            "trajectory has {} steps of caches, expected {} steps over {n} layers",
            traj.caches.len(),
            traj.time_steps
        )));
    }
    let batch = traj.batch;
    if d_potential.len() != batch * spec.classes {
        return Err(Error::shape("output gradient does not match the batch"));
    }
    let shapes = spec.shapes()?;
    let in_shape = |k: usize| batched(batch, if k == 0 { &spec.input_shape[..] } else { &shapes[k - 1] });
    let first_weighted = spec
        .layers
        .iter()
        .position(LayerSpec::is_weighted)
        .ok_or_else(|| Error::Structure("network has no weighted layer".into()))?;
    let mut grads = zero_gradients(model);
    let mut carry: Vec<Option<Tensor>> = vec![None; n];

    for t in (0..traj.time_steps).rev() {
        let mut g = d_potential.clone();
        for k in (first_weighted..n).rev() {
            let layer = &spec.layers[k];
            let cache = &traj.caches[t][k];
            g = match (layer, cache) {
                (LayerSpec::OutputAccumulator, _) => g.reshape(&in_shape(k))?,
                (LayerSpec::Conv { .. } | LayerSpec::Linear { .. }, Cache::Input(x)) => {
                    let need_dx = k > first_weighted;
                    match weighted_backward(model, layer, x, &g, &in_shape(k), &mut grads, need_dx)? {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (LayerSpec::AvgPool { window }, _) => avgpool2d_backward(&g, &in_shape(k), *window)?,
                (LayerSpec::BnttNorm { name, channels, .. }, Cache::Norm { xhat, inv_std }) => {
                    norm_backward(model, name, *channels, t, traj.norm, xhat, inv_std, &g, &mut grads)?
                }
                (LayerSpec::Lif { threshold, leak }, Cache::Potential(u)) => {
                    let mut delta = g;
                    let next = carry[k].as_ref();
                    for (idx, (d, &uv)) in delta.data_mut().iter_mut().zip(u.data()).enumerate() {
                        let fired = uv > *threshold;
                        let mut v = *d * surrogate(uv, *threshold);
                        if let Some(c) = next {
                            if !fired {
                                v += c.data()[idx] * leak;
                            }
                        }
                        *d = v;
                    }
                    carry[k] = Some(delta.clone());
                    delta
                }
                (layer, _) => {
                    return Err(Error::MissingTrajectory(format!(
                        "no cached state for layer {k} ({layer:?}) at step {t}"
                    )))
                }
            };
        }
    }
    Ok(grads)
}

/// Cross-entropy loss on `U_L^T` and its parameter gradients.
pub fn stbp_backward(model: &Model, run: &SnnRun, labels: &[usize]) -> Result<(f64, Gradients)> {
    let traj = run
        .trajectory
        .as_ref()
        .ok_or_else(|| Error::MissingTrajectory("forward pass was run without recording".into()))?;
    let (loss, d) = softmax_cross_entropy(&run.potential, labels)?;
    Ok((loss, stbp_backward_from(model, traj, &d)?))
}

/// Gradients of a ReLU network given the gradient w.r.t. its logits.
pub fn ann_backward_from(model: &Model, caches: &[Cache], d_logits: &Tensor) -> Result<Gradients> {
    let spec = &model.spec;
    let n = spec.layers.len();
    if caches.len() != n {
        return Err(Error::MissingTrajectory("ANN caches do not cover every layer".into()));
    }
    let batch = d_logits.dim0();
    let shapes = spec.shapes()?;
    let in_shape = |k: usize| batched(batch, if k == 0 { &spec.input_shape[..] } else { &shapes[k - 1] });
    let first_weighted = spec
        .layers
        .iter()
        .position(LayerSpec::is_weighted)
        .ok_or_else(|| Error::Structure("network has no weighted layer".into()))?;
    let mut grads = zero_gradients(model);
    let mut g = d_logits.reshaped(&batched(batch, &shapes[n - 1]))?;
    for k in (first_weighted..n).rev() {
        let layer = &spec.layers[k];
        g = match (layer, &caches[k]) {
            (LayerSpec::Conv { .. } | LayerSpec::Linear { .. }, Cache::Input(x)) => {
                match weighted_backward(model, layer, x, &g, &in_shape(k), &mut grads, k > first_weighted)? {
                    Some(dx) => dx,
                    None => break,
                }
            }
            (LayerSpec::Relu, Cache::Input(x)) => {
                let mut d = g;
                d.data_mut().iter_mut().zip(x.data()).for_each(|(d, &v)| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                d
            }
            (LayerSpec::AvgPool { window }, _) => avgpool2d_backward(&g, &in_shape(k), *window)?,
            (layer, _) => {
                return Err(Error::MissingTrajectory(format!(
                    "no cached state for ANN layer {k} ({layer:?})"
                )))
            }
        };
    }
    Ok(grads)
}

/// Cross-entropy loss on the logits and its parameter gradients.
pub fn ann_backward(model: &Model, run: &AnnRun, labels: &[usize]) -> Result<(f64, Gradients)> {
    let caches = run
        .caches
        .as_ref()
        .ok_or_else(|| Error::MissingTrajectory("ANN forward pass was run without recording".into()))?;
    let (loss, d) = softmax_cross_entropy(&run.logits, labels)?;
    Ok((loss, ann_backward_from(model, caches, &d)?))
}
