//! Batched forward passes. One engine serves evaluation, training (with a
//! recorded trajectory), conversion calibration and BN adaptation.

use crate::error::{Error, Result};
use crate::numerics::ops::{avgpool2d, conv2d, linear};
use crate::numerics::Tensor;
use crate::snn::encode::PoissonEncoder;
use crate::snn::lif::{integrate_fire, LifParams};
use crate::snn::{bias_key, gamma_key, running_mean_key, running_var_key, weight_key, LayerSpec, Model};

/// Which statistics a time-indexed norm layer normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Stored running statistics (evaluation).
    Running,
    /// Statistics of the current batch (training and adaptation).
    Batch,
}

/// What the backward pass needs from one layer at one step.
#[derive(Debug, Clone)]
pub enum Cache {
    /// Input of a conv/linear/relu layer (linear inputs are flattened).
    Input(Tensor),
    /// Normalized activations and per-channel `1/sqrt(var + eps)`.
    Norm {
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// LIF membrane potential before threshold and reset.
    Potential(Tensor),
    Empty,
}

/// Recorded forward pass of an SNN: `caches[t][layer]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub time_steps: usize,
    pub batch: usize,
    pub norm: NormMode,
    pub caches: Vec<Vec<Cache>>,
}

/// Batch statistics seen by one norm layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub layer: usize,
    pub step: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SnnRun {
    /// Accumulated output potential `U_L^T`, `[batch, classes]`.
    pub potential: Tensor,
    pub trajectory: Option<Trajectory>,
    pub batch_stats: Vec<BatchStats>,
    /// Total spikes per LIF layer (indexed like the spec layers).
    pub spike_counts: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct AnnRun {
    pub logits: Tensor,
    pub caches: Option<Vec<Cache>>,
}

/// Called with `(layer index, step, layer input)` before each layer runs.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, usize, &Tensor);

/// Knobs of one SNN run. `sample_ids` key each sample's encoder stream.
pub struct RunOptions<'a> {
    pub steps: usize,
    pub seed: u64,
    pub sample_ids: &'a [u64],
    pub norm: NormMode,
    pub record: bool,
    pub count_spikes: bool,
    /// Stop each step after this layer; the output potential stays 0.
    pub stop_after: Option<usize>,
    pub observer: Option<StepObserver<'a>>,
}

impl<'a> RunOptions<'a> {
    pub fn eval(steps: usize, seed: u64, sample_ids: &'a [u64]) -> Self {
        RunOptions {
            steps,
            seed,
            sample_ids,
            norm: NormMode::Running,
            record: false,
            count_spikes: false,
            stop_after: None,
            observer: None,
        }
    }
}

fn flatten_batch(x: &Tensor) -> Result<Tensor> {
    let b = x.dim0();
    x.reshaped(&[b, x.len() / b.max(1)])
}

fn weighted(model: &Model, layer: &LayerSpec, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
    match layer {
        LayerSpec::Conv {
            name,
            stride,
            padding,
            bias,
            ..
        } => {
            let w = model.tensor(&weight_key(name))?;
            let b = if *bias {
                Some(model.tensor(&bias_key(name))?)
            } else {
                None
            };
            Ok((conv2d(x, w, b, *stride, *padding)?, None))
        }
        LayerSpec::Linear { name, bias, .. } => {
            let w = model.tensor(&weight_key(name))?;
            let b = if *bias {
                Some(model.tensor(&bias_key(name))?)
            } else {
                None
            };
            let flat = if x.ndim() == 2 { x.clone() } else { flatten_batch(x)? };
            let y = linear(&flat, w, b)?;
            Ok((y, Some(flat)))
        }
        _ => unreachable!("weighted() on a non-weighted layer"),
    }
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub(crate) fn channel_stats(x: &Tensor, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let b = x.dim0();
    let spatial = x.len() / (b * channels).max(1);
    let n = (b * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for (k, block) in x.data().chunks_exact(spatial).enumerate() {
        mean[k % channels] += block.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for (k, block) in x.data().chunks_exact(spatial).enumerate() {
        let m = mean[k % channels];
        var[k % channels] += block.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

struct NormOut {
    y: Tensor,
    xhat: Option<Tensor>,
    inv_std: Vec<f64>,
    stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn normalize(
    model: &Model,
    layer: &LayerSpec,
    x: &Tensor,
    step: usize,
    mode: NormMode,
    keep_xhat: bool,
) -> Result<NormOut> {
    let LayerSpec::BnttNorm {
        name,
        channels,
        time_steps,
        eps,
        ..
    } = layer
    else {
        unreachable!()
    };
    if step >= *time_steps {
        return Err(Error::invalid(format!(
            "norm layer `{name}` holds {time_steps} time slices, step {step} requested"
        )));
    }
    let c = *channels;
    let row = |t: &Tensor| t.data()[step * c..(step + 1) * c].to_vec();
    let gamma = row(model.tensor(&gamma_key(name))?);
    let (mean, var, stats) = match mode {
        NormMode::Running => (
            row(model.tensor(&running_mean_key(name))?),
            row(model.tensor(&running_var_key(name))?),
            None,
        ),
        NormMode::Batch => {
            let (m, v) = channel_stats(x, c);
            (m.clone(), v.clone(), Some((m, v)))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let spatial = x.len() / (x.dim0() * c).max(1);
    let mut xhat = Tensor::zeros(x.shape());
    for (k, (src, dst)) in x
        .data()
        .chunks_exact(spatial)
        .zip(xhat.data_mut().chunks_exact_mut(spatial))
        .enumerate()
    {
        let ch = k % c;
        for (s, d) in src.iter().zip(dst) {
            *d = (s - mean[ch]) * inv_std[ch];
        }
    }
    let mut y = xhat.clone();
    for (k, block) in y.data_mut().chunks_exact_mut(spatial).enumerate() {
        let g = gamma[k % c];
        block.iter_mut().for_each(|v| *v *= g);
    }
    Ok(NormOut {
        y,
        xhat: keep_xhat.then_some(xhat),
        inv_std,
        stats,
    })
}

/// Runs an SNN for `opts.steps` steps on `images [B, C, H, W]`.
pub fn run_snn(model: &Model, images: &Tensor, mut opts: RunOptions<'_>) -> Result<SnnRun> {
    let spec = &model.spec;
    if !spec.is_snn() {
        return Err(Error::Structure("snn forward on an ANN spec".into()));
    }
    if opts.steps == 0 {
        return Err(Error::invalid("time steps must be >= 1"));
    }
    let batch = images.dim0();
    if images.ndim() != 4 || images.shape()[1..] != spec.input_shape {
        return Err(Error::shape(format!(
            "images {:?} do not match network input {:?}",
            images.shape(),
            spec.input_shape
        )));
    }
    if opts.sample_ids.len() != batch {
        return Err(Error::shape("one sample id per image required"));
    }
    PoissonEncoder::validate(images)?;
    let shapes = spec.shapes()?;
    let mut encoder = PoissonEncoder::new(opts.seed, opts.sample_ids);
    let n_layers = spec.layers.len();
    let mut potentials: Vec<Option<Tensor>> = vec![None; n_layers];
    let mut spike_counts: Vec<Option<Tensor>> = vec![None; n_layers];
    let mut accumulated = Tensor::zeros(&[batch, spec.classes]);
    let mut caches = Vec::new();
    let mut batch_stats = Vec::new();
    let last = opts.stop_after.unwrap_or(n_layers - 1).min(n_layers - 1);

    for t in 0..opts.steps {
        let mut x = encoder.step(images)?;
        let mut step_cache = Vec::with_capacity(if opts.record { n_layers } else { 0 });
        for (k, layer) in spec.layers.iter().enumerate().take(last + 1) {
            if let Some(obs) = opts.observer.as_mut() {
                obs(k, t, &x);
            }
            let mut cache = Cache::Empty;
            x = match layer {
                LayerSpec::Conv { .. } | LayerSpec::Linear { .. } => {
                    let (y, flat) = weighted(model, layer, &x)?;
                    if opts.record {
                        cache = Cache::Input(flat.unwrap_or(x));
                    }
                    y
                }
                LayerSpec::AvgPool { window } => avgpool2d(&x, *window)?,
                LayerSpec::BnttNorm { .. } => {
                    let out = normalize(model, layer, &x, t, opts.norm, opts.record)?;
                    if let Some((mean, var)) = out.stats {
                        batch_stats.push(BatchStats {
                            layer: k,
                            step: t,
                            mean,
                            var,
                        });
                    }
                    if let Some(xhat) = out.xhat {
                        cache = Cache::Norm {
                            xhat,
                            inv_std: out.inv_std,
                        };
                    }
                    out.y
                }
                LayerSpec::Lif { threshold, leak } => {
                    let p = LifParams {
                        threshold: *threshold,
                        leak: *leak,
                    };
                    let u = potentials[k].get_or_insert_with(|| Tensor::zeros(x.shape()));
                    if u.len() != x.len() {
                        return Err(Error::shape(format!("LIF layer {k} input size changed")));
                    }
                    let mut spikes = Tensor::zeros(x.shape());
                    if opts.record {
                        // potential before reset: leak * u_prev + x
                        let mut pre = x.clone();
                        pre.data_mut()
                            .iter_mut()
                            .zip(u.data())
                            .for_each(|(v, &up)| *v += p.leak * up);
                        integrate_fire(u.data_mut(), x.data(), spikes.data_mut(), &p);
                        cache = Cache::Potential(pre);
                    } else {
                        integrate_fire(u.data_mut(), x.data(), spikes.data_mut(), &p);
                    }
                    if opts.count_spikes {
                        spike_counts[k]
                            .get_or_insert_with(|| Tensor::zeros(spikes.shape()))
                            .add_assign(&spikes)?;
                    }
                    spikes
                }
                LayerSpec::OutputAccumulator => {
                    let flat = flatten_batch(&x)?;
                    accumulated.add_assign(&flat)?;
                    x
                }
                LayerSpec::Relu => unreachable!("validated SNN has no relu"),
            };
            debug_assert_eq!(x.len(), batch * shapes[k].iter().product::<usize>());
            if opts.record {
                step_cache.push(cache);
            }
        }
        if opts.record {
            caches.push(step_cache);
        }
    }
    Ok(SnnRun {
        potential: accumulated,
        trajectory: opts.record.then_some(Trajectory {
            time_steps: opts.steps,
            batch,
            norm: opts.norm,
            caches,
        }),
        batch_stats,
        spike_counts,
    })
}

/// Runs an ANN on `images`, optionally caching layer inputs for backprop.
pub fn run_ann(model: &Model, images: &Tensor, record: bool) -> Result<AnnRun> {
    let spec = &model.spec;
    if spec.is_snn() {
        return Err(Error::Structure("ann forward on an SNN spec".into()));
    }
    if images.ndim() != 4 || images.shape()[1..] != spec.input_shape {
        return Err(Error::shape(format!(
            "images {:?} do not match network input {:?}",
            images.shape(),
            spec.input_shape
        )));
    }
    let mut x = images.clone();
    let mut caches = Vec::new();
    for layer in &spec.layers {
        let mut cache = Cache::Empty;
        x = match layer {
            LayerSpec::Conv { .. } | LayerSpec::Linear { .. } => {
                let (y, flat) = weighted(model, layer, &x)?;
                if record {
                    cache = Cache::Input(flat.unwrap_or(x));
                }
                y
            }
            LayerSpec::Relu => {
                let y = x.map(|v| v.max(0.0));
                if record {
                    cache = Cache::Input(x);
                }
                y
            }
            LayerSpec::AvgPool { window } => avgpool2d(&x, *window)?,
            _ => unreachable!("validated ANN has only conv/linear/relu/pool"),
        };
        if record {
            caches.push(cache);
        }
    }
    let logits = flatten_batch(&x)?;
    Ok(AnnRun {
        logits,
        caches: record.then_some(caches),
    })
}

/// Accumulated output potential `U_L^T` for `images` encoded with `seed`;
/// sample `b` of the batch uses encoder stream index `b`.
pub fn snn_forward(model: &Model, images: &Tensor, time_steps: usize, seed: u64) -> Result<Tensor> {
    let ids: Vec<u64> = (0..images.dim0() as u64).collect();
    Ok(run_snn(model, images, RunOptions::eval(time_steps, seed, &ids))?.potential)
}

/// Logits of the ReLU network.
pub fn ann_forward(model: &Model, images: &Tensor) -> Result<Tensor> {
    Ok(run_ann(model, images, false)?.logits)
}

/// Firing rate of every neuron of LIF layer `layer` (a spec layer index):
/// spikes over `time_steps` divided by `time_steps`.
pub fn spike_rate(model: &Model, images: &Tensor, time_steps: usize, seed: u64, layer: usize) -> Result<Tensor> {
    if !matches!(model.spec.layers.get(layer), Some(LayerSpec::Lif { .. })) {
        return Err(Error::invalid(format!("layer {layer} is not a LIF layer")));
    }
    let ids: Vec<u64> = (0..images.dim0() as u64).collect();
    let opts = RunOptions {
        count_spikes: true,
        stop_after: Some(layer),
        ..RunOptions::eval(time_steps, seed, &ids)
    };
    let mut run = run_snn(model, images, opts)?;
    let mut counts = run.spike_counts[layer].take().expect("LIF layer ran");
    counts.scale(1.0 / time_steps as f64);
    Ok(counts)
}

/// Argmax per row; ties go to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let b = logits.dim0();
    let classes = logits.len() / b.max(1);
    logits
        .data()
        .chunks_exact(classes.max(1))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
