use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::snn::{run_snn, running_mean_key, running_var_key, BatchStats, LayerSpec, Model, NormMode, RunOptions};

/// Exponential moving average of the batch statistics into the running
/// statistics: `running = (1 - momentum) * running + momentum * batch`.
pub fn update_running_stats(model: &mut Model, stats: &[BatchStats], mean_only: bool) -> Result<()> {
    for s in stats {
        let LayerSpec::BnttNorm {
            name,
            channels,
            momentum,
            ..
        } = &model.spec.layers[s.layer]
        else {
            return Err(Error::Structure(format!("layer {} is not a norm layer", s.layer)));
        };
        let (c, m) = (*channels, *momentum);
        let mut targets = vec![(running_mean_key(name), &s.mean)];
        if !mean_only {
            targets.push((running_var_key(name), &s.var));
        }
        for (key, batch) in targets {
            let t = model
                .tensors
                .get_mut(&key)
                .ok_or_else(|| Error::Structure(format!("missing tensor `{key}`")))?;
            let row = &mut t.data_mut()[s.step * c..(s.step + 1) * c];
            for (r, b) in row.iter_mut().zip(batch.iter()) {
                *r = ((1.0 - m) * *r + m * b) as f32 as f64;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub batch_size: usize,
    /// Update only the running means, leaving variances as trained.
    pub mean_only: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            batch_size: 32,
            mean_only: false,
        }
    }
}

/// Re-estimates the norm layers' running statistics from unlabeled samples
/// passed through the (crossbar-mapped) model. Weights and scales are left
/// untouched; the samples are encoded with `seed`.
pub fn adapt_bn_noise_aware(model: &Model, samples: &Tensor, seed: u64, cfg: &AdaptConfig) -> Result<Model> {
    if !model.spec.has_bntt() {
        return Err(Error::Structure("model has no bntt_norm layers to adapt".into()));
    }
    let n = if samples.is_empty() { 0 } else { samples.dim0() };
    if n == 0 {
        return Ok(model.clone());
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("adaptation batch_size must be >= 1".into()));
    }
    let mut out = model.clone();
    let per = samples.len() / n;
    let shape = samples.shape()[1..].to_vec();
    for start in (0..n).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(n);
        let mut bshape = vec![end - start];
        bshape.extend_from_slice(&shape);
        let x = Tensor::from_vec(&bshape, samples.data()[start * per..end * per].to_vec())?;
        let ids: Vec<u64> = (start as u64..end as u64).collect();
        let opts = RunOptions {
            norm: NormMode::Batch,
            ..RunOptions::eval(out.spec.time_steps, seed, &ids)
        };
        let run = run_snn(&out, &x, opts)?;
        update_running_stats(&mut out, &run.batch_stats, cfg.mean_only)?;
    }
    out.metadata.insert("adapt_samples".into(), n.to_string());
    Ok(out)
}
