use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::snn::{predict, run_ann, run_snn, Model, RunOptions};

const EVAL_BATCH: usize = 100;

/// Classification accuracy in percent.
///
/// SNNs run for `time_steps` steps with running norm statistics; sample `i`
/// of the dataset is encoded from stream `i` under `seed`, so the result does
/// not depend on batching or thread count. ANNs ignore `time_steps` and `seed`.
pub fn evaluate(model: &Model, data: &Dataset, time_steps: usize, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if data.image_shape() != model.spec.input_shape || data.classes != model.spec.classes {
        return Err(Error::Structure(format!(
            "dataset {:?} ({} classes) does not fit the model input {:?} ({} classes)",
            data.image_shape(),
            data.classes,
            model.spec.input_shape,
            model.spec.classes
        )));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let correct: Vec<usize> = indices
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<usize> {
            let (x, y) = data.gather(chunk);
            let out = if model.is_snn() {
                let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
                run_snn(model, &x, RunOptions::eval(time_steps, seed, &ids))?.potential
            } else {
                run_ann(model, &x, false)?.logits
            };
            Ok(predict(&out).iter().zip(&y).filter(|(p, l)| p == l).count())
        })
        .collect::<Result<_>>()?;
    Ok(100.0 * correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Relative accuracy drop `(sw - hw) / sw * 100`, in percent.
pub fn delta_metric(sw: f64, hw: f64) -> Result<f64> {
    if !(sw > 0.0) || !sw.is_finite() || !hw.is_finite() {
        return Err(Error::invalid(format!("delta needs sw > 0, got sw {sw}, hw {hw}")));
    }
    Ok((sw - hw) / sw * 100.0)
}
