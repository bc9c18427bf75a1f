use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::snn::{ann_to_snn, run_snn, Model, RunOptions, SnnOptions};

const CALIBRATION_BATCH: usize = 64;

/// Converts a trained ReLU network into an integrate-and-fire SNN.
///
/// Weights are copied unchanged. Thresholds are set one LIF layer at a time,
/// shallowest first: each becomes the largest input the layer receives over
/// all calibration samples and time-steps, with the shallower layers already
/// spiking at their final thresholds. Calibration encodes with `seed`.
pub fn convert_ann_to_snn(ann: &Model, time_steps: usize, calibration: &Tensor, seed: u64) -> Result<Model> {
    ann.validate()?;
    if ann.is_snn() {
        return Err(Error::Structure("conversion source must be an ANN".into()));
    }
    let n = calibration.dim0();
    if n == 0 || calibration.ndim() != 4 {
        return Err(Error::invalid("calibration set is empty"));
    }
    let spec = ann_to_snn(&ann.spec, &SnnOptions::converted(time_steps))?;
    let mut snn = Model {
        spec,
        tensors: ann.tensors.clone(),
        metadata: ann.metadata.clone(),
    };
    snn.validate()?;
    let per = calibration.len() / n;
    let shape = calibration.shape()[1..].to_vec();
    for (li, layer) in snn.spec.lif_layers().into_iter().enumerate() {
        let mut peak = f64::NEG_INFINITY;
        for start in (0..n).step_by(CALIBRATION_BATCH) {
            let end = (start + CALIBRATION_BATCH).min(n);
            let mut bshape = vec![end - start];
            bshape.extend_from_slice(&shape);
            let x = Tensor::from_vec(&bshape, calibration.data()[start * per..end * per].to_vec())?;
            let ids: Vec<u64> = (start as u64..end as u64).collect();
            let mut observe = |k: usize, _t: usize, input: &Tensor| {
                if k == layer {
                    peak = input.data().iter().cloned().fold(peak, f64::max);
                }
            };
            let opts = RunOptions {
                stop_after: Some(layer),
                observer: Some(&mut observe),
                ..RunOptions::eval(time_steps, seed, &ids)
            };
            run_snn(&snn, &x, opts)?;
        }
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::DegenerateThreshold {
                layer: li,
                threshold: peak.max(0.0),
            });
        }
        snn.set_threshold(li, peak)?;
    }
    snn.metadata.insert("method".into(), "conversion".into());
    snn.metadata.insert("calibration_samples".into(), n.to_string());
    snn.metadata.insert("calibration_seed".into(), seed.to_string());
    Ok(snn)
}
