use crate::error::{Error, Result};
use crate::numerics::{Purpose, RandomStream, Tensor};

fn check_intensities(images: &Tensor) -> Result<()> {
    if let Some(p) = images.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("pixel intensity {p} outside [0, 1]")));
    }
    Ok(())
}

/// One time-step of rate coding: every pixel spikes with probability equal
/// to its intensity, drawn from a single stream in row-major order.
pub fn poisson_encode(images: &Tensor, stream: &mut RandomStream) -> Result<Tensor> {
    check_intensities(images)?;
    let mut out = images.clone();
    for p in out.data_mut() {
        *p = f64::from(stream.bernoulli_unchecked(*p));
    }
    Ok(out)
}

/// Rate encoder with one stream per sample, keyed by the sample's id, so a
/// sample's spike train does not depend on which batch it lands in.
#[derive(Debug, Clone)]
pub struct PoissonEncoder {
    streams: Vec<RandomStream>,
}

impl PoissonEncoder {
    pub fn new(seed: u64, sample_ids: &[u64]) -> Self {
        PoissonEncoder {
            streams: sample_ids
                .iter()
                .map(|&id| RandomStream::new(seed, Purpose::Encoder, id))
                .collect(),
        }
    }

    /// Spikes for the next time-step of `images [B, ...]`.
    pub fn step(&mut self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim0();
        if b != self.streams.len() {
            return Err(Error::shape(format!(
                "encoder has {} streams for a batch of {b}",
                self.streams.len()
            )));
        }
        let per = images.len() / b.max(1);
        let mut out = Tensor::zeros(images.shape());
        for ((src, dst), s) in images
            .data()
            .chunks_exact(per.max(1))
            .zip(out.data_mut().chunks_exact_mut(per.max(1)))
            .zip(&mut self.streams)
        {
            for (p, o) in src.iter().zip(dst) {
                *o = f64::from(s.bernoulli_unchecked(*p));
            }
        }
        Ok(out)
    }

    pub(crate) fn validate(images: &Tensor) -> Result<()> {
        check_intensities(images)
    }
}
