//! Inference throughput: median wall clock over timed iterations after
//! warmup.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SitError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::VisionTransformer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub images_per_sec: f64,
    pub median_batch_s: f64,
    pub batch_size: usize,
    pub threads: usize,
    pub warmup: usize,
    pub iterations: usize,
    /// Wall clock of every timed iteration, in seconds.
    pub samples_s: Vec<f64>,
}

/// Runs `warmup + iterations` passes over `images` (one batch), splitting
/// the batch across `threads` scoped workers.
pub fn bench<T: Scalar>(
    model: &VisionTransformer<T>,
    images: &[Tensor<T>],
    warmup: usize,
    iterations: usize,
    threads: usize,
) -> Result<BenchReport> {
    if images.is_empty() || iterations == 0 || threads == 0 {
        return Err(SitError::Config(
            "bench needs images, iterations ≥ 1 and threads ≥ 1".into(),
        ));
    }
    let chunk = images.len().div_ceil(threads);
    let run = || -> Result<()> {
        if threads == 1 {
            for im in images {
                model.predict(im)?;
            }
            return Ok(());
        }
        std::thread::scope(|s| {
            let workers: Vec<_> = images
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || part.iter().try_for_each(|im| model.predict(im).map(drop)))
                })
                .collect();
            workers
                .into_iter()
                .try_for_each(|w| w.join().expect("bench worker panicked"))
        })
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        run()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    let median = median(&samples);
    Ok(BenchReport {
        images_per_sec: images.len() as f64 / median,
        median_batch_s: median,
        batch_size: images.len(),
        threads,
        warmup,
        iterations,
        samples_s: samples,
    })
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}
