//! Throughput statistics: arithmetic mean and standard error of the mean.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("need at least 2 samples for a standard error, got {0}")]
pub struct InsufficientSamples(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn bench_stats(samples: &[f64]) -> Result<Summary, InsufficientSamples> {
    let n = samples.len();
    if n < 2 {
        return Err(InsufficientSamples(n));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    let sd = (ss / (nf - 1.0)).sqrt();
    Ok(Summary {
        mean,
        stderr: sd / nf.sqrt(),
    })
}

/// Summary of one benchmark cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub streams: usize,
    pub msg_size_bytes: usize,
    pub samples_gbps: Vec<f64>,
    pub mean_gbps: f64,
    pub stderr_gbps: f64,
}

impl BenchRecord {
    pub fn from_samples(
        streams: usize,
        msg_size_bytes: usize,
        samples_gbps: Vec<f64>,
    ) -> Result<BenchRecord, InsufficientSamples> {
        let Summary { mean, stderr } = bench_stats(&samples_gbps)?;
        Ok(BenchRecord {
            streams,
            msg_size_bytes,
            samples_gbps,
            mean_gbps: mean,
            stderr_gbps: stderr,
        })
    }

    pub fn iterations(&self) -> usize {
        self.samples_gbps.len()
    }
}
