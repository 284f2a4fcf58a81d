//! Document-level bootstrap confidence intervals.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::DocTriples;
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub samples: usize,
    pub seed: u64,
    /// When false every sample is the full document set.
    pub resample: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            samples: 50,
            seed: 0,
            resample: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub mean: f64,
    /// Population standard deviation over samples.
    pub std: f64,
    pub samples: usize,
}

impl fmt::Display for BootstrapCI {
    /// Percentages with two decimals, e.g. `74.97 ± 0.62`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Resamples documents with replacement and summarizes `metric`.
pub fn bootstrap_ci<F>(
    docs: &[DocTriples],
    metric: F,
    cfg: &BootstrapConfig,
    exec: Execution,
) -> Result<BootstrapCI>
where
    F: Fn(&[DocTriples]) -> f64 + Sync,
{
    if docs.is_empty() {
        return Err(Error::validation("bootstrap needs at least one document"));
    }
    if cfg.samples == 0 {
        return Err(Error::validation("bootstrap needs at least one sample"));
    }
    let n = docs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws: Vec<Option<Vec<usize>>> = (0..cfg.samples)
        .map(|_| {
            cfg.resample
                .then(|| (0..n).map(|_| rng.random_range(0..n)).collect())
        })
        .collect();
    let values = exec.map(&draws, |draw| match draw {
        Some(idx) => {
            let sample: Vec<DocTriples> = idx.iter().map(|&i| docs[i].clone()).collect();
            metric(&sample)
        }
        None => metric(docs),
    });
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    Ok(BootstrapCI {
        mean,
        std: var.sqrt(),
        samples: cfg.samples,
    })
}
