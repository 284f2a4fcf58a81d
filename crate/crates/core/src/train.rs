//! Shared training plumbing: hyperparameters, loss traces and chunked
//! gradient accumulation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Adam, AdamConfig, Gradients, ParamSet, Tape, Var};
use crate::par::Execution;

/// Items packed into one tape. Fixed so results do not depend on the
/// number of worker threads.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 2e-5,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..AdamConfig::default()
        }
    }
}

/// Mean loss per optimizer step and per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub steps: Vec<f64>,
    pub epochs: Vec<f64>,
}

impl LossTrace {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().copied()
    }
}

/// Runs `loss_of` over fixed-size chunks of `items` and merges the
/// gradients in chunk order. `loss_of` returns a summed loss over the
/// chunk, or `None` when the chunk contributes nothing.
pub fn chunked_gradients<T, F>(
    params: &ParamSet,
    items: &[T],
    exec: Execution,
    loss_of: F,
) -> (f64, Gradients)
where
    T: Sync,
    F: Fn(&mut Tape, &[T]) -> Option<Var> + Sync,
{
    let chunks: Vec<&[T]> = items.chunks(CHUNK).collect();
    let parts = exec.map(&chunks, |chunk| {
        let mut tape = Tape::new(params);
        let mut grads = Gradients::new(params.len());
        let loss = match loss_of(&mut tape, chunk) {
            Some(l) => {
                tape.backward(l, &mut grads);
                tape.scalar(l)
            }
            None => 0.0,
        };
        (loss, grads)
    });
    let mut total = Gradients::new(params.len());
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        total.merge(g);
    }
    (loss, total)
}

/// Loss over all items without gradients.
pub fn total_loss<T, F>(params: &ParamSet, items: &[T], exec: Execution, loss_of: F) -> f64
where
    T: Sync,
    F: Fn(&mut Tape, &[T]) -> Option<Var> + Sync,
{
    let chunks: Vec<&[T]> = items.chunks(CHUNK).collect();
    exec.map(&chunks, |chunk| {
        let mut tape = Tape::new(params);
        loss_of(&mut tape, chunk).map_or(0.0, |l| tape.scalar(l))
    })
    .into_iter()
    .sum()
}

/// One optimizer step on the mean loss of a batch. Returns the mean loss.
pub fn step<T, F>(
    params: &mut ParamSet,
    opt: &mut Adam,
    batch: &[T],
    normalizer: f64,
    exec: Execution,
    loss_of: F,
) -> f64
where
    T: Sync,
    F: Fn(&mut Tape, &[T]) -> Option<Var> + Sync,
{
    let (loss, mut grads) = chunked_gradients(params, batch, exec, loss_of);
    let norm = normalizer.max(1.0);
    grads.scale(1.0 / norm);
    opt.step(params, grads);
    loss / norm
}

/// Shuffled batches of indices `0..n`.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn chunking_is_independent_of_execution() {
        let mut p = ParamSet::new();
        let w = p.add_const("w", (1, 1), 0.3);
        let items: Vec<f64> = (0..21).map(|i| i as f64 / 7.0).collect();
        let f = |t: &mut Tape, c: &[f64]| {
            let x = t.constant(Array2::from_shape_vec((c.len(), 1), c.to_vec()).unwrap());
            let wv = t.param(w);
            let z = t.matmul(x, wv);
            let y = Array2::from_elem((c.len(), 1), 1.0);
            Some(t.bce(z, y, None))
        };
        let (a, ga) = chunked_gradients(&p, &items, Execution::Sequential, f);
        let (b, gb) = chunked_gradients(&p, &items, Execution::Parallel, f);
        assert_eq!(a, b);
        assert_eq!(ga.get(w), gb.get(w));
        assert_eq!(total_loss(&p, &items, Execution::Sequential, f), a);
    }
}
