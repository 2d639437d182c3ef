//! Deterministic data-parallel gradient accumulation.
//!
//! Samples are split into a fixed number of contiguous chunks; each chunk is
//! processed sequentially on a cloned model, and chunk gradients are merged in
//! chunk order. Results are therefore independent of thread scheduling.

use ndarray::ArrayD;
use rayon::prelude::*;

use super::HasParams;

/// Number of gradient chunks per batch. Fixed (not tied to the machine's
/// core count) so summation order is stable across environments.
pub const GRAD_CHUNKS: usize = 4;

/// Runs `per_sample` over every sample, accumulating gradients into clones of
/// `model`, and merges them into `model`'s own grad buffers (which are zeroed
/// first). Returns the per-sample outputs in input order.
pub fn accumulate_batch<M, S, R, F>(model: &mut M, samples: &[S], per_sample: F) -> Vec<R>
where
    M: HasParams + Clone + Sync,
    S: Sync,
    R: Send,
    F: Fn(&mut M, &S) -> R + Sync,
{
    model.zero_grads();
    if samples.is_empty() {
        return Vec::new();
    }
    let chunk_size = samples.len().div_ceil(GRAD_CHUNKS);
    let frozen: &M = model;
    let results: Vec<(Vec<ArrayD<f64>>, Vec<R>)> = samples
        .par_chunks(chunk_size)
        .map(|chunk| {
            let mut worker = frozen.clone();
            worker.zero_grads();
            let outs: Vec<R> = chunk.iter().map(|s| per_sample(&mut worker, s)).collect();
            (worker.export_grads(), outs)
        })
        .collect();

    let mut all_outs = Vec::with_capacity(samples.len());
    for (grads, outs) in results {
        model.accumulate_grads(&grads);
        all_outs.extend(outs);
    }
    all_outs
}

/// Parallel map that preserves input order (used for read-only evaluation).
pub fn ordered_par_map<S, R, F>(samples: &[S], f: F) -> Vec<R>
where
    S: Sync,
    R: Send,
    F: Fn(&S) -> R + Sync + Send,
{
    samples.par_iter().map(f).collect()
}
