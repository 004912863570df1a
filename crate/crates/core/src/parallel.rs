use rayon::prelude::*;

const CHUNK: usize = 16;

/// Sums per-item losses and gradients over `items` in fixed-size chunks.
///
/// Chunks run on the rayon pool but their partial sums are combined in
/// index order, so the result is bit-identical for any thread count.
pub(crate) fn summed_gradient<T, F>(items: &[T], n_params: usize, f: F) -> (f64, Vec<f64>)
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> f64 + Sync,
{
    let partials: Vec<(f64, Vec<f64>)> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = vec![0.0; n_params];
            let loss = chunk.iter().map(|item| f(item, &mut grads)).sum::<f64>();
            (loss, grads)
        })
        .collect();
    let mut total = vec![0.0; n_params];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        crate::model::axpy(1.0, &g, &mut total);
    }
    (loss, total)
}

/// Maps `f` over `0..n` in parallel, preserving order.
pub(crate) fn ordered_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}
