//! Deterministic parallel reductions.
//!
//! All reductions split the data into fixed-size chunks, reduce each chunk
//! sequentially, and combine the chunk results in index order. The result is
//! therefore bit-identical regardless of the number of worker threads.

use rayon::prelude::*;

const CHUNK: usize = 8192;

pub(crate) fn sum(values: &[f64]) -> f64 {
    if values.len() <= CHUNK {
        return values.iter().sum();
    }
    let partials: Vec<f64> = values
        .par_chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    partials.iter().sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.len() <= CHUNK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partials: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(ca, cb)| ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>())
        .collect();
    partials.iter().sum()
}

pub(crate) fn max_abs(values: &[f64]) -> f64 {
    if values.len() <= CHUNK {
        return values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }
    let partials: Vec<f64> = values
        .par_chunks(CHUNK)
        .map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    partials.iter().fold(0.0f64, |m, v| m.max(*v))
}

/// `y += alpha * x`, elementwise.
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK))
        .for_each(|(cy, cx)| {
            for (yi, xi) in cy.iter_mut().zip(cx) {
                *yi += alpha * xi;
            }
        });
}

/// `p = r + beta * p`, elementwise.
pub(crate) fn xpby(r: &[f64], beta: f64, p: &mut [f64]) {
    p.par_chunks_mut(CHUNK)
        .zip(r.par_chunks(CHUNK))
        .for_each(|(cp, cr)| {
            for (pi, ri) in cp.iter_mut().zip(cr) {
                *pi = ri + beta * *pi;
            }
        });
}
