//! Index bookkeeping for numpy-style broadcasting and axis reductions.

use crate::error::{Error, Result};
use crate::tensor::strides_of;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{a:?} and {b:?} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Strides of `small` laid over `big`, zero along broadcast axes.
pub(crate) fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let rank = big.len();
    let own = strides_of(small);
    let offset = rank - small.len();
    (0..rank)
        .map(|i| {
            if i < offset || small[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// For each element of `big` (row-major), the flat index of the element of
/// `small` it maps to under broadcasting.
pub(crate) fn broadcast_index_map(small: &[usize], big: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(small, big);
    let total: usize = big.iter().product();
    let mut out = Vec::with_capacity(total);
    let rank = big.len();
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        out.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < big[d] {
                break;
            }
            idx -= strides[d] * big[d];
            counter[d] = 0;
        }
    }
    out
}

/// Sums `grad` (shaped like `big`) down to `small`.
pub(crate) fn reduce_to(grad: &[f32], big: &[usize], small: &[usize]) -> Vec<f32> {
    if big == small {
        return grad.to_vec();
    }
    let n_small: usize = small.iter().product();
    let mut out = vec![0.0f32; n_small];
    for (g, j) in grad.iter().zip(broadcast_index_map(small, big)) {
        out[j] += g;
    }
    out
}
