//! Max pooling with recorded winners. The argmax record serves both the
//! gradient and winner-path relevance propagation.

use ndarray::Array3;

use crate::error::{ensure, Result};

/// Flat in-plane index of the winning input for every pooled output,
/// plus the input shape it refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgmaxRecord {
    pub input_dim: (usize, usize, usize),
    pub winners: Array3<usize>,
}

impl ArgmaxRecord {
    /// Routes every output value to its winning input, summing where one
    /// input wins several bins.
    pub fn scatter(&self, upstream: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = self.input_dim;
        let mut out = Array3::zeros((c, h, w));
        for ((ch, i, j), &idx) in self.winners.indexed_iter() {
            out[[ch, idx / w, idx % w]] += upstream[[ch, i, j]];
        }
        out
    }
}

/// Maximum over one rectangular window of channel `ch`; ties go to the
/// first element in row-major scan order.
fn window_max(x: &Array3<f64>, ch: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> (f64, usize) {
    let w = x.dim().2;
    let mut best = f64::NEG_INFINITY;
    let mut at = rows.start * w + cols.start;
    for r in rows {
        for s in cols.clone() {
            let v = x[[ch, r, s]];
            if v > best {
                best = v;
                at = r * w + s;
            }
        }
    }
    (best, at)
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2(x: &Array3<f64>) -> (Array3<f64>, ArgmaxRecord) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, oh, ow));
    let mut winners = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let (v, at) = window_max(x, ch, 2 * i..2 * i + 2, 2 * j..2 * j + 2);
                y[[ch, i, j]] = v;
                winners[[ch, i, j]] = at;
            }
        }
    }
    (
        y,
        ArgmaxRecord {
            input_dim: (c, h, w),
            winners,
        },
    )
}

/// Bin `i` of `n` over an axis of length `len`: `[floor(i·len/n), ceil((i+1)·len/n))`.
/// Neighbouring bins overlap when `len` is not a multiple of `n`.
pub fn adaptive_bin(i: usize, n: usize, len: usize) -> std::ops::Range<usize> {
    (i * len) / n..((i + 1) * len).div_ceil(n)
}

/// Adaptive max pooling onto an `n x n` output grid.
pub fn adaptive_max_pool(x: &Array3<f64>, n: usize) -> Result<(Array3<f64>, ArgmaxRecord)> {
    let (c, h, w) = x.dim();
    ensure(n >= 1 && h >= n && w >= n, || {
        format!("adaptive pooling onto {n}x{n} needs at least {n}x{n} input, got {h}x{w}")
    })?;
    let mut y = Array3::zeros((c, n, n));
    let mut winners = Array3::zeros((c, n, n));
    for ch in 0..c {
        for i in 0..n {
            for j in 0..n {
                let (v, at) = window_max(x, ch, adaptive_bin(i, n, h), adaptive_bin(j, n, w));
                y[[ch, i, j]] = v;
                winners[[ch, i, j]] = at;
            }
        }
    }
    Ok((
        y,
        ArgmaxRecord {
            input_dim: (c, h, w),
            winners,
        },
    ))
}
