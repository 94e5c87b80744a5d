//! Named parameter access shared by the optimizer, the checkpoint
//! container, weight transfer and the gradient checks.

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};

/// A model whose learnable arrays can be enumerated by stable dotted names.
///
/// `params` and `params_mut` must list the same names in the same order.
pub trait Parameters {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|(_, a)| a.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

/// Prepends `prefix.` to every name in `items`.
pub fn nest<V>(prefix: &str, items: Vec<(String, V)>) -> Vec<(String, V)> {
    items
        .into_iter()
        .map(|(name, v)| (format!("{prefix}.{name}"), v))
        .collect()
}

/// A copy of `model` with every array zeroed; used as a gradient accumulator.
pub fn zeros_like<T: Parameters + Clone>(model: &T) -> T {
    let mut z = model.clone();
    for (_, mut a) in z.params_mut() {
        a.fill(0.0);
    }
    z
}

/// `dst += scale * src`, matched by position.
pub fn add_scaled<T: Parameters>(dst: &mut T, src: &T, scale: f64) {
    let src = src.params();
    for ((_, mut d), (_, s)) in dst.params_mut().into_iter().zip(src) {
        d.scaled_add(scale, &s);
    }
}

/// Copies every array of `src` whose name passes `select` into the
/// identically named array of `dst`. Returns the number of arrays copied.
pub fn copy_matching<S: Parameters, D: Parameters>(
    src: &S,
    dst: &mut D,
    select: impl Fn(&str) -> bool,
) -> Result<usize> {
    let source: Vec<_> = src.params();
    let mut copied = 0;
    for (name, mut target) in dst.params_mut() {
        if !select(&name) {
            continue;
        }
        let (_, from) = source
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("source has no parameter `{name}`")))?;
        if from.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                name,
                expected: target.shape().to_vec(),
                found: from.shape().to_vec(),
            });
        }
        target.assign(from);
        copied += 1;
    }
    Ok(copied)
}
