//! Bilinear 2x upsampling with half-pixel centres (no corner alignment).

use ndarray::Array3;

/// For each output index along an axis: (low source, high source, weight of high).
fn taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_up2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (rt, ct) = (taps(h), taps(w));
    let mut y = Array3::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for (i, &(r0, r1, fr)) in rt.iter().enumerate() {
            for (j, &(c0, c1, fc)) in ct.iter().enumerate() {
                let top = x[[ch, r0, c0]] * (1.0 - fc) + x[[ch, r0, c1]] * fc;
                let bottom = x[[ch, r1, c0]] * (1.0 - fc) + x[[ch, r1, c1]] * fc;
                y[[ch, i, j]] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    y
}

/// Adjoint of [`bilinear_up2`].
pub fn bilinear_up2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let (rt, ct) = (taps(h), taps(w));
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for (i, &(r0, r1, fr)) in rt.iter().enumerate() {
            for (j, &(c0, c1, fc)) in ct.iter().enumerate() {
                let g = dy[[ch, i, j]];
                dx[[ch, r0, c0]] += g * (1.0 - fr) * (1.0 - fc);
                dx[[ch, r0, c1]] += g * (1.0 - fr) * fc;
                dx[[ch, r1, c0]] += g * fr * (1.0 - fc);
                dx[[ch, r1, c1]] += g * fr * fc;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_grid_stays_constant() {
        let x = Array3::from_elem((2, 3, 5), 0.37);
        let y = bilinear_up2(&x);
        assert_eq!(y.dim(), (2, 6, 10));
        assert!(y.iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn half_pixel_interpolation_values() {
        let x = array![[[0.0, 4.0]]];
        let y = bilinear_up2(&x);
        // Output centres map to source positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped high).
        assert_eq!(y.slice(ndarray::s![0, 0, ..]).to_vec(), vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let x = array![[[1.0, -2.0, 0.5], [3.0, 0.0, 1.5]]];
        let g = Array3::from_shape_fn((1, 4, 6), |(_, i, j)| (i * 6 + j) as f64 * 0.1 - 1.0);
        let lhs = (&bilinear_up2(&x) * &g).sum();
        let rhs = (&x * &bilinear_up2_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
