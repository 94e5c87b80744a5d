//! Stride-1 "same" convolutions lowered to a matrix product over unrolled
//! patches (im2col).

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Ix4};
use rand::Rng;

use crate::nn::init;
use crate::params::Parameters;

/// Output columns `lo..hi` whose tap at kernel column `b` reads inside a
/// row of width `w`.
fn valid_columns(w: usize, b: usize, pad: usize) -> (usize, usize) {
    (pad.saturating_sub(b), (w + pad).saturating_sub(b).min(w))
}

/// Unrolls `x` (c, h, w) into a (c·k·k, h·w) patch matrix. Output pixel
/// (r, s) reads input rows `r + a - pad` and columns `s + b - pad` for
/// `a, b in 0..k`; out-of-range reads are zero.
pub fn im2col(x: &Array3<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * k * k, h * w));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for a in 0..k {
            for b in 0..k {
                let row = (ch * k + a) * k + b;
                let out = &mut dst[row * h * w..(row + 1) * h * w];
                for r in 0..h {
                    let sr = r as isize + a as isize - pad as isize;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let base = (ch * h + sr as usize) * w;
                    let (lo, hi) = valid_columns(w, b, pad);
                    if lo < hi {
                        out[r * w + lo..r * w + hi].copy_from_slice(&src[base + lo + b - pad..base + hi + b - pad]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto a (c, h, w) map,
/// summing overlaps.
pub fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array3<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut x = Array3::zeros((c, h, w));
    let dst = x.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for a in 0..k {
            for b in 0..k {
                let row = (ch * k + a) * k + b;
                let input = &src[row * h * w..(row + 1) * h * w];
                for r in 0..h {
                    let sr = r as isize + a as isize - pad as isize;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let base = (ch * h + sr as usize) * w;
                    let (lo, hi) = valid_columns(w, b, pad);
                    if lo < hi {
                        let target = &mut dst[base + lo + b - pad..base + hi + b - pad];
                        for (d, v) in target.iter_mut().zip(&input[r * w + lo..r * w + hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Same-size correlation with an (out, in·k·k) weight matrix.
fn correlate(x: &Array3<f64>, weight: ArrayView2<f64>, bias: &Array1<f64>, k: usize, pad: usize) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let cols = im2col(x, k, pad);
    let mut y = weight.dot(&cols);
    for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row += b;
    }
    y.into_shape_with_order((weight.nrows(), h, w)).expect("contiguous")
}

/// Returns (dx, dW as (out, in·k·k), db). `dx` is skipped when not needed.
fn correlate_backward(
    x: &Array3<f64>,
    weight: ArrayView2<f64>,
    dy: &Array3<f64>,
    k: usize,
    pad: usize,
    need_input_grad: bool,
) -> (Option<Array3<f64>>, Array2<f64>, Array1<f64>) {
    let (c, h, w) = x.dim();
    let cols = im2col(x, k, pad);
    let dy = dy
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((weight.nrows(), h * w))
        .expect("contiguous");
    let dw = dy.dot(&cols.t());
    let db = dy.sum_axis(Axis(1));
    let dx = need_input_grad.then(|| {
        let dcols = weight.t().dot(&dy);
        col2im(dcols.view(), c, h, w, k, pad)
    });
    (dx, dw, db)
}

/// 2-d convolution, stride 1, zero "same" padding, odd square kernel.
/// Weight layout (out, in, k, k).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(inputs: usize, outputs: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self {
            weight: Array4::zeros((outputs, inputs, kernel, kernel)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn he<R: Rng + ?Sized>(inputs: usize, outputs: usize, kernel: usize, rng: &mut R) -> Self {
        let mut conv = Self::zeros(inputs, outputs, kernel);
        conv.weight = init::he_normal(&[outputs, inputs, kernel, kernel], inputs * kernel * kernel, rng)
            .into_dimensionality::<Ix4>()
            .expect("4-d");
        conv
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn pad(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    /// Weight viewed as the (out, in·k·k) matrix acting on [`im2col`] patches.
    pub fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        correlate(x, self.weight_matrix(), &self.bias, self.kernel(), self.pad())
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when asked.
    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>, grad: &mut Conv2d, need_input_grad: bool) -> Option<Array3<f64>> {
        let (dx, dw, db) = correlate_backward(x, self.weight_matrix(), dy, self.kernel(), self.pad(), need_input_grad);
        let shape = grad.weight.raw_dim();
        grad.weight += &dw.into_shape_with_order(shape).expect("contiguous");
        grad.bias += &db;
        dx
    }
}

impl Parameters for Conv2d {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
        ]
    }
}

/// Stride-1 transposed convolution whose output is cropped back to the input
/// size, starting at offset `(k - 1) / 2`. Weight layout (in, out, k, k).
///
/// A stride-1 transposed convolution is a correlation with the spatially
/// flipped, channel-swapped kernel and top/left padding `k - 1 - crop`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransposedConv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl TransposedConv2d {
    pub fn zeros(inputs: usize, outputs: usize, kernel: usize) -> Self {
        Self {
            weight: Array4::zeros((inputs, outputs, kernel, kernel)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn he<R: Rng + ?Sized>(inputs: usize, outputs: usize, kernel: usize, rng: &mut R) -> Self {
        let mut t = Self::zeros(inputs, outputs, kernel);
        t.weight = init::he_normal(&[inputs, outputs, kernel, kernel], inputs * kernel * kernel, rng)
            .into_dimensionality::<Ix4>()
            .expect("4-d");
        t
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn pad(&self) -> usize {
        let k = self.kernel();
        k - 1 - (k - 1) / 2
    }

    fn equivalent_weight(&self) -> Array2<f64> {
        let (i, o, k, _) = self.weight.dim();
        let mut flipped = Array4::zeros((o, i, k, k));
        for ((c, out, a, b), &v) in self.weight.indexed_iter() {
            flipped[[out, c, k - 1 - a, k - 1 - b]] = v;
        }
        flipped.into_shape_with_order((o, i * k * k)).expect("contiguous")
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        correlate(x, self.equivalent_weight().view(), &self.bias, self.kernel(), self.pad())
    }

    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>, grad: &mut TransposedConv2d) -> Array3<f64> {
        let weight = self.equivalent_weight();
        let (dx, dw, db) = correlate_backward(x, weight.view(), dy, self.kernel(), self.pad(), true);
        let (i, o, k, _) = self.weight.dim();
        let dw = dw.into_shape_with_order((o, i, k, k)).expect("contiguous");
        for ((out, c, a, b), &v) in dw.indexed_iter() {
            grad.weight[[c, out, k - 1 - a, k - 1 - b]] += v;
        }
        grad.bias += &db;
        dx.expect("requested")
    }
}

impl Parameters for TransposedConv2d {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop correlation used as the reference.
    fn naive_conv(x: &Array3<f64>, conv: &Conv2d) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (o, _, k, _) = conv.weight.dim();
        let p = conv.pad() as isize;
        let mut y = Array3::zeros((o, h, w));
        for out in 0..o {
            for r in 0..h {
                for s in 0..w {
                    let mut acc = conv.bias[out];
                    for ch in 0..c {
                        for a in 0..k {
                            for b in 0..k {
                                let (sr, sc) = (r as isize + a as isize - p, s as isize + b as isize - p);
                                if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                                    acc += x[[ch, sr as usize, sc as usize]] * conv.weight[[out, ch, a, b]];
                                }
                            }
                        }
                    }
                    y[[out, r, s]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn single_filter_3x3_center_value() {
        // Centre output sees the whole input: sum of x * w = 1*1 + 2*0 + 3*(-1) + 4*2 + 5*1 + 6*0 + 7*0 + 8*1 + 9*(-1) = 10.
        let x = Array::from_shape_vec((1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let mut conv = Conv2d::zeros(1, 1, 3);
        conv.weight
            .assign(&array![[[[1.0, 0.0, -1.0], [2.0, 1.0, 0.0], [0.0, 1.0, -1.0]]]]);
        let y = conv.forward(&x);
        assert_eq!(y[[0, 1, 1]], 10.0);
        // Top-left corner only sees the bottom-right 2x2 of the kernel: 1*1 + 2*0 + 4*1 + 5*(-1) = 0.
        assert_eq!(y[[0, 0, 0]], 0.0);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::he(3, 4, 5, &mut rng);
        conv.bias = array![0.1, -0.2, 0.3, 0.0];
        let x = crate::nn::init::normal(&[3, 7, 6], 1.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        let fast = conv.forward(&x);
        let slow = naive_conv(&x, &conv);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Array3<f64> = crate::nn::init::normal(&[2, 5, 4], 1.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        let cols = im2col(&x, 3, 1);
        let g: Array2<f64> = crate::nn::init::normal(&[cols.nrows(), cols.ncols()], 1.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        let lhs = (&cols * &g).sum();
        let rhs = (&x * &col2im(g.view(), 2, 5, 4, 3, 1)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_matches_scatter_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [2usize, 3] {
            let t = TransposedConv2d::he(2, 3, k, &mut rng);
            let x: Array3<f64> = crate::nn::init::normal(&[2, 4, 5], 1.0, &mut rng)
                .into_dimensionality()
                .unwrap();
            let y = t.forward(&x);
            // Scatter each input pixel through the kernel, then crop.
            let crop = (k - 1) / 2;
            let mut full = Array3::<f64>::zeros((3, 4 + k - 1, 5 + k - 1));
            for ((c, i, j), &v) in x.indexed_iter() {
                for o in 0..3 {
                    for a in 0..k {
                        for b in 0..k {
                            full[[o, i + a, j + b]] += v * t.weight[[c, o, a, b]];
                        }
                    }
                }
            }
            assert_eq!(y.dim(), (3, 4, 5));
            for ((o, r, s), &v) in y.indexed_iter() {
                assert!((v - full[[o, r + crop, s + crop]]).abs() < 1e-12, "k={k}");
            }
        }
    }
}
