//! Composite layer-wise relevance propagation for the volume classifier.
//!
//! Every linear stage is handled in matrix form: a dense layer is a single
//! column and a convolution is its im2col-unrolled product, so the same
//! rule implementations serve both. Relevance starts at the pre-softmax
//! score of the chosen class and flows back through the head (LRP_0),
//! NetVLAD (Gradient x Input with the assignment frozen), the post-SPP
//! layer (LRP_0), SPP (winner path), the gate (Gradient x Input), the
//! convolutions (LRP_alpha-beta), the pools (winner path) and the first
//! convolution (z^B box rule).

use ndarray::{Array1, Array2, Array3, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::classifier::{forward_volume, spp_backward, ClassifierState, NetVladTrace};
use crate::encoder::{Branch, BranchTrace};
use crate::error::{ensure, invalid, Result};
use crate::nn::conv::{col2im, im2col};
use crate::nn::pool::ArgmaxRecord;
use crate::nn::Conv2d;
use crate::params::Parameters;
use crate::phantom::Volume;

/// Default denominator stabiliser.
pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Rule {
    Lrp0,
    AlphaBeta { alpha: f64, beta: f64 },
    WinnerPath,
    ZBox { low: f64, high: f64 },
    GradientTimesInput,
}

impl Rule {
    pub fn default_alpha_beta() -> Self {
        Rule::AlphaBeta { alpha: 2.0, beta: -1.0 }
    }
}

/// Which rule runs at which stage. Pools and SPP always use the winner
/// path and the gate and NetVLAD always use Gradient x Input; the linear
/// stages are configurable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleAssignment {
    pub head: Rule,
    pub post_spp: Rule,
    pub convolutions: Rule,
    pub input: Rule,
}

impl Default for RuleAssignment {
    fn default() -> Self {
        Self {
            head: Rule::Lrp0,
            post_spp: Rule::Lrp0,
            convolutions: Rule::default_alpha_beta(),
            input: Rule::ZBox { low: 0.0, high: 1.0 },
        }
    }
}

impl RuleAssignment {
    pub fn validate(&self) -> Result<()> {
        for (stage, rule) in [
            ("head", self.head),
            ("post_spp", self.post_spp),
            ("convolutions", self.convolutions),
            ("input", self.input),
        ] {
            match rule {
                Rule::AlphaBeta { alpha, beta } => check_alpha_beta(alpha, beta)?,
                Rule::ZBox { low, high } if stage != "input" || low.is_nan() || high.is_nan() || low > high => {
                    return Err(invalid(format!("z^B needs the input stage and low <= high, got {stage} [{low}, {high}]")))
                }
                Rule::WinnerPath | Rule::GradientTimesInput => {
                    return Err(invalid(format!("{rule:?} is not a rule for the linear stage {stage}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn check_alpha_beta(alpha: f64, beta: f64) -> Result<()> {
    ensure((alpha + beta - 1.0).abs() <= 1e-12, || {
        format!("alpha + beta must equal 1, got {alpha} + {beta}")
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub rules: RuleAssignment,
    pub epsilon: f64,
    /// Gaussian smoothing bandwidth in pixels; `None` leaves maps raw.
    pub smoothing_sigma: Option<f64>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            rules: RuleAssignment::default(),
            epsilon: DEFAULT_EPSILON,
            smoothing_sigma: None,
        }
    }
}

/// Bandwidth used when smoothing is switched on without a value.
pub const DEFAULT_SMOOTHING_SIGMA: f64 = 1.5;

/// `r / (z + sign(z) eps)`, with an exactly zero denominator giving zero.
fn share(r: f64, z: f64, eps: f64) -> f64 {
    let d = if z >= 0.0 { z + eps } else { z - eps };
    if d == 0.0 {
        0.0
    } else {
        r / d
    }
}

fn pos_neg(a: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    (a.mapv(|v| v.max(0.0)), a.mapv(|v| v.min(0.0)))
}

/// LRP_0 in matrix form. `r` is (out, P), `x` is (in, P) and `w` is
/// (out, in); returns (in, P).
fn lrp0_matrix(r: &Array2<f64>, x: ArrayView2<f64>, w: ArrayView2<f64>, eps: f64) -> Array2<f64> {
    let z = w.dot(&x);
    let s = Zip::from(r).and(&z).map_collect(|&r, &z| share(r, z, eps));
    &x * &w.t().dot(&s)
}

/// LRP_alpha-beta in matrix form. When one side of an output's
/// contributions is empty its share moves to the other side, so the
/// coefficients still sum to one.
fn alphabeta_matrix(r: &Array2<f64>, x: ArrayView2<f64>, w: ArrayView2<f64>, alpha: f64, beta: f64, eps: f64) -> Array2<f64> {
    let (wp, wn) = pos_neg(w);
    let (xp, xn) = pos_neg(x);
    let zp = wp.dot(&xp) + wn.dot(&xn);
    let zn = wp.dot(&xn) + wn.dot(&xp);
    let mut sp = Array2::zeros(r.raw_dim());
    let mut sn = Array2::zeros(r.raw_dim());
    Zip::from(&mut sp)
        .and(&mut sn)
        .and(r)
        .and(&zp)
        .and(&zn)
        .for_each(|sp, sn, &r, &zp, &zn| {
            let (a, b) = match (zp > 0.0, zn < 0.0) {
                (true, true) => (alpha, beta),
                (true, false) => (alpha + beta, 0.0),
                (false, true) => (0.0, alpha + beta),
                (false, false) => (0.0, 0.0),
            };
            *sp = a * share(r, zp, eps);
            *sn = b * share(r, zn, eps);
        });
    let from_pos = &xp * &(wp.t().dot(&sp) + wn.t().dot(&sn));
    let from_neg = &xn * &(wn.t().dot(&sp) + wp.t().dot(&sn));
    from_pos + from_neg
}

/// z^B in matrix form with box bounds `low` and `high` unrolled like `x`.
fn zbox_matrix(r: &Array2<f64>, x: ArrayView2<f64>, low: ArrayView2<f64>, high: ArrayView2<f64>, w: ArrayView2<f64>, eps: f64) -> Array2<f64> {
    let (wp, wn) = pos_neg(w);
    let z = w.dot(&x) - wp.dot(&low) - wn.dot(&high);
    let s = Zip::from(r).and(&z).map_collect(|&r, &z| share(r, z, eps));
    &x * &w.t().dot(&s) - &low * &wp.t().dot(&s) - &high * &wn.t().dot(&s)
}

fn column(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(ndarray::Axis(1))
}

fn flatten(a: Array2<f64>) -> Array1<f64> {
    Array1::from_iter(a.iter().copied())
}

/// LRP_0 through a dense layer with weights indexed `[input, output]`:
/// `R_i = Σ_j (x_i w_ij / z_j) R_j`, `z_j = Σ_i x_i w_ij` stabilised.
pub fn lrp_linear_0(r_out: &Array1<f64>, x: &Array1<f64>, weights: ArrayView2<f64>, eps: f64) -> Result<Array1<f64>> {
    check_linear(r_out, x, weights)?;
    Ok(flatten(lrp0_matrix(&column(r_out), column(x).view(), weights.t(), eps)))
}

/// LRP_alpha-beta through a dense layer with weights indexed `[input, output]`.
pub fn lrp_linear_alphabeta(r_out: &Array1<f64>, x: &Array1<f64>, weights: ArrayView2<f64>, alpha: f64, beta: f64, eps: f64) -> Result<Array1<f64>> {
    check_alpha_beta(alpha, beta)?;
    check_linear(r_out, x, weights)?;
    Ok(flatten(alphabeta_matrix(&column(r_out), column(x).view(), weights.t(), alpha, beta, eps)))
}

/// z^B through a dense layer with weights indexed `[input, output]`.
pub fn lrp_input_zb(r_out: &Array1<f64>, x: &Array1<f64>, weights: ArrayView2<f64>, low: f64, high: f64, eps: f64) -> Result<Array1<f64>> {
    check_linear(r_out, x, weights)?;
    check_box(x.iter(), low, high)?;
    let lo = Array2::from_elem((x.len(), 1), low);
    let hi = Array2::from_elem((x.len(), 1), high);
    Ok(flatten(zbox_matrix(&column(r_out), column(x).view(), lo.view(), hi.view(), weights.t(), eps)))
}

fn check_linear(r_out: &Array1<f64>, x: &Array1<f64>, weights: ArrayView2<f64>) -> Result<()> {
    ensure(weights.dim() == (x.len(), r_out.len()), || {
        format!("weights {:?} do not map {} inputs to {} outputs", weights.dim(), x.len(), r_out.len())
    })
}

fn check_box<'a>(values: impl Iterator<Item = &'a f64>, low: f64, high: f64) -> Result<()> {
    ensure(low <= high, || format!("box bounds reversed: [{low}, {high}]"))?;
    for &v in values {
        ensure(v >= low && v <= high, || format!("input {v} lies outside the box [{low}, {high}]"))?;
    }
    Ok(())
}

/// Applies a linear-stage rule to a bias-free convolution. `r_out` has the
/// convolution's output shape; the result has the shape of `x`.
pub fn lrp_conv(rule: Rule, r_out: &Array3<f64>, x: &Array3<f64>, conv: &Conv2d, eps: f64) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    let (k, pad) = (conv.kernel(), conv.pad());
    ensure(c == conv.in_channels() && r_out.dim() == (conv.out_channels(), h, w), || {
        format!("relevance {:?} does not match convolution over {:?}", r_out.dim(), x.dim())
    })?;
    let cols = im2col(x, k, pad);
    let r = r_out
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((conv.out_channels(), h * w))
        .expect("contiguous");
    let wm = conv.weight_matrix();
    let r_cols = match rule {
        Rule::Lrp0 => lrp0_matrix(&r, cols.view(), wm, eps),
        Rule::AlphaBeta { alpha, beta } => {
            check_alpha_beta(alpha, beta)?;
            alphabeta_matrix(&r, cols.view(), wm, alpha, beta, eps)
        }
        Rule::ZBox { low, high } => {
            check_box(x.iter(), low, high)?;
            // Bounds are unrolled like the input so padded taps stay zero.
            let lo = im2col(&Array3::from_elem(x.raw_dim(), low), k, pad);
            let hi = im2col(&Array3::from_elem(x.raw_dim(), high), k, pad);
            zbox_matrix(&r, cols.view(), lo.view(), hi.view(), wm, eps)
        }
        other => return Err(invalid(format!("{other:?} is not a convolution rule"))),
    };
    Ok(col2im(r_cols.view(), c, h, w, k, pad))
}

/// LRP_alpha-beta through a convolution.
pub fn lrp_conv_alphabeta(r_out: &Array3<f64>, x: &Array3<f64>, conv: &Conv2d, alpha: f64, beta: f64, eps: f64) -> Result<Array3<f64>> {
    lrp_conv(Rule::AlphaBeta { alpha, beta }, r_out, x, conv, eps)
}

/// Winner-path relevance through a max pool or SPP level: every output's
/// relevance goes to its recorded winner.
pub fn lrp_maxpool(r_out: &Array3<f64>, record: Option<&ArgmaxRecord>) -> Result<Array3<f64>> {
    let record = record.ok_or_else(|| invalid("winner-path propagation needs the forward argmax record"))?;
    ensure(record.winners.dim() == r_out.dim(), || {
        format!("relevance {:?} does not match the pooled shape {:?}", r_out.dim(), record.winners.dim())
    })?;
    Ok(record.scatter(r_out))
}

/// Gradient x Input at the gate `ReLU(F_g ⊙ F_s)`: wherever the gate is
/// open each branch output receives the full incoming relevance.
pub fn grad_times_input_gate(global: &Array3<f64>, side: &Array3<f64>, r_out: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let mut rg = Array3::zeros(global.raw_dim());
    Zip::from(&mut rg)
        .and(global)
        .and(side)
        .and(r_out)
        .for_each(|rg, &g, &s, &r| {
            if g * s > 0.0 {
                *rg = r;
            }
        });
    (rg.clone(), rg)
}

/// Gradient x Input at a context gate `f ⊙ g` with the gate values frozen.
pub fn grad_times_input_context_gate(f: &Array1<f64>, gate_values: &Array1<f64>, r_out: &Array1<f64>, eps: f64) -> Array1<f64> {
    Zip::from(f)
        .and(gate_values)
        .and(r_out)
        .map_collect(|&f, &g, &r| f * g * share(r, f * g, eps))
}

/// Gradient x Input through NetVLAD with the soft assignment frozen:
/// `R_{x_i}[j] = x_i[j] Σ_k a_ik R(k, j) / V(k, j)`. Relevance attributed to
/// the centres is dropped like a bias.
pub fn grad_times_input_netvlad(descriptors: &Array2<f64>, assign: &Array2<f64>, residuals: &Array2<f64>, r_out: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    ensure(r_out.dim() == residuals.dim(), || {
        format!("relevance {:?} does not match residuals {:?}", r_out.dim(), residuals.dim())
    })?;
    ensure(assign.dim() == (descriptors.nrows(), residuals.nrows()), || "assignment shape mismatch".into())?;
    let s = Zip::from(r_out).and(residuals).map_collect(|&r, &v| share(r, v, eps));
    Ok(descriptors * &assign.dot(&s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSum {
    pub stage: String,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub class_index: u8,
    /// One (h, w) map per slice.
    pub image_relevance: Vec<Array2<f64>>,
    pub mask_relevance: Vec<Array2<f64>>,
    /// Relevance summed over the volume after each stage, in propagation
    /// order, before any smoothing.
    pub stage_sums: Vec<StageSum>,
}

struct Sums(Vec<StageSum>);

impl Sums {
    fn add(&mut self, stage: &str, value: f64) {
        match self.0.iter_mut().find(|s| s.stage == stage) {
            Some(s) => s.total += value,
            None => self.0.push(StageSum {
                stage: stage.into(),
                total: value,
            }),
        }
    }
}

fn branch_relevance(branch: &Branch, trace: &BranchTrace, r_out: &Array3<f64>, name: &str, cfg: &ExplainConfig, sums: &mut Sums) -> Result<Array2<f64>> {
    let eps = cfg.epsilon;
    // Leaky/plain ReLU pass relevance unchanged.
    let r = lrp_conv(cfg.rules.convolutions, r_out, &trace.pooled2, &branch.conv3, eps)?;
    sums.add(&format!("{name}.conv3"), r.sum());
    let r = lrp_maxpool(&r, Some(&trace.pool2))?;
    sums.add(&format!("{name}.pool2"), r.sum());
    let r = lrp_conv(cfg.rules.convolutions, &r, &trace.pooled1, &branch.conv2, eps)?;
    sums.add(&format!("{name}.conv2"), r.sum());
    let r = lrp_maxpool(&r, Some(&trace.pool1))?;
    sums.add(&format!("{name}.pool1"), r.sum());
    let r = lrp_conv(cfg.rules.input, &r, &trace.input, &branch.conv1, eps)?;
    sums.add(&format!("{name}.conv1"), r.sum());
    Ok(r.index_axis_move(ndarray::Axis(0), 0))
}

fn dense_rule(rule: Rule, r_out: &Array1<f64>, x: &Array1<f64>, weight: &Array2<f64>, eps: f64) -> Result<Array1<f64>> {
    match rule {
        Rule::Lrp0 => lrp_linear_0(r_out, x, weight.t(), eps),
        Rule::AlphaBeta { alpha, beta } => lrp_linear_alphabeta(r_out, x, weight.t(), alpha, beta, eps),
        other => Err(invalid(format!("{other:?} is not a dense-layer rule"))),
    }
}

fn netvlad_relevance(trace: &NetVladTrace, r_agg: &Array1<f64>, eps: f64) -> Result<Array2<f64>> {
    // Intra and global normalisation pass relevance unchanged.
    let r = r_agg
        .clone()
        .into_shape_with_order(trace.residuals.raw_dim())
        .map_err(|e| invalid(e.to_string()))?;
    grad_times_input_netvlad(&trace.descriptors, &trace.assign, &trace.residuals, &r, eps)
}

/// Relevance heatmaps for both input channels of every slice, for the
/// pre-softmax score of `class_index`.
pub fn explain_volume(state: &ClassifierState, volume: &Volume, class_index: u8, config: &ExplainConfig) -> Result<RelevanceMap> {
    ensure(class_index <= 1, || format!("class index must be 0 or 1, got {class_index}"))?;
    config.rules.validate()?;
    ensure(state.all_finite(), || "classifier state contains non-finite parameters".into())?;
    let eps = config.epsilon;
    let trace = forward_volume(volume, state)?;
    let mut sums = Sums(Vec::new());

    let c = class_index as usize;
    let mut r_logits = Array1::zeros(2);
    r_logits[c] = trace.logits[c];
    sums.add("logit", r_logits.sum());
    let r_agg = dense_rule(config.rules.head, &r_logits, &trace.aggregated, &state.head.weight, eps)?;
    sums.add("head", r_agg.sum());
    let r_desc = netvlad_relevance(&trace.netvlad, &r_agg, eps)?;
    sums.add("netvlad", r_desc.sum());

    let (h, w) = volume.slice_dim();
    let mut image_relevance = Vec::with_capacity(trace.slices.len());
    let mut mask_relevance = Vec::with_capacity(trace.slices.len());
    for (slice, r_d) in trace.slices.iter().zip(r_desc.rows()) {
        let r_spp = dense_rule(config.rules.post_spp, &r_d.to_owned(), &slice.spp_out, &state.post_spp.weight, eps)?;
        sums.add("post_spp", r_spp.sum());
        let r_gated = spp_backward(&slice.spp, &r_spp);
        sums.add("spp", r_gated.sum());
        let (rg, rs) = grad_times_input_gate(&slice.trunk.global_out, &slice.trunk.side_out, &r_gated);
        sums.add("global.gate", rg.sum());
        let img = branch_relevance(&state.trunk.global, &slice.trunk.global, &rg, "global", config, &mut sums)?;
        let mask = match &slice.trunk.side {
            Some(side_trace) => {
                sums.add("side.gate", rs.sum());
                branch_relevance(&state.trunk.side, side_trace, &rs, "side", config, &mut sums)?
            }
            None => Array2::zeros((h, w)),
        };
        image_relevance.push(img);
        mask_relevance.push(mask);
    }

    if let Some(sigma) = config.smoothing_sigma {
        for m in image_relevance.iter_mut().chain(mask_relevance.iter_mut()) {
            *m = gaussian_smooth(m, sigma)?;
        }
    }
    Ok(RelevanceMap {
        class_index,
        image_relevance,
        mask_relevance,
        stage_sums: sums.0,
    })
}

/// Separable Gaussian filter truncated at 3 sigma, edge values replicated.
pub fn gaussian_smooth(map: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    ensure(sigma > 0.0 && sigma.is_finite(), || format!("smoothing sigma must be positive, got {sigma}"))?;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let pass = |src: &Array2<f64>, along_rows: bool| {
        let (h, w) = src.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(k, d)| {
                    let (si, sj) = if along_rows {
                        ((i as isize + d).clamp(0, h as isize - 1) as usize, j)
                    } else {
                        (i, (j as isize + d).clamp(0, w as isize - 1) as usize)
                    };
                    k * src[[si, sj]]
                })
                .sum()
        })
    };
    Ok(pass(&pass(map, true), false))
}

/// Positive relevance only.
pub fn positive_part(map: &Array2<f64>) -> Array2<f64> {
    map.mapv(|v| v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn lrp0_hand_case() {
        let w = array![[1.0], [-1.0]];
        let r = lrp_linear_0(&array![10.0], &array![1.0, 2.0], w.view(), 0.0).unwrap();
        assert_eq!(r, array![-10.0, 20.0]);
        let r = lrp_linear_0(&array![10.0], &array![1.0, 2.0], w.view(), DEFAULT_EPSILON).unwrap();
        assert!((r.sum() - 10.0).abs() < 1e-7);
    }

    #[test]
    fn alphabeta_hand_case() {
        let w = array![[1.0], [-1.0]];
        let r = lrp_linear_alphabeta(&array![10.0], &array![1.0, 2.0], w.view(), 2.0, -1.0, 0.0).unwrap();
        assert_eq!(r, array![20.0, -10.0]);
        assert!(lrp_linear_alphabeta(&array![10.0], &array![1.0, 2.0], w.view(), 2.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn trivial_linear_cases() {
        let one = array![[3.0]];
        assert_eq!(lrp_linear_0(&array![7.0], &array![2.0], one.view(), 0.0).unwrap(), array![7.0]);
        let w = array![[1.0, 2.0], [-3.0, 0.5]];
        let zero = lrp_linear_0(&array![0.0, 0.0], &array![1.0, 2.0], w.view(), DEFAULT_EPSILON).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert_eq!(lrp_input_zb(&array![7.0], &array![0.5], array![[4.0]].view(), 0.0, 1.0, 0.0).unwrap(), array![7.0]);
        assert!(lrp_input_zb(&array![7.0], &array![1.4], one.view(), 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn zbox_at_lower_corner_uses_negative_weights() {
        // x = l = 0, h = 1: z_i = -h w_i^- so only the negative weight counts.
        let w = array![[2.0], [-1.0]];
        let r = lrp_input_zb(&array![5.0], &array![0.0, 0.0], w.view(), 0.0, 1.0, 0.0).unwrap();
        assert_eq!(r, array![0.0, 5.0]);
    }

    #[test]
    fn alphabeta_one_zero_equals_lrp0_on_positive_inputs() {
        let w = array![[0.5, 1.0, 0.1], [2.0, 0.3, 0.7]];
        let x = array![0.2, 1.5];
        let r = array![1.0, -2.0, 3.0];
        let a = lrp_linear_alphabeta(&r, &x, w.view(), 1.0, 0.0, DEFAULT_EPSILON).unwrap();
        let b = lrp_linear_0(&r, &x, w.view(), DEFAULT_EPSILON).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn winner_path_needs_record() {
        assert!(lrp_maxpool(&Array3::zeros((1, 1, 1)), None).is_err());
        let x = array![[[1.0, 9.0], [3.0, 4.0]]];
        let (_, rec) = crate::nn::pool::max_pool2(&x);
        let r = lrp_maxpool(&array![[[5.0]]], Some(&rec)).unwrap();
        assert_eq!(r, array![[[0.0, 5.0], [0.0, 0.0]]]);
    }

    #[test]
    fn frozen_netvlad_hand_case() {
        // x1 = [1, 0], x2 = [0, 2], a = 0.5 everywhere, c1 = 0, c2 = [1, 1]:
        // V = [[0.5, 1.0], [-0.5, 0.0]]. With R = [[1, 1], [1, 0]],
        // s = R / V = [[2, 1], [-2, 0]] and A s = 0.5 [[0, 1], [0, 1]] per row,
        // so R_x1 = [0, 0] and R_x2 = [0, 2 * 0.5] = [0, 1].
        let x = array![[1.0, 0.0], [0.0, 2.0]];
        let a = array![[0.5, 0.5], [0.5, 0.5]];
        let v = array![[0.5, 1.0], [-0.5, 0.0]];
        let r = array![[1.0, 1.0], [1.0, 0.0]];
        let out = grad_times_input_netvlad(&x, &a, &v, &r, 0.0).unwrap();
        assert_eq!(out, array![[0.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn gate_passes_full_relevance_where_open() {
        let g = array![[[1.0, -2.0, 0.0]]];
        let s = array![[[3.0, 1.0, 5.0]]];
        let (rg, rs) = grad_times_input_gate(&g, &s, &array![[[4.0, 4.0, 4.0]]]);
        assert_eq!(rg, array![[[4.0, 0.0, 0.0]]]);
        assert_eq!(rg, rs);
        let ctx = grad_times_input_context_gate(&array![0.0, 2.0], &array![0.5, 0.5], &array![3.0, 3.0], 0.0);
        assert_eq!(ctx, array![0.0, 3.0]);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let m = Array2::from_elem((6, 5), 2.0);
        let s = gaussian_smooth(&m, 1.5).unwrap();
        assert!(s.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(gaussian_smooth(&m, 0.0).is_err());
    }

    #[test]
    fn rule_assignment_validation() {
        assert!(RuleAssignment::default().validate().is_ok());
        let bad = RuleAssignment {
            convolutions: Rule::AlphaBeta { alpha: 2.0, beta: 0.0 },
            ..RuleAssignment::default()
        };
        assert!(bad.validate().is_err());
        let misplaced = RuleAssignment {
            head: Rule::WinnerPath,
            ..RuleAssignment::default()
        };
        assert!(misplaced.validate().is_err());
    }
}
