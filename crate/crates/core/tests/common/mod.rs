//! Independent oracles and model builders shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sidegate::classifier::{backward_volume, focal_loss, forward_volume, logits_grad, ClassifierConfig, ClassifierState, FocalLossParams};
use sidegate::cvae::{accumulate_elbo_grad, elbo_loss, CvaeConfig, CvaeState};
use sidegate::encoder::{EncoderConfig, EncoderState, SideMode};
use sidegate::params::{zeros_like, Parameters};
use sidegate::phantom::Volume;
use sidegate::seeded_rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed, 99)
}

pub fn uniform_image(h: usize, w: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0))
}

/// A random filled ellipse, as a 0/1 mask.
pub fn blob_mask(h: usize, w: usize, rng: &mut impl Rng) -> Array2<f64> {
    let (cr, cc) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
    let (ar, ac) = (rng.gen_range(1.5..h as f64 / 3.0), rng.gen_range(1.5..w as f64 / 3.0));
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (dr, dc) = ((r as f64 - cr) / ar, (c as f64 - cc) / ac);
        f64::from(u8::from(dr * dr + dc * dc <= 1.0))
    })
}

pub fn random_volume(id: &str, slices: usize, h: usize, w: usize, label: u8, rng: &mut impl Rng) -> Volume {
    let mut intensities = Array3::zeros((slices, h, w));
    let mut mask = Array3::zeros((slices, h, w));
    for s in 0..slices {
        intensities.index_axis_mut(ndarray::Axis(0), s).assign(&uniform_image(h, w, rng));
        mask.index_axis_mut(ndarray::Axis(0), s).assign(&blob_mask(h, w, rng).mapv(|v| v as u8));
    }
    Volume::new(id, intensities, mask, label).expect("valid volume")
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub label: String,
    /// `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)` over the sampled
    /// coordinates.
    pub rel_error: f64,
    pub coordinates: usize,
}

fn nth_mut<M: Parameters>(model: &mut M, name: &str, index: usize) -> f64 {
    let mut params = model.params_mut();
    let (_, view) = params.iter_mut().find(|(n, _)| n == name).expect("parameter exists");
    *view.iter_mut().nth(index).expect("index in range")
}

fn set_nth<M: Parameters>(model: &mut M, name: &str, index: usize, value: f64) {
    let mut params = model.params_mut();
    let (_, view) = params.iter_mut().find(|(n, _)| n == name).expect("parameter exists");
    *view.iter_mut().nth(index).expect("index in range") = value;
}

/// Compares `analytic` against central differences of `loss` at
/// `per_tensor` random coordinates of every parameter tensor.
pub fn compare_gradients<M: Parameters + Clone>(
    label: impl Into<String>,
    model: &M,
    analytic: &M,
    loss: impl Fn(&M) -> f64,
    per_tensor: usize,
    step: f64,
    rng: &mut impl Rng,
) -> GradCheck {
    let mut probe = model.clone();
    let mut diff = 0.0;
    let mut a_norm = 0.0;
    let mut n_norm = 0.0;
    let mut count = 0;
    let tensors: Vec<(String, usize)> = model.params().iter().map(|(n, v)| (n.clone(), v.len())).collect();
    let analytic_params = analytic.params();
    for (name, len) in tensors {
        let grad_view = &analytic_params.iter().find(|(n, _)| *n == name).expect("same layout").1;
        for _ in 0..per_tensor.min(len) {
            let idx = rng.gen_range(0..len);
            let original = nth_mut(&mut probe, &name, idx);
            set_nth(&mut probe, &name, idx, original + step);
            let up = loss(&probe);
            set_nth(&mut probe, &name, idx, original - step);
            let down = loss(&probe);
            set_nth(&mut probe, &name, idx, original);
            let numeric = (up - down) / (2.0 * step);
            let a = *grad_view.iter().nth(idx).expect("index in range");
            diff += (a - numeric).powi(2);
            a_norm += a * a;
            n_norm += numeric * numeric;
            count += 1;
        }
    }
    let scale = a_norm.sqrt().max(n_norm.sqrt()).max(1e-12);
    GradCheck {
        label: label.into(),
        rel_error: diff.sqrt() / scale,
        coordinates: count,
    }
}

/// Adds small uniform noise to every parameter so that zero-initialised
/// biases do not leave constant regions exactly on a ReLU kink.
pub fn jitter<M: Parameters>(model: &mut M, scale: f64, rng: &mut impl Rng) {
    for (_, mut view) in model.params_mut() {
        view.mapv_inplace(|v| v + rng.gen_range(-scale..scale));
    }
}

pub const JITTER: f64 = 0.05;

pub const FD_STEP: f64 = 1e-5;
pub const COORDS_PER_TENSOR: usize = 3;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        filters: [4, 6, 8],
        kernels: [5, 3, 3],
        embed_dim: 5,
        hidden_dim: 7,
    }
}

/// Encoder, gate, merge and context gate: loss `r · encoder(x, m, y)`.
pub fn encoder_gradient_suite() -> Vec<GradCheck> {
    let cases = [
        (1u64, 8usize, 8usize, 0u8, SideMode::Mask, small_encoder()),
        (2, 16, 16, 1, SideMode::Mask, small_encoder()),
        (3, 16, 8, 1, SideMode::Bypass, small_encoder()),
        (4, 24, 16, 0, SideMode::Mask, small_encoder()),
        (5, 16, 16, 1, SideMode::Mask, EncoderConfig::default()),
    ];
    cases
        .into_iter()
        .map(|(seed, h, w, label, side, cfg)| {
            let mut r = rng(seed);
            let mut state = EncoderState::new(&cfg, h, w, &mut r).unwrap();
            jitter(&mut state, JITTER, &mut r);
            let image = uniform_image(h, w, &mut r);
            let mask = blob_mask(h, w, &mut r);
            let proj = Array1::from_shape_fn(state.output_dim(), |_| r.gen_range(-1.0..1.0));
            let loss = |s: &EncoderState| s.forward(&image, &mask, label, side).unwrap().0.dot(&proj);
            let (_, trace) = state.forward(&image, &mask, label, side).unwrap();
            let mut grad = zeros_like(&state);
            state.backward(&trace, &proj, &mut grad);
            compare_gradients(
                format!("encoder seed={seed} {h}x{w} label={label} {side:?} filters={:?}", cfg.filters),
                &state,
                &grad,
                loss,
                COORDS_PER_TENSOR,
                FD_STEP,
                &mut r,
            )
        })
        .collect()
}

/// Full ELBO with a fixed reparameterisation noise draw.
pub fn elbo_gradient_suite() -> Vec<GradCheck> {
    let small = CvaeConfig {
        height: 32,
        width: 32,
        latent_dim: 4,
        encoder: small_encoder(),
        decoder_filters: [6, 4, 1],
        decoder_kernels: [3, 3, 2],
        side_mode: SideMode::Mask,
    };
    let cases = [
        (11u64, 0u8, small.clone()),
        (12, 1, small.clone()),
        (13, 1, CvaeConfig { side_mode: SideMode::Bypass, ..small.clone() }),
        (14, 0, CvaeConfig { latent_dim: 9, height: 40, width: 32, ..small.clone() }),
        (15, 1, CvaeConfig { height: 32, width: 32, ..CvaeConfig::default() }),
    ];
    cases
        .into_iter()
        .map(|(seed, label, cfg)| {
            let mut r = rng(seed);
            let mut state = CvaeState::new(&cfg, &mut r).unwrap();
            jitter(&mut state, JITTER, &mut r);
            let x = uniform_image(cfg.height, cfg.width, &mut r);
            let mask = blob_mask(cfg.height, cfg.width, &mut r);
            let eps = Array1::from_shape_fn(cfg.latent_dim, |_| r.gen_range(-1.5..1.5));
            let loss = |s: &CvaeState| elbo_loss(&x, &mask, label, s, &eps).unwrap().total;
            let mut grad = zeros_like(&state);
            accumulate_elbo_grad(&x, &mask, label, &state, &eps, &mut grad, 1.0).unwrap();
            compare_gradients(
                format!("elbo seed={seed} {}x{} latent={} label={label} {:?}", cfg.height, cfg.width, cfg.latent_dim, cfg.side_mode),
                &state,
                &grad,
                loss,
                COORDS_PER_TENSOR,
                FD_STEP,
                &mut r,
            )
        })
        .collect()
}

/// Trunk, SPP, post-SPP layer, NetVLAD, head and focal loss on one volume.
pub fn classifier_gradient_suite() -> Vec<GradCheck> {
    let small = ClassifierConfig {
        encoder: small_encoder(),
        descriptor_dim: 6,
        clusters: 3,
        ..ClassifierConfig::default()
    };
    let cases = [
        (21u64, 2usize, 24usize, 1u8, small.clone(), FocalLossParams::default()),
        (22, 3, 24, 0, small.clone(), FocalLossParams::default()),
        (23, 1, 32, 1, ClassifierConfig { side_mode: SideMode::Bypass, ..small.clone() }, FocalLossParams { gamma: 2.0, ..FocalLossParams::default() }),
        (24, 4, 20, 0, ClassifierConfig { spp_levels: vec![4, 2, 1], ..small.clone() }, FocalLossParams { gamma: 0.0, lambda_neg: 1.0, lambda_pos: 1.0 }),
        (25, 2, 32, 1, ClassifierConfig::default(), FocalLossParams::default()),
    ];
    cases
        .into_iter()
        .map(|(seed, slices, size, label, cfg, focal)| {
            let mut r = rng(seed);
            let mut state = ClassifierState::new(&cfg, &mut r).unwrap();
            jitter(&mut state, JITTER, &mut r);
            let volume = random_volume("grad", slices, size, size, label, &mut r);
            let loss = |s: &ClassifierState| {
                let t = forward_volume(&volume, s).unwrap();
                focal_loss(t.probs[1], label, &focal).unwrap().loss
            };
            let trace = forward_volume(&volume, &state).unwrap();
            let outcome = focal_loss(trace.probs[1], label, &focal).unwrap();
            let mut grad = zeros_like(&state);
            backward_volume(&state, &trace, logits_grad(trace.probs[1], outcome.d_p_pos), &mut grad, true);
            compare_gradients(
                format!("classifier seed={seed} {slices}x{size}x{size} label={label} D={} M={} gamma={}", cfg.descriptor_dim, cfg.clusters, focal.gamma),
                &state,
                &grad,
                loss,
                COORDS_PER_TENSOR,
                FD_STEP,
                &mut r,
            )
        })
        .collect()
}

/// Pairwise AUC: wins count 2, ties 1, over 2·n_pos·n_neg.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut doubled = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            doubled += if scores[i] > scores[j] {
                2
            } else if scores[i] == scores[j] {
                1
            } else {
                0
            };
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

/// Every (fpr, tpr) reachable by a threshold, by direct counting.
pub fn brute_force_roc(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    thresholds
        .iter()
        .map(|&t| {
            let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count() as f64;
            let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count() as f64;
            (fp / neg, tp / pos)
        })
        .collect()
}

/// Winner-path relevance for a 2×2 / stride-2 pool, computed directly from
/// the input values.
pub fn brute_force_pool2_relevance(x: &Array3<f64>, r_out: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let cells = [(2 * i, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)];
                let &(r, s) = cells
                    .iter()
                    .reduce(|a, b| if x[[ch, b.0, b.1]] > x[[ch, a.0, a.1]] { b } else { a })
                    .unwrap();
                out[[ch, r, s]] += r_out[[ch, i, j]];
            }
        }
    }
    out
}

/// Zeroes every additive bias of the classifier. The NetVLAD assignment
/// bias only shapes the soft assignment and is kept.
pub fn strip_biases(state: &mut ClassifierState) {
    for (name, mut view) in state.params_mut() {
        if name.ends_with("bias") && !name.contains("assign") {
            view.fill(0.0);
        }
    }
}

/// Stage pairs whose relevance totals must agree on a bias-free network.
pub fn conserved_stage_pairs(with_side: bool) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = [("logit", "head"), ("netvlad", "post_spp"), ("post_spp", "spp")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    let branches: &[&str] = if with_side { &["global", "side"] } else { &["global"] };
    for b in branches {
        pairs.push(("spp".into(), format!("{b}.gate")));
        let chain = ["gate", "conv3", "pool2", "conv2", "pool1", "conv1"];
        for w in chain.windows(2) {
            pairs.push((format!("{b}.{}", w[0]), format!("{b}.{}", w[1])));
        }
    }
    pairs
}

/// Largest relative mismatch between the totals of conserved stage pairs.
pub fn worst_conservation_error(map: &sidegate::explain::RelevanceMap, with_side: bool) -> f64 {
    let total = |stage: &str| {
        map.stage_sums
            .iter()
            .find(|s| s.stage == stage)
            .unwrap_or_else(|| panic!("stage {stage} missing"))
            .total
    };
    conserved_stage_pairs(with_side)
        .iter()
        .map(|(a, b)| {
            let (ta, tb) = (total(a), total(b));
            (ta - tb).abs() / ta.abs().max(tb.abs()).max(1e-12)
        })
        .fold(0.0, f64::max)
}

/// A small bias-free classifier with jittered weights.
pub fn bias_free_classifier(seed: u64, side_mode: SideMode) -> ClassifierState {
    let cfg = ClassifierConfig {
        encoder: EncoderConfig {
            filters: [4, 6, 8],
            kernels: [5, 3, 3],
            embed_dim: 5,
            hidden_dim: 7,
        },
        descriptor_dim: 6,
        clusters: 3,
        side_mode,
        ..ClassifierConfig::default()
    };
    let mut r = rng(seed);
    let mut state = ClassifierState::new(&cfg, &mut r).unwrap();
    jitter(&mut state, JITTER, &mut r);
    strip_biases(&mut state);
    state
}
