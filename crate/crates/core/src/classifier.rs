//! Volume classifier built on the transferred encoder trunk.
//!
//! Per slice: both branches and the gate, spatial pyramid pooling onto fixed
//! grids, and a dense ReLU layer producing a slice descriptor. NetVLAD
//! aggregates the descriptors of all slices into one vector, and a linear
//! head with softmax gives (p_neg, p_pos). Training minimises the focal loss
//! per volume.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cvae::CvaeState;
use crate::encoder::{EncoderConfig, FeatureMap, SideMode, Trunk, TrunkTrace};
use crate::error::{ensure, Error, Result};
use crate::nn::act::{relu, relu_grad, softmax, softmax_backward};
use crate::nn::pool::{adaptive_max_pool, ArgmaxRecord};
use crate::nn::{init, Dense};
use crate::optim::{Adam, AdamConfig};
use crate::params::{copy_matching, nest, zeros_like, Parameters};
use crate::phantom::Volume;
use crate::seeded_rng;

/// Guard for vector normalisation.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum CenterInit {
    /// Independent random unit vectors.
    #[default]
    RandomUnit,
    /// Lloyd iterations over descriptors of the training split, computed by
    /// the freshly initialised network.
    KMeans,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ClassifierConfig {
    pub encoder: EncoderConfig,
    pub spp_levels: Vec<usize>,
    pub descriptor_dim: usize,
    pub clusters: usize,
    pub center_init: CenterInit,
    pub side_mode: SideMode,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            spp_levels: vec![5, 3, 2],
            descriptor_dim: 512,
            clusters: 64,
            center_init: CenterInit::RandomUnit,
            side_mode: SideMode::Mask,
        }
    }
}

impl ClassifierConfig {
    pub fn spp_len(&self) -> usize {
        self.encoder.filters[2] * self.spp_levels.iter().map(|n| n * n).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.spp_levels.is_empty() && self.spp_levels.iter().all(|&n| n >= 1), || {
            "SPP needs at least one non-empty level".into()
        })?;
        ensure(self.descriptor_dim >= 1 && self.clusters >= 1, || {
            "descriptor dimension and cluster count must be positive".into()
        })
    }
}

/// Learnable NetVLAD parameters: cluster centres and the soft-assignment
/// layer, one row per cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct NetVlad {
    pub centers: Array2<f64>,
    pub assign_weight: Array2<f64>,
    pub assign_bias: Array1<f64>,
}

impl NetVlad {
    pub fn new<R: Rng + ?Sized>(clusters: usize, dim: usize, rng: &mut R) -> Self {
        let mut centers = init::normal(&[clusters, dim], 1.0, rng)
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        for mut row in centers.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row /= n;
        }
        Self {
            centers,
            assign_weight: init::normal(&[clusters, dim], 1.0 / (dim as f64).sqrt(), rng)
                .into_dimensionality::<Ix2>()
                .expect("2-d"),
            assign_bias: Array1::zeros(clusters),
        }
    }

    pub fn clusters(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }
}

impl Parameters for NetVlad {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("centers".into(), self.centers.view().into_dyn()),
            ("assign_weight".into(), self.assign_weight.view().into_dyn()),
            ("assign_bias".into(), self.assign_bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("centers".into(), self.centers.view_mut().into_dyn()),
            ("assign_weight".into(), self.assign_weight.view_mut().into_dyn()),
            ("assign_bias".into(), self.assign_bias.view_mut().into_dyn()),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct NetVladTrace {
    /// (slices, dim)
    pub descriptors: Array2<f64>,
    /// Soft assignments, (slices, clusters); rows sum to one.
    pub assign: Array2<f64>,
    /// Residual sums V before normalisation, (clusters, dim).
    pub residuals: Array2<f64>,
    pub cluster_norms: Array1<f64>,
    /// Intra-normalised residuals, (clusters, dim).
    pub intra: Array2<f64>,
    pub global_norm: f64,
}

/// Soft-assignment matrix `softmax_k(w_k · x_i + b_k)`.
pub fn soft_assign(descriptors: &Array2<f64>, vlad: &NetVlad) -> Array2<f64> {
    let mut logits = descriptors.dot(&vlad.assign_weight.t());
    logits += &vlad.assign_bias;
    for mut row in logits.rows_mut() {
        let p = softmax(&row.to_vec());
        row.assign(&Array1::from(p));
    }
    logits
}

/// Residual sums `V(k, j) = Σ_i a_ik (x_i[j] - c_k[j])` for a given
/// assignment matrix.
pub fn residual_sums(descriptors: &Array2<f64>, assign: &Array2<f64>, centers: &Array2<f64>) -> Array2<f64> {
    let mass = assign.sum_axis(Axis(0));
    let mut v = assign.t().dot(descriptors);
    for ((mut row, &m), c) in v.rows_mut().into_iter().zip(mass.iter()).zip(centers.rows()) {
        row.scaled_add(-m, &c);
    }
    v
}

fn l2_normalize_backward(y: ndarray::ArrayView1<f64>, norm: f64, dy: ndarray::ArrayView1<f64>) -> Array1<f64> {
    if norm > NORM_EPS {
        (&dy - &(&y * y.dot(&dy))) / norm
    } else {
        dy.to_owned() / NORM_EPS
    }
}

/// NetVLAD aggregation of one descriptor per slice, followed by
/// intra-normalisation of every cluster row and a global L2 normalisation.
pub fn netvlad(descriptors: &[Array1<f64>], vlad: &NetVlad) -> Result<Array1<f64>> {
    netvlad_traced(descriptors, vlad).map(|(v, _)| v)
}

pub fn netvlad_traced(descriptors: &[Array1<f64>], vlad: &NetVlad) -> Result<(Array1<f64>, NetVladTrace)> {
    ensure(!descriptors.is_empty(), || "NetVLAD needs at least one descriptor".into())?;
    let dim = vlad.dim();
    ensure(descriptors.iter().all(|d| d.len() == dim), || {
        format!("descriptors must have {dim} entries")
    })?;
    let mut x = Array2::zeros((descriptors.len(), dim));
    for (mut row, d) in x.rows_mut().into_iter().zip(descriptors) {
        row.assign(d);
    }
    let assign = soft_assign(&x, vlad);
    let residuals = residual_sums(&x, &assign, &vlad.centers);
    let cluster_norms: Array1<f64> = residuals.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut intra = residuals.clone();
    for (mut row, &n) in intra.rows_mut().into_iter().zip(cluster_norms.iter()) {
        row /= n.max(NORM_EPS);
    }
    let global_norm = intra.iter().map(|v| v * v).sum::<f64>().sqrt();
    let out = Array1::from_iter(intra.iter().map(|v| v / global_norm.max(NORM_EPS)));
    Ok((
        out,
        NetVladTrace {
            descriptors: x,
            assign,
            residuals,
            cluster_norms,
            intra,
            global_norm,
        },
    ))
}

/// Backward pass of [`netvlad_traced`]; returns `dL/d descriptors` (slices, dim).
pub fn netvlad_backward(vlad: &NetVlad, trace: &NetVladTrace, d_out: &Array1<f64>, grad: &mut NetVlad) -> Array2<f64> {
    let (m, d) = (vlad.clusters(), vlad.dim());
    let flat_intra = Array1::from_iter(trace.intra.iter().cloned());
    let out = &flat_intra / trace.global_norm.max(NORM_EPS);
    let d_intra = l2_normalize_backward(out.view(), trace.global_norm, d_out.view())
        .into_shape_with_order((m, d))
        .expect("contiguous");
    let mut d_res = Array2::zeros((m, d));
    for k in 0..m {
        let n = trace.cluster_norms[k];
        let y = trace.intra.row(k);
        d_res
            .row_mut(k)
            .assign(&l2_normalize_backward(y, n, d_intra.row(k)));
    }

    let x = &trace.descriptors;
    let a = &trace.assign;
    // V = Aᵀ X - diag(Σ_i A_ik) C
    let center_dot: Array1<f64> = d_res
        .rows()
        .into_iter()
        .zip(vlad.centers.rows())
        .map(|(g, c)| g.dot(&c))
        .collect();
    let mut d_assign = x.dot(&d_res.t());
    d_assign -= &center_dot;
    let mut d_x = a.dot(&d_res);
    let mass = a.sum_axis(Axis(0));
    for ((mut g, &mk), dv) in grad.centers.rows_mut().into_iter().zip(mass.iter()).zip(d_res.rows()) {
        g.scaled_add(-mk, &dv);
    }

    let mut d_logits = Array2::zeros(a.raw_dim());
    for ((mut dl, p), dp) in d_logits.rows_mut().into_iter().zip(a.rows()).zip(d_assign.rows()) {
        let g = softmax_backward(&p.to_vec(), &dp.to_vec());
        dl.assign(&Array1::from(g));
    }
    grad.assign_weight += &d_logits.t().dot(x);
    grad.assign_bias += &d_logits.sum_axis(Axis(0));
    d_x += &d_logits.dot(&vlad.assign_weight);
    d_x
}

#[derive(Clone, Debug)]
pub struct SppTrace {
    pub input_dim: (usize, usize, usize),
    pub levels: Vec<ArgmaxRecord>,
}

/// Spatial pyramid pooling with the default 5x5, 3x3 and 2x2 grids.
pub fn spp(features: &FeatureMap) -> Result<Array1<f64>> {
    spp_levels(features, &[5, 3, 2]).map(|(v, _)| v)
}

/// Adaptive max pooling onto each `n x n` grid in `levels`, concatenated
/// level by level (channel-major within a level).
pub fn spp_levels(features: &FeatureMap, levels: &[usize]) -> Result<(Array1<f64>, SppTrace)> {
    let (c, h, w) = features.dim();
    let largest = levels.iter().copied().max().unwrap_or(0);
    ensure(h >= largest && w >= largest, || {
        format!("SPP needs at least {largest}x{largest} feature maps, got {h}x{w}")
    })?;
    let mut out = Vec::with_capacity(c * levels.iter().map(|n| n * n).sum::<usize>());
    let mut records = Vec::with_capacity(levels.len());
    for &n in levels {
        let (pooled, record) = adaptive_max_pool(&features.0, n)?;
        out.extend(pooled.iter().copied());
        records.push(record);
    }
    Ok((
        Array1::from(out),
        SppTrace {
            input_dim: (c, h, w),
            levels: records,
        },
    ))
}

/// Routes an SPP-output vector (gradient or relevance) back onto the winners.
pub fn spp_backward(trace: &SppTrace, d_out: &Array1<f64>) -> Array3<f64> {
    let mut d_in = Array3::zeros(trace.input_dim);
    let mut offset = 0;
    for record in &trace.levels {
        let dim = record.winners.dim();
        let len = dim.0 * dim.1 * dim.2;
        let part = d_out
            .slice(ndarray::s![offset..offset + len])
            .to_owned()
            .into_shape_with_order(dim)
            .expect("contiguous");
        d_in += &record.scatter(&part);
        offset += len;
    }
    d_in
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState {
    pub config: ClassifierConfig,
    pub trunk: Trunk,
    pub post_spp: Dense,
    pub netvlad: NetVlad,
    pub head: Dense,
}

impl Parameters for ClassifierState {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("trunk", self.trunk.params()));
        out.extend(nest("post_spp", self.post_spp.params()));
        out.extend(nest("netvlad", self.netvlad.params()));
        out.extend(nest("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("trunk", self.trunk.params_mut()));
        out.extend(nest("post_spp", self.post_spp.params_mut()));
        out.extend(nest("netvlad", self.netvlad.params_mut()));
        out.extend(nest("head", self.head.params_mut()));
        out
    }
}

impl ClassifierState {
    /// Randomly initialised classifier (the "no CVAE" variant).
    pub fn new<R: Rng + ?Sized>(config: &ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let trunk = Trunk::new(&config.encoder, rng);
        let (m, d) = (config.clusters, config.descriptor_dim);
        Ok(Self {
            config: config.clone(),
            trunk,
            post_spp: Dense::he(config.spp_len(), d, rng),
            netvlad: NetVlad::new(m, d, rng),
            head: Dense::scaled(m * d, 2, 1.0 / ((m * d) as f64).sqrt(), rng),
        })
    }
}

/// Fresh classifier whose trunk (both branches; the gate has no
/// parameters) is a value copy of the CVAE encoder trunk.
pub fn transfer_weights<R: Rng + ?Sized>(cvae: &CvaeState, config: &ClassifierConfig, rng: &mut R) -> Result<ClassifierState> {
    let mut state = ClassifierState::new(config, rng)?;
    copy_matching(&cvae.encoder.trunk, &mut state.trunk, |_| true).map_err(|e| match e {
        Error::ShapeMismatch { name, expected, found } => Error::ShapeMismatch {
            name: format!("trunk.{name}"),
            expected,
            found,
        },
        other => other,
    })?;
    Ok(state)
}

#[derive(Clone, Debug)]
pub struct SliceTrace {
    pub trunk: TrunkTrace,
    pub spp: SppTrace,
    pub spp_out: Array1<f64>,
    pub descriptor_pre: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct VolumeTrace {
    pub slices: Vec<SliceTrace>,
    pub netvlad: NetVladTrace,
    pub aggregated: Array1<f64>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

pub fn forward_volume(volume: &Volume, state: &ClassifierState) -> Result<VolumeTrace> {
    ensure(volume.num_slices() >= 1, || "volume has no slices".into())?;
    let mut slices = Vec::with_capacity(volume.num_slices());
    let mut descriptors = Vec::with_capacity(volume.num_slices());
    for s in 0..volume.num_slices() {
        let (image, mask) = volume.slice_pair(s);
        let (gated, trunk) = state.trunk.forward(&image, &mask, state.config.side_mode)?;
        let (spp_out, spp) = spp_levels(&gated, &state.config.spp_levels)?;
        let descriptor_pre = state.post_spp.forward(spp_out.view());
        descriptors.push(descriptor_pre.mapv(relu));
        slices.push(SliceTrace {
            trunk,
            spp,
            spp_out,
            descriptor_pre,
        });
    }
    let (aggregated, netvlad) = netvlad_traced(&descriptors, &state.netvlad)?;
    let raw = state.head.forward(aggregated.view());
    let logits = [raw[0], raw[1]];
    let p = softmax(&logits);
    Ok(VolumeTrace {
        slices,
        netvlad,
        aggregated,
        logits,
        probs: [p[0], p[1]],
    })
}

/// (p_neg, p_pos) for one volume.
pub fn classify_volume(volume: &Volume, state: &ClassifierState) -> Result<(f64, f64)> {
    let trace = forward_volume(volume, state)?;
    Ok((trace.probs[0], trace.probs[1]))
}

/// Accumulates parameter gradients for `dL/d logits`. When `train_trunk` is
/// false the convolutional branches are skipped entirely.
pub fn backward_volume(state: &ClassifierState, trace: &VolumeTrace, d_logits: [f64; 2], grad: &mut ClassifierState, train_trunk: bool) {
    let d_agg = state
        .head
        .backward(trace.aggregated.view(), Array1::from(d_logits.to_vec()).view(), &mut grad.head);
    let mut d_pre = netvlad_backward(&state.netvlad, &trace.netvlad, &d_agg, &mut grad.netvlad);
    let mut inputs = Array2::zeros((trace.slices.len(), state.post_spp.inputs()));
    for ((slice, mut d), mut x) in trace.slices.iter().zip(d_pre.rows_mut()).zip(inputs.rows_mut()) {
        d *= &slice.descriptor_pre.mapv(relu_grad);
        x.assign(&slice.spp_out);
    }
    general_mat_mul(1.0, &d_pre.t(), &inputs, 1.0, &mut grad.post_spp.weight);
    grad.post_spp.bias += &d_pre.sum_axis(Axis(0));
    if train_trunk {
        let d_spp = d_pre.dot(&state.post_spp.weight);
        for (slice, d) in trace.slices.iter().zip(d_spp.rows()) {
            let d_gated = spp_backward(&slice.spp, &d.to_owned());
            state.trunk.backward(&slice.trunk, &d_gated, &mut grad.trunk);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FocalLossParams {
    pub gamma: f64,
    pub lambda_neg: f64,
    pub lambda_pos: f64,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            lambda_neg: 0.25,
            lambda_pos: 0.35,
        }
    }
}

/// Probabilities are clamped into `[CLAMP_EPS, 1 - CLAMP_EPS]`.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalOutcome {
    pub loss: f64,
    /// `dL/dp_pos`; zero when the probability was clamped.
    pub d_p_pos: f64,
    pub clamped: bool,
}

/// `-λ_t (1 - ŷ_t)^γ ln ŷ_t` with `ŷ_t = p_pos` for positives and
/// `1 - p_pos` for negatives.
pub fn focal_loss(p_pos: f64, label: u8, params: &FocalLossParams) -> Result<FocalOutcome> {
    ensure(label <= 1, || format!("label must be 0 or 1, got {label}"))?;
    ensure(!p_pos.is_nan(), || "probability is NaN".into())?;
    let clamped_p = p_pos.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    let clamped = clamped_p != p_pos;
    let (y_t, lambda, sign) = if label == 1 {
        (clamped_p, params.lambda_pos, 1.0)
    } else {
        (1.0 - clamped_p, params.lambda_neg, -1.0)
    };
    let gamma = params.gamma;
    let miss = 1.0 - y_t;
    let loss = -lambda * miss.powf(gamma) * y_t.ln();
    let d_yt = if gamma == 0.0 {
        -lambda / y_t
    } else {
        lambda * (gamma * miss.powf(gamma - 1.0) * y_t.ln() - miss.powf(gamma) / y_t)
    };
    Ok(FocalOutcome {
        loss,
        d_p_pos: if clamped { 0.0 } else { sign * d_yt },
        clamped,
    })
}

/// Chain rule from `dL/dp_pos` to the two head logits.
pub fn logits_grad(p_pos: f64, d_p_pos: f64) -> [f64; 2] {
    let s = p_pos * (1.0 - p_pos) * d_p_pos;
    [-s, s]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    /// Volumes per optimizer step.
    pub batch_size: usize,
    pub focal: FocalLossParams,
    /// Keep the transferred branches fixed.
    pub freeze_encoder: bool,
    pub kmeans_iterations: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-5,
            weight_decay: 1e-5,
            patience: 20,
            batch_size: 1,
            focal: FocalLossParams::default(),
            freeze_encoder: false,
            kmeans_iterations: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierTraining {
    /// Parameters of the epoch with the lowest validation loss.
    pub state: ClassifierState,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// How many probabilities had to be clamped before taking the log.
    pub clamp_events: usize,
}

/// Where the classifier's trunk comes from.
#[derive(Clone, Copy, Debug)]
pub enum Initialization<'a> {
    Random,
    Transfer(&'a CvaeState),
}

/// Mean focal loss over `volumes`.
pub fn mean_focal_loss(volumes: &[Volume], state: &ClassifierState, focal: &FocalLossParams) -> Result<f64> {
    let mut total = 0.0;
    for v in volumes {
        let (_, p) = classify_volume(v, state)?;
        total += focal_loss(p, v.label, focal)?.loss;
    }
    Ok(total / volumes.len().max(1) as f64)
}

/// Simple k-means over descriptors, seeded; returns (clusters, dim) centres.
fn kmeans(points: &Array2<f64>, k: usize, iterations: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut centers = Array2::zeros((k, points.ncols()));
    for (c, mut row) in centers.rows_mut().into_iter().enumerate() {
        row.assign(&points.row(idx[c % n]));
    }
    for _ in 0..iterations {
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for p in points.rows() {
            let best = centers
                .rows()
                .into_iter()
                .enumerate()
                .map(|(c, row)| (c, (&row - &p).mapv(|v| v * v).sum()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .expect("k >= 1");
            sums.row_mut(best).scaled_add(1.0, &p);
            counts[best] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = sums.row(c).mapv(|v| v / count as f64);
                centers.row_mut(c).assign(&mean);
            }
        }
    }
    centers
}

fn init_centers_kmeans(state: &mut ClassifierState, train: &[Volume], iterations: usize, rng: &mut impl Rng) -> Result<()> {
    let mut rows = Vec::new();
    for v in train {
        let trace = forward_volume(v, state)?;
        rows.extend(trace.netvlad.descriptors.rows().into_iter().map(|r| r.to_owned()));
    }
    let dim = state.netvlad.dim();
    let mut points = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in points.rows_mut().into_iter().zip(&rows) {
        dst.assign(src);
    }
    state.netvlad.centers = kmeans(&points, state.netvlad.clusters(), iterations, rng);
    Ok(())
}

/// Adam with weight decay and early stopping on the validation focal loss.
/// Returns the best-validation parameters. Deterministic for a fixed seed.
pub fn train_classifier(
    train: &[Volume],
    validation: &[Volume],
    init: Initialization<'_>,
    config: &ClassifierConfig,
    hp: &ClassifierTrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ClassifierTraining> {
    ensure(!train.is_empty(), || "training split is empty".into())?;
    ensure(!validation.is_empty(), || "validation split is empty".into())?;
    ensure(hp.batch_size >= 1, || "batch size must be positive".into())?;
    let mut init_rng = seeded_rng(hp.seed, 10);
    let mut state = match init {
        Initialization::Random => ClassifierState::new(config, &mut init_rng)?,
        Initialization::Transfer(cvae) => transfer_weights(cvae, config, &mut init_rng)?,
    };
    if config.center_init == CenterInit::KMeans {
        init_centers_kmeans(&mut state, train, hp.kmeans_iterations, &mut init_rng)?;
    }

    let mut adam = Adam::new(AdamConfig {
        lr: hp.lr,
        weight_decay: hp.weight_decay,
        ..AdamConfig::default()
    });
    let mut rng = seeded_rng(hp.seed, 11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let frozen = |name: &str| hp.freeze_encoder && name.starts_with("trunk.");

    let mut best = (state.clone(), 0usize, f64::INFINITY);
    let mut history = Vec::new();
    let mut clamp_events = 0;
    let mut stopped_early = false;

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(hp.batch_size).enumerate() {
            let mut grad = zeros_like(&state);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let trace = forward_volume(&train[i], &state)?;
                let outcome = focal_loss(trace.probs[1], train[i].label, &hp.focal)?;
                if !outcome.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        detail: format!("volume {}: p_pos {}, loss {}", train[i].id, trace.probs[1], outcome.loss),
                    });
                }
                clamp_events += usize::from(outcome.clamped);
                epoch_loss += outcome.loss;
                let d = logits_grad(trace.probs[1], outcome.d_p_pos * scale);
                backward_volume(&state, &trace, d, &mut grad, !hp.freeze_encoder);
            }
            adam.step(&mut state, &grad, frozen);
        }
        let val_loss = mean_focal_loss(validation, &state, &hp.focal)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                detail: format!("validation loss {val_loss}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
        };
        on_epoch(&record);
        history.push(record);
        if val_loss < best.2 {
            best = (state.clone(), epoch, val_loss);
        } else if epoch - best.1 >= hp.patience {
            stopped_early = true;
            break;
        }
    }

    let (state, best_epoch, best_val_loss) = best;
    Ok(ClassifierTraining {
        state,
        best_epoch,
        best_val_loss,
        history,
        stopped_early,
        clamp_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn spp_length_is_size_independent() {
        for (h, w) in [(8, 8), (32, 32), (57, 43), (5, 5)] {
            let f = FeatureMap(Array3::from_shape_fn((64, h, w), |(c, i, j)| (c + i * 3 + j) as f64));
            assert_eq!(spp(&f).unwrap().len(), 2432, "{h}x{w}");
        }
        assert!(spp(&FeatureMap(Array3::zeros((64, 4, 9)))).is_err());
    }

    #[test]
    fn spp_of_constant_map_is_constant() {
        let f = FeatureMap(Array3::from_elem((3, 7, 6), 2.5));
        assert!(spp(&f).unwrap().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn focal_loss_hand_value() {
        let out = focal_loss(0.5, 1, &FocalLossParams::default()).unwrap();
        let want = 0.35 * 0.5f64.powi(5) * -(0.5f64.ln());
        assert!((out.loss - want).abs() < 1e-15);
        assert!((out.loss - 0.0075815).abs() < 1e-6);
    }

    #[test]
    fn focal_loss_reduces_to_cross_entropy() {
        let ce = FocalLossParams {
            gamma: 0.0,
            lambda_neg: 1.0,
            lambda_pos: 1.0,
        };
        for p in [0.1, 0.5, 0.93] {
            assert!((focal_loss(p, 1, &ce).unwrap().loss + p.ln()).abs() < 1e-15);
            assert!((focal_loss(p, 0, &ce).unwrap().loss + (1.0 - p).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn focal_loss_clamps_and_vanishes_when_perfect() {
        let out = focal_loss(1.0, 1, &FocalLossParams::default()).unwrap();
        assert!(out.clamped);
        assert!(out.loss >= 0.0 && out.loss < 1e-30);
        assert!(focal_loss(0.0, 1, &FocalLossParams::default()).unwrap().loss.is_finite());
        assert!(focal_loss(0.5, 2, &FocalLossParams::default()).is_err());
    }

    #[test]
    fn focal_gradient_matches_central_difference() {
        for gamma in [0.0, 2.0, 5.0] {
            let params = FocalLossParams {
                gamma,
                ..FocalLossParams::default()
            };
            for label in [0u8, 1] {
                for p in [0.2, 0.55, 0.8] {
                    let h = 1e-6;
                    let num = (focal_loss(p + h, label, &params).unwrap().loss
                        - focal_loss(p - h, label, &params).unwrap().loss)
                        / (2.0 * h);
                    let ana = focal_loss(p, label, &params).unwrap().d_p_pos;
                    assert!((num - ana).abs() <= 1e-6 * ana.abs().max(1e-3), "{gamma} {label} {p}");
                }
            }
        }
    }

    #[test]
    fn two_by_two_netvlad_residuals_by_hand() {
        // x1 = [1, 0], x2 = [0, 2]; zero assignment weights and biases give
        // a = 0.5 everywhere. c1 = [0, 0], c2 = [1, 1].
        // V(:,1) = 0.5(x1 - c1) + 0.5(x2 - c1) = [0.5, 1.0]
        // V(:,2) = 0.5(x1 - c2) + 0.5(x2 - c2) = [-0.5, 0.0]
        let vlad = NetVlad {
            centers: array![[0.0, 0.0], [1.0, 1.0]],
            assign_weight: Array2::zeros((2, 2)),
            assign_bias: Array1::zeros(2),
        };
        let x = array![[1.0, 0.0], [0.0, 2.0]];
        let a = soft_assign(&x, &vlad);
        assert_eq!(a, array![[0.5, 0.5], [0.5, 0.5]]);
        let v = residual_sums(&x, &a, &vlad.centers);
        assert_eq!(v, array![[0.5, 1.0], [-0.5, 0.0]]);

        let (out, trace) = netvlad_traced(&[array![1.0, 0.0], array![0.0, 2.0]], &vlad).unwrap();
        assert_eq!(trace.residuals, v);
        assert!((out.dot(&out) - 1.0).abs() < 1e-12);
        // Each cluster row is unit before the global normalisation, so the
        // result is every row divided by sqrt(2).
        let s = 2f64.sqrt();
        let want = [0.5 / 1.25f64.sqrt() / s, 1.0 / 1.25f64.sqrt() / s, -1.0 / s, 0.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptor_at_its_center_with_hard_assignment_vanishes() {
        let mut vlad = NetVlad::new(3, 4, &mut rng());
        vlad.assign_weight.fill(0.0);
        vlad.assign_bias = array![0.0, 200.0, 0.0];
        let x = vlad.centers.row(1).to_owned().insert_axis(Axis(0));
        let a = soft_assign(&x, &vlad);
        let v = residual_sums(&x, &a, &vlad.centers);
        assert!(v.row(1).iter().all(|&r| r.abs() < 1e-12));
    }

    #[test]
    fn soft_assignments_sum_to_one() {
        let vlad = NetVlad::new(7, 5, &mut rng());
        let x = init::normal(&[9, 5], 3.0, &mut rng()).into_dimensionality::<Ix2>().unwrap();
        for row in soft_assign(&x, &vlad).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(netvlad(&[], &vlad).is_err());
    }

    #[test]
    fn transfer_copies_trunk_and_checks_shapes() {
        use crate::cvae::{CvaeConfig, CvaeState};
        let cvae = CvaeState::new(
            &CvaeConfig {
                height: 16,
                width: 16,
                ..CvaeConfig::default()
            },
            &mut rng(),
        )
        .unwrap();
        let cfg = ClassifierConfig {
            descriptor_dim: 8,
            clusters: 3,
            ..ClassifierConfig::default()
        };
        let state = transfer_weights(&cvae, &cfg, &mut rng()).unwrap();
        assert_eq!(state.trunk, cvae.encoder.trunk);

        let mismatched = ClassifierConfig {
            encoder: EncoderConfig {
                filters: [16, 32, 48],
                ..EncoderConfig::default()
            },
            ..cfg
        };
        match transfer_weights(&cvae, &mismatched, &mut rng()) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "trunk.global.conv3.weight"),
            other => panic!("expected a shape mismatch, got {other:?}"),
        }
    }
}
