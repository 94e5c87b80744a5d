//! Conditional VAE over single slices.
//!
//! Prior `p(z | x, y)` and approximate posterior `q(z | x, y)` are diagonal
//! Gaussians produced by two dense heads on top of one shared encoder. The
//! decoder maps a latent sample back to a slice through a dense projection
//! and three transposed convolutions, each followed by LeakyReLU and a
//! bilinear 2x upsampling. The generative likelihood has unit variance, so
//! its negative log-density is half the summed squared error plus a
//! constant.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderState, EncoderTrace, SideMode};
use crate::error::{ensure, Error, Result};
use crate::nn::act::{leaky_relu, leaky_relu_grad};
use crate::nn::dense::split_halves;
use crate::nn::upsample::{bilinear_up2, bilinear_up2_backward};
use crate::nn::{Dense, TransposedConv2d};
use crate::optim::{Adam, AdamConfig};
use crate::params::{nest, zeros_like, Parameters};
use crate::phantom::Volume;
use crate::seeded_rng;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CvaeConfig {
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub encoder: EncoderConfig,
    pub decoder_filters: [usize; 3],
    pub decoder_kernels: [usize; 3],
    pub side_mode: SideMode,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            latent_dim: 16,
            encoder: EncoderConfig::default(),
            decoder_filters: [32, 16, 1],
            decoder_kernels: [3, 3, 2],
            side_mode: SideMode::Mask,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.height >= 8 && self.width >= 8 && self.height.is_multiple_of(8) && self.width.is_multiple_of(8),
            || format!("CVAE slices must be multiples of 8 (got {}x{})", self.height, self.width),
        )?;
        ensure(self.latent_dim >= 1, || "latent dimension must be positive".into())?;
        ensure(self.decoder_filters[2] == 1, || "the decoder must end in one channel".into())
    }
}

/// Diagonal Gaussian with strictly positive standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl LatentGaussian {
    pub fn new(mu: Array1<f64>, sigma: Array1<f64>) -> Result<Self> {
        ensure(mu.len() == sigma.len(), || {
            format!("mu has {} entries, sigma {}", mu.len(), sigma.len())
        })?;
        ensure(mu.iter().all(|v| v.is_finite()), || "mu must be finite".into())?;
        ensure(sigma.iter().all(|&s| s.is_finite() && s > 0.0), || {
            "sigma must be finite and strictly positive".into()
        })?;
        Ok(Self { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: Array1::zeros(dim),
            sigma: Array1::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Prior,
    Posterior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub x_hat: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub project: Dense,
    pub tconv1: TransposedConv2d,
    pub tconv2: TransposedConv2d,
    pub tconv3: TransposedConv2d,
    /// (channels, rows, cols) of the grid the projection is reshaped to.
    pub grid: (usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub z: Array1<f64>,
    pub grid_in: Array3<f64>,
    pub pre1: Array3<f64>,
    pub up1: Array3<f64>,
    pub pre2: Array3<f64>,
    pub up2: Array3<f64>,
    pub pre3: Array3<f64>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &CvaeConfig, rng: &mut R) -> Self {
        let grid = (cfg.encoder.filters[2], cfg.height / 8, cfg.width / 8);
        let [f1, f2, f3] = cfg.decoder_filters;
        let [k1, k2, k3] = cfg.decoder_kernels;
        Self {
            project: Dense::he(cfg.latent_dim, grid.0 * grid.1 * grid.2, rng),
            tconv1: TransposedConv2d::he(grid.0, f1, k1, rng),
            tconv2: TransposedConv2d::he(f1, f2, k2, rng),
            tconv3: TransposedConv2d::he(f2, f3, k3, rng),
            grid,
        }
    }

    pub fn forward(&self, z: &Array1<f64>) -> (Array2<f64>, DecoderTrace) {
        let grid_in = self
            .project
            .forward(z.view())
            .into_shape_with_order(self.grid)
            .expect("projection matches grid");
        let pre1 = self.tconv1.forward(&grid_in);
        let up1 = bilinear_up2(&pre1.mapv(leaky_relu));
        let pre2 = self.tconv2.forward(&up1);
        let up2 = bilinear_up2(&pre2.mapv(leaky_relu));
        let pre3 = self.tconv3.forward(&up2);
        let out = bilinear_up2(&pre3.mapv(leaky_relu));
        let x_hat = out.index_axis_move(Axis(0), 0);
        (
            x_hat,
            DecoderTrace {
                z: z.clone(),
                grid_in,
                pre1,
                up1,
                pre2,
                up2,
                pre3,
            },
        )
    }

    /// Returns `dL/dz`.
    pub fn backward(&self, trace: &DecoderTrace, d_x_hat: &Array2<f64>, grad: &mut Decoder) -> Array1<f64> {
        let d_out = d_x_hat.clone().insert_axis(Axis(0));
        let d_pre3 = bilinear_up2_backward(&d_out) * trace.pre3.mapv(leaky_relu_grad);
        let d_up2 = self.tconv3.backward(&trace.up2, &d_pre3, &mut grad.tconv3);
        let d_pre2 = bilinear_up2_backward(&d_up2) * trace.pre2.mapv(leaky_relu_grad);
        let d_up1 = self.tconv2.backward(&trace.up1, &d_pre2, &mut grad.tconv2);
        let d_pre1 = bilinear_up2_backward(&d_up1) * trace.pre1.mapv(leaky_relu_grad);
        let d_grid = self.tconv1.backward(&trace.grid_in, &d_pre1, &mut grad.tconv1);
        let d_proj = Array1::from_iter(d_grid.iter().cloned());
        self.project.backward(trace.z.view(), d_proj.view(), &mut grad.project)
    }
}

impl Parameters for Decoder {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("project", self.project.params()));
        out.extend(nest("tconv1", self.tconv1.params()));
        out.extend(nest("tconv2", self.tconv2.params()));
        out.extend(nest("tconv3", self.tconv3.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("project", self.project.params_mut()));
        out.extend(nest("tconv1", self.tconv1.params_mut()));
        out.extend(nest("tconv2", self.tconv2.params_mut()));
        out.extend(nest("tconv3", self.tconv3.params_mut()));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeState {
    pub config: CvaeConfig,
    pub encoder: EncoderState,
    /// Dense maps to `[mu; log_sigma]`.
    pub prior_head: Dense,
    pub posterior_head: Dense,
    pub decoder: Decoder,
}

impl CvaeState {
    pub fn new<R: Rng + ?Sized>(config: &CvaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderState::new(&config.encoder, config.height, config.width, rng)?;
        let hidden = encoder.output_dim();
        let head_std = 0.1 / (hidden as f64).sqrt();
        Ok(Self {
            config: config.clone(),
            prior_head: Dense::scaled(hidden, 2 * config.latent_dim, head_std, rng),
            posterior_head: Dense::scaled(hidden, 2 * config.latent_dim, head_std, rng),
            decoder: Decoder::new(config, rng),
            encoder,
        })
    }

    fn head(&self, head: Head) -> &Dense {
        match head {
            Head::Prior => &self.prior_head,
            Head::Posterior => &self.posterior_head,
        }
    }

    fn check_slice(&self, x: &Array2<f64>) -> Result<()> {
        ensure(x.dim() == (self.config.height, self.config.width), || {
            format!(
                "slice is {:?}, model expects {}x{}",
                x.dim(),
                self.config.height,
                self.config.width
            )
        })
    }
}

impl Parameters for CvaeState {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("encoder", self.encoder.params()));
        out.extend(nest("prior_head", self.prior_head.params()));
        out.extend(nest("posterior_head", self.posterior_head.params()));
        out.extend(nest("decoder", self.decoder.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("encoder", self.encoder.params_mut()));
        out.extend(nest("prior_head", self.prior_head.params_mut()));
        out.extend(nest("posterior_head", self.posterior_head.params_mut()));
        out.extend(nest("decoder", self.decoder.params_mut()));
        out
    }
}

fn gaussian_from_head(raw: &Array1<f64>) -> Result<LatentGaussian> {
    let (mu, log_sigma) = split_halves(raw);
    LatentGaussian::new(mu, log_sigma.mapv(f64::exp))
}

/// Encoder followed by the selected Gaussian head.
pub fn latent_params(x: &Array2<f64>, mask: &Array2<f64>, label: u8, head: Head, state: &CvaeState) -> Result<LatentGaussian> {
    state.check_slice(x)?;
    let (features, _) = state.encoder.forward(x, mask, label, state.config.side_mode)?;
    gaussian_from_head(&state.head(head).forward(features.view()))
}

/// `z = mu + sigma ⊙ eps`.
pub fn reparameterize(g: &LatentGaussian, eps: &Array1<f64>) -> Array1<f64> {
    &g.mu + &(&g.sigma * eps)
}

pub fn decode(z: &Array1<f64>, state: &CvaeState) -> Result<Reconstruction> {
    ensure(z.len() == state.config.latent_dim, || {
        format!("latent has {} entries, model uses {}", z.len(), state.config.latent_dim)
    })?;
    ensure(z.iter().all(|v| v.is_finite()), || "latent must be finite".into())?;
    let (x_hat, _) = state.decoder.forward(z);
    Ok(Reconstruction { x_hat })
}

/// Closed-form `KL(q || p)` for diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussian(q: &LatentGaussian, p: &LatentGaussian) -> f64 {
    q.mu.iter()
        .zip(q.sigma.iter())
        .zip(p.mu.iter().zip(p.sigma.iter()))
        .map(|((&mq, &sq), (&mp, &sp))| {
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum()
}

/// Negative ELBO split into its terms. `recon` is the Gaussian negative
/// log-likelihood including the `0.5·N·ln(2π)` constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl ElboTerms {
    pub fn is_finite(&self) -> bool {
        self.recon.is_finite() && self.kl.is_finite() && self.total.is_finite()
    }
}

/// Negative log-density of `x` under N(x_hat, I).
pub fn gaussian_nll(x: &Array2<f64>, x_hat: &Array2<f64>) -> f64 {
    let sq: f64 = x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    0.5 * sq + 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

struct ElboTrace {
    encoder: EncoderTrace,
    features: Array1<f64>,
    prior: LatentGaussian,
    posterior: LatentGaussian,
    decoder: DecoderTrace,
    x_hat: Array2<f64>,
}

fn elbo_forward(
    x: &Array2<f64>,
    mask: &Array2<f64>,
    label: u8,
    state: &CvaeState,
    eps: &Array1<f64>,
) -> Result<(ElboTerms, ElboTrace)> {
    state.check_slice(x)?;
    ensure(eps.len() == state.config.latent_dim, || {
        format!("eps has {} entries, latent has {}", eps.len(), state.config.latent_dim)
    })?;
    let (features, encoder) = state.encoder.forward(x, mask, label, state.config.side_mode)?;
    let prior = gaussian_from_head(&state.prior_head.forward(features.view()))?;
    let posterior = gaussian_from_head(&state.posterior_head.forward(features.view()))?;
    let z = reparameterize(&posterior, eps);
    let (x_hat, decoder) = state.decoder.forward(&z);
    let recon = gaussian_nll(x, &x_hat);
    let kl = kl_diag_gaussian(&posterior, &prior);
    Ok((
        ElboTerms {
            recon,
            kl,
            total: recon + kl,
        },
        ElboTrace {
            encoder,
            features,
            prior,
            posterior,
            decoder,
            x_hat,
        },
    ))
}

/// Negative ELBO of one slice with the posterior sample fixed by `eps`.
pub fn elbo_loss(x: &Array2<f64>, mask: &Array2<f64>, label: u8, state: &CvaeState, eps: &Array1<f64>) -> Result<ElboTerms> {
    elbo_forward(x, mask, label, state, eps).map(|(terms, _)| terms)
}

/// Adds `scale · ∇ loss` to `grad` and returns the loss terms.
pub fn accumulate_elbo_grad(
    x: &Array2<f64>,
    mask: &Array2<f64>,
    label: u8,
    state: &CvaeState,
    eps: &Array1<f64>,
    grad: &mut CvaeState,
    scale: f64,
) -> Result<ElboTerms> {
    let (terms, trace) = elbo_forward(x, mask, label, state, eps)?;
    let ElboTrace {
        encoder,
        features,
        prior,
        posterior,
        decoder,
        x_hat,
    } = trace;

    // Reconstruction: d/dx_hat of 0.5·|x - x_hat|².
    let d_x_hat = (&x_hat - x) * scale;
    let d_z = state.decoder.backward(&decoder, &d_x_hat, &mut grad.decoder);

    // KL(q || p) with log-sigma parameterisation.
    let var_p = prior.sigma.mapv(|s| s * s);
    let var_q = posterior.sigma.mapv(|s| s * s);
    let diff = &posterior.mu - &prior.mu;
    let d_mu_q_kl = &diff / &var_p;
    let d_ls_q_kl = &var_q / &var_p - 1.0;
    let d_mu_p = -&d_mu_q_kl * scale;
    let d_ls_p = (1.0 - (&var_q + &diff.mapv(|d| d * d)) / &var_p) * scale;

    // z = mu_q + sigma_q ⊙ eps.
    let d_mu_q = &d_mu_q_kl * scale + &d_z;
    let d_ls_q = &d_ls_q_kl * scale + &(&d_z * &posterior.sigma * eps);

    let d_post = ndarray::concatenate(Axis(0), &[d_mu_q.view(), d_ls_q.view()]).expect("1-d");
    let d_prior = ndarray::concatenate(Axis(0), &[d_mu_p.view(), d_ls_p.view()]).expect("1-d");
    let mut d_features = state
        .posterior_head
        .backward(features.view(), d_post.view(), &mut grad.posterior_head);
    d_features += &state
        .prior_head
        .backward(features.view(), d_prior.view(), &mut grad.prior_head);
    state.encoder.backward(&encoder, &d_features, &mut grad.encoder);
    Ok(terms)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CvaeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 5e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Mean per-slice loss terms over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub recon_term: f64,
    pub kl_term: f64,
    pub total: f64,
}

pub struct CvaeTraining {
    pub state: CvaeState,
    pub trace: Vec<EpochLoss>,
}

/// Every slice of every volume becomes one sample paired with the volume
/// label.
fn slice_samples(volumes: &[Volume]) -> Vec<(usize, usize)> {
    volumes
        .iter()
        .enumerate()
        .flat_map(|(v, vol)| (0..vol.num_slices()).map(move |s| (v, s)))
        .collect()
}

/// Adam training on per-slice samples. Deterministic for a fixed seed.
pub fn train_cvae(
    volumes: &[Volume],
    config: &CvaeConfig,
    hp: &CvaeTrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<CvaeTraining> {
    ensure(!volumes.is_empty(), || "training split is empty".into())?;
    ensure(hp.batch_size >= 1, || "batch size must be positive".into())?;
    let mut state = CvaeState::new(config, &mut seeded_rng(hp.seed, 0))?;
    let mut adam = Adam::new(AdamConfig {
        lr: hp.lr,
        ..AdamConfig::default()
    });
    let mut rng = seeded_rng(hp.seed, 1);
    let mut samples = slice_samples(volumes);
    let slices: Vec<Vec<(Array2<f64>, Array2<f64>)>> = volumes
        .iter()
        .map(|v| (0..v.num_slices()).map(|s| v.slice_pair(s)).collect())
        .collect();
    let mut trace = Vec::with_capacity(hp.epochs);

    for epoch in 1..=hp.epochs {
        samples.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for (batch_idx, batch) in samples.chunks(hp.batch_size).enumerate() {
            let mut grad = zeros_like(&state);
            let scale = 1.0 / batch.len() as f64;
            for &(v, s) in batch {
                let (x, mask) = &slices[v][s];
                let eps: Array1<f64> = (0..config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                let terms = accumulate_elbo_grad(x, mask, volumes[v].label, &state, &eps, &mut grad, scale)?;
                if !terms.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        detail: format!(
                            "volume {} slice {s}: recon {}, kl {}",
                            volumes[v].id, terms.recon, terms.kl
                        ),
                    });
                }
                sums.0 += terms.recon;
                sums.1 += terms.kl;
                sums.2 += terms.total;
            }
            adam.step(&mut state, &grad, |_| false);
        }
        let n = samples.len() as f64;
        let record = EpochLoss {
            epoch,
            recon_term: sums.0 / n,
            kl_term: sums.1 / n,
            total: sums.2 / n,
        };
        on_epoch(&record);
        trace.push(record);
    }
    Ok(CvaeTraining { state, trace })
}

/// Writes the loss trace as CSV with header `epoch,recon_term,kl_term,total`.
pub fn write_loss_trace<W: std::io::Write>(trace: &[EpochLoss], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for record in trace {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> CvaeConfig {
        CvaeConfig {
            height: 16,
            width: 16,
            ..CvaeConfig::default()
        }
    }

    fn slice(seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>());
        let m = x.mapv(|v| if v > 0.7 { 1.0 } else { 0.0 });
        (x, m)
    }

    #[test]
    fn zero_parameters_give_standard_normal() {
        let state = zeros_like(&CvaeState::new(&small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
        let (x, m) = slice(2);
        for head in [Head::Prior, Head::Posterior] {
            let g = latent_params(&x, &m, 1, head, &state).unwrap();
            assert_eq!(g.dim(), 16);
            assert!(g.mu.iter().all(|&v| v == 0.0));
            assert!(g.sigma.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn two_dim_head_by_hand() {
        // raw = W f + b with f = [1, -2]: mu = [1*1 + 0, 0.5*1 + 1*(-2)] = [1, -1.5];
        // log_sigma = [0, ln 2] -> sigma = [1, 2].
        let head = Dense {
            weight: array![[1.0, 0.0], [0.5, 1.0], [0.0, 0.0], [0.0, 0.0]],
            bias: array![0.0, 0.0, 0.0, 2f64.ln()],
        };
        let g = gaussian_from_head(&head.forward(array![1.0, -2.0].view())).unwrap();
        assert_eq!(g.mu, array![1.0, -1.5]);
        assert!((g.sigma[0] - 1.0).abs() < 1e-15 && (g.sigma[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_by_hand() {
        let g = LatentGaussian::new(array![1.0, 2.0], array![1.0, 0.5]).unwrap();
        assert_eq!(reparameterize(&g, &array![-1.0, 2.0]), array![0.0, 3.0]);
        assert_eq!(reparameterize(&g, &array![0.0, 0.0]), g.mu);
        let tight = LatentGaussian::new(array![1.0, 2.0], array![1e-300, 1e-300]).unwrap();
        let z = reparameterize(&tight, &array![5.0, -3.0]);
        assert!((&z - &tight.mu).iter().all(|d| d.abs() < 1e-290));
    }

    #[test]
    fn gaussian_rejects_non_positive_sigma() {
        assert!(LatentGaussian::new(array![0.0], array![0.0]).is_err());
        assert!(LatentGaussian::new(array![0.0], array![-1.0]).is_err());
        assert!(LatentGaussian::new(array![f64::NAN], array![1.0]).is_err());
    }

    #[test]
    fn decoder_shapes_and_zero_case() {
        let cfg = small_config();
        let state = CvaeState::new(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let z = Array1::from_iter((0..16).map(|i| i as f64 * 0.1 - 0.8));
        assert_eq!(decode(&z, &state).unwrap().x_hat.dim(), (16, 16));
        let zero = zeros_like(&state);
        assert!(decode(&Array1::zeros(16), &zero).unwrap().x_hat.iter().all(|&v| v == 0.0));
        assert!(decode(&Array1::zeros(3), &state).is_err());
    }

    #[test]
    fn default_decoder_restores_128() {
        let state = CvaeState::new(&CvaeConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(state.decoder.grid, (64, 16, 16));
        assert_eq!(decode(&Array1::zeros(16), &state).unwrap().x_hat.dim(), (128, 128));
    }

    #[test]
    fn kl_closed_form_values() {
        let q = LatentGaussian::new(array![1.0], array![1.0]).unwrap();
        assert!((kl_diag_gaussian(&q, &LatentGaussian::standard(1)) - 0.5).abs() < 1e-15);
        let wide = LatentGaussian::new(array![0.0], array![2.0]).unwrap();
        let expected = 0.5f64.ln() + 2.0 - 0.5;
        assert!((kl_diag_gaussian(&wide, &LatentGaussian::standard(1)) - expected).abs() < 1e-15);
        assert!((expected - 0.8069).abs() < 1e-4);
        assert_eq!(kl_diag_gaussian(&q, &q), 0.0);
    }

    #[test]
    fn perfect_reconstruction_leaves_constant_offset() {
        let x = Array2::from_elem((4, 4), 0.3);
        let nll = gaussian_nll(&x, &x);
        assert!((nll - 8.0 * (2.0 * PI).ln()).abs() < 1e-12);
        let worse = gaussian_nll(&x, &(&x + 0.1));
        let worst = gaussian_nll(&x, &(&x + 0.1 * 2f64.sqrt()));
        assert!(worst > worse && worse > nll);
    }

    #[test]
    fn rejects_wrong_slice_size() {
        let state = CvaeState::new(&small_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = Array2::zeros((24, 24));
        assert!(elbo_loss(&x, &x, 0, &state, &Array1::zeros(16)).is_err());
        assert!(CvaeState::new(
            &CvaeConfig {
                height: 20,
                ..small_config()
            },
            &mut ChaCha8Rng::seed_from_u64(4)
        )
        .is_err());
    }
}
