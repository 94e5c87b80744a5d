//! Synthetic chest-CT-like phantoms with a known label mechanism.
//!
//! Every volume holds two lung-shaped low-density regions inside a soft
//! tissue body. Positive volumes carry peripheral ground-glass-like blobs:
//! broad, faint Gaussian bumps near the lung border. Negative volumes carry
//! nothing or distractors: small, dense, central nodules. The lesion mask
//! plays the role of an upstream lesion segmenter: it marks every
//! ground-glass blob and, at a configurable rate, also a distractor, so the
//! mask alone does not determine the label.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis, Ix3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_container, write_container, NamedArray};
use crate::error::{ensure, invalid, Error, Result};
use crate::seeded_rng;

pub const GENERATOR_VERSION: &str = "sidegate-phantom/1";

/// Intensity window mapped onto [0, 1].
pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 400.0;

const AIR_HU: f64 = -1000.0;
const TISSUE_HU: f64 = 40.0;
const LUNG_HU: f64 = -850.0;
/// Fraction of a blob's peak above which it belongs to the blob's support.
const SUPPORT_LEVEL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct RawVolume {
    /// (slices, rows, cols), Hounsfield-like units.
    pub voxels: Array3<f64>,
    /// Physical voxel size in mm (slice, row, col); metadata only.
    pub spacing: [f64; 3],
}

impl RawVolume {
    pub fn validate(&self) -> Result<()> {
        let (s, h, w) = self.voxels.dim();
        ensure(s >= 1, || "a volume needs at least one slice".into())?;
        ensure(h >= 32 && w >= 32, || format!("slices must be at least 32x32, got {h}x{w}"))?;
        ensure(self.voxels.iter().all(|v| v.is_finite()), || "voxels must be finite".into())
    }
}

/// Clamp to [-1000, 400] and rescale linearly onto [0, 1].
pub fn preprocess(raw: &RawVolume) -> Result<Array3<f64>> {
    ensure(raw.voxels.iter().all(|v| v.is_finite()), || "voxels must be finite".into())?;
    Ok(raw.voxels.mapv(normalize_hu))
}

pub fn normalize_hu(v: f64) -> f64 {
    (v.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

/// Inverse of [`normalize_hu`] on [0, 1].
pub fn denormalize(x: f64) -> f64 {
    HU_MIN + x * (HU_MAX - HU_MIN)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    /// (slices, rows, cols) in [0, 1].
    pub intensities: Array3<f64>,
    /// Same shape, values in {0, 1}.
    pub lesion_mask: Array3<u8>,
    /// 0 = negative, 1 = positive.
    pub label: u8,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Volume {
    pub fn new(id: impl Into<String>, intensities: Array3<f64>, lesion_mask: Array3<u8>, label: u8) -> Result<Self> {
        let v = Self {
            id: id.into(),
            intensities,
            lesion_mask,
            label,
            spacing: [3.0, 1.0, 1.0],
            seed: 0,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.intensities.dim() == self.lesion_mask.dim(), || {
            format!(
                "intensities {:?} and mask {:?} differ in shape",
                self.intensities.dim(),
                self.lesion_mask.dim()
            )
        })?;
        ensure(self.num_slices() >= 1, || "a volume needs at least one slice".into())?;
        ensure(self.label <= 1, || format!("label must be 0 or 1, got {}", self.label))?;
        ensure(
            self.intensities.iter().all(|&v| (0.0..=1.0).contains(&v)),
            || "intensities must lie in [0, 1]".into(),
        )?;
        ensure(self.lesion_mask.iter().all(|&m| m <= 1), || "mask must be binary".into())
    }

    pub fn num_slices(&self) -> usize {
        self.intensities.dim().0
    }

    pub fn slice_dim(&self) -> (usize, usize) {
        let (_, h, w) = self.intensities.dim();
        (h, w)
    }

    /// Image slice and its mask as floating values in {0.0, 1.0}.
    pub fn slice_pair(&self, s: usize) -> (Array2<f64>, Array2<f64>) {
        (
            self.intensities.index_axis(Axis(0), s).to_owned(),
            self.lesion_mask.index_axis(Axis(0), s).mapv(f64::from),
        )
    }

    /// A copy whose slices are reordered by `order`.
    pub fn with_slice_order(&self, order: &[usize]) -> Self {
        let mut v = self.clone();
        v.intensities = self.intensities.select(Axis(0), order);
        v.lesion_mask = self.lesion_mask.select(Axis(0), order);
        v
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..self.max)
        } else {
            self.min
        }
    }

    fn valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CountSpan {
    pub min: usize,
    pub max: usize,
}

impl CountSpan {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

/// Distribution of one family of Gaussian-profile blobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BlobDistribution {
    pub count: CountSpan,
    /// In-plane standard deviation as a fraction of the image width.
    pub sigma_frac: Span,
    /// Standard deviation along the slice axis, in slices.
    pub sigma_slices: Span,
    /// Peak intensity added to the background, in HU.
    pub amplitude_hu: Span,
    /// Centre position: 0 = lung centre, 1 = lung border.
    pub radial: Span,
}

impl BlobDistribution {
    fn validate(&self, name: &str) -> Result<()> {
        ensure(self.count.min <= self.count.max, || format!("{name}: empty count range"))?;
        for (field, span) in [
            ("sigma_frac", self.sigma_frac),
            ("sigma_slices", self.sigma_slices),
            ("amplitude_hu", self.amplitude_hu),
            ("radial", self.radial),
        ] {
            ensure(span.valid(), || format!("{name}.{field}: empty or non-finite range"))?;
        }
        ensure(self.sigma_frac.min > 0.0 && self.sigma_slices.min > 0.0, || {
            format!("{name}: blob widths must be positive")
        })?;
        ensure(self.amplitude_hu.min > 0.0, || format!("{name}: amplitudes must be positive"))?;
        ensure(self.sigma_frac.max <= 0.25, || {
            format!("{name}: blobs wider than a quarter of the image do not fit in a lung")
        })?;
        ensure(self.radial.min >= 0.0 && self.radial.max <= 1.0, || {
            format!("{name}: radial position must lie in [0, 1]")
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PhantomConfig {
    /// (rows, cols)
    pub image_size: [usize; 2],
    pub slices: CountSpan,
    pub spacing_mm: [f64; 3],
    /// Probability that a volume is positive.
    pub class_balance: f64,
    /// Ground-glass-like lesions of positive volumes.
    pub lesions: BlobDistribution,
    /// Distractors added to positive volumes.
    pub positive_distractors: BlobDistribution,
    /// Distractors of negative volumes.
    pub negative_distractors: BlobDistribution,
    /// Probability that the mask also marks a distractor.
    pub distractor_mask_rate: f64,
    /// Standard deviation of the (3-sigma truncated) noise, in HU.
    pub noise_hu: f64,
    pub num_volumes: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: [128, 128],
            slices: CountSpan::new(8, 24),
            spacing_mm: [3.0, 0.7, 0.7],
            class_balance: 0.5,
            lesions: BlobDistribution {
                count: CountSpan::new(1, 3),
                sigma_frac: Span::new(0.05, 0.08),
                sigma_slices: Span::new(1.0, 2.5),
                amplitude_hu: Span::new(250.0, 400.0),
                radial: Span::new(0.55, 0.85),
            },
            positive_distractors: BlobDistribution {
                count: CountSpan::new(0, 1),
                sigma_frac: Span::new(0.025, 0.04),
                sigma_slices: Span::new(0.6, 1.2),
                amplitude_hu: Span::new(800.0, 1100.0),
                radial: Span::new(0.0, 0.45),
            },
            negative_distractors: BlobDistribution {
                count: CountSpan::new(0, 3),
                sigma_frac: Span::new(0.025, 0.04),
                sigma_slices: Span::new(0.6, 1.2),
                amplitude_hu: Span::new(800.0, 1100.0),
                radial: Span::new(0.0, 0.45),
            },
            distractor_mask_rate: 0.5,
            noise_hu: 25.0,
            num_volumes: 400,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        ensure(h >= 32 && w >= 32, || format!("image size must be at least 32x32, got {h}x{w}"))?;
        ensure(self.slices.min >= 1 && self.slices.min <= self.slices.max, || {
            "slice count range must be nonempty and start at 1 or more".into()
        })?;
        ensure((0.0..=1.0).contains(&self.class_balance), || {
            format!("class balance {} is outside [0, 1]", self.class_balance)
        })?;
        ensure((0.0..=1.0).contains(&self.distractor_mask_rate), || {
            "distractor mask rate must lie in [0, 1]".into()
        })?;
        ensure(self.noise_hu.is_finite() && self.noise_hu >= 0.0, || "noise must be non-negative".into())?;
        self.lesions.validate("lesions")?;
        self.positive_distractors.validate("positive_distractors")?;
        self.negative_distractors.validate("negative_distractors")?;
        // Half-maximum support must stay strictly above the noise floor so
        // every marked voxel is brighter than the parenchyma.
        let floor = 3.0 * self.noise_hu;
        for (name, d) in [
            ("lesions", &self.lesions),
            ("positive_distractors", &self.positive_distractors),
            ("negative_distractors", &self.negative_distractors),
        ] {
            ensure(SUPPORT_LEVEL * d.amplitude_hu.min > floor, || {
                format!("{name}: half the minimum amplitude must exceed three noise deviations")
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BlobKind {
    Lesion,
    Distractor,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Blob {
    pub kind: BlobKind,
    /// (slice, row, col)
    pub center: [f64; 3],
    pub sigma_px: f64,
    pub sigma_slices: f64,
    pub amplitude_hu: f64,
    pub marked: bool,
}

impl Blob {
    fn profile(&self, s: f64, r: f64, c: f64) -> f64 {
        let ds = (s - self.center[0]) / self.sigma_slices;
        let dr = (r - self.center[1]) / self.sigma_px;
        let dc = (c - self.center[2]) / self.sigma_px;
        (-0.5 * (ds * ds + dr * dr + dc * dc)).exp()
    }
}

/// Generator ground truth kept alongside a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTruth {
    pub raw: RawVolume,
    pub lung: Array3<u8>,
    pub blobs: Vec<Blob>,
    /// Union of the half-maximum supports of all lesion (not distractor) blobs.
    pub lesion_support: Array3<u8>,
}

/// (row centre, col centre, row semi-axis, col semi-axis) of both lungs.
fn lungs(h: usize, w: usize, slice_scale: f64) -> [(f64, f64, f64, f64); 2] {
    let (hf, wf) = (h as f64, w as f64);
    let (ra, ca) = (0.36 * hf * slice_scale, 0.17 * wf * slice_scale);
    [(0.5 * hf, 0.29 * wf, ra, ca), (0.5 * hf, 0.71 * wf, ra, ca)]
}

fn slice_scale(s: usize, slices: usize) -> f64 {
    0.8 + 0.2 * (std::f64::consts::PI * (s as f64 + 0.5) / slices as f64).sin()
}

fn place_blob<R: Rng + ?Sized>(
    kind: BlobKind,
    dist: &BlobDistribution,
    mark_prob: f64,
    h: usize,
    w: usize,
    slices: usize,
    rng: &mut R,
) -> Blob {
    let center_slice = rng.gen_range(0.0..slices as f64);
    let side = rng.gen_range(0..2usize);
    let (cr, cc, ra, ca) = lungs(h, w, slice_scale(center_slice.floor() as usize, slices).min(1.0))[side];
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let radial = dist.radial.sample(rng);
    let sigma_px = dist.sigma_frac.sample(rng) * w as f64;
    Blob {
        kind,
        center: [
            center_slice,
            cr + radial * ra * theta.sin(),
            cc + radial * ca * theta.cos(),
        ],
        sigma_px,
        sigma_slices: dist.sigma_slices.sample(rng),
        amplitude_hu: dist.amplitude_hu.sample(rng),
        marked: kind == BlobKind::Lesion || rng.gen_bool(mark_prob),
    }
}

/// One volume plus its generator ground truth.
pub fn generate_volume_with_truth<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Result<(Volume, PhantomTruth)> {
    cfg.validate()?;
    let [h, w] = cfg.image_size;
    let slices = cfg.slices.sample(rng);
    let label = u8::from(rng.gen_bool(cfg.class_balance));

    let mut blobs = Vec::new();
    let (lesions, distractors) = if label == 1 {
        (Some(&cfg.lesions), &cfg.positive_distractors)
    } else {
        (None, &cfg.negative_distractors)
    };
    if let Some(dist) = lesions {
        for _ in 0..dist.count.sample(rng).max(1) {
            blobs.push(place_blob(BlobKind::Lesion, dist, 1.0, h, w, slices, rng));
        }
    }
    for _ in 0..distractors.count.sample(rng) {
        blobs.push(place_blob(
            BlobKind::Distractor,
            distractors,
            cfg.distractor_mask_rate,
            h,
            w,
            slices,
            rng,
        ));
    }

    let noise = Normal::new(0.0, cfg.noise_hu.max(f64::MIN_POSITIVE)).expect("valid std");
    let limit = 3.0 * cfg.noise_hu;
    let mut voxels = Array3::zeros((slices, h, w));
    let mut lung = Array3::zeros((slices, h, w));
    let mut mask = Array3::zeros((slices, h, w));
    let mut support = Array3::zeros((slices, h, w));
    for s in 0..slices {
        let lung_shapes = lungs(h, w, slice_scale(s, slices));
        for r in 0..h {
            for c in 0..w {
                let (rf, cf) = (r as f64 + 0.5, c as f64 + 0.5);
                let body = ((rf - 0.5 * h as f64) / (0.48 * h as f64)).powi(2)
                    + ((cf - 0.5 * w as f64) / (0.48 * w as f64)).powi(2)
                    <= 1.0;
                let in_lung = lung_shapes
                    .iter()
                    .any(|&(lr, lc, ra, ca)| ((rf - lr) / ra).powi(2) + ((cf - lc) / ca).powi(2) <= 1.0);
                let mut v = if in_lung {
                    LUNG_HU
                } else if body {
                    TISSUE_HU
                } else {
                    AIR_HU
                };
                if cfg.noise_hu > 0.0 {
                    v += noise.sample(rng).clamp(-limit, limit);
                }
                for blob in &blobs {
                    let p = blob.profile(s as f64, rf, cf);
                    v += blob.amplitude_hu * p;
                    if p >= SUPPORT_LEVEL {
                        if blob.marked {
                            mask[[s, r, c]] = 1u8;
                        }
                        if blob.kind == BlobKind::Lesion {
                            support[[s, r, c]] = 1u8;
                        }
                    }
                }
                voxels[[s, r, c]] = v;
                lung[[s, r, c]] = u8::from(in_lung);
            }
        }
    }

    let raw = RawVolume {
        voxels,
        spacing: cfg.spacing_mm,
    };
    let intensities = preprocess(&raw)?;
    let volume = Volume {
        id: String::new(),
        intensities,
        lesion_mask: mask,
        label,
        spacing: cfg.spacing_mm,
        seed: cfg.seed,
    };
    Ok((
        volume,
        PhantomTruth {
            raw,
            lung,
            blobs,
            lesion_support: support,
        },
    ))
}

pub fn generate_volume<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Result<Volume> {
    generate_volume_with_truth(cfg, rng).map(|(v, _)| v)
}

pub fn volume_id(index: usize) -> String {
    format!("vol{index:05}")
}

/// Volume `index` of the dataset defined by `cfg`; each index draws from its
/// own random stream so volumes can be regenerated independently.
pub fn generate_indexed(cfg: &PhantomConfig, index: usize) -> Result<(Volume, PhantomTruth)> {
    let mut rng = seeded_rng(cfg.seed, index as u64);
    let (mut volume, truth) = generate_volume_with_truth(cfg, &mut rng)?;
    volume.id = volume_id(index);
    Ok((volume, truth))
}

/// `cfg.num_volumes` volumes, a pure function of `cfg`.
pub fn generate_dataset(cfg: &PhantomConfig) -> Result<Vec<Volume>> {
    (0..cfg.num_volumes)
        .map(|i| generate_indexed(cfg, i).map(|(v, _)| v))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClassCounts {
    pub negative: usize,
    pub positive: usize,
}

impl ClassCounts {
    pub fn of<'a>(volumes: impl IntoIterator<Item = &'a Volume>) -> Self {
        volumes.into_iter().fold(Self::default(), |mut c, v| {
            if v.label == 1 {
                c.positive += 1;
            } else {
                c.negative += 1;
            }
            c
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub counts: [ClassCounts; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Volume>,
    pub validation: Vec<Volume>,
    pub test: Vec<Volume>,
    pub manifest: SplitManifest,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Volume] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Index sets for a seeded shuffle of `n` items: validation and test get
/// `round(n · fraction)` items each, train takes the rest.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    ensure(fractions.iter().all(|f| f.is_finite() && *f >= 0.0), || {
        format!("split fractions must be non-negative, got {fractions:?}")
    })?;
    let total: f64 = fractions.iter().sum();
    ensure((total - 1.0).abs() < 1e-9, || format!("split fractions sum to {total}, not 1"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, u64::MAX));
    let n_val = (n as f64 * fractions[1]).round() as usize;
    let n_test = ((n as f64 * fractions[2]).round() as usize).min(n - n_val.min(n));
    let n_val = n_val.min(n);
    let n_train = n - n_val - n_test;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok([train, val, test])
}

/// Disjoint train/validation/test sets with a manifest of membership and
/// per-split class counts.
pub fn make_splits(volumes: Vec<Volume>, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let [train_idx, val_idx, test_idx] = split_indices(volumes.len(), fractions, seed)?;
    let mut slots: Vec<Option<Volume>> = volumes.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Volume> {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        sorted.iter().map(|&i| slots[i].take().expect("disjoint")).collect()
    };
    let train = take(&train_idx);
    let validation = take(&val_idx);
    let test = take(&test_idx);
    let ids = |v: &[Volume]| v.iter().map(|x| x.id.clone()).collect::<Vec<_>>();
    let manifest = SplitManifest {
        seed,
        fractions,
        train: ids(&train),
        validation: ids(&validation),
        test: ids(&test),
        counts: [
            ClassCounts::of(&train),
            ClassCounts::of(&validation),
            ClassCounts::of(&test),
        ],
    };
    Ok(Splits {
        train,
        validation,
        test,
        manifest,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VolumeSidecar {
    pub label: u8,
    pub spacing: [f64; 3],
    pub seed: u64,
    pub generator_version: String,
}

const ARRAYS_FILE: &str = "arrays.safetensors";
const SIDECAR_FILE: &str = "volume.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn volume_dir(root: &Path, id: &str) -> PathBuf {
    root.join("volumes").join(id)
}

pub fn write_volume(root: &Path, volume: &Volume) -> Result<()> {
    let dir = volume_dir(root, &volume.id);
    std::fs::create_dir_all(&dir)?;
    let arrays = vec![
        ("intensities".to_string(), NamedArray::F64(volume.intensities.clone().into_dyn())),
        ("lesion_mask".to_string(), NamedArray::U8(volume.lesion_mask.clone().into_dyn())),
    ];
    write_container(&dir.join(ARRAYS_FILE), &arrays, &serde_json::json!({ "id": volume.id }))?;
    let sidecar = VolumeSidecar {
        label: volume.label,
        spacing: volume.spacing,
        seed: volume.seed,
        generator_version: GENERATOR_VERSION.into(),
    };
    std::fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_volume(root: &Path, id: &str) -> Result<Volume> {
    let dir = volume_dir(root, id);
    if !dir.is_dir() {
        return Err(invalid(format!("unknown volume `{id}` under {}", root.display())));
    }
    let sidecar: VolumeSidecar = serde_json::from_str(&std::fs::read_to_string(dir.join(SIDECAR_FILE))?)?;
    let (arrays, _) = read_container(&dir.join(ARRAYS_FILE))?;
    let mut intensities = None;
    let mut mask = None;
    for (name, array) in arrays {
        match name.as_str() {
            "intensities" => intensities = Some(array.into_f64()?),
            "lesion_mask" => mask = Some(array.into_u8()?),
            _ => {}
        }
    }
    let dims = |name: &str| Error::Checkpoint(format!("volume `{id}`: `{name}` must be 3-d"));
    let volume = Volume {
        id: id.to_string(),
        intensities: intensities
            .ok_or_else(|| Error::Checkpoint(format!("volume `{id}` lacks intensities")))?
            .into_dimensionality::<Ix3>()
            .map_err(|_| dims("intensities"))?,
        lesion_mask: mask
            .ok_or_else(|| Error::Checkpoint(format!("volume `{id}` lacks a lesion mask")))?
            .into_dimensionality::<Ix3>()
            .map_err(|_| dims("lesion_mask"))?,
        label: sidecar.label,
        spacing: sidecar.spacing,
        seed: sidecar.seed,
    };
    volume.validate()?;
    Ok(volume)
}

/// Writes every volume of `splits` and the split manifest under `root`.
pub fn write_dataset(root: &Path, splits: &Splits) -> Result<()> {
    for split in [Split::Train, Split::Validation, Split::Test] {
        for v in splits.get(split) {
            write_volume(root, v)?;
        }
    }
    std::fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&splits.manifest)?)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<SplitManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| invalid(format!("cannot read dataset manifest {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_split(root: &Path, split: Split) -> Result<Vec<Volume>> {
    let manifest = read_manifest(root)?;
    let ids = match split {
        Split::Train => &manifest.train,
        Split::Validation => &manifest.validation,
        Split::Test => &manifest.test,
    };
    ids.iter().map(|id| read_volume(root, id)).collect()
}
