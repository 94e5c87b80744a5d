//! Two-branch gated convolutional encoder.
//!
//! A global branch reads the image slice, a structurally identical side
//! branch reads the binary lesion mask, and their final feature maps are
//! combined by a rectified Hadamard product. The CVAE continues with a third
//! 2x pool, a dense projection, a label embedding, a merge network and
//! context gating; the classifier reuses only the branches and the gate.

use ndarray::{concatenate, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Error, Result};
use crate::nn::act::{leaky_relu, leaky_relu_grad, relu, relu_grad, sigmoid};
use crate::nn::pool::{max_pool2, ArgmaxRecord};
use crate::nn::{init, Conv2d, Dense};
use crate::params::{nest, Parameters};

/// Smallest slice side accepted by the branches (two 2x pools must leave at
/// least one pixel).
pub const MIN_SLICE_SIDE: usize = 4;

/// How the side branch participates in the gate.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SideMode {
    /// The side branch reads the lesion mask.
    #[default]
    Mask,
    /// The side feature map is fixed to all ones, so the gate reduces to
    /// `ReLU(F_g)` and the side branch is never evaluated.
    Bypass,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    pub filters: [usize; 3],
    pub kernels: [usize; 3],
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            filters: [16, 32, 64],
            kernels: [5, 3, 3],
            embed_dim: 64,
            hidden_dim: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Global,
    Side,
}

/// Activations of one branch after conv3, or the gated combination.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

impl FeatureMap {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }
}

/// conv(5x5)+ReLU+pool -> conv(3x3)+LeakyReLU+pool -> conv(3x3)+LeakyReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

/// Everything recorded by [`Branch::forward`] that the backward pass and the
/// relevance propagation need.
#[derive(Clone, Debug)]
pub struct BranchTrace {
    pub input: Array3<f64>,
    pub pre1: Array3<f64>,
    pub pool1: ArgmaxRecord,
    pub pooled1: Array3<f64>,
    pub pre2: Array3<f64>,
    pub pool2: ArgmaxRecord,
    pub pooled2: Array3<f64>,
    pub pre3: Array3<f64>,
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let [f1, f2, f3] = cfg.filters;
        let [k1, k2, k3] = cfg.kernels;
        Self {
            conv1: Conv2d::he(1, f1, k1, rng),
            conv2: Conv2d::he(f1, f2, k2, rng),
            conv3: Conv2d::he(f2, f3, k3, rng),
        }
    }

    pub fn forward(&self, input: &Array2<f64>) -> Result<(FeatureMap, BranchTrace)> {
        let (h, w) = input.dim();
        ensure(h >= MIN_SLICE_SIDE && w >= MIN_SLICE_SIDE, || {
            format!("slice {h}x{w} is smaller than the {MIN_SLICE_SIDE}x{MIN_SLICE_SIDE} minimum")
        })?;
        ensure(input.iter().all(|v| v.is_finite()), || "slice contains non-finite values".into())?;

        let input = input.clone().insert_axis(Axis(0));
        let pre1 = self.conv1.forward(&input);
        let (pooled1, pool1) = max_pool2(&pre1.mapv(relu));
        let pre2 = self.conv2.forward(&pooled1);
        let (pooled2, pool2) = max_pool2(&pre2.mapv(leaky_relu));
        let pre3 = self.conv3.forward(&pooled2);
        let out = pre3.mapv(leaky_relu);
        Ok((
            FeatureMap(out),
            BranchTrace {
                input,
                pre1,
                pool1,
                pooled1,
                pre2,
                pool2,
                pooled2,
                pre3,
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/d(output)`.
    pub fn backward(&self, trace: &BranchTrace, d_out: &Array3<f64>, grad: &mut Branch) {
        let d_pre3 = d_out * &trace.pre3.mapv(leaky_relu_grad);
        let d_pooled2 = self
            .conv3
            .backward(&trace.pooled2, &d_pre3, &mut grad.conv3, true)
            .expect("requested");
        let d_pre2 = trace.pool2.scatter(&d_pooled2) * &trace.pre2.mapv(leaky_relu_grad);
        let d_pooled1 = self
            .conv2
            .backward(&trace.pooled1, &d_pre2, &mut grad.conv2, true)
            .expect("requested");
        let d_pre1 = trace.pool1.scatter(&d_pooled1) * &trace.pre1.mapv(relu_grad);
        self.conv1.backward(&trace.input, &d_pre1, &mut grad.conv1, false);
    }

    /// Parameter shapes in declaration order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|(_, a)| a.shape().to_vec()).collect()
    }
}

impl Parameters for Branch {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("conv1", self.conv1.params()));
        out.extend(nest("conv2", self.conv2.params()));
        out.extend(nest("conv3", self.conv3.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("conv1", self.conv1.params_mut()));
        out.extend(nest("conv2", self.conv2.params_mut()));
        out.extend(nest("conv3", self.conv3.params_mut()));
        out
    }
}

/// Elementwise gate `ReLU(F_g ⊙ F_s)`.
pub fn gate(global: &FeatureMap, side: &FeatureMap) -> Result<FeatureMap> {
    if global.dim() != side.dim() {
        let (a, b) = (global.dim(), side.dim());
        return Err(Error::ShapeMismatch {
            name: "gate inputs".into(),
            expected: vec![a.0, a.1, a.2],
            found: vec![b.0, b.1, b.2],
        });
    }
    Ok(FeatureMap((&global.0 * &side.0).mapv(relu)))
}

/// Returns (dL/dF_g, dL/dF_s).
pub fn gate_backward(global: &Array3<f64>, side: &Array3<f64>, d_out: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let mut d_global = Array3::zeros(global.raw_dim());
    let mut d_side = Array3::zeros(side.raw_dim());
    ndarray::Zip::from(&mut d_global)
        .and(&mut d_side)
        .and(global)
        .and(side)
        .and(d_out)
        .for_each(|dg, ds, &g, &s, &d| {
            if g * s > 0.0 {
                *dg = d * s;
                *ds = d * g;
            }
        });
    (d_global, d_side)
}

/// The two convolutional branches and their gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub global: Branch,
    pub side: Branch,
}

#[derive(Clone, Debug)]
pub struct TrunkTrace {
    pub global: BranchTrace,
    /// `None` when the side branch was bypassed.
    pub side: Option<BranchTrace>,
    pub global_out: Array3<f64>,
    pub side_out: Array3<f64>,
    pub gated: Array3<f64>,
}

impl Trunk {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            global: Branch::new(cfg, rng),
            side: Branch::new(cfg, rng),
        }
    }

    pub fn branch(&self, which: BranchKind) -> &Branch {
        match which {
            BranchKind::Global => &self.global,
            BranchKind::Side => &self.side,
        }
    }

    pub fn forward(&self, image: &Array2<f64>, mask: &Array2<f64>, side_mode: SideMode) -> Result<(FeatureMap, TrunkTrace)> {
        ensure(image.dim() == mask.dim(), || {
            format!("image {:?} and mask {:?} differ in shape", image.dim(), mask.dim())
        })?;
        let (global_out, global) = self.global.forward(image)?;
        let (side_out, side) = match side_mode {
            SideMode::Mask => {
                let (out, trace) = self.side.forward(mask)?;
                (out, Some(trace))
            }
            SideMode::Bypass => (FeatureMap(Array3::ones(global_out.0.raw_dim())), None),
        };
        let gated = gate(&global_out, &side_out)?;
        Ok((
            gated.clone(),
            TrunkTrace {
                global,
                side,
                global_out: global_out.0,
                side_out: side_out.0,
                gated: gated.0,
            },
        ))
    }

    pub fn backward(&self, trace: &TrunkTrace, d_gated: &Array3<f64>, grad: &mut Trunk) {
        let (d_global, d_side) = gate_backward(&trace.global_out, &trace.side_out, d_gated);
        self.global.backward(&trace.global, &d_global, &mut grad.global);
        if let Some(side) = &trace.side {
            self.side.backward(side, &d_side, &mut grad.side);
        }
    }
}

impl Parameters for Trunk {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("global", self.global.params()));
        out.extend(nest("side", self.side.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("global", self.global.params_mut()));
        out.extend(nest("side", self.side.params_mut()));
        out
    }
}

/// Runs one branch of `trunk` on a single-channel slice.
pub fn branch_forward(input: &Array2<f64>, which: BranchKind, trunk: &Trunk) -> Result<FeatureMap> {
    trunk.branch(which).forward(input).map(|(out, _)| out)
}

/// Row `label` of the embedding table; the embedding network is a one-hot
/// lookup followed by the identity.
pub fn embed_label(label: u8, table: &Array2<f64>) -> Result<Array1<f64>> {
    ensure(label <= 1, || format!("label must be 0 or 1, got {label}"))?;
    ensure(table.nrows() == 2, || format!("embedding table needs 2 rows, has {}", table.nrows()))?;
    Ok(table.row(label as usize).to_owned())
}

#[derive(Clone, Debug)]
pub struct MergeTrace {
    pub flat: Array1<f64>,
    pub hidden_pre: Array1<f64>,
    pub joined: Array1<f64>,
    pub merged_pre: Array1<f64>,
}

/// Flatten -> dense + LeakyReLU -> concatenate with the label embedding ->
/// dense + LeakyReLU.
pub fn merge(features: &FeatureMap, embedding: &Array1<f64>, pre_merge: &Dense, merge_net: &Dense) -> Result<Array1<f64>> {
    merge_traced(features, embedding, pre_merge, merge_net).map(|(f, _)| f)
}

fn merge_traced(
    features: &FeatureMap,
    embedding: &Array1<f64>,
    pre_merge: &Dense,
    merge_net: &Dense,
) -> Result<(Array1<f64>, MergeTrace)> {
    let flat = Array1::from_iter(features.0.iter().cloned());
    ensure(flat.len() == pre_merge.inputs(), || {
        format!("flattened features have {} values, merge expects {}", flat.len(), pre_merge.inputs())
    })?;
    let hidden_pre = pre_merge.forward(flat.view());
    let hidden = hidden_pre.mapv(leaky_relu);
    let joined = concatenate(Axis(0), &[hidden.view(), embedding.view()]).expect("1-d");
    ensure(joined.len() == merge_net.inputs(), || {
        format!("merge input has {} values, network expects {}", joined.len(), merge_net.inputs())
    })?;
    let merged_pre = merge_net.forward(joined.view());
    Ok((
        merged_pre.mapv(leaky_relu),
        MergeTrace {
            flat,
            hidden_pre,
            joined,
            merged_pre,
        },
    ))
}

/// Elementwise recalibration `gate ⊙ f`.
pub fn apply_gate(f: &Array1<f64>, gate_values: &Array1<f64>) -> Array1<f64> {
    f * gate_values
}

/// `sigmoid(cg(f)) ⊙ f`.
pub fn context_gate(f: &Array1<f64>, cg: &Dense) -> Array1<f64> {
    apply_gate(f, &cg.forward(f.view()).mapv(sigmoid))
}

/// Encoder parameters shared by the prior and posterior heads of the CVAE.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub trunk: Trunk,
    pub embed_table: Array2<f64>,
    pub pre_merge: Dense,
    pub merge: Dense,
    pub cg: Dense,
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub trunk: TrunkTrace,
    pub pool3: ArgmaxRecord,
    pub label: u8,
    pub merge: MergeTrace,
    pub merged: Array1<f64>,
    pub cg_pre: Array1<f64>,
    pub cg_gate: Array1<f64>,
}

/// Number of gated features entering the dense projection for a slice of
/// `height x width` (after two branch pools and the third pool).
pub fn flattened_len(cfg: &EncoderConfig, height: usize, width: usize) -> usize {
    cfg.filters[2] * (height / 8) * (width / 8)
}

impl EncoderState {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        ensure(height >= 8 && width >= 8, || {
            format!("encoder needs slices of at least 8x8, got {height}x{width}")
        })?;
        let trunk = Trunk::new(cfg, rng);
        let embed_table = init::normal(&[2, cfg.embed_dim], 1.0, rng)
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        let flat = flattened_len(cfg, height, width);
        Ok(Self {
            trunk,
            embed_table,
            pre_merge: Dense::he(flat, cfg.hidden_dim, rng),
            merge: Dense::he(cfg.hidden_dim + cfg.embed_dim, cfg.hidden_dim, rng),
            cg: Dense::scaled(cfg.hidden_dim, cfg.hidden_dim, (1.0 / cfg.hidden_dim as f64).sqrt(), rng),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.merge.outputs()
    }

    /// Full encoder: branches, gate, third pool, merge with the label
    /// embedding, context gating.
    pub fn forward(&self, image: &Array2<f64>, mask: &Array2<f64>, label: u8, side_mode: SideMode) -> Result<(Array1<f64>, EncoderTrace)> {
        let (gated, trunk) = self.trunk.forward(image, mask, side_mode)?;
        let (pooled, pool3) = max_pool2(&gated.0);
        let embedding = embed_label(label, &self.embed_table)?;
        let (merged, merge) = merge_traced(&FeatureMap(pooled), &embedding, &self.pre_merge, &self.merge)?;
        let cg_pre = self.cg.forward(merged.view());
        let cg_gate = cg_pre.mapv(sigmoid);
        let out = apply_gate(&merged, &cg_gate);
        Ok((
            out,
            EncoderTrace {
                trunk,
                pool3,
                label,
                merge,
                merged,
                cg_pre,
                cg_gate,
            },
        ))
    }

    pub fn backward(&self, trace: &EncoderTrace, d_out: &Array1<f64>, grad: &mut EncoderState) {
        // out = s(cg(f)) * f
        let s = &trace.cg_gate;
        let d_cg_pre = d_out * &trace.merged * s * &s.mapv(|v| 1.0 - v);
        let mut d_merged = d_out * s;
        d_merged += &self.cg.backward(trace.merged.view(), d_cg_pre.view(), &mut grad.cg);

        let d_merged_pre = d_merged * trace.merge.merged_pre.mapv(leaky_relu_grad);
        let d_joined = self
            .merge
            .backward(trace.merge.joined.view(), d_merged_pre.view(), &mut grad.merge);
        let hidden = self.pre_merge.outputs();
        let d_hidden = d_joined.slice(ndarray::s![..hidden]).to_owned();
        let d_embed = d_joined.slice(ndarray::s![hidden..]);
        grad.embed_table
            .row_mut(trace.label as usize)
            .scaled_add(1.0, &d_embed);

        let d_hidden_pre = d_hidden * trace.merge.hidden_pre.mapv(leaky_relu_grad);
        let d_flat = self
            .pre_merge
            .backward(trace.merge.flat.view(), d_hidden_pre.view(), &mut grad.pre_merge);
        let (c, h, w) = trace.pool3.winners.dim();
        let d_pooled = d_flat.into_shape_with_order((c, h, w)).expect("contiguous");
        let d_gated = trace.pool3.scatter(&d_pooled);
        self.trunk.backward(&trace.trunk, &d_gated, &mut grad.trunk);
    }
}

impl Parameters for EncoderState {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("trunk", self.trunk.params()));
        out.push(("embed_table".into(), self.embed_table.view().into_dyn()));
        out.extend(nest("pre_merge", self.pre_merge.params()));
        out.extend(nest("merge", self.merge.params()));
        out.extend(nest("cg", self.cg.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(nest("trunk", self.trunk.params_mut()));
        out.push(("embed_table".into(), self.embed_table.view_mut().into_dyn()));
        out.extend(nest("pre_merge", self.pre_merge.params_mut()));
        out.extend(nest("merge", self.merge.params_mut()));
        out.extend(nest("cg", self.cg.params_mut()));
        out
    }
}

/// Validates that `label` is binary.
pub fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        Err(invalid(format!("label must be 0 or 1, got {label}")))
    } else {
        Ok(())
    }
}
