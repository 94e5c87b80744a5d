//! Diagnosis-quality metrics: confusion rates, ROC/AUC, stratified
//! percentile bootstrap intervals and FPR at a fixed TPR.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};
use crate::seeded_rng;

/// A rate that may be undefined because its denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rate {
    Value(f64),
    Undefined,
}

impl Rate {
    fn ratio(num: usize, den: usize) -> Self {
        if den == 0 {
            Rate::Undefined
        } else {
            Rate::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Rate::Value(v) => Some(v),
            Rate::Undefined => None,
        }
    }
}

/// Marker written in place of an undefined rate.
pub const UNDEFINED: &str = "undefined";

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RateRepr {
    Value(f64),
    Marker(String),
}

impl Serialize for Rate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Rate::Value(v) => RateRepr::Value(v),
            Rate::Undefined => RateRepr::Marker(UNDEFINED.into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match RateRepr::deserialize(d)? {
            RateRepr::Value(v) => Ok(Rate::Value(v)),
            RateRepr::Marker(m) if m == UNDEFINED => Ok(Rate::Undefined),
            RateRepr::Marker(m) => Err(serde::de::Error::custom(format!("unknown rate marker {m:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub confusion: Confusion,
    pub sensitivity: Rate,
    pub specificity: Rate,
    pub precision: Rate,
    pub f1: Rate,
}

impl ConfusionMetrics {
    pub fn from_counts(confusion: Confusion) -> Self {
        let Confusion { tp, tn, fp, fn_ } = confusion;
        // F1 = 2PR/(P+R) simplifies to 2TP/(2TP+FP+FN).
        Self {
            confusion,
            sensitivity: Rate::ratio(tp, tp + fn_),
            specificity: Rate::ratio(tn, tn + fp),
            precision: Rate::ratio(tp, tp + fp),
            f1: Rate::ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

fn check_labels(labels: &[u8]) -> Result<()> {
    ensure(labels.iter().all(|&l| l <= 1), || "labels must be 0 or 1".into())
}

/// Confusion counts and rates for binary predictions against labels.
pub fn confusion_metrics(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMetrics> {
    ensure(predictions.len() == labels.len(), || {
        format!("{} predictions for {} labels", predictions.len(), labels.len())
    })?;
    check_labels(labels)?;
    check_labels(predictions)?;
    let mut c = Confusion::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(ConfusionMetrics::from_counts(c))
}

/// Binary predictions `p >= threshold`.
pub fn threshold_predictions(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Items with `score >= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    /// From (0, 0) at threshold +inf to (1, 1), one point per distinct score.
    pub points: Vec<RocPoint>,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    ensure(scores.len() == labels.len(), || {
        format!("{} scores for {} labels", scores.len(), labels.len())
    })?;
    check_labels(labels)?;
    ensure(scores.iter().all(|s| !s.is_nan()), || "scores contain NaN".into())?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid("ROC analysis needs both classes present"));
    }
    Ok((pos, neg))
}

/// Twice the Mann-Whitney U statistic of the positives, from midranks.
/// Working in doubled ranks keeps everything in integers.
fn doubled_u(scores: &[f64], labels: &[u8], pos: usize) -> u64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end+1 share the midrank (start+end+2)/2.
        let doubled_midrank = (start + end + 2) as u64;
        let tied_pos = order[start..=end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        doubled_rank_sum += doubled_midrank * tied_pos;
        start = end + 1;
    }
    let pos = pos as u64;
    doubled_rank_sum - pos * (pos + 1)
}

/// Area under the ROC curve via the midrank statistic.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    Ok(doubled_u(scores, labels, pos) as f64 / (2 * pos * neg) as f64)
}

/// AUC and the empirical ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve {
        auc: doubled_u(scores, labels, pos) as f64 / (2 * pos * neg) as f64,
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FprAtTpr {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
    /// False when no threshold reaches the target; the values then belong to
    /// the threshold with the highest TPR.
    pub reached: bool,
}

/// Smallest empirical FPR among thresholds whose TPR reaches `target`.
pub fn fpr_at_tpr(scores: &[f64], labels: &[u8], target: f64) -> Result<FprAtTpr> {
    ensure(!target.is_nan(), || "TPR target is NaN".into())?;
    let curve = roc_auc(scores, labels)?;
    let best = curve
        .points
        .iter()
        .filter(|p| p.tpr >= target)
        .min_by(|a, b| a.fpr.total_cmp(&b.fpr));
    let (point, reached) = match best {
        Some(p) => (*p, true),
        None => {
            let top = curve
                .points
                .iter()
                .max_by(|a, b| a.tpr.total_cmp(&b.tpr).then(b.fpr.total_cmp(&a.fpr)))
                .expect("curve has points");
            (*top, false)
        }
    };
    Ok(FprAtTpr {
        fpr: point.fpr,
        tpr: point.tpr,
        threshold: point.threshold,
        reached,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Draws the stratified resamples: iteration `it` uses its own seeded
/// stream, so results do not depend on evaluation order.
fn stratified_resamples(
    scores: &[f64],
    labels: &[u8],
    config: &BootstrapConfig,
    mut visit: impl FnMut(&[f64], &[u8]) -> Result<()>,
) -> Result<()> {
    class_counts(scores, labels)?;
    ensure(config.iterations >= 1, || "bootstrap needs at least one iteration".into())?;
    ensure(config.level > 0.0 && config.level < 1.0, || {
        format!("confidence level must lie in (0, 1), got {}", config.level)
    })?;
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let mut s = Vec::with_capacity(scores.len());
    let mut l = Vec::with_capacity(scores.len());
    for it in 0..config.iterations {
        let mut rng = seeded_rng(config.seed, it as u64);
        s.clear();
        l.clear();
        for class in [&positives, &negatives] {
            for _ in 0..class.len() {
                let i = class[rng.gen_range(0..class.len())];
                s.push(scores[i]);
                l.push(labels[i]);
            }
        }
        visit(&s, &l)?;
    }
    Ok(())
}

fn percentile_interval(mut stats: Vec<f64>, level: f64) -> Result<Interval> {
    ensure(stats.iter().all(|v| !v.is_nan()), || "bootstrap statistic produced NaN".into())?;
    stats.sort_by(f64::total_cmp);
    Ok(Interval {
        low: quantile(&stats, (1.0 - level) / 2.0),
        high: quantile(&stats, (1.0 + level) / 2.0),
    })
}

/// Stratified percentile bootstrap: positives and negatives are each
/// resampled with replacement from their own class.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    config: &BootstrapConfig,
    statistic: impl Fn(&[f64], &[u8]) -> Result<f64>,
) -> Result<Interval> {
    let mut stats = Vec::with_capacity(config.iterations);
    stratified_resamples(scores, labels, config, |s, l| {
        stats.push(statistic(s, l)?);
        Ok(())
    })?;
    percentile_interval(stats, config.level)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub fpr: f64,
    pub low: f64,
    pub high: f64,
}

/// TPR of the empirical ROC at a given FPR (step function, upper value at
/// vertical segments).
fn tpr_at_fpr(points: &[RocPoint], fpr: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fpr <= fpr + 1e-12)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// Pointwise percentile band of the ROC curve over stratified bootstrap
/// resamples, on `grid` evenly spaced FPR values.
pub fn roc_confidence_band(scores: &[f64], labels: &[u8], config: &BootstrapConfig, grid: usize) -> Result<Vec<BandPoint>> {
    ensure(grid >= 2, || "ROC band needs at least two grid points".into())?;
    let fprs: Vec<f64> = (0..grid).map(|i| i as f64 / (grid - 1) as f64).collect();
    let mut samples = vec![Vec::with_capacity(config.iterations); grid];
    stratified_resamples(scores, labels, config, |s, l| {
        let curve = roc_auc(s, l)?;
        for (f, column) in fprs.iter().zip(samples.iter_mut()) {
            column.push(tpr_at_fpr(&curve.points, *f));
        }
        Ok(())
    })?;
    fprs.iter()
        .zip(samples)
        .map(|(&fpr, column)| {
            let ci = percentile_interval(column, config.level)?;
            Ok(BandPoint {
                fpr,
                low: ci.low,
                high: ci.high,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub tpr_target: f64,
    pub bootstrap: BootstrapConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            tpr_target: 0.95,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FprSummary {
    pub target_tpr: f64,
    #[serde(flatten)]
    pub point: FprAtTpr,
    pub ci: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n: usize,
    pub threshold: f64,
    #[serde(flatten)]
    pub confusion: ConfusionMetrics,
    pub auc: f64,
    pub auc_ci: Interval,
    pub fpr_at_tpr: FprSummary,
    pub interval_method: String,
    pub bootstrap: BootstrapConfig,
    pub roc: Vec<RocPoint>,
    pub roc_band: Vec<BandPoint>,
}

/// FPR grid resolution of the ROC band in [`EvalResult`].
pub const ROC_BAND_GRID: usize = 51;

/// Full evaluation of probability scores against labels.
pub fn evaluate(scores: &[f64], labels: &[u8], config: &EvalConfig) -> Result<EvalResult> {
    let curve = roc_auc(scores, labels)?;
    let confusion = confusion_metrics(&threshold_predictions(scores, config.threshold), labels)?;
    let auc_ci = bootstrap_ci(scores, labels, &config.bootstrap, auc)?;
    let target = config.tpr_target;
    let point = fpr_at_tpr(scores, labels, target)?;
    let fpr_ci = bootstrap_ci(scores, labels, &config.bootstrap, |s, l| fpr_at_tpr(s, l, target).map(|r| r.fpr))?;
    Ok(EvalResult {
        n: scores.len(),
        threshold: config.threshold,
        confusion,
        auc: curve.auc,
        auc_ci,
        fpr_at_tpr: FprSummary {
            target_tpr: target,
            point,
            ci: fpr_ci,
        },
        interval_method: "stratified percentile bootstrap".into(),
        bootstrap: config.bootstrap,
        roc: curve.points,
        roc_band: roc_confidence_band(scores, labels, &config.bootstrap, ROC_BAND_GRID)?,
    })
}
