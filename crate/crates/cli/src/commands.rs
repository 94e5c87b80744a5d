//! One function per subcommand. Each writes its artifacts, a snapshot of
//! the resolved configuration and a run manifest into its output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use ndarray::{Array3, Axis};
use sidegate::checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, write_container, CheckpointMeta, NamedArray};
use sidegate::classifier::{classify_volume, train_classifier, ClassifierState, Initialization};
use sidegate::cvae::{train_cvae, write_loss_trace, CvaeConfig, CvaeState};
use sidegate::encoder::SideMode;
use sidegate::explain::{explain_volume, DEFAULT_SMOOTHING_SIGMA};
use sidegate::metrics::evaluate as evaluate_scores;
use sidegate::phantom::{generate_dataset, make_splits, read_manifest, read_split, read_volume, write_dataset, Split};
use sidegate::render::{save_heatmap, save_overlay, save_roc_plot, Polarity};
use sidegate::seeded_rng;

use crate::config::RunConfig;
use crate::manifest::{self, combined_hash, config_hash, digest, InputDigest, RunManifest};
use crate::UsageError;

pub const CVAE_MODULE: &str = "cvae";
pub const CLASSIFIER_MODULE: &str = "classifier";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
const PNG_SCALE: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Transfer from a CVAE trained with the lesion mask.
    Full,
    /// Transfer from a CVAE trained with the side branch bypassed.
    NoSide,
    /// Randomly initialised encoder without side information.
    NoCvae,
}

/// Shared bookkeeping for one command invocation.
pub struct Run {
    command: String,
    config: RunConfig,
    dir: PathBuf,
    started: Instant,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(command: &str, config: RunConfig, dir: PathBuf) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            command: command.into(),
            config,
            dir,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.outputs.push(path.clone());
        path
    }

    pub fn finish(self) -> anyhow::Result<PathBuf> {
        std::fs::write(self.dir.join("config.toml"), self.config.to_toml()?)?;
        let m = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: self.config.seed,
            config: serde_json::to_value(&self.config)?,
            input_hash: combined_hash(&self.inputs),
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        manifest::write(&self.dir, &m)?;
        Ok(self.dir)
    }
}

fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())).into())
    }
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())).into())
    }
}

pub fn generate(mut run: Run) -> anyhow::Result<PathBuf> {
    let cfg = run.config.phantom.clone();
    eprintln!("generating {} volumes", cfg.generator.num_volumes);
    let volumes = generate_dataset(&cfg.generator)?;
    let splits = make_splits(volumes, cfg.split, run.config.seed)?;
    let root = run.dir.clone();
    write_dataset(&root, &splits)?;
    run.output("volumes");
    run.output(sidegate::phantom::MANIFEST_FILE);
    run.finish()
}

pub fn train_cvae_cmd(mut run: Run, dataset: &Path) -> anyhow::Result<PathBuf> {
    require_dir(dataset, "dataset")?;
    run.input(dataset)?;
    let train = read_split(dataset, Split::Train)?;
    let model = run.config.cvae.model.clone();
    let hp = run.config.cvae.train.clone();
    let outcome = train_cvae(&train, &model, &hp, |e| {
        eprintln!("epoch {:>4}  recon {:.4}  kl {:.4}  total {:.4}", e.epoch, e.recon_term, e.kl_term, e.total)
    })?;
    let mut meta = CheckpointMeta::new(CVAE_MODULE, serde_json::to_value(&model)?);
    meta.config_hash = config_hash(&run.config)?;
    meta.epoch = outcome.trace.len();
    meta.metrics = serde_json::json!({ "final_loss": outcome.trace.last().map(|e| e.total) });
    save_checkpoint(&run.output(CHECKPOINT_FILE), &outcome.state, &meta)?;
    write_loss_trace(&outcome.trace, std::fs::File::create(run.output("loss_trace.csv"))?)?;
    run.finish()
}

fn load_cvae(path: &Path) -> anyhow::Result<CvaeState> {
    require_file(path, "CVAE checkpoint")?;
    let meta = read_checkpoint_meta(path)?;
    let cfg: CvaeConfig = serde_json::from_value(meta.config).map_err(|e| UsageError(format!("CVAE checkpoint config: {e}")))?;
    let mut state = CvaeState::new(&cfg, &mut seeded_rng(0, 0))?;
    load_checkpoint(path, CVAE_MODULE, &mut state)?;
    Ok(state)
}

pub fn load_classifier(path: &Path) -> anyhow::Result<ClassifierState> {
    require_file(path, "classifier checkpoint")?;
    let meta = read_checkpoint_meta(path)?;
    let cfg = serde_json::from_value(meta.config).map_err(|e| UsageError(format!("classifier checkpoint config: {e}")))?;
    let mut state = ClassifierState::new(&cfg, &mut seeded_rng(0, 0))?;
    load_checkpoint(path, CLASSIFIER_MODULE, &mut state)?;
    Ok(state)
}

pub fn train_classifier_cmd(mut run: Run, dataset: &Path, cvae: Option<&Path>, ablation: Ablation) -> anyhow::Result<PathBuf> {
    require_dir(dataset, "dataset")?;
    run.input(dataset)?;
    let cvae_state = match (ablation, cvae) {
        (Ablation::NoCvae, Some(_)) => {
            return Err(UsageError("--ablation no-cvae trains without a CVAE; drop --cvae".into()).into())
        }
        (Ablation::NoCvae, None) => None,
        (_, None) => return Err(UsageError(format!("--ablation {ablation:?} needs --cvae <checkpoint>")).into()),
        (_, Some(path)) => {
            let state = load_cvae(path)?;
            run.input(path)?;
            let expected = if ablation == Ablation::NoSide { SideMode::Bypass } else { SideMode::Mask };
            if state.config.side_mode != expected {
                return Err(UsageError(format!(
                    "--ablation {ablation:?} expects a CVAE trained with side mode {expected:?}, found {:?}",
                    state.config.side_mode
                ))
                .into());
            }
            Some(state)
        }
    };
    let mut model = run.config.classifier.model.clone();
    model.side_mode = if ablation == Ablation::Full { SideMode::Mask } else { SideMode::Bypass };
    run.config.classifier.model = model.clone();
    let hp = run.config.classifier.train.clone();
    let train = read_split(dataset, Split::Train)?;
    let validation = read_split(dataset, Split::Validation)?;
    let init = match &cvae_state {
        Some(s) => Initialization::Transfer(s),
        None => Initialization::Random,
    };
    let outcome = train_classifier(&train, &validation, init, &model, &hp, |e| {
        eprintln!("epoch {:>4}  train {:.6}  validation {:.6}", e.epoch, e.train_loss, e.val_loss)
    })?;

    let mut meta = CheckpointMeta::new(CLASSIFIER_MODULE, serde_json::to_value(&model)?);
    meta.config_hash = config_hash(&run.config)?;
    meta.epoch = outcome.best_epoch;
    meta.metrics = serde_json::json!({
        "ablation": ablation,
        "best_val_loss": outcome.best_val_loss,
        "epochs_run": outcome.history.len(),
        "stopped_early": outcome.stopped_early,
        "clamp_events": outcome.clamp_events,
    });
    save_checkpoint(&run.output(CHECKPOINT_FILE), &outcome.state, &meta)?;
    let mut w = csv::Writer::from_path(run.output("history.csv"))?;
    for record in &outcome.history {
        w.serialize(record)?;
    }
    w.flush()?;
    run.finish()
}

pub fn evaluate_cmd(mut run: Run, checkpoint: &Path, dataset: &Path, split: Split) -> anyhow::Result<PathBuf> {
    let state = load_classifier(checkpoint)?;
    require_dir(dataset, "dataset")?;
    run.input(checkpoint)?;
    run.input(dataset)?;
    let volumes = read_split(dataset, split)?;
    if volumes.is_empty() {
        return Err(UsageError(format!("split {split:?} of {} is empty", dataset.display())).into());
    }
    let mut w = csv::Writer::from_path(run.output("predictions.csv"))?;
    w.write_record(["volume_id", "p_neg", "p_pos", "label"])?;
    let mut scores = Vec::with_capacity(volumes.len());
    let mut labels = Vec::with_capacity(volumes.len());
    for v in &volumes {
        let (p_neg, p_pos) = classify_volume(v, &state)?;
        w.write_record([v.id.clone(), p_neg.to_string(), p_pos.to_string(), v.label.to_string()])?;
        scores.push(p_pos);
        labels.push(v.label);
    }
    w.flush()?;
    let result = evaluate_scores(&scores, &labels, &run.config.metrics)?;
    std::fs::write(run.output("metrics.json"), serde_json::to_string_pretty(&result)?)?;
    save_roc_plot(&result.roc, &result.roc_band, &run.output("roc.png"))?;
    eprintln!(
        "AUC {:.4} [{:.4}, {:.4}]  sensitivity {:?}  specificity {:?}  F1 {:?}",
        result.auc, result.auc_ci.low, result.auc_ci.high, result.confusion.sensitivity, result.confusion.specificity, result.confusion.f1
    );
    run.finish()
}

pub struct ExplainRequest<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub volume_id: &'a str,
    pub class_index: u8,
    pub smooth: bool,
    pub signed: bool,
}

pub fn explain_cmd(mut run: Run, req: ExplainRequest<'_>) -> anyhow::Result<PathBuf> {
    let state = load_classifier(req.checkpoint)?;
    require_dir(req.dataset, "dataset")?;
    read_manifest(req.dataset)?;
    run.input(req.checkpoint)?;
    let volume = read_volume(req.dataset, req.volume_id)?;
    run.input(&sidegate::phantom::volume_dir(req.dataset, req.volume_id))?;
    let mut cfg = run.config.explain.clone();
    if req.smooth && cfg.smoothing_sigma.is_none() {
        cfg.smoothing_sigma = Some(DEFAULT_SMOOTHING_SIGMA);
    }
    run.config.explain = cfg.clone();
    let map = explain_volume(&state, &volume, req.class_index, &cfg)?;
    let polarity = if req.signed { Polarity::Signed } else { Polarity::PositiveOnly };

    for (s, (img, mask)) in map.image_relevance.iter().zip(&map.mask_relevance).enumerate() {
        let (slice, _) = volume.slice_pair(s);
        save_heatmap(img, polarity, PNG_SCALE, &run.output(&format!("slice{s:03}_image.png")))?;
        save_heatmap(mask, polarity, PNG_SCALE, &run.output(&format!("slice{s:03}_mask.png")))?;
        save_overlay(&slice, img, polarity, PNG_SCALE, &run.output(&format!("slice{s:03}_overlay.png")))?;
    }
    let stack = |maps: &[ndarray::Array2<f64>]| -> anyhow::Result<Array3<f64>> {
        let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
        Ok(ndarray::stack(Axis(0), &views)?)
    };
    let arrays = vec![
        ("image_relevance".to_string(), NamedArray::F64(stack(&map.image_relevance)?.into_dyn())),
        ("mask_relevance".to_string(), NamedArray::F64(stack(&map.mask_relevance)?.into_dyn())),
    ];
    let meta = serde_json::json!({
        "volume_id": req.volume_id,
        "class_index": req.class_index,
        "stage_sums": map.stage_sums,
    });
    write_container(&run.output("relevance.safetensors"), &arrays, &meta)?;
    std::fs::write(run.output("stage_sums.json"), serde_json::to_string_pretty(&map.stage_sums)?)?;
    run.finish()
}
