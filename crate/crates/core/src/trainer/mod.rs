//! Epoch loop, dev scoring, per-epoch checkpoints and checkpoint averaging.

mod checkpoint;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{average_checkpoints, checkpoint_path, list_checkpoints, load_checkpoint, save_checkpoint, Checkpoint};

use crate::dataio::{make_batch_from, mix_seed, unaugmented_features, AugmentConfig, Batch, ClipSource, ManifestEntry, Pipeline};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::losses::{compute_loss, estimate_min_duration, LossConfig, LossKind, PosteriorBatch};
use crate::models::KwsModel;
use crate::nncore::{Adam, AdamConfig, Graph, Mode, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub average_top_n: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 128,
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            seed: 777,
            average_top_n: 30,
            clip_norm: Some(5.0),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.average_top_n == 0 || (self.epochs > 0 && self.average_top_n > self.epochs) {
            return Err(Error::InvalidConfig(format!(
                "average_top_n {} must be in 1..={}",
                self.average_top_n, self.epochs
            )));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidConfig("clip_norm must be positive".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub min_duration_frames: usize,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";

/// Unaugmented features computed once per utterance.
struct FeatureCache {
    feats: HashMap<String, FeatureMatrix>,
}

impl FeatureCache {
    fn build(source: &dyn ClipSource, entries: &[ManifestEntry], pipeline: &Pipeline) -> Result<Self> {
        let cfg = pipeline.features();
        let feats: Vec<(String, FeatureMatrix)> = entries
            .par_iter()
            .map(|e| Ok((e.key.clone(), unaugmented_features(source, e, cfg)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            feats: feats.into_iter().collect(),
        })
    }

    fn batch(&self, entries: &[ManifestEntry]) -> Result<Batch> {
        let feats: Vec<FeatureMatrix> = entries.iter().map(|e| self.feats[&e.key].clone()).collect();
        let ends = entries
            .iter()
            .zip(&feats)
            .map(|(e, f)| e.end_frame.map(|v| v.clamp(1, f.frames.max(1))))
            .collect();
        Batch::collate(feats, entries, ends)
    }
}

/// Loss of a model on a batch in inference mode.
fn batch_loss(model: &KwsModel<f32>, batch: &Batch, loss: &LossConfig, m: usize, epoch: usize) -> Result<Vec<f64>> {
    let out = model.forward_raw(&batch.features, batch.dim, &batch.lengths, batch.max_frames)?;
    let post = PosteriorBatch {
        values: out.data(),
        frames: batch.max_frames,
        num_keywords: model.num_keywords,
        lengths: &batch.lengths,
        labels: &batch.labels,
        end_frames: &batch.end_frames,
    };
    Ok(compute_loss(&post, loss, m, epoch)?.result.per_utterance)
}

/// Mean per-utterance loss over `entries`: no augmentation, no parameter update.
pub fn evaluate_dev(
    model: &KwsModel<f32>,
    source: &dyn ClipSource,
    entries: &[ManifestEntry],
    loss: &LossConfig,
    m: usize,
    epoch: usize,
) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let pipeline = Pipeline::new(&model.feature_config, AugmentConfig::none())?;
    let cache = FeatureCache::build(source, entries, &pipeline)?;
    dev_loss_cached(model, &cache, entries, loss, m, epoch, 128)
}

fn dev_loss_cached(
    model: &KwsModel<f32>,
    cache: &FeatureCache,
    entries: &[ManifestEntry],
    loss: &LossConfig,
    m: usize,
    epoch: usize,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in entries.chunks(batch_size) {
        let batch = cache.batch(chunk)?;
        total += batch_loss(model, &batch, loss, m, epoch)?.iter().sum::<f64>();
    }
    Ok(total / entries.len() as f64)
}

/// Minimum duration used by the loss: configured, or estimated from the training positives.
pub fn resolve_min_duration(source: &dyn ClipSource, train: &[ManifestEntry], model: &KwsModel<f32>, loss: &LossConfig) -> Result<usize> {
    if let Some(m) = loss.min_duration_frames {
        return Ok(m);
    }
    if !matches!(loss.kind, LossKind::MaxPooling | LossKind::WeaklyConstraint) {
        return Ok(0);
    }
    estimate_min_duration(source, train, &model.feature_config, loss.min_duration_quantile, loss.min_duration_scale)
}

fn clip_gradients(model: &mut KwsModel<f32>, max_norm: f64) -> f64 {
    let sq: f64 = model
        .params
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in model.params.iter_mut().filter(|p| p.trainable) {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

/// One optimisation step on a batch; returns the per-utterance losses.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut KwsModel<f32>,
    opt: &mut Adam<f32>,
    batch: &Batch,
    loss: &LossConfig,
    m: usize,
    epoch: usize,
    clip_norm: Option<f64>,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(batch.lengths.clone(), batch.max_frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = model.record(&mut g, &batch.features, batch.dim, Mode::Train, Some(&mut rng))?;
    let post = PosteriorBatch {
        values: g.value(rec.output).data(),
        frames: batch.max_frames,
        num_keywords: model.num_keywords,
        lengths: &batch.lengths,
        labels: &batch.labels,
        end_frames: &batch.end_frames,
    };
    let out = compute_loss(&post, loss, m, epoch)?;
    let l = g.external_loss(rec.output, f32::of(out.result.value), out.grad)?;
    let grads = g.backward(l)?;
    model.params.zero_grad();
    model.accumulate_grads(&rec, &grads);
    if let Some(c) = clip_norm {
        clip_gradients(model, c);
    }
    opt.step(&mut model.params).map_err(|e| {
        let keys = batch.keys.join(",");
        log::error!("non-finite gradient on batch [{keys}]");
        match e {
            Error::NonFiniteGradient(p) => Error::NonFiniteGradient(format!("{p} (batch keys: {keys})")),
            other => other,
        }
    })?;
    Ok(out.result.per_utterance)
}

/// Training state at the start of an epoch.
pub struct TrainState {
    pub model: KwsModel<f32>,
    pub optimizer: Adam<f32>,
    /// Last completed epoch.
    pub epoch: usize,
}

/// Runs the epoch loop, writing one checkpoint per epoch and a JSON Lines log into `dir`.
pub fn train(
    model: &mut KwsModel<f32>,
    source: &dyn ClipSource,
    train_entries: &[ManifestEntry],
    dev_entries: &[ManifestEntry],
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<TrainSummary> {
    let state = TrainState {
        model: model.clone(),
        optimizer: Adam::new(cfg.optimizer),
        epoch: 0,
    };
    let (summary, trained) = run_epochs(state, source, train_entries, dev_entries, cfg, dir, Vec::new())?;
    *model = trained;
    Ok(summary)
}

/// Continues training from a checkpoint written by [`train`]; the continuation is identical
/// to an uninterrupted run. Log records after the checkpoint's epoch are discarded.
pub fn resume(
    checkpoint: &Path,
    source: &dyn ClipSource,
    train_entries: &[ManifestEntry],
    dev_entries: &[ManifestEntry],
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(TrainSummary, KwsModel<f32>)> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.info.seed != cfg.seed {
        return Err(Error::InvalidConfig(format!(
            "checkpoint was trained with seed {}, config has {}",
            ck.info.seed, cfg.seed
        )));
    }
    let mut optimizer = Adam::new(cfg.optimizer);
    optimizer.states = ck.optimizer;
    let log_path = dir.join(LOG_FILE);
    let mut previous = Vec::new();
    if log_path.exists() {
        let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: EpochRecord = serde_json::from_str(line)?;
            if rec.epoch <= ck.info.epoch {
                previous.push(rec);
            }
        }
    }
    let mut cfg = cfg.clone();
    cfg.loss.min_duration_frames = Some(ck.info.min_duration_frames);
    let state = TrainState {
        model: ck.model,
        optimizer,
        epoch: ck.info.epoch,
    };
    let (summary, model) = run_epochs(state, source, train_entries, dev_entries, &cfg, dir, previous)?;
    Ok((summary, model))
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn run_epochs(
    mut state: TrainState,
    source: &dyn ClipSource,
    train_entries: &[ManifestEntry],
    dev_entries: &[ManifestEntry],
    cfg: &TrainConfig,
    dir: &Path,
    mut records: Vec<EpochRecord>,
) -> Result<(TrainSummary, KwsModel<f32>)> {
    cfg.validate()?;
    if train_entries.is_empty() || dev_entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = resolve_min_duration(source, train_entries, &state.model, &cfg.loss)?;
    log::info!("minimum duration m = {m} frames");
    let pipeline = Pipeline::new(&state.model.feature_config, cfg.augment.clone())?;
    let plain = Pipeline::new(&state.model.feature_config, AugmentConfig::none())?;
    let dev_cache = FeatureCache::build(source, dev_entries, &plain)?;
    let train_cache = if cfg.augment.is_identity() {
        Some(FeatureCache::build(source, train_entries, &plain)?)
    } else {
        None
    };
    let log_path = dir.join(LOG_FILE);
    write_log(&log_path, &records)?;
    let mut checkpoints = Vec::new();
    for epoch in state.epoch + 1..=cfg.epochs {
        let start = Instant::now();
        let epoch_seed = mix_seed(cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..train_entries.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let entries: Vec<ManifestEntry> = idx.iter().map(|&i| train_entries[i].clone()).collect();
            let batch_seed = mix_seed(epoch_seed, bi as u64);
            let batch = match &train_cache {
                Some(cache) => cache.batch(&entries)?,
                None => make_batch_from(source, &entries, &pipeline, batch_seed)?,
            };
            let losses = train_step(
                &mut state.model,
                &mut state.optimizer,
                &batch,
                &cfg.loss,
                m,
                epoch,
                cfg.clip_norm,
                mix_seed(batch_seed, 1),
            )?;
            loss_sum += losses.iter().sum::<f64>();
        }
        let train_loss = loss_sum / train_entries.len() as f64;
        let dev_loss = dev_loss_cached(&state.model, &dev_cache, dev_entries, &cfg.loss, m, epoch, cfg.batch_size)?;
        let seconds = (start.elapsed().as_secs_f64() * 1000.0).round() / 1000.0;
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            seconds,
        };
        log::info!("epoch {epoch}: train {train_loss:.6} dev {dev_loss:.6} ({seconds:.1}s)");
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
        records.push(record);
        let ck = Checkpoint {
            model: state.model.clone(),
            optimizer: state.optimizer.states.clone(),
            info: crate::container::CheckpointInfo {
                epoch,
                dev_metric: dev_loss,
                step: state.optimizer.step_count(),
                seed: cfg.seed,
                min_duration_frames: m,
            },
        };
        let path = checkpoint_path(dir, epoch);
        save_checkpoint(&ck, &path)?;
        checkpoints.push(path);
        state.epoch = epoch;
    }
    Ok((
        TrainSummary {
            records,
            min_duration_frames: m,
            checkpoints,
        },
        state.model,
    ))
}
