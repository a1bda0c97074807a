use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::container::{model_container, model_from_container, CheckpointInfo, Container, ModelMetadata, NamedTensor};
use crate::error::{Error, Result};
use crate::models::KwsModel;
use crate::nncore::{AdamState, Tensor};

/// Model, optimizer state and bookkeeping at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: KwsModel<f32>,
    pub optimizer: BTreeMap<String, AdamState<f32>>,
    pub info: CheckpointInfo,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.kwsf"))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut meta = ModelMetadata::of(&ck.model);
    meta.checkpoint = Some(ck.info.clone());
    let mut extra = Vec::new();
    for (name, st) in &ck.optimizer {
        extra.push(NamedTensor::f32(format!("adam.m.{name}"), &st.m));
        extra.push(NamedTensor::f32(format!("adam.v.{name}"), &st.v));
    }
    model_container(&ck.model, meta, extra).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let container = Container::load(path)?;
    let (model, meta) = model_from_container(&container)?;
    let info = meta
        .checkpoint
        .ok_or_else(|| Error::Container(format!("{} is not a checkpoint", path.display())))?;
    let mut optimizer = BTreeMap::new();
    for p in model.params.iter().filter(|p| p.trainable) {
        let m = container.tensor(&format!("adam.m.{}", p.name));
        let v = container.tensor(&format!("adam.v.{}", p.name));
        if let (Some(m), Some(v)) = (m, v) {
            optimizer.insert(
                p.name.clone(),
                AdamState {
                    step: info.step,
                    m: m.as_f32()?,
                    v: v.as_f32()?,
                },
            );
        }
    }
    Ok(Checkpoint { model, optimizer, info })
}

/// Every checkpoint file in `dir`, sorted by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(PathBuf, CheckpointInfo)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("kwsf") {
            continue;
        }
        let meta = ModelMetadata::parse(&Container::load(&path)?)?;
        if let Some(info) = meta.checkpoint {
            out.push((path, info));
        }
    }
    out.sort_by_key(|(_, i)| i.epoch);
    Ok(out)
}

fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

/// Averages the `top_n` checkpoints with the lowest dev metric (ties broken by epoch).
/// Every tensor is averaged, running norm statistics included. Returns the averaged model
/// and the epochs used, ascending.
pub fn average_checkpoints(dir: &Path, top_n: usize) -> Result<(KwsModel<f32>, Vec<usize>)> {
    let mut all = list_checkpoints(dir)?;
    if all.is_empty() {
        return Err(Error::NoCheckpoints(dir.to_path_buf()));
    }
    if all.len() < top_n {
        log::warn!("only {} checkpoints in {}, averaging all of them", all.len(), dir.display());
    }
    all.sort_by(|a, b| a.1.dev_metric.total_cmp(&b.1.dev_metric).then(a.1.epoch.cmp(&b.1.epoch)));
    all.truncate(top_n.max(1));
    all.sort_by_key(|(_, i)| i.epoch);
    let models = all
        .iter()
        .map(|(p, _)| load_checkpoint(p).map(|c| c.model))
        .collect::<Result<Vec<_>>>()?;
    let mut avg = models[0].clone();
    let n = models.len() as f64;
    for i in 0..avg.params.len() {
        let p = avg.params.at_mut(i);
        let len = p.value.len();
        let mut data = Vec::with_capacity(len);
        for j in 0..len {
            let vals: Vec<f64> = models.iter().map(|m| m.params.at(i).value.data()[j] as f64).collect();
            data.push((pairwise_sum(&vals) / n) as f32);
        }
        p.value = Tensor::from_vec(p.value.shape(), data)?;
        p.grad.fill(0.0);
    }
    Ok((avg, all.iter().map(|(_, i)| i.epoch).collect()))
}
