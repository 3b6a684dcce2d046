use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Model;
use super::train::{MetricsRow, TrainData, TrainOptions, Trainer};
use super::{DataDims, ModelError};
use crate::autodiff::{AdamState, ParamStore, Tensor};
use crate::data::StreamPosition;
use crate::hash::config_hash;
use crate::memory::EpisodicBuffer;
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "conmem-checkpoint/1";
const BLOBS: &str = "blobs";

/// A raw little-endian f64 array stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamEntry {
    pub param: String,
    pub t: u64,
    pub m: String,
    pub v: String,
}

/// Checkpoint manifest. Every array lives in its own blob under `blobs/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<T> {
    pub format: String,
    pub config_hash: String,
    pub config: ModelConfig,
    pub dims: DataDims,
    pub data: TrainData,
    pub options: TrainOptions,
    pub step: u64,
    pub stream: Option<StreamPosition>,
    pub params: Vec<ArrayEntry>,
    pub adam: Vec<AdamEntry>,
    pub consolidation_adam: Vec<AdamEntry>,
    /// Each layer's buffer after the last processed sequence.
    pub buffers: Vec<EpisodicBuffer<T>>,
    pub attention: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
}

/// Accepts a checkpoint directory or the path of its manifest.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.file_name().is_some_and(|f| f == MANIFEST) {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

fn blob_name(name: &str) -> String {
    format!("{BLOBS}/{name}.f64")
}

fn write_blob<T: Scalar>(dir: &Path, file: &str, data: &[T]) -> Result<(), ModelError> {
    let bytes: Vec<u8> = data.iter().flat_map(|x| x.as_f64().to_le_bytes()).collect();
    fs::write(dir.join(file), bytes)?;
    Ok(())
}

fn read_blob<T: Scalar>(dir: &Path, file: &str, len: usize) -> Result<Vec<T>, ModelError> {
    if file.contains("..") || Path::new(file).is_absolute() {
        return Err(ModelError::Checkpoint(format!(
            "blob path {file:?} escapes the checkpoint"
        )));
    }
    let bytes = fs::read(dir.join(file))?;
    if bytes.len() != len * 8 {
        return Err(ModelError::Checkpoint(format!(
            "{file}: {} bytes, expected {}",
            bytes.len(),
            len * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect())
}

fn write_adam<T: Scalar>(
    dir: &Path,
    prefix: &str,
    name: &str,
    s: &AdamState<T>,
) -> Result<AdamEntry, ModelError> {
    let m = blob_name(&format!("{prefix}.{name}.m"));
    let v = blob_name(&format!("{prefix}.{name}.v"));
    write_blob(dir, &m, &s.m)?;
    write_blob(dir, &v, &s.v)?;
    Ok(AdamEntry {
        param: name.to_string(),
        t: s.t,
        m,
        v,
    })
}

fn read_adam<T: Scalar>(dir: &Path, e: &AdamEntry, len: usize) -> Result<AdamState<T>, ModelError> {
    Ok(AdamState {
        m: read_blob(dir, &e.m, len)?,
        v: read_blob(dir, &e.v, len)?,
        t: e.t,
    })
}

/// Writes the trainer's full resumable state into `dir`.
pub fn save_checkpoint<T: Scalar + Serialize>(
    trainer: &Trainer<T>,
    dir: &Path,
) -> Result<(), ModelError> {
    fs::create_dir_all(dir.join(BLOBS))?;
    let model = &trainer.model;
    let mut params = Vec::new();
    let mut adam = Vec::new();
    for (i, (name, value)) in model.params.iter().enumerate() {
        let file = blob_name(name);
        write_blob(dir, &file, value.data())?;
        params.push(ArrayEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            file,
        });
        let state = model.params.state(i);
        if state.t > 0 {
            adam.push(write_adam(dir, "adam", name, state)?);
        }
    }
    let mut consolidation_adam = Vec::new();
    for (&i, state) in &trainer.consolidation_states {
        consolidation_adam.push(write_adam(dir, "cons-adam", model.params.name(i), state)?);
    }
    let manifest = Checkpoint {
        format: FORMAT.to_string(),
        config_hash: config_hash(&model.config),
        config: model.config.clone(),
        dims: model.dims,
        data: trainer.data.clone(),
        options: trainer.options.clone(),
        step: trainer.step,
        stream: trainer.stream_position(),
        params,
        adam,
        consolidation_adam,
        buffers: model.buffers.clone(),
        attention: trainer.attention.clone(),
        metrics: trainer.metrics.clone(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest<T: Scalar + DeserializeOwned>(
    path: &Path,
) -> Result<Checkpoint<T>, ModelError> {
    let dir = checkpoint_dir(path);
    let manifest: Checkpoint<T> = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    if manifest.config_hash != config_hash(&manifest.config) {
        return Err(ModelError::Checkpoint(
            "config hash does not match config".into(),
        ));
    }
    Ok(manifest)
}

fn load_parts<T: Scalar + DeserializeOwned>(
    path: &Path,
) -> Result<(Checkpoint<T>, Model<T>), ModelError> {
    let dir = checkpoint_dir(path);
    let manifest = read_manifest::<T>(&dir)?;
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let len = e.shape.iter().product();
        store.insert(
            e.name.clone(),
            Tensor::new(e.shape.clone(), read_blob(&dir, &e.file, len)?)?,
        );
    }
    for e in &manifest.adam {
        let i = store.index_of(&e.param).ok_or_else(|| {
            ModelError::Checkpoint(format!("optimizer state for unknown {:?}", e.param))
        })?;
        *store.state_mut(i) = read_adam(&dir, e, store.get(i).len())?;
    }
    let mut model = Model::from_params(manifest.config.clone(), manifest.dims, store)?;
    if manifest.buffers.len() != model.buffers.len() {
        return Err(ModelError::Checkpoint(
            "buffer count differs from layer count".into(),
        ));
    }
    model.buffers = manifest.buffers.clone();
    Ok((manifest, model))
}

/// Restores a trainer that continues exactly where the saved one stopped.
pub fn load_checkpoint<T: Scalar + DeserializeOwned>(
    path: &Path,
) -> Result<Trainer<T>, ModelError> {
    let dir = checkpoint_dir(path);
    let (manifest, model) = load_parts::<T>(&dir)?;
    let mut cons = BTreeMap::new();
    for e in &manifest.consolidation_adam {
        let i = model.params.index_of(&e.param).ok_or_else(|| {
            ModelError::Checkpoint(format!("optimizer state for unknown {:?}", e.param))
        })?;
        cons.insert(i, read_adam(&dir, e, model.params.get(i).len())?);
    }
    let mut trainer = Trainer::new(model, manifest.data, manifest.options)?;
    trainer.restore(
        manifest.step,
        manifest.stream,
        manifest.attention,
        manifest.metrics,
        cons,
    )?;
    Ok(trainer)
}

/// Weights and buffers only.
pub fn load_model<T: Scalar + DeserializeOwned>(path: &Path) -> Result<Model<T>, ModelError> {
    Ok(load_parts(path)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SrcdConfig;

    fn trainer() -> Trainer<f64> {
        let cfg = ModelConfig {
            d: 8,
            layers: 2,
            capacity: 8,
            ffn_hidden: 8,
            batch: 2,
            steps: 4,
            log_every: 1,
            ..ModelConfig::desk()
        };
        let data = SrcdConfig {
            seq_len: 48,
            query_fraction: 0.1,
            pattern_count: 3,
            key_vocab: 8,
            value_vocab: 8,
            ..SrcdConfig::desk()
        };
        let d = TrainData::Srcd(data);
        Trainer::new(
            Model::new(cfg, d.dims()).unwrap(),
            d,
            TrainOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = trainer();
        t.run_until(2).unwrap();
        save_checkpoint(&t, dir.path()).unwrap();
        let mut r: Trainer<f64> = load_checkpoint(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(r.model.params, t.model.params);
        assert_eq!(r.model.buffers, t.model.buffers);
        assert_eq!(r.consolidation_states, t.consolidation_states);
        t.run().unwrap();
        r.run().unwrap();
        assert_eq!(r.metrics, t.metrics);
        assert_eq!(r.model.params, t.model.params);
    }

    #[test]
    fn detects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let t = trainer();
        save_checkpoint(&t, dir.path()).unwrap();
        let blob = dir.path().join(blob_name(t.model.params.name(0)));
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_model::<f64>(dir.path()).unwrap_err();
        assert!(matches!(err, ModelError::Checkpoint(_)), "{err}");
    }

    #[test]
    fn detects_edited_config() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&trainer(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"capacity\": 8", "\"capacity\": 9");
        fs::write(&path, text).unwrap();
        assert!(load_model::<f64>(dir.path()).is_err());
    }
}
