//! Single-file checkpoints: parameters and prototype bank as tensors, run
//! configuration and training state as header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::PmModel;
use crate::objectives::PrototypeBank;
use crate::synthgen::PhaseLabel;

const PROTOTYPES: &str = "bank.prototypes";
const INITIALIZED: &str = "bank.initialized";

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_jaccard: Option<f64>,
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: PmModel,
    pub bank: PrototypeBank,
    pub state: TrainState,
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, model: &PmModel, bank: &PrototypeBank, state: &TrainState) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model
        .store
        .iter()
        .map(|(name, var)| (name.to_string(), var.as_tensor().clone()))
        .collect();
    let c = bank.channels();
    let protos: Vec<f64> = bank.raw_prototypes().iter().flatten().copied().collect();
    tensors.push((PROTOTYPES.into(), Tensor::from_vec(protos, (PhaseLabel::COUNT, c), &Device::Cpu)?));
    let init: Vec<u8> = bank.initialized().iter().map(|&b| b as u8).collect();
    tensors.push((INITIALIZED.into(), Tensor::from_vec(init, PhaseLabel::COUNT, &Device::Cpu)?));

    let mut meta = HashMap::new();
    meta.insert("config".to_string(), config.to_text());
    meta.insert("epoch".to_string(), state.epoch.to_string());
    meta.insert(
        "best_val_jaccard".to_string(),
        state.best_val_jaccard.map_or("none".to_string(), |v| format!("{v:e}")),
    );
    meta.insert("rng_seed".to_string(), state.rng_seed.to_string());
    meta.insert("rng_stream".to_string(), state.rng_stream.to_string());
    meta.insert("rng_word_pos".to_string(), state.rng_word_pos.to_string());

    let tmp = tmp_path(path);
    safetensors::serialize_to_file(tensors, Some(meta), &tmp)
        .map_err(|e| Error::Internal(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn meta_field<'m>(meta: &'m HashMap<String, String>, key: &str, path: &Path) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::data_format(path, format!("checkpoint metadata lacks `{key}`")))
}

fn parse_field<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str, path: &Path) -> Result<T> {
    meta_field(meta, key, path)?
        .parse()
        .map_err(|_| Error::data_format(path, format!("checkpoint metadata `{key}` is malformed")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buf)
        .map_err(|e| Error::data_format(path, format!("not a checkpoint: {e}")))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::data_format(path, "checkpoint has no metadata"))?;
    let config = RunConfig::parse_text(meta_field(&meta, "config", path)?)?;
    let best = match meta_field(&meta, "best_val_jaccard", path)? {
        "none" => None,
        v => Some(
            v.parse()
                .map_err(|_| Error::data_format(path, "checkpoint metadata `best_val_jaccard` is malformed"))?,
        ),
    };
    let state = TrainState {
        epoch: parse_field(&meta, "epoch", path)?,
        best_val_jaccard: best,
        rng_seed: parse_field(&meta, "rng_seed", path)?,
        rng_stream: parse_field(&meta, "rng_stream", path)?,
        rng_word_pos: parse_field(&meta, "rng_word_pos", path)?,
    };

    let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)
        .map_err(|e| Error::data_format(path, format!("unreadable tensors: {e}")))?;
    let model = PmModel::new(config.model_config(), config.seed, config.precision.dtype())?;
    let mut params = BTreeMap::new();
    for (name, var) in model.store.iter() {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::data_format(path, format!("missing parameter `{name}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::data_format(
                path,
                format!("parameter `{name}` has shape {:?}, expected {:?}", t.dims(), var.dims()),
            ));
        }
        params.insert(name.to_string(), t.clone());
    }
    model.store.assign(&params)?;

    let get = |key: &str| {
        tensors
            .get(key)
            .ok_or_else(|| Error::data_format(path, format!("missing `{key}`")))
    };
    let protos: Vec<Vec<f64>> = get(PROTOTYPES)?.to_dtype(DType::F64)?.to_vec2()?;
    if protos.len() != PhaseLabel::COUNT || protos.iter().any(|p| p.len() != config.channels) {
        return Err(Error::data_format(path, "prototype bank shape does not match the configuration"));
    }
    let init: Vec<u8> = get(INITIALIZED)?.to_vec1()?;
    let initialized: [bool; PhaseLabel::COUNT] = init
        .iter()
        .map(|&b| b != 0)
        .collect::<Vec<_>>()
        .try_into()
        .map_err(|_| Error::data_format(path, "prototype flags have the wrong length"))?;
    let bank = PrototypeBank::from_raw(protos, initialized, config.alpha);
    Ok(Checkpoint {
        config,
        model,
        bank,
        state,
    })
}
