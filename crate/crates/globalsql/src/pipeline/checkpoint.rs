//! Checkpoints: `manifest.json` (configuration, vocabulary, parameter names
//! and shapes) plus `params.bin`, the parameter values as little-endian f64
//! in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use crate::error::{read_bytes, read_text, Error, Result};
use crate::model::Model;
use crate::neural::{ParameterStore, Tensor};
use crate::text::Vocab;

const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, model: &Model, config: &TrainConfig) -> Result<()> {
    if model.config != config.model {
        return Err(Error::Invalid("model widths differ from the training configuration".into()));
    }
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(model.store.len());
    let mut bytes = Vec::with_capacity(model.store.num_values() * 8);
    for (name, t) in model.store.iter() {
        params.push(ParamEntry { name: name.clone(), shape: t.shape.clone() });
        for x in &t.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT,
        seed: config.seed,
        config: config.clone(),
        vocab: model.vocab.words().to_vec(),
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(dir.join("params.bin"), bytes)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, TrainConfig)> {
    let text = read_text(&dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format {}", manifest.format)));
    }
    let bytes = read_bytes(&dir.join("params.bin"))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 8 {
        return Err(Error::Data(format!(
            "params.bin holds {} bytes, manifest needs {}",
            bytes.len(),
            expected * 8
        )));
    }
    let mut store = ParameterStore::new();
    let mut values = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    for p in &manifest.params {
        let n = p.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store.insert(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
    }

    let mut vocab_words = manifest.vocab.clone();
    if vocab_words.first().map(String::as_str) != Some(crate::text::UNK) {
        return Err(Error::Data("checkpoint vocabulary must start with the unknown-word slot".into()));
    }
    vocab_words.remove(0);
    let vocab = Vocab::from_words(vocab_words);
    if vocab.len() != manifest.vocab.len() {
        return Err(Error::Data("checkpoint vocabulary has duplicate words".into()));
    }

    // compare against a freshly initialised layout
    let reference = Model::new(manifest.config.model.clone(), vocab.clone(), 0)?;
    for (name, t) in reference.store.iter() {
        let got = store
            .get(name)
            .map_err(|_| Error::Data(format!("checkpoint lacks parameter `{name}`")))?;
        if got.shape != t.shape {
            return Err(Error::Data(format!(
                "parameter `{name}` has shape {:?}, configuration needs {:?}",
                got.shape, t.shape
            )));
        }
    }
    if store.len() != reference.store.len() {
        return Err(Error::Data("checkpoint has parameters the configuration does not define".into()));
    }
    let model = Model { config: manifest.config.model.clone(), vocab, grammar: reference.grammar, store };
    Ok((model, manifest.config))
}
