//! JSON checkpoint container: config, vocabulary, parameters, optimizer
//! state and step, guarded by the config fingerprint.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use dynprompt_autodiff::{ParamStore, Parameter};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::data::Vocabulary;
use crate::error::{io_err, parse_json, Error, Result};
use crate::model::Model;
use crate::train::AdamW;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Little-endian `f32` bytes, base64-encoded.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<String>,
    pub v: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub step: usize,
    /// The run config as TOML.
    pub config: String,
    pub vocabulary: Vec<String>,
    pub params: Vec<TensorRecord>,
    pub optimizer: OptimizerState,
}

fn encode(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(what: &str, text: &str, expected: usize) -> Result<Vec<f32>> {
    let bytes = STANDARD.decode(text).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!("{what}: {} bytes for {expected} values", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Restored training state.
pub struct Restored {
    pub config: RunConfig,
    pub vocabulary: Vocabulary,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW,
    pub step: usize,
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, vocab: &Vocabulary, store: &ParamStore<f32>, opt: &AdamW, step: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            fingerprint: cfg.fingerprint(vocab.words()),
            step,
            config: cfg.to_toml(),
            vocabulary: vocab.words().to_vec(),
            params: store
                .iter()
                .map(|(_, p)| TensorRecord { name: p.name.clone(), shape: p.value.shape().to_vec(), data: encode(p.value.data()) })
                .collect(),
            optimizer: OptimizerState {
                t: opt.t,
                m: opt.m.iter().map(|m| encode(m)).collect(),
                v: opt.v.iter().map(|v| encode(v)).collect(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let ck: Self = parse_json(path, &text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("version {} is not supported (expected {CHECKPOINT_VERSION})", ck.version)));
        }
        Ok(ck)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config)
    }

    /// Rebuilds the model from the stored config and loads every tensor.
    pub fn restore(&self) -> Result<Restored> {
        let cfg = self.run_config()?;
        self.restore_into(&cfg)
    }

    /// Rebuilds the model for `cfg`, rejecting the checkpoint unless its
    /// fingerprint, parameter names and shapes all match.
    pub fn restore_into(&self, cfg: &RunConfig) -> Result<Restored> {
        let vocab = Vocabulary::new(self.vocabulary.clone())?;
        let fp = cfg.fingerprint(vocab.words());
        if fp != self.fingerprint {
            return Err(Error::Checkpoint(format!("config fingerprint {fp} does not match checkpoint {}", self.fingerprint)));
        }
        let (model, mut store) = Model::new(&cfg.model, vocab.len(), cfg.seed)?;
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} tensors, model has {}", self.params.len(), store.len())));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, rec) in ids.iter().zip(&self.params) {
            let p = store.get_mut(*id);
            if p.name != rec.name || p.value.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    rec.name,
                    rec.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let values = decode(&rec.name, &rec.data, p.value.numel())?;
            p.value.data_mut().copy_from_slice(&values);
        }
        let o = &self.optimizer;
        if o.m.len() != ids.len() || o.v.len() != ids.len() {
            return Err(Error::Checkpoint("optimizer state does not cover every tensor".into()));
        }
        let mut optimizer = AdamW { t: o.t, m: Vec::with_capacity(ids.len()), v: Vec::with_capacity(ids.len()) };
        for ((id, m), v) in ids.iter().zip(&o.m).zip(&o.v) {
            let p = store.get(*id);
            optimizer.m.push(decode(&p.name, m, p.value.numel())?);
            optimizer.v.push(decode(&p.name, v, p.value.numel())?);
        }
        Ok(Restored { config: cfg.clone(), vocabulary: vocab, model, store, optimizer, step: self.step })
    }
}

/// SHA-256 over the names, shapes and values of the selected parameters.
pub fn param_hash(store: &ParamStore<f32>, select: impl Fn(&Parameter<f32>) -> bool) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter().filter(|(_, p)| select(p)) {
        h.update(p.name.as_bytes());
        h.update([0]);
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::micro_config;

    fn setup() -> (RunConfig, Vocabulary, ParamStore<f32>, AdamW) {
        let cfg = micro_config();
        let vocab = Vocabulary::builtin();
        let (_, store) = Model::new(&cfg.model, vocab.len(), cfg.seed).unwrap();
        let mut opt = AdamW::new(&store);
        opt.t = 3;
        opt.m[0][0] = 0.25;
        (cfg, vocab, store, opt)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, vocab, store, opt) = setup();
        let ck = Checkpoint::capture(&cfg, &vocab, &store, &opt, 7);
        let dir = std::env::temp_dir().join(format!("dynprompt-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.json");
        ck.save(&path).unwrap();
        let r = Checkpoint::load(&path).unwrap().restore().unwrap();
        assert_eq!(r.step, 7);
        assert_eq!(r.optimizer, opt);
        assert_eq!(param_hash(&r.store, |_| true), param_hash(&store, |_| true));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn mismatched_config_rejected() {
        let (cfg, vocab, store, opt) = setup();
        let ck = Checkpoint::capture(&cfg, &vocab, &store, &opt, 0);
        let mut other = cfg.clone();
        other.model.mlma.dim += 8;
        assert!(matches!(ck.restore_into(&other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_tensor_rejected() {
        let (cfg, vocab, store, opt) = setup();
        let mut ck = Checkpoint::capture(&cfg, &vocab, &store, &opt, 0);
        ck.params[0].data = encode(&[1.0]);
        assert!(matches!(ck.restore(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn hash_sees_values() {
        let (_, _, mut store, _) = setup();
        let before = param_hash(&store, |_| true);
        let id = store.ids().next().unwrap();
        store.get_mut(id).value.data_mut()[0] += 1.0;
        assert_ne!(before, param_hash(&store, |_| true));
    }
}
