//! Checkpoint container: a JSON manifest (name -> shape/dtype/byte offset)
//! followed by a flat little-endian f32 payload, plus the training config
//! snapshot, RNG seed, and optimizer state for exact resume.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use tapegrad::{optim::Adam, ParamMap};

use crate::config::TrainConfig;
use crate::detector::{Detector, DetectorConfig, ALIGN_PREFIX};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTDETRCK";
const ADAM_PREFIX: &str = "adam.";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    phase: String,
    seed: u64,
    next_epoch: usize,
    adam_step: u64,
    train_config: TrainConfig,
    model_config: DetectorConfig,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamMap<f32>,
    /// Optimizer moment arrays, named `adam.m.*` / `adam.v.*`.
    pub adam_arrays: Vec<(String, ArrayD<f32>)>,
    pub adam_step: u64,
    pub phase: String,
    pub seed: u64,
    pub next_epoch: usize,
    pub train_config: TrainConfig,
    pub model_config: DetectorConfig,
}

impl Checkpoint {
    pub fn new(
        params: ParamMap<f32>,
        phase: &str,
        seed: u64,
        next_epoch: usize,
        train_config: TrainConfig,
        model_config: DetectorConfig,
    ) -> Self {
        Self {
            params,
            adam_arrays: Vec::new(),
            adam_step: 0,
            phase: phase.to_string(),
            seed,
            next_epoch,
            train_config,
            model_config,
        }
    }

    pub fn with_optimizer(mut self, adam: &Adam<f32>) -> Self {
        self.adam_arrays = adam
            .state_arrays()
            .into_iter()
            .map(|(n, v)| (n, v.clone()))
            .collect();
        self.adam_step = adam.step_count();
        self
    }

    pub fn restore_optimizer(&self, lr: f64) -> Adam<f32> {
        Adam::restore(lr, self.adam_step, self.adam_arrays.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let push = |name: &str, value: &ArrayD<f32>, entries: &mut Vec<ParamEntry>, payload: &mut Vec<u8>| {
            let offset = payload.len() as u64;
            for &v in value.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                dtype: "f32".to_string(),
                offset,
            });
        };
        for (name, value) in self.params.iter() {
            push(name, value, &mut entries, &mut payload);
        }
        for (name, value) in &self.adam_arrays {
            push(name, value, &mut entries, &mut payload);
        }
        let header = Header {
            format_version: 1,
            phase: self.phase.clone(),
            seed: self.seed,
            next_epoch: self.next_epoch,
            adam_step: self.adam_step,
            train_config: self.train_config.clone(),
            model_config: self.model_config.clone(),
            params: entries,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        file.write_all(&header_json).map_err(|e| Error::io(path, e))?;
        file.write_all(&payload).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;

        let mut params = ParamMap::new();
        let mut adam_arrays = Vec::new();
        for entry in &header.params {
            if entry.dtype != "f32" {
                return Err(Error::Format(format!(
                    "{}: parameter {} has unsupported dtype {}",
                    path.display(),
                    entry.name,
                    entry.dtype
                )));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "{}: parameter {} overruns the payload",
                    path.display(),
                    entry.name
                )));
            }
            let mut data = Vec::with_capacity(n);
            for k in 0..n {
                let b = &payload[start + 4 * k..start + 4 * k + 4];
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Format(format!("{}: {}: {e}", path.display(), entry.name)))?;
            if entry.name.starts_with(ADAM_PREFIX) {
                adam_arrays.push((entry.name.clone(), arr));
            } else {
                params.insert(entry.name.clone(), arr);
            }
        }
        Ok(Self {
            params,
            adam_arrays,
            adam_step: header.adam_step,
            phase: header.phase,
            seed: header.seed,
            next_epoch: header.next_epoch,
            train_config: header.train_config,
            model_config: header.model_config,
        })
    }

    /// Validate every stored parameter shape against a freshly constructed
    /// model. Detector-only checkpoints (no `align.*` entries) are accepted;
    /// everything else must be present and correctly shaped.
    pub fn validate_against(&self, detector: &Detector) -> Result<()> {
        let mut rng = crate::data::stream_rng(&[0]);
        let reference: ParamMap<f32> = detector.init_params(&mut rng);
        for (name, expect) in reference.iter() {
            match self.params.get(name) {
                Some(got) => {
                    if got.shape() != expect.shape() {
                        return Err(Error::State(format!(
                            "parameter {name}: checkpoint shape {:?} vs model {:?}",
                            got.shape(),
                            expect.shape()
                        )));
                    }
                }
                None if name.starts_with(ALIGN_PREFIX) => {}
                None => {
                    return Err(Error::State(format!("parameter {name} missing from checkpoint")));
                }
            }
        }
        for (name, _) in self.params.iter() {
            if reference.get(name).is_none() {
                return Err(Error::State(format!(
                    "checkpoint parameter {name} unknown to the constructed model"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let detector = Detector::new(DetectorConfig {
            d_model: 16,
            n_heads: 4,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ffn_dim: 32,
            n_queries: 4,
            n_classes: 3,
            n_prototypes: 2,
            disc_hidden: 8,
        })
        .unwrap();
        let mut rng = crate::data::stream_rng(&[1]);
        let params: ParamMap<f32> = detector.init_params(&mut rng);
        let ckpt = Checkpoint::new(
            params.clone(),
            "burn_in",
            7,
            3,
            TrainConfig::default(),
            detector.cfg.clone(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.next_epoch, 3);
        assert_eq!(loaded.phase, "burn_in");
        for (name, v) in params.iter() {
            let lv = loaded.params.get(name).unwrap();
            assert_eq!(v.shape(), lv.shape());
            assert!(v.iter().zip(lv.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        loaded.validate_against(&detector).unwrap();
    }

    #[test]
    fn shape_mismatch_is_state_error() {
        let cfg = DetectorConfig {
            d_model: 16,
            n_heads: 4,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ffn_dim: 32,
            n_queries: 4,
            n_classes: 3,
            n_prototypes: 2,
            disc_hidden: 8,
        };
        let detector = Detector::new(cfg.clone()).unwrap();
        let mut rng = crate::data::stream_rng(&[1]);
        let params: ParamMap<f32> = detector.init_params(&mut rng);
        let ckpt = Checkpoint::new(params, "burn_in", 7, 1, TrainConfig::default(), cfg.clone());
        let bigger = Detector::new(DetectorConfig { n_queries: 8, ..cfg }).unwrap();
        assert!(matches!(
            ckpt.validate_against(&bigger),
            Err(Error::State(_))
        ));
    }
}
