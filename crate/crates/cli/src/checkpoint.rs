//! Checkpoint files.
//!
//! One line of JSON (format tag, version, configuration, array shapes, the
//! scalar part of the trainer state, content hash) followed by the arrays
//! as little-endian `f64`: parameters, mask (0/1), Adam first and second
//! moments. The hash is SHA-256 over the header serialized without its
//! `content_hash` field, then the payload bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use sparseflow_core::prune::{AdamState, PruneHistory, TrainerState};
use sparseflow_core::rng::Rng;
use sparseflow_core::Mask;

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const FORMAT: &str = "sparseflow-checkpoint";
pub const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("format version {found} is not supported (this reader handles {expected})")]
    Version { found: u64, expected: u64 },
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("content hash mismatch")]
    HashMismatch,
    #[error("malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: TrainerState<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Shapes {
    params: usize,
    mask: usize,
    adam_m: usize,
    adam_v: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    next_iter: usize,
    best_iter: Option<usize>,
    /// `None` until a cycle has been scored.
    best_score: Option<f64>,
    stale: usize,
    done: bool,
    adam_step: u64,
    history: PruneHistory,
    batch_rng: Rng,
    noise_rng: Rng,
}

fn digest(header: &Value, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(header).expect("header serializes").as_bytes());
    h.update(payload);
    hex::encode(h.finalize())
}

fn put(buf: &mut Vec<u8>, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn malformed(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Malformed(e.to_string())
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let s = &self.state;
        let mut payload = Vec::new();
        put(&mut payload, s.params.iter().copied());
        put(&mut payload, s.mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        put(&mut payload, s.adam.m.iter().copied());
        put(&mut payload, s.adam.v.iter().copied());
        let meta = StateMeta {
            next_iter: s.next_iter,
            best_iter: s.best_iter,
            best_score: s.best_score.is_finite().then_some(s.best_score),
            stale: s.stale,
            done: s.done,
            adam_step: s.adam.step,
            history: s.history.clone(),
            batch_rng: s.batch_rng.clone(),
            noise_rng: s.noise_rng.clone(),
        };
        let shapes = Shapes {
            params: s.params.len(),
            mask: s.mask.len(),
            adam_m: s.adam.m.len(),
            adam_v: s.adam.v.len(),
        };
        let mut header = json!({
            "format": FORMAT,
            "version": VERSION,
            "config": self.config.to_value(),
            "shapes": shapes,
            "state": meta,
        });
        let hash = digest(&header, &payload);
        header["content_hash"] = Value::String(hash);
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    /// Content hash recorded in an encoded checkpoint.
    pub fn hash_of(bytes: &[u8]) -> Result<String, CheckpointError> {
        let (header, _) = split_header(bytes)?;
        header
            .get("content_hash")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| malformed("no content hash"))
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let (mut header, payload) = split_header(bytes)?;
        if header.get("format").and_then(Value::as_str) != Some(FORMAT) {
            return Err(malformed("not a sparseflow checkpoint"));
        }
        let version = header.get("version").and_then(Value::as_u64).ok_or_else(|| malformed("no version"))?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let shapes: Shapes = serde_json::from_value(header.get("shapes").cloned().unwrap_or(Value::Null)).map_err(malformed)?;
        let n = shapes.params + shapes.mask + shapes.adam_m + shapes.adam_v;
        let expected = n.checked_mul(8).ok_or_else(|| malformed("shape overflow"))?;
        if payload.len() < expected {
            return Err(CheckpointError::Truncated { expected, found: payload.len() });
        }
        if payload.len() > expected {
            return Err(malformed(format!("{} trailing bytes", payload.len() - expected)));
        }
        let stored = header
            .as_object_mut()
            .and_then(|o| o.remove("content_hash"))
            .and_then(|v| v.as_str().map(str::to_string))
            .ok_or_else(|| malformed("no content hash"))?;
        if digest(&header, payload) != stored {
            return Err(CheckpointError::HashMismatch);
        }
        let config: ExperimentConfig = serde_json::from_value(header["config"].take()).map_err(malformed)?;
        let meta: StateMeta = serde_json::from_value(header["state"].take()).map_err(malformed)?;

        let mut vals = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |k: usize| -> Vec<f64> { vals.by_ref().take(k).collect() };
        let params = take(shapes.params);
        let bits = take(shapes.mask)
            .into_iter()
            .map(|b| match b {
                x if x == 1.0 => Ok(true),
                x if x == 0.0 => Ok(false),
                x => Err(malformed(format!("mask entry {x}"))),
            })
            .collect::<Result<Vec<bool>, _>>()?;
        let m = take(shapes.adam_m);
        let v = take(shapes.adam_v);
        Ok(Checkpoint {
            config,
            state: TrainerState {
                params,
                mask: Mask { bits },
                adam: AdamState { m, v, step: meta.adam_step },
                next_iter: meta.next_iter,
                best_iter: meta.best_iter,
                best_score: meta.best_score.unwrap_or(f64::INFINITY),
                stale: meta.stale,
                done: meta.done,
                history: meta.history,
                batch_rng: meta.batch_rng,
                noise_rng: meta.noise_rng,
            },
        })
    }

    /// Writes through a temporary file so a killed process never leaves a
    /// half-written checkpoint behind. Returns the content hash.
    pub fn save(&self, path: &Path) -> Result<String, CliError> {
        let bytes = self.encode();
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(Self::hash_of(&bytes).expect("freshly encoded"))
    }

    /// Loads a checkpoint and its content hash.
    pub fn load(path: &Path) -> Result<(Checkpoint, String), CliError> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(CliError::MissingCheckpoint(path.into())),
            Err(e) => return Err(e.into()),
        };
        let wrap = |e| CliError::CorruptCheckpoint(path.into(), e);
        let ck = Self::decode(&bytes).map_err(wrap)?;
        let hash = Self::hash_of(&bytes).map_err(wrap)?;
        Ok((ck, hash))
    }
}

fn split_header(bytes: &[u8]) -> Result<(Value, &[u8]), CheckpointError> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(CheckpointError::Truncated {
        expected: bytes.len() + 1,
        found: bytes.len(),
    })?;
    let header: Value = serde_json::from_slice(&bytes[..nl]).map_err(malformed)?;
    Ok((header, &bytes[nl + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparseflow_core::data::DatasetKind;
    use sparseflow_core::prune::CycleRecord;
    use sparseflow_core::rng::{stream, Stream};

    fn sample() -> Checkpoint {
        let config = ExperimentConfig::defaults_for(DatasetKind::Gaussians);
        let n = 5;
        let mut state = TrainerState {
            params: vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 3.0, -0.0],
            mask: Mask {
                bits: vec![true, false, true, true, false],
            },
            adam: AdamState::new(n),
            next_iter: 2,
            best_iter: Some(1),
            best_score: 1.25,
            stale: 0,
            done: false,
            history: PruneHistory::default(),
            batch_rng: stream(4, Stream::Batching),
            noise_rng: stream(4, Stream::Hutchinson),
        };
        state.adam.m[2] = 1e-17;
        state.adam.v[4] = 0.1 + 0.2;
        state.adam.step = 17;
        state.history.records.push(CycleRecord {
            iter: 0,
            prune_ratio: 0.0,
            params_remaining: 5,
            train_nll: 1.0 / 3.0,
            val_nll: 2.0f64.sqrt(),
            test_nll: std::f64::consts::PI,
            val_score: 2.0f64.sqrt(),
            n_evals: 10,
            seconds: 0.123456789,
        });
        Checkpoint { config, state }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.state.params.iter().zip(&ck.state.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut fresh = ck.clone();
        fresh.state.best_score = f64::INFINITY;
        fresh.state.best_iter = None;
        assert_eq!(Checkpoint::decode(&fresh.encode()).unwrap(), fresh);
    }

    #[test]
    fn damage_is_reported_distinctly() {
        let bytes = sample().encode();
        let mut tampered = bytes.clone();
        let last = tampered.len() - 3;
        tampered[last] ^= 1;
        assert_eq!(Checkpoint::decode(&tampered), Err(CheckpointError::HashMismatch));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 8]),
            Err(CheckpointError::Truncated { .. })
        ));
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":2", 1);
        assert_eq!(
            Checkpoint::decode(text.as_bytes()),
            Err(CheckpointError::Version { found: 2, expected: 1 })
        );
        assert!(matches!(Checkpoint::decode(b"{}\n"), Err(CheckpointError::Malformed(_))));
    }
}
