//! Binary checkpoints: parameters, optimizer state, and enough header
//! metadata to refuse a resume against the wrong artifacts.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "SBLM" | u32 format version | u8 kind (1 = checkpoint)
//! string  rng algorithm id
//! u64     seed
//! u64     completed steps
//! u64     config digest
//! u64     vocabulary hash
//! u64     lexicon hash
//! u64     adam step counter
//! u64 x7  model config: d, layers, heads, ff_dim, n_max, d_w, d_s
//! u32     tensor record count
//! then per record: string name | u32 rank | u64 dims | f32 payload
//! ```
//!
//! Tensor records come in three groups in the fixed parameter order:
//! `p.<name>` (parameters), `m.<name>` and `v.<name>` (Adam moments). The
//! writer is deterministic, so save-load-save reproduces identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::binfmt::{self, Kind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng;

/// A full training snapshot. The moment vectors are aligned with
/// `params.tensors()` order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub rng_algorithm: String,
    pub config_digest: u64,
    pub vocab_hash: u64,
    pub lexicon_hash: u64,
    pub adam_t: u64,
    pub params: ModelParams<f32>,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        binfmt::write_magic(&mut out, Kind::Checkpoint).expect("in-memory write");
        binfmt::write_string(&mut out, &self.rng_algorithm).expect("in-memory write");
        for v in [
            self.seed,
            self.step,
            self.config_digest,
            self.vocab_hash,
            self.lexicon_hash,
            self.adam_t,
        ] {
            binfmt::write_u64(&mut out, v).expect("in-memory write");
        }
        let cfg = &self.params.config;
        for v in [
            cfg.d, cfg.layers, cfg.heads, cfg.ff_dim, cfg.n_max, cfg.d_w, cfg.d_s,
        ] {
            binfmt::write_u64(&mut out, v as u64).expect("in-memory write");
        }
        let tensors = self.params.tensors();
        let count = tensors.len() * 3;
        binfmt::write_u32(&mut out, count as u32).expect("in-memory write");
        for t in &tensors {
            binfmt::write_string(&mut out, &format!("p.{}", t.name)).expect("in-memory write");
            binfmt::write_tensor_f32(&mut out, &t.shape, t.data).expect("in-memory write");
        }
        for (group, prefix) in [(&self.adam_m, "m"), (&self.adam_v, "v")] {
            for (t, data) in tensors.iter().zip(group.iter()) {
                binfmt::write_string(&mut out, &format!("{}.{}", prefix, t.name))
                    .expect("in-memory write");
                binfmt::write_tensor_f32(&mut out, &t.shape, data).expect("in-memory write");
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = bytes;
        binfmt::read_magic(&mut r, Kind::Checkpoint)?;
        let rng_algorithm = binfmt::read_string(&mut r)?;
        if rng_algorithm != rng::ALGORITHM_ID {
            return Err(Error::Compat(format!(
                "checkpoint was written with rng '{}', this build uses '{}'",
                rng_algorithm,
                rng::ALGORITHM_ID
            )));
        }
        let seed = binfmt::read_u64(&mut r)?;
        let step = binfmt::read_u64(&mut r)?;
        let config_digest = binfmt::read_u64(&mut r)?;
        let vocab_hash = binfmt::read_u64(&mut r)?;
        let lexicon_hash = binfmt::read_u64(&mut r)?;
        let adam_t = binfmt::read_u64(&mut r)?;
        let mut dims = [0u64; 7];
        for d in &mut dims {
            *d = binfmt::read_u64(&mut r)?;
        }
        let config = ModelConfig {
            d: dims[0] as usize,
            layers: dims[1] as usize,
            heads: dims[2] as usize,
            ff_dim: dims[3] as usize,
            n_max: dims[4] as usize,
            d_w: dims[5] as usize,
            d_s: dims[6] as usize,
        };
        config.validate().map_err(|e| {
            Error::Format(format!("checkpoint header holds an invalid config: {}", e))
        })?;

        let mut params = ModelParams::<f32>::zeros(&config);
        let n_tensors = params.tensors().len();
        let count = binfmt::read_u32(&mut r)? as usize;
        if count != n_tensors * 3 {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensor records, expected {}",
                count,
                n_tensors * 3
            )));
        }

        let mut adam_m: Vec<Vec<f32>> = Vec::with_capacity(n_tensors);
        let mut adam_v: Vec<Vec<f32>> = Vec::with_capacity(n_tensors);
        {
            let mut slots = params.tensors_mut();
            for group in 0..3 {
                for slot in slots.iter_mut() {
                    let prefix = ["p", "m", "v"][group];
                    let want = format!("{}.{}", prefix, slot.name);
                    let name = binfmt::read_string(&mut r)?;
                    if name != want {
                        return Err(Error::Format(format!(
                            "tensor record '{}' where '{}' was expected",
                            name, want
                        )));
                    }
                    let (shape, data) = binfmt::read_tensor_f32(&mut r)?;
                    if shape != slot.shape {
                        return Err(Error::Format(format!(
                            "tensor '{}' has shape {:?}, expected {:?}",
                            name, shape, slot.shape
                        )));
                    }
                    match group {
                        0 => slot.data.copy_from_slice(&data),
                        1 => adam_m.push(data),
                        _ => adam_v.push(data),
                    }
                }
            }
        }
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the checkpoint payload",
                r.len()
            )));
        }
        Ok(Checkpoint {
            step,
            seed,
            rng_algorithm,
            config_digest,
            vocab_hash,
            lexicon_hash,
            adam_t,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }

    /// Refuse to pair this checkpoint with artifacts it was not trained on.
    /// `force` downgrades the mismatch to acceptance for deliberate reuse.
    pub fn verify_artifacts(&self, vocab_hash: u64, lexicon_hash: u64, force: bool) -> Result<()> {
        if force {
            return Ok(());
        }
        if self.vocab_hash != vocab_hash {
            return Err(Error::Compat(format!(
                "vocabulary hash {:#018x} does not match the checkpoint's {:#018x} \
                 (use --force to override)",
                vocab_hash, self.vocab_hash
            )));
        }
        if self.lexicon_hash != lexicon_hash {
            return Err(Error::Compat(format!(
                "lexicon hash {:#018x} does not match the checkpoint's {:#018x} \
                 (use --force to override)",
                lexicon_hash, self.lexicon_hash
            )));
        }
        Ok(())
    }

    /// Refuse to resume under a different run recipe.
    pub fn verify_config(&self, digest: u64) -> Result<()> {
        if self.config_digest != digest {
            return Err(Error::Compat(format!(
                "config digest {:#018x} does not match the checkpoint's {:#018x}",
                digest, self.config_digest
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ff_dim: 12,
            n_max: 6,
            d_w: 10,
            d_s: 4,
        };
        let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let adam_m: Vec<Vec<f32>> = params
            .tensors()
            .iter()
            .map(|t| t.data.iter().map(|v| v * 0.5).collect())
            .collect();
        let adam_v: Vec<Vec<f32>> = params
            .tensors()
            .iter()
            .map(|t| t.data.iter().map(|v| v * v).collect())
            .collect();
        Checkpoint {
            step: 77,
            seed: 9,
            rng_algorithm: rng::ALGORITHM_ID.to_string(),
            config_digest: 0xabcd,
            vocab_hash: 0x1111,
            lexicon_hash: 0x2222,
            adam_t: 77,
            params,
            adam_m,
            adam_v,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = toy_checkpoint();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes, "save-load-save must be identical");
        assert_eq!(back.step, 77);
        assert_eq!(back.adam_t, 77);
        assert_eq!(back.params.config, ckpt.params.config);
        for (a, b) in ckpt.params.tensors().iter().zip(back.params.tensors().iter()) {
            assert_eq!(a.data, b.data, "tensor {}", a.name);
        }
        assert_eq!(ckpt.adam_m, back.adam_m);
        assert_eq!(ckpt.adam_v, back.adam_v);
    }

    #[test]
    fn file_round_trip() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let ckpt = toy_checkpoint();
        let bytes = ckpt.to_bytes();
        for cut in [10, 60, bytes.len() / 2, bytes.len() - 3] {
            let err = Checkpoint::from_bytes(&bytes[..cut]);
            assert!(
                matches!(err, Err(Error::Format(_))),
                "cut at {} gave {:?}",
                cut,
                err
            );
        }
    }

    #[test]
    fn trailing_bytes_are_a_format_error() {
        let ckpt = toy_checkpoint();
        let mut bytes = ckpt.to_bytes();
        bytes.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn artifact_mismatch_is_a_compat_error_unless_forced() {
        let ckpt = toy_checkpoint();
        assert!(ckpt.verify_artifacts(0x1111, 0x2222, false).is_ok());
        assert!(matches!(
            ckpt.verify_artifacts(0x9999, 0x2222, false),
            Err(Error::Compat(_))
        ));
        assert!(matches!(
            ckpt.verify_artifacts(0x1111, 0x9999, false),
            Err(Error::Compat(_))
        ));
        assert!(ckpt.verify_artifacts(0x9999, 0x9999, true).is_ok());
        assert!(matches!(ckpt.verify_config(0x1), Err(Error::Compat(_))));
        assert!(ckpt.verify_config(0xabcd).is_ok());
    }

    #[test]
    fn foreign_rng_is_a_compat_error() {
        let ckpt = toy_checkpoint();
        let mut wrong = ckpt.clone();
        wrong.rng_algorithm = "other-rng/v9".to_string();
        let bytes = wrong.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Compat(_))
        ));
    }

    #[test]
    fn wrong_kind_byte_is_rejected() {
        let ckpt = toy_checkpoint();
        let mut bytes = ckpt.to_bytes();
        // The kind byte sits right after magic and version.
        bytes[8] = 2;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
