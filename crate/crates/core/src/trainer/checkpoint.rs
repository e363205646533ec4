//! "MACK" checkpoint container.
//!
//! Layout (little-endian): magic, u32 version, u64 config hash, u8 phase,
//! u32 metadata length + JSON metadata, u32 section count, then per section
//! u16 name length, name, u8 rank, u32 extents, f32 values; finally the
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamGroup;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MACK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain = 1,
    Search = 2,
    Controllers = 3,
    Transfer = 4,
}

impl Phase {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Phase::Pretrain,
            2 => Phase::Search,
            3 => Phase::Controllers,
            4 => Phase::Transfer,
            other => return Err(Error::Integrity(format!("unknown phase tag {other}"))),
        })
    }
}

/// Resumable position of one ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub label: String,
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(label: &str, rng: &ChaCha8Rng) -> Self {
        RngState {
            label: label.to_string(),
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(
            self.word_pos
                .parse()
                .map_err(|_| Error::Integrity("bad rng word position".into()))?,
        );
        Ok(rng)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Support size the controllers were built for, if any.
    pub controller_support: Option<usize>,
    pub stochastic: bool,
    pub rng: Vec<RngState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub phase: Phase,
    pub meta: CheckpointMeta,
    pub sections: BTreeMap<String, Tensor>,
}

fn buffer_key(name: &str, part: &str) -> String {
    format!("buffer:{name}.{part}")
}

impl Checkpoint {
    /// Snapshot every parameter and running moment of `model`.
    pub fn from_model(
        model: &Model,
        config_hash: u64,
        phase: Phase,
        mut meta: CheckpointMeta,
    ) -> Self {
        let mut sections = BTreeMap::new();
        for id in model.params.ids() {
            sections.insert(
                format!("param:{}", model.params.name(id)),
                model.params.get(id).clone(),
            );
        }
        for m in model.buffers.iter() {
            sections.insert(buffer_key(&m.name, "mean"), m.mean.clone());
            sections.insert(buffer_key(&m.name, "var"), m.var.clone());
        }
        meta.controller_support = model.controllers.as_ref().map(|c| c.support_size());
        Checkpoint {
            config_hash,
            phase,
            meta,
            sections,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.sections.insert(name.into(), t);
    }

    /// Copy the sections of the given groups (and their running moments)
    /// into `model`. Everything is validated before anything is written.
    pub fn apply(&self, model: &mut Model, groups: &[ParamGroup]) -> Result<()> {
        if groups.contains(&ParamGroup::Controller) && model.controllers.is_none() {
            return Err(Error::Precondition(
                "model has no controllers to load into".into(),
            ));
        }
        let mut staged = Vec::new();
        for id in model
            .params
            .ids()
            .filter(|&id| groups.contains(&model.params.group(id)))
        {
            let key = format!("param:{}", model.params.name(id));
            let t = self
                .sections
                .get(&key)
                .ok_or_else(|| Error::Integrity(format!("missing section {key}")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Shape(format!(
                    "{key}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            staged.push((id, t.clone()));
        }
        let prefixes: Vec<&str> = groups
            .iter()
            .filter_map(|g| match g {
                ParamGroup::Stem => Some("stem."),
                ParamGroup::PlainBlock => Some("plain."),
                ParamGroup::Block => Some("block."),
                _ => None,
            })
            .collect();
        let mut moments = Vec::new();
        for (i, m) in model.buffers.iter().enumerate() {
            if prefixes.iter().any(|p| m.name.starts_with(p)) {
                let get = |part| {
                    let key = buffer_key(&m.name, part);
                    self.sections
                        .get(&key)
                        .cloned()
                        .ok_or_else(|| Error::Integrity(format!("missing section {key}")))
                };
                let (mean, var) = (get("mean")?, get("var")?);
                if mean.shape() != m.mean.shape() || var.shape() != m.var.shape() {
                    return Err(Error::Shape(format!(
                        "running moments of {} changed shape",
                        m.name
                    )));
                }
                moments.push((i, mean, var));
            }
        }
        for (id, t) in staged {
            model.params.set(id, t)?;
        }
        for (i, m) in model.buffers.iter_mut().enumerate() {
            if let Some(pos) = moments.iter().position(|x| x.0 == i) {
                let (_, mean, var) = moments.swap_remove(pos);
                m.mean = mean;
                m.var = var;
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.push(self.phase as u8);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, t) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Integrity(format!(
                "checkpoint of {} bytes is truncated",
                bytes.len()
            )));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        if bytes.len() < 8 + 32 {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity(
                "checksum mismatch (truncated or corrupted file)".into(),
            ));
        }
        let mut r = Reader { buf: body, at: 8 };
        let config_hash = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let phase = Phase::from_u8(r.take(1)?[0])?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Integrity("section name".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4")))
                .collect();
            sections.insert(name, Tensor::new(&shape, data)?);
        }
        if r.at != body.len() {
            return Err(Error::Integrity(
                "trailing bytes after the last section".into(),
            ));
        }
        Ok(Checkpoint {
            config_hash,
            phase,
            meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so a crash never leaves a half-written file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&fs::read(path)?)
    }

    /// Refuse a checkpoint built for another configuration unless forced.
    pub fn check_config(&self, config_hash: u64, force: bool) -> Result<()> {
        if self.config_hash != config_hash && !force {
            return Err(Error::ConfigMismatch {
                checkpoint: self.config_hash,
                config: config_hash,
            });
        }
        Ok(())
    }

    pub fn expect_phase(&self, allowed: &[Phase]) -> Result<()> {
        if !allowed.contains(&self.phase) {
            return Err(Error::Precondition(format!(
                "checkpoint phase {:?}, expected one of {allowed:?}",
                self.phase
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Integrity("section runs past the end of the file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn ckpt() -> (Model, Checkpoint) {
        let mut m = Model::new(&ModelConfig::default(), 1).unwrap();
        m.init_controllers(5, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: u32 = rng.random();
        let meta = CheckpointMeta {
            rng: vec![RngState::capture("search", &rng)],
            ..Default::default()
        };
        let c = Checkpoint::from_model(&m, 42, Phase::Controllers, meta);
        (m, c)
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, c) = ckpt();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta.controller_support, Some(5));
        let mut fresh = Model::new(&ModelConfig::default(), 99).unwrap();
        fresh.init_controllers(5, &mut ChaCha8Rng::seed_from_u64(0));
        back.apply(&mut fresh, &ParamGroup::ALL).unwrap();
        for id in m.params.ids() {
            assert_eq!(m.params.get(id).data(), fresh.params.get(id).data());
        }
        let mut rng = back.meta.rng[0].restore().unwrap();
        let mut orig = ChaCha8Rng::seed_from_u64(3);
        let _: u32 = orig.random();
        assert_eq!(rng.random::<u64>(), orig.random::<u64>());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (_, c) = ckpt();
        let bytes = c.encode();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Version { found: 7, .. })
        ));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() / 2]),
            Err(Error::Integrity(_))
        ));
        let mut bad = bytes;
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Integrity(_))));
    }

    #[test]
    fn config_and_phase_guards() {
        let (_, c) = ckpt();
        assert!(matches!(
            c.check_config(7, false),
            Err(Error::ConfigMismatch { .. })
        ));
        c.check_config(7, true).unwrap();
        c.check_config(42, false).unwrap();
        assert!(c.expect_phase(&[Phase::Search]).is_err());
    }

    #[test]
    fn apply_is_all_or_nothing() {
        let (_, mut c) = ckpt();
        c.sections.remove("param:block.e23.conv3.conv.weight");
        let mut m = Model::new(&ModelConfig::default(), 5).unwrap();
        let before = m.params.checksum(ParamGroup::Stem);
        assert!(c
            .apply(&mut m, &[ParamGroup::Stem, ParamGroup::Block])
            .is_err());
        assert_eq!(m.params.checksum(ParamGroup::Stem), before);
    }
}
