//! Model checkpoints.
//!
//! Byte layout (integers little-endian):
//!
//! ```text
//! 8 bytes   magic "GR2NCKPT"
//! u32       format version
//! u32       config length L
//! L bytes   config, UTF-8 `key=value` lines: backbone fields, then `meta.*`
//! u32       array count
//! per array:
//!   u8      section (0 = model parameter, 1 = optimizer state)
//!   u16     name length, then the UTF-8 name
//!   u64     payload length P
//!   P bytes tensor in the `tensor::io` encoding (magic, dtype, rank, dims, data)
//! u32       CRC-32 of every preceding byte
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BackboneConfig, Model};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::{decode_tensor, encode_tensor, Real, Tensor};

const MAGIC: &[u8; 8] = b"GR2NCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_PREFIX: &str = "meta.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: BackboneConfig,
    /// Training metadata such as `epoch` and `dev_eer`.
    pub meta: KvMap,
    /// Every model parameter and buffer, keyed by canonical layer path.
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, meta: KvMap) -> Self {
        let mut params = Vec::new();
        model.visit(&mut |p| {
            params.push((p.name.clone(), Tensor::new(p.value.shape(), p.value.data().to_vec()).unwrap()))
        });
        Self { config: model.cfg.clone(), meta, params, optimizer: Vec::new() }
    }

    pub fn with_optimizer(mut self, state: Vec<(String, Tensor<T>)>) -> Self {
        self.optimizer = state;
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut kv = self.config.to_kv();
        for key in self.meta.keys() {
            kv.set(&format!("{META_PREFIX}{key}"), self.meta.get(key).unwrap());
        }
        let text = kv.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let sections = self.params.iter().map(|a| (0u8, a)).chain(self.optimizer.iter().map(|a| (1u8, a)));
        out.extend_from_slice(&((self.params.len() + self.optimizer.len()) as u32).to_le_bytes());
        for (section, (name, t)) in sections {
            out.push(section);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let payload = encode_tensor(t);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Integrity(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < 16 {
            return Err(bad("truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(bad("checksum mismatch (truncated or corrupted)"));
        }

        let mut r = Reader { bytes: body, pos: 12 };
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| bad("config is not UTF-8"))?;
        let kv = KvMap::parse(text, "<checkpoint>")?;
        let (mut backbone, mut meta) = (KvMap::default(), KvMap::default());
        for key in kv.keys() {
            let value = kv.get(key).unwrap();
            match key.strip_prefix(META_PREFIX) {
                Some(k) => meta.set(k, value),
                None => backbone.set(key, value),
            }
        }
        let config = BackboneConfig::default().merge_kv(&backbone)?;

        let (mut params, mut optimizer) = (Vec::new(), Vec::new());
        for _ in 0..r.u32()? {
            let section = r.take(1)?[0];
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("array name is not UTF-8"))?.to_string();
            let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            let t = decode_tensor(r.take(len)?)?;
            match section {
                0 => params.push((name, t)),
                1 => optimizer.push((name, t)),
                _ => return Err(bad("unknown array section")),
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config, meta, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Copies the stored parameters into `model`, which must declare exactly
    /// the same parameter names and shapes.
    pub fn restore_into(&self, model: &mut Model<T>) -> Result<()> {
        let mut stored: std::collections::HashMap<&str, &Tensor<T>> =
            self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut failure = None;
        model.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            match stored.remove(p.name.as_str()) {
                None => failure = Some(Error::Config(format!("checkpoint lacks parameter `{}`", p.name))),
                Some(t) if t.shape() != p.value.shape() => {
                    failure = Some(Error::ShapeMismatch {
                        name: p.name.clone(),
                        found: t.shape().to_vec(),
                        expected: p.value.shape().to_vec(),
                    })
                }
                Some(t) => p.value.data_mut().copy_from_slice(t.data()),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(name) = stored.keys().min() {
            return Err(Error::Config(format!("checkpoint parameter `{name}` has no place in the model")));
        }
        Ok(())
    }

    /// Builds the model described by the stored config.
    pub fn to_model(&self) -> Result<Model<T>> {
        self.to_model_as(&self.config)
    }

    /// Builds a model from `cfg` and fills it from this checkpoint.
    pub fn to_model_as(&self, cfg: &BackboneConfig) -> Result<Model<T>> {
        let mut model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_into(&mut model)?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint: record runs past end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, KvMap::default()).save(path)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    Checkpoint::load(path)?.to_model()
}

/// Loads `path` into a model declared by `cfg`; fails with a shape mismatch
/// when the stored parameters do not fit.
pub fn load_checkpoint_as<T: Real>(path: &Path, cfg: &BackboneConfig) -> Result<Model<T>> {
    Checkpoint::load(path)?.to_model_as(cfg)
}
