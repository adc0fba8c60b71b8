//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "BINOMARK"
//! version  u32
//! config   u32 length + UTF-8 JSON {"model": ModelConfig, "adapters": [{"role", "lora"}]}
//! count    u32
//! entries  count × (u32 name length, name, u8 dtype (1 = f32, 2 = f64),
//!                   u32 ndim, ndim × u64 dims, raw values)
//! ```
//!
//! Entries are the base tensors followed by each adapter's A/B pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{base_layout, LoraAdapter, LoraConfig, ModelConfig, Role, TransformerLM};
use crate::error::CheckpointError;
use crate::numerics::{Real, Tensor, REAL_BITS};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BINOMARK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    role: Role,
    lora: LoraConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    adapters: Vec<AdapterHeader>,
}

fn dtype_code() -> u8 {
    if REAL_BITS == 64 {
        2
    } else {
        1
    }
}

pub fn save_checkpoint(model: &TransformerLM, path: &Path) -> Result<()> {
    let adapters: Vec<&LoraAdapter> = [Role::Performer, Role::Observer]
        .into_iter()
        .filter_map(|r| model.adapter(r))
        .collect();
    let header = Header {
        model: model.config().clone(),
        adapters: adapters
            .iter()
            .map(|a| AdapterHeader {
                role: a.role(),
                lora: a.config().clone(),
            })
            .collect(),
    };
    let mut entries = model.named_base_tensors();
    for a in &adapters {
        entries.extend(a.named_tensors());
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(&header)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dtype_code());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.at < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

fn parse(buf: &[u8]) -> Result<(Header, Vec<(String, Tensor)>), CheckpointError> {
    let mut r = Reader { buf, at: 0 };
    let magic = r.take(8, "magic").map_err(|_| CheckpointError::Version {
        magic: buf[..buf.len().min(8)].to_vec(),
        version: 0,
    })?;
    let version = r.u32("version");
    if magic != CHECKPOINT_MAGIC || version.as_ref().ok() != Some(&CHECKPOINT_VERSION) {
        return Err(CheckpointError::Version {
            magic: magic.to_vec(),
            version: version.unwrap_or(0),
        });
    }
    let hlen = r.u32("config length")? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen, "config")?)
        .map_err(|e| CheckpointError::Malformed(format!("config block: {e}")))?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let ctx = format!("entry {i}");
        let nlen = r.u32(&ctx)? as usize;
        let name = String::from_utf8(r.take(nlen, &ctx)?.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("{ctx}: name is not UTF-8")))?;
        let dtype = r.take(1, &name)?[0];
        let width = match dtype {
            1 => 32,
            2 => 64,
            other => {
                return Err(CheckpointError::Malformed(format!(
                    "{name}: unknown dtype {other}"
                )))
            }
        };
        if width != REAL_BITS {
            return Err(CheckpointError::Dtype {
                expected: REAL_BITS,
                found: width,
            });
        }
        let ndim = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(&name)? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = n
            .checked_mul(width as usize / 8)
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflow")))?;
        let raw = r.take(bytes, &name)?;
        let data: Vec<Real> = raw
            .chunks_exact(std::mem::size_of::<Real>())
            .map(|c| Real::from_le_bytes(c.try_into().expect("element width")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    if r.at != buf.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            buf.len() - r.at
        )));
    }
    Ok((header, entries))
}

fn expected_layout(header: &Header) -> Vec<(String, Vec<usize>)> {
    let mut out = base_layout(&header.model);
    for a in &header.adapters {
        let (d, r) = (header.model.d_model, a.lora.rank);
        for l in 0..header.model.n_layers {
            for p in a.lora.target_set() {
                let prefix = format!("{}.layers.{l}.{}", a.role.name(), p.short());
                out.push((format!("{prefix}.lora_a"), vec![r, d]));
                out.push((format!("{prefix}.lora_b"), vec![d, r]));
            }
        }
    }
    out
}

fn assemble(
    header: Header,
    entries: Vec<(String, Tensor)>,
    expect: &[(String, Vec<usize>)],
) -> Result<TransformerLM> {
    if entries.len() != expect.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} tensors stored, configuration implies {}",
            entries.len(),
            expect.len()
        ))
        .into());
    }
    for ((name, t), (ename, eshape)) in entries.iter().zip(expect) {
        if name != ename {
            return Err(CheckpointError::Malformed(format!(
                "expected tensor {ename}, found {name}"
            ))
            .into());
        }
        if t.shape() != eshape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: eshape.clone(),
                found: t.shape().to_vec(),
            }
            .into());
        }
    }
    let nbase = base_layout(&header.model).len();
    let mut tensors = entries.into_iter().map(|(_, t)| t);
    let base: Vec<Tensor> = tensors.by_ref().take(nbase).collect();
    let (mut performer, mut observer) = (None, None);
    for a in header.adapters {
        let n = 2 * header.model.n_layers * a.lora.target_set().len();
        let ts: Vec<Tensor> = tensors.by_ref().take(n).collect();
        let adapter = TransformerLM::adapter_from_parts(a.role, a.lora, &header.model, ts);
        let slot = match a.role {
            Role::Performer => &mut performer,
            Role::Observer => &mut observer,
        };
        if slot.replace(adapter).is_some() {
            return Err(
                CheckpointError::Malformed(format!("duplicate {} adapter", a.role.name())).into(),
            );
        }
    }
    Ok(TransformerLM::from_parts(
        header.model,
        base,
        performer,
        observer,
    ))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a model with whatever configuration and adapters the file records.
pub fn load_checkpoint(path: &Path) -> Result<TransformerLM> {
    let (header, entries) = parse(&read(path)?)?;
    header.model.validate()?;
    let expect = expected_layout(&header);
    assemble(header, entries, &expect)
}

/// Loads a checkpoint that must hold tensors shaped for `cfg`.
pub fn load_checkpoint_expecting(path: &Path, cfg: &ModelConfig) -> Result<TransformerLM> {
    let (mut header, entries) = parse(&read(path)?)?;
    let stored = header.model.clone();
    header.model = cfg.clone();
    let expect = expected_layout(&header);
    let model = assemble(header, entries, &expect)?;
    if &stored != cfg {
        return Err(Error::Config(format!(
            "checkpoint was built for {stored:?}, expected {cfg:?}"
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, tiny_config};
    use rand::Rng;

    fn trained_like() -> TransformerLM {
        let mut m = init_model(&tiny_config(), 2).unwrap();
        m.attach_adapter(&LoraConfig::new(2, 4.0), Role::Performer, 1)
            .unwrap();
        m.attach_adapter(&LoraConfig::new(3, 12.0), Role::Observer, 1)
            .unwrap();
        let mut r = crate::rng::stream(3, &[]);
        for role in [Role::Performer, Role::Observer] {
            for t in m.adapter_mut(role).unwrap().tensors_mut() {
                for x in t.data_mut() {
                    *x += r.random_range(-0.1..0.1);
                }
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = trained_like();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), m.config());
        let toks = [1, 2, 3, 4, 5];
        for role in [None, Some(Role::Performer), Some(Role::Observer)] {
            let a = m.forward_tokens(role, &toks).unwrap();
            let b = back.forward_tokens(role, &toks).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corrupted_magic_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&trained_like(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::Version { .. }))
        ));
    }

    #[test]
    fn truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&trained_like(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
    }

    #[test]
    fn shape_mismatch_against_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&trained_like(), &path).unwrap();
        let other = ModelConfig {
            d_model: 12,
            ..tiny_config()
        };
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
        assert!(load_checkpoint_expecting(&path, &tiny_config()).is_ok());
    }
}
