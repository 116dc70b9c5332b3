//! Binary checkpoint format.
//!
//! ```text
//! magic "MOMCKPT1" | version u32 | entry count u32
//! entry: name (u32 length + UTF-8) | dtype u32 (0=f32, 1=f64) | rank u32
//!        | dims (u64 each) | raw scalars
//! metadata: pair count u32 | (key, value) strings as u32 length + UTF-8
//! ```
//! All integers and scalars are little-endian.

use std::io::Write;
use std::path::Path;

use mom_tensor::{DType, Storage};

use crate::assembly::Policy;
use crate::config::ModelConfig;
use crate::model::{ModelSpec, MomModel};
use crate::{MomError, Result};

pub const MAGIC: &[u8; 8] = b"MOMCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Storage,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub metadata: Vec<(String, String)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            MomError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| MomError::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        for e in &self.entries {
            put_str(&mut out, &e.name);
            put_u32(&mut out, e.data.dtype().code());
            put_u32(&mut out, e.shape.len() as u32);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.data.to_le_bytes());
        }
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    /// Parses a whole checkpoint; nothing is returned unless every byte is valid.
    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(MomError::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MomError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let code = r.u32()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| MomError::Checkpoint(format!("{name}: unknown dtype code {code}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.size_of()).ok_or_else(|| MomError::Checkpoint("size overflow".into()))?)?;
            let data = Storage::from_le_bytes(raw, dtype)
                .ok_or_else(|| MomError::Checkpoint(format!("{name}: bad data length")))?;
            entries.push(Entry { name, shape, data });
        }
        let pairs = r.u32()?;
        let mut metadata = Vec::new();
        for _ in 0..pairs {
            metadata.push((r.string()?, r.string()?));
        }
        if r.pos != buf.len() {
            return Err(MomError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { entries, metadata })
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| MomError::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| MomError::io(path, e))?;
        tmp.persist(path).map_err(|e| MomError::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path).map_err(|e| MomError::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }
}

fn spec_metadata(spec: &ModelSpec) -> Vec<(String, String)> {
    let c = &spec.config;
    [
        ("vocab", c.vocab.to_string()),
        ("d_model", c.d_model.to_string()),
        ("heads", c.heads.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("max_len", c.max_len.to_string()),
        ("eps", c.eps.to_string()),
        ("plan", spec.plan.to_string()),
        ("mom", spec.mom.to_string()),
        ("policy", spec.policy.to_string()),
        ("router", spec.router.to_string()),
        ("dtype", spec.dtype.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn spec_from_metadata(ckpt: &Checkpoint) -> Result<ModelSpec> {
    let get = |k: &str| {
        ckpt.meta(k)
            .ok_or_else(|| MomError::Checkpoint(format!("metadata key {k} missing")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| MomError::Checkpoint(format!("metadata {k} is not an integer")))
    };
    Ok(ModelSpec {
        config: ModelConfig {
            vocab: num("vocab")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            d_ff: num("d_ff")?,
            max_len: num("max_len")?,
            eps: get("eps")?
                .parse()
                .map_err(|_| MomError::Checkpoint("metadata eps is not a number".into()))?,
        },
        plan: get("plan")?.parse()?,
        mom: get("mom")?.parse()?,
        policy: get("policy")?.parse::<Policy>()?,
        router: get("router")?.parse()?,
        dtype: DType::parse(get("dtype")?).ok_or_else(|| MomError::Checkpoint("metadata dtype unknown".into()))?,
    })
}

/// Snapshot of a model's parameters and structure. `extra` metadata pairs
/// follow the structural keys.
pub fn model_checkpoint(model: &MomModel, extra: &[(String, String)]) -> Checkpoint {
    let entries = model
        .named_params()
        .into_iter()
        .map(|(name, t)| Entry {
            name,
            shape: t.shape().to_vec(),
            data: t.storage().clone(),
        })
        .collect();
    let mut metadata = spec_metadata(&model.spec);
    metadata.extend(extra.iter().cloned());
    Checkpoint { entries, metadata }
}

pub fn save_model(model: &MomModel, path: &Path, extra: &[(String, String)]) -> Result<()> {
    model_checkpoint(model, extra).save(path)
}

/// Rebuilds the model described by the metadata and fills in every parameter.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<MomModel> {
    let spec = spec_from_metadata(ckpt)?;
    let model = MomModel::new(spec, 0)?;
    let params = model.named_params();
    if params.len() != ckpt.entries.len() {
        return Err(MomError::Checkpoint(format!(
            "model has {} parameters, checkpoint has {}",
            params.len(),
            ckpt.entries.len()
        )));
    }
    for ((name, t), e) in params.iter().zip(&ckpt.entries) {
        if *name != e.name || t.shape() != e.shape.as_slice() || t.dtype() != e.data.dtype() {
            return Err(MomError::Checkpoint(format!(
                "entry {} {:?} does not match parameter {name} {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
    }
    for ((_, t), e) in params.iter().zip(&ckpt.entries) {
        t.assign(&e.data)?;
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<(MomModel, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((model_from_checkpoint(&ckpt)?, ckpt))
}
