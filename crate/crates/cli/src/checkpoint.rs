//! Single-file binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EQDF" | u32 version | u64 len | config JSON | [u8; 32] sha256(config)
//!        | u64 len | manifest JSON | u64 len | f64 payload
//! ```
//!
//! Manifest entries carry the tensor name, its group (`param` or `ema`),
//! shape, byte offset into the payload and a sha256 of its bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use equidiff_core::backbone::init_params;
use equidiff_core::error::{Error, Result};
use equidiff_core::params::Params;
use equidiff_core::tensorcore::Tensor;

use crate::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"EQDF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: Params,
    pub ema: Params,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    group: String,
    shape: Vec<usize>,
    offset: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    entries: Vec<Entry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_same_layout(&self.ema)?;
        let config = self.config.to_json();
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (group, set) in [("param", &self.params), ("ema", &self.ema)] {
            for (name, t) in set.iter() {
                let bytes = tensor_bytes(t);
                entries.push(Entry {
                    name: name.clone(),
                    group: group.into(),
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                    sha256: hex(&Sha256::digest(&bytes)),
                });
                payload.extend(bytes);
            }
        }
        let manifest = serde_json::to_string(&Manifest {
            step: self.step,
            entries,
        })
        .expect("manifest serializes");

        let mut out = Vec::with_capacity(payload.len() + manifest.len() + config.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&Sha256::digest(config.as_bytes()));
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(bad("not an EQDF checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let n = r.len("config")?;
        let config_bytes = r.take(n, "config")?;
        let hash = r.take(32, "config hash")?;
        if Sha256::digest(config_bytes).as_slice() != hash {
            return Err(bad("config hash mismatch"));
        }
        let config_text = std::str::from_utf8(config_bytes).map_err(|_| bad("config is not UTF-8"))?;
        let config = RunConfig::from_json(config_text)?;
        let n = r.len("manifest")?;
        let manifest: Manifest =
            serde_json::from_slice(r.take(n, "manifest")?).map_err(|e| bad(format!("manifest: {e}")))?;
        let n = r.len("payload")?;
        let payload = r.take(n, "payload")?;
        if r.at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
        }

        let mut params = Params::new();
        let mut ema = Params::new();
        for e in &manifest.entries {
            let label = format!("entry `{}` ({})", e.name, e.group);
            let count: usize = e.shape.iter().product();
            let end = e.offset.checked_add(count * 8).filter(|&end| end <= payload.len());
            let end = end.ok_or_else(|| bad(format!("{label}: extends past the payload")))?;
            let raw = &payload[e.offset..end];
            if hex(&Sha256::digest(raw)) != e.sha256 {
                return Err(bad(format!("{label}: checksum mismatch")));
            }
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            match e.group.as_str() {
                "param" => params.insert(&e.name, t),
                "ema" => ema.insert(&e.name, t),
                other => return Err(bad(format!("{label}: unknown group `{other}`"))),
            }
        }

        // The tensors must be exactly those the configured model expects.
        let expected = init_params(&config.model, 0)?;
        for (group, set) in [("param", &params), ("ema", &ema)] {
            for (name, t) in expected.iter() {
                let got = set
                    .get(name)
                    .map_err(|_| bad(format!("entry `{name}` ({group}): missing")))?;
                if got.shape() != t.shape() {
                    return Err(bad(format!(
                        "entry `{name}` ({group}): shape {:?}, model expects {:?}",
                        got.shape(),
                        t.shape()
                    )));
                }
            }
            if let Some(extra) = set.names().find(|n| !expected.contains(n)) {
                return Err(bad(format!("entry `{extra}` ({group}): not part of the model")));
            }
        }
        Ok(Checkpoint {
            config,
            step: manifest.step,
            params,
            ema,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated in {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let raw = self.take(8, what)?;
        Ok(u64::from_le_bytes(raw.try_into().unwrap()) as usize)
    }
}
