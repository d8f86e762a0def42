//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `SMAECKPT`, u32 version, u64 store seed, u64 + UTF-8 config text,
//! u64 tensor count, then per tensor (sorted by name) u32 + UTF-8 name,
//! u8 trainable flag, u32 rank, u64 dims, f64 values; u32 RNG count, then
//! per RNG 32-byte seed, u64 stream, u128 word position; finally a SHA-256
//! of everything before it.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SMAECKPT";
pub const VERSION: u32 = 1;

/// Resumable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub rngs: Vec<RngState>,
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Config("checkpoint is truncated".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Config("checkpoint length overflow".into()))
    }
    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Config("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, store: ParamStore, rngs: Vec<RngState>) -> Self {
        Checkpoint {
            config,
            store,
            rngs,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.store.seed().to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for (name, p) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.requires_grad as u8);
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&p.value.to_le_bytes());
        }
        out.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for r in &self.rngs {
            out.extend_from_slice(&r.seed);
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Config("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Config("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            at: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let seed = r.u64()?;
        let text_len = r.len()?;
        let config = RunConfig::parse(&r.string(text_len)?, "test-small")?;
        let mut store = ParamStore::new(seed);
        for _ in 0..r.len()? {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Config(format!("tensor '{name}' is too large")))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Config(format!("tensor '{name}': {e}")))?;
            store.insert(&name, t)?;
            store.set_requires_grad(&name, trainable);
        }
        let rngs = (0..r.u32()?)
            .map(|_| {
                Ok(RngState {
                    seed: r.array()?,
                    stream: r.u64()?,
                    word_pos: u128::from_le_bytes(r.array()?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if r.at != body.len() {
            return Err(Error::Config("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            store,
            rngs,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Copies values into `target`, which must hold exactly the same names
    /// and shapes. The error names the first offending tensor in name order.
    pub fn load_into(&self, target: &mut ParamStore) -> Result<()> {
        let expected: Vec<String> = target.names().map(str::to_string).collect();
        for name in &expected {
            let want = target.get(name)?.shape().to_vec();
            match self.store.get(name) {
                Err(_) => {
                    return Err(Error::Config(format!(
                        "checkpoint is missing tensor '{name}'"
                    )))
                }
                Ok(t) if t.shape() != want.as_slice() => {
                    return Err(Error::Config(format!(
                        "tensor '{name}' has shape {:?} in checkpoint, model expects {want:?}",
                        t.shape()
                    )))
                }
                Ok(_) => {}
            }
        }
        if let Some(extra) = self.store.names().find(|n| !target.contains(n)) {
            return Err(Error::Config(format!(
                "checkpoint tensor '{extra}' does not exist in the model"
            )));
        }
        for name in &expected {
            *target.get_mut(name)? = self.store.get(name)?.clone();
        }
        Ok(())
    }
}
