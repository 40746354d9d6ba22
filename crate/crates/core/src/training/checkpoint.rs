//! "DEF1" checkpoints: a versioned sequence of named chunks holding
//! little-endian `f64` tensors or a `key = value` text block.

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DEF1";
pub const VERSION: u32 = 1;
const KIND_TENSOR: u8 = 0;
const KIND_TEXT: u8 = 1;
const CONFIG_CHUNK: &str = "config";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: Config,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&((self.params.len() + 1) as u32).to_le_bytes());
        let header = |out: &mut Vec<u8>, kind: u8, name: &str| {
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        };
        for (name, t) in self.params.iter() {
            header(&mut out, KIND_TENSOR, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        header(&mut out, KIND_TEXT, CONFIG_CHUNK);
        let text = self.config.render();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a DEF1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let chunks = r.u32()?;
        let mut ck = Checkpoint::default();
        for _ in 0..chunks {
            let kind = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("chunk name is not UTF-8".into()))?
                .to_string();
            match kind {
                KIND_TENSOR => {
                    let ndim = r.u32()? as usize;
                    let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    ck.params.insert(name, Tensor::new(shape, data)?);
                }
                KIND_TEXT => {
                    let len = r.u64()? as usize;
                    let text = std::str::from_utf8(r.take(len)?)
                        .map_err(|_| Error::Checkpoint("text chunk is not UTF-8".into()))?;
                    if name == CONFIG_CHUNK {
                        ck.config = Config::parse(text)?;
                    }
                }
                k => return Err(Error::Checkpoint(format!("unknown chunk kind {k} for `{name}`"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.params.iter() {
            if n.starts_with(prefix) {
                out.insert(n, t.clone());
            }
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(1);
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng));
        params.insert("b", Tensor::filled(&[1], f64::MIN_POSITIVE));
        let mut config = Config::default();
        config.set("dcn", true);
        config.set("width", "8,16,16");
        Checkpoint { params, config }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"DEF1");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.def1");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(ck.with_prefix("a.").len(), 1);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(matches!(Checkpoint::load("/nonexistent/x.def1"), Err(Error::File { .. })));
    }
}
