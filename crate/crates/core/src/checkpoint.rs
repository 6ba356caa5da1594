//! Binary tensor checkpoints (`PADR1`) with a `key=value` config sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{bail, Result};
use crate::kvfile::KvMap;
use crate::numkit::Tensor;

const MAGIC: &[u8; 6] = b"PADR1\n";

/// Named tensors in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        match self.tensors.iter().find(|(n, _)| n == name) {
            Some((_, t)) => Ok(t),
            None => bail!(Config, "checkpoint has no tensor `{name}`"),
        }
    }

    /// Fetches `name` and checks its dims.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let t = self.get(name)?;
        if t.dims() != dims {
            bail!(Config, "tensor `{name}` has dims {:?}, expected {:?}", t.dims(), dims);
        }
        t.check_finite(name)?;
        Ok(t.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if name.len() > u16::MAX as usize || t.dims().len() > u8::MAX as usize {
                bail!(Config, "tensor `{name}` cannot be encoded");
            }
            out.extend((name.len() as u16).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend((d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend(x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            bail!(Parse, "not a PADR1 checkpoint");
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| crate::Error::Parse("tensor name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().product::<usize>();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| crate::Error::Parse("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&dims, data).map_err(|e| crate::Error::Parse(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            bail!(Parse, "{} trailing bytes after checkpoint", bytes.len() - r.pos);
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Parse, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// `model.ckpt` → `model.ckpt.cfg`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Writes tensors and their config sidecar.
pub fn save(path: &Path, ckpt: &Checkpoint, config: &KvMap) -> Result<()> {
    ckpt.write(path)?;
    config.write(&sidecar_path(path))
}

pub fn load(path: &Path) -> Result<(Checkpoint, KvMap)> {
    Ok((Checkpoint::read(path)?, KvMap::read(&sidecar_path(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut c = Checkpoint::new();
        c.push("a", Tensor::vector(vec![1.0, -2.0]));
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..6], b"PADR1\n");
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..12], &1u16.to_le_bytes());
        assert_eq!(b[12], b'a');
        assert_eq!(b[13], 1);
        assert_eq!(&b[14..18], &2u32.to_le_bytes());
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 26);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"PADR2\n").is_err());
        let mut c = Checkpoint::new();
        c.push("w", Tensor::zeros(&[2, 3]));
        let b = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(c.expect("w", &[3, 2]).is_err());
        assert!(c.get("missing").is_err());
    }
}
