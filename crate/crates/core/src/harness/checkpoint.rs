//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "RLCK" | version u16 | config hash [32] | step u64
//! | tensor count u32 | per tensor: name len u16, name, rank u8, dims u64…, offset u64
//! | payload len u64 | payload f64…
//! | rng count u32 | rng states
//! ```
//!
//! Offsets count `f64` elements from the start of the payload.

use std::path::Path;

use crate::datagen::write_atomic;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RLCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub config_hash: [u8; 32],
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub rng_states: Vec<RngState>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, in stored order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<Tensor> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.numel() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.rng_states.len() as u32).to_le_bytes());
        for r in &self.rng_states {
            out.extend_from_slice(&r.to_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            dir.push((name, shape, offset));
        }
        let payload_len = r.u64()?;
        let payload_at = r.pos;
        let payload_bytes = payload_len
            .checked_mul(8)
            .ok_or_else(|| Error::format(payload_at as u64, "payload length overflows"))?;
        let payload = r.take(payload_bytes as usize)?;
        let mut tensors = Vec::with_capacity(dir.len());
        for (name, shape, offset) in dir {
            let n: usize = shape.iter().product();
            let end = offset + n as u64;
            if end > payload_len {
                return Err(Error::format(payload_at as u64, format!("tensor {name} runs past the payload")));
            }
            let data = payload[offset as usize * 8..end as usize * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let n_rng = r.u32()? as usize;
        let mut rng_states = Vec::with_capacity(n_rng.min(1 << 10));
        for _ in 0..n_rng {
            let b: &[u8; RngState::BYTES] = r.take(RngState::BYTES)?.try_into().expect("sized");
            rng_states.push(RngState::from_bytes(b));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes"));
        }
        Ok(Self {
            version,
            config_hash,
            step,
            tensors,
            rng_states,
        })
    }

    /// Written to a temporary file and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos as u64, format!("truncated: wanted {n} bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn sample() -> Checkpoint {
        let mut rng = seeded(3);
        let _: u64 = rng.random();
        Checkpoint {
            version: VERSION,
            config_hash: [7; 32],
            step: 42,
            tensors: vec![
                ("a".into(), Tensor::matrix(2, 3, (0..6).map(f64::from).collect()).unwrap()),
                ("b.bias".into(), Tensor::vector(vec![-0.5, f64::MIN_POSITIVE]).unwrap()),
                ("s".into(), Tensor::scalar(3.25)),
            ],
            rng_states: vec![RngState::capture(&rng)],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = sample().encode();
        for cut in [0, 3, 10, 50, bytes.len() - 1] {
            let e = Checkpoint::decode(&bytes[..cut]).unwrap_err();
            assert_eq!(e.exit_code(), 3, "{e}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 4, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }
}
