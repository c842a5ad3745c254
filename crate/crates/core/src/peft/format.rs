//! Binary tensor container shared by adapter plug-ins and base checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PEFT" | version u16 | kind u8 | config digest [32]u8 | tensor count u32
//! per tensor: name len u16 | UTF-8 name | dtype u8 (0 = f32) | ndim u8 | dims u32.. | payload
//! CRC32 u32 over every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PEFT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 32 + 4;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Lora = 0,
    Prefix = 1,
    BaseModel = 2,
}

impl FileKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(FileKind::Lora),
            1 => Ok(FileKind::Prefix),
            2 => Ok(FileKind::BaseModel),
            other => Err(Error::Format(format!("unknown file kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FileKind::Lora => "lora",
            FileKind::Prefix => "prefix",
            FileKind::BaseModel => "base-model",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: FileKind,
    pub config_digest: [u8; 32],
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + payload + 64 * self.tensors.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.config_digest);
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            let ndim = u8::try_from(t.shape().len())
                .map_err(|_| Error::Format(format!("{name}: too many dimensions")))?;
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("{name}: dimension too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::Format(format!(
                "file too short ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Format(format!(
                "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }

        let kind = FileKind::from_byte(body[6])?;
        let config_digest: [u8; 32] = body[7..39].try_into().expect("32 bytes");
        let mut r = Reader {
            buf: body,
            pos: 39,
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("{name}: unsupported dtype {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: dimensions overflow")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format(format!("{name}: payload overflow")))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data)
                .map_err(|e| Error::Format(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor table",
                body.len() - r.pos
            )));
        }
        Ok(TensorFile {
            kind,
            config_digest,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated tensor table".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorFile {
        TensorFile {
            kind: FileKind::Lora,
            config_digest: [7; 32],
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 3], vec![1., -2., 3.5, 0., 1e-8, -0.0]).unwrap()),
                ("βeta".into(), Tensor::scalar(16.0)),
            ],
        }
    }

    #[test]
    fn exact_layout_of_header_and_trailer() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PEFT");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(&bytes[7..39], &[7; 32]);
        assert_eq!(&bytes[39..43], &[2, 0, 0, 0]);
        // first tensor entry
        assert_eq!(&bytes[43..45], &[1, 0]);
        assert_eq!(bytes[45], b'a');
        assert_eq!(&bytes[46..48], &[0, 2]);
        assert_eq!(&bytes[48..56], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[56..60], &1.0f32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        assert_eq!(&bytes[n - 4..], &crc.to_le_bytes());
        // header + per-tensor (name len, name, dtype, ndim, dims, payload) + crc
        let expected = HEADER_LEN + (2 + 1 + 2 + 8 + 24) + (2 + 5 + 2 + 4 + 4) + 4;
        assert_eq!(n, expected);
    }

    #[test]
    fn corrupt_magic_version_and_truncation_are_format_errors() {
        let good = sample().to_bytes().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(TensorFile::from_bytes(&bad), Err(Error::Format(_))));
        for cut in [10, HEADER_LEN + 3, good.len() - 5] {
            assert!(matches!(TensorFile::from_bytes(&good[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn payload_bit_flip_fails_checksum() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[58] ^= 0x10;
        let err = TensorFile::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(vals in prop::collection::vec(any::<f32>(), 1..40), kind in 0u8..3) {
            let n = vals.len();
            let f = TensorFile {
                kind: FileKind::from_byte(kind).unwrap(),
                config_digest: [kind; 32],
                tensors: vec![("t".into(), Tensor::new(vec![n], vals.clone()).unwrap())],
            };
            let bytes = f.to_bytes().unwrap();
            let back = TensorFile::from_bytes(&bytes).unwrap();
            let got: Vec<u32> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
