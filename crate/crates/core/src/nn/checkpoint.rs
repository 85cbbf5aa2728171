//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "USDCCKPT"
//! version  u32      = 1
//! count    u32      number of records
//! record*  kind u8 (1 = f64 tensor, 2 = u64 words, 3 = utf-8 text)
//!          name_len u32, name bytes (utf-8)
//!          ndim u32, dims u64 * ndim        (words/text: ndim = 1)
//!          payload                          (f64 LE / u64 LE / raw bytes)
//! ```
//!
//! Tensors are row-major. Loading a saved file reproduces every value bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"USDCCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Tensor { shape: Vec<usize>, data: Vec<f64> },
    Words(Vec<u64>),
    Text(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Record)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    fn push(&mut self, name: impl Into<String>, rec: Record) {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate checkpoint record {name}"
        );
        self.entries.push((name, rec));
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(
            name,
            Record::Tensor {
                shape: shape.to_vec(),
                data: data.to_vec(),
            },
        );
    }

    pub fn put_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.put_tensor(name, &[1], &[v]);
    }

    pub fn put_words(&mut self, name: impl Into<String>, words: &[u64]) {
        self.push(name, Record::Words(words.to_vec()));
    }

    pub fn put_text(&mut self, name: impl Into<String>, text: &str) {
        self.push(name, Record::Text(text.to_string()));
    }

    fn get(&self, name: &str) -> Result<&Record> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Record::Tensor { shape, data } => Ok((shape, data)),
            _ => Err(Error::Checkpoint(format!("{name} is not a tensor"))),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let (_, d) = self.tensor(name)?;
        d.first()
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("{name} is empty")))
    }

    pub fn words(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Record::Words(w) => Ok(w),
            _ => Err(Error::Checkpoint(format!("{name} is not a word array"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Record::Text(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("{name} is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, rec) in &self.entries {
            let (kind, shape): (u8, Vec<usize>) = match rec {
                Record::Tensor { shape, .. } => (1, shape.clone()),
                Record::Words(w) => (2, vec![w.len()]),
                Record::Text(t) => (3, vec![t.len()]),
            };
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match rec {
                Record::Tensor { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::Words(w) => {
                    for v in w {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::Text(t) => out.extend_from_slice(t.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let rec = match kind {
                1 => Record::Tensor {
                    data: (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?,
                    shape,
                },
                2 => Record::Words((0..n).map(|_| r.u64()).collect::<Result<_>>()?),
                3 => Record::Text(
                    String::from_utf8(r.take(n)?.to_vec())
                        .map_err(|_| Error::Checkpoint(format!("{name}: text is not utf-8")))?,
                ),
                k => return Err(Error::Checkpoint(format!("unknown record kind {k}"))),
            };
            ck.push(name, rec);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            data in proptest::collection::vec(any::<u64>().prop_map(f64::from_bits), 0..64),
            words in proptest::collection::vec(any::<u64>(), 0..8),
            text in "[a-z ]{0,20}",
        ) {
            let mut ck = Checkpoint::new();
            ck.put_tensor("w", &[data.len()], &data);
            ck.put_words("rng", &words);
            ck.put_text("meta", &text);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let (_, d) = back.tensor("w").unwrap();
            for (a, b) in d.iter().zip(&data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.put_scalar("a", 1.5);
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(ck.words("a").is_err());
        assert!(ck.tensor("b").is_err());
    }
}
