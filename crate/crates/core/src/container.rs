//! The NSDT tensor-container file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "NSDT" | version u16 | record count u32
//! per record: name length u16 | UTF-8 name | rank u8 |
//!             extents u32 x rank | dtype u8 (0 = f32) |
//!             payload f32 x prod(extents), row-major
//! ```
//!
//! Names are unique. Small metadata (label rules, seeds, counters,
//! fingerprints) rides in the *name* of rank-0 records under `meta/`,
//! keeping payloads pure f32 and round trips bitwise.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffmath::NdArray;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NSDT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn to_ndarray(&self) -> Result<NdArray> {
        NdArray::from_f32(self.shape.clone(), &self.data)
    }

    pub fn from_ndarray(a: &NdArray) -> Self {
        Self { shape: a.shape().to_vec(), data: a.to_f32_vec() }
    }
}

/// An ordered set of named f32 arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    records: Vec<(String, Record)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, name: &str, record: Record) -> Result<()> {
        if self.records.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("duplicate record name {name:?}")));
        }
        let want: usize = record.shape.iter().product();
        if record.data.len() != want {
            return Err(Error::Dimension(format!(
                "record {name:?}: {} payload values for shape {:?}",
                record.data.len(),
                record.shape
            )));
        }
        self.records.push((name.to_string(), record));
        Ok(())
    }

    pub fn insert_array(&mut self, name: &str, a: &NdArray) -> Result<()> {
        self.insert(name, Record::from_ndarray(a))
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn get_array(&self, name: &str) -> Result<NdArray> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("record {name:?} missing")))?
            .to_ndarray()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    /// Metadata helper: stores `meta/<key>/<value>` as a rank-0 record.
    pub fn insert_meta(&mut self, key: &str, value: &str) -> Result<()> {
        if key.contains('/') {
            return Err(Error::Contract(format!("meta key {key:?} must not contain '/'")));
        }
        self.insert(&format!("meta/{key}/{value}"), Record { shape: vec![], data: vec![0.0] })
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        let prefix = format!("meta/{key}/");
        self.records
            .iter()
            .find(|(n, _)| n.starts_with(&prefix))
            .map(|(n, _)| &n[prefix.len()..])
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.get_meta(key).ok_or_else(|| Error::Data(format!("metadata {key:?} missing")))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let count = u32::try_from(self.records.len())
            .map_err(|_| Error::Range("too many records for u32 count".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, rec) in &self.records {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Range(format!("record name {name:?} too long")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let rank = u8::try_from(rec.shape.len())
                .map_err(|_| Error::Range("rank exceeds u8".into()))?;
            w.write_all(&[rank])?;
            for &e in &rec.shape {
                let e = u32::try_from(e).map_err(|_| Error::Range("extent exceeds u32".into()))?;
                w.write_all(&e.to_le_bytes())?;
            }
            w.write_all(&[DTYPE_F32])?;
            for v in &rec.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut reader = CountingReader { inner: r, offset: 0 };
        let magic = reader.bytes_at::<4>("magic")?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}, want NSDT") });
        }
        let version = u16::from_le_bytes(reader.bytes_at::<2>("version")?);
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let count = u32::from_le_bytes(reader.bytes_at::<4>("record count")?);
        let mut out = Self::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = reader.offset;
            let name_len = u16::from_le_bytes(reader.bytes_at::<2>("name length")?) as usize;
            let mut name_bytes = vec![0u8; name_len];
            reader.fill(&mut name_bytes, "record name")?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
                offset: at,
                msg: "record name is not UTF-8".into(),
            })?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("duplicate record name {name:?}"),
                });
            }
            let rank = reader.bytes_at::<1>("rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(reader.bytes_at::<4>("extent")?) as usize);
            }
            let dtype_at = reader.offset;
            let dtype = reader.bytes_at::<1>("dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format {
                    offset: dtype_at,
                    msg: format!("unknown dtype tag {dtype}"),
                });
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(reader.bytes_at::<4>("payload")?));
            }
            out.records.push((name, Record { shape, data }));
        }
        Ok(out)
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }
}

struct CountingReader<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> CountingReader<'_, R> {
    fn bytes_at<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: at,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert_array("spectrum/0", &NdArray::new(vec![2, 2], vec![1.0, -0.5, 0.25, 3.0]).unwrap())
            .unwrap();
        c.insert_array("labels", &NdArray::new(vec![3], vec![0.0, 1.0, 1.0]).unwrap()).unwrap();
        c.insert_meta("label_rule", "per-class-tensors").unwrap();
        c.insert_meta("step", "200").unwrap();
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write(&mut bytes).unwrap();
        let back = TensorContainer::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn metadata_is_name_encoded() {
        let c = sample();
        assert_eq!(c.get_meta("label_rule"), Some("per-class-tensors"));
        assert_eq!(c.get_meta("step"), Some("200"));
        assert_eq!(c.get_meta("missing"), None);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut c = sample();
        assert!(matches!(
            c.insert_array("labels", &NdArray::scalar(0.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn truncation_reports_the_byte_offset() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write(&mut bytes).unwrap();
        let cut = bytes.len() - 3;
        let err = TensorContainer::read(&mut bytes[..cut].as_ref()).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0 && offset <= cut as u64),
            other => panic!("want Format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_format_error_at_zero() {
        let err = TensorContainer::read(&mut &b"XXXX\x01\x00\x00\x00\x00\x00"[..]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }
}
