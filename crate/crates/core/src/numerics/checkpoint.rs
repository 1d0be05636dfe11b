//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DDCK"            4 bytes magic
//! version           u32
//! record count      u32
//! per record:
//!   kind tag        u8
//!   dim count       u32, then that many u32 dims
//!   payload count   u32, then that many f32 values
//! ```
//!
//! Layer records use the [`LayerKind`] tags 0-5 with weights followed by
//! bias in the payload. Tag 6 holds a noise schedule: dims `[T]`, payload
//! the `T` betas.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::array::Array;
use super::layers::{Layer, LayerKind, LayerSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const SCHEDULE_TAG: u8 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub tag: u8,
    pub dims: Vec<u32>,
    pub payload: Vec<f32>,
}

impl Record {
    pub fn from_layer(layer: &Layer<f32>) -> Self {
        Self {
            tag: layer.spec().kind.tag(),
            dims: layer.spec().dims.clone(),
            payload: layer
                .params()
                .iter()
                .flat_map(|p| p.data().iter().copied())
                .collect(),
        }
    }

    pub fn to_layer(&self) -> Result<Layer<f32>> {
        let kind = LayerKind::from_tag(self.tag)
            .ok_or_else(|| Error::format(format!("record tag {} is not a layer", self.tag)))?;
        let spec = LayerSpec {
            kind,
            dims: self.dims.clone(),
        };
        spec.validate()?;
        let shapes = spec.param_shapes();
        let want: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if want != self.payload.len() {
            return Err(Error::format(format!(
                "{} record carries {} values, expected {want}",
                kind.name(),
                self.payload.len()
            )));
        }
        let mut offset = 0;
        let mut params = Vec::with_capacity(shapes.len());
        for s in &shapes {
            let n: usize = s.iter().product();
            params.push(Array::new(s, self.payload[offset..offset + n].to_vec())?);
            offset += n;
        }
        Layer::with_params(spec, params)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn push_layers<'a>(&mut self, layers: impl IntoIterator<Item = &'a Layer<f32>>) {
        self.records.extend(layers.into_iter().map(Record::from_layer));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.push(r.tag);
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(r.payload.len() as u32).to_le_bytes());
            for v in &r.payload {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes, "checkpoint");
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "bad checkpoint magic {:?}, expected \"DDCK\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let count = cur.u32()?;
        let mut records = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let tag = cur.u8()?;
            let nd = cur.u32()? as usize;
            let dims = (0..nd).map(|_| cur.u32()).collect::<Result<_>>()?;
            let np = cur.u32()? as usize;
            let payload = (0..np).map(|_| cur.f32()).collect::<Result<_>>()?;
            records.push(Record { tag, dims, payload });
        }
        if !cur.is_at_end() {
            return Err(Error::format("trailing bytes after last checkpoint record"));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Bounds-checked little-endian reader shared by the binary formats.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(format!(
                "truncated {}: needed {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(3, 0);
        let layers = [
            Layer::init(LayerSpec::conv2d(1, 2, 3, 1, 1), &mut rng).unwrap(),
            Layer::init(LayerSpec::relu(), &mut rng).unwrap(),
            Layer::init(LayerSpec::dense(2, 1), &mut rng).unwrap(),
        ];
        let mut ck = Checkpoint::default();
        ck.push_layers(&layers);
        ck
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"DDCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        // first record: conv2d tag, 5 dims
        assert_eq!(bytes[12], 1);
        assert_eq!(&bytes[13..17], &5u32.to_le_bytes());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let layer = back.records[0].to_layer().unwrap();
        assert_eq!(Record::from_layer(&layer), ck.records[0]);
    }

    #[test]
    fn bad_magic_names_expected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("DDCK"), "{err}");
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains('9') && err.contains('1'), "{err}");
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
