//! On-disk dataset format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic        8 bytes   "SEEGDATA"
//! version      u32
//! kind         u8        0 = recording, 1 = segment set
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 JSON
//! blocks       repeated: dtype u8 (0 = f32, 1 = u8), ndim u8,
//!              dims ndim × u64, then the row-major payload
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! A recording has two blocks (samples `|T|×|C|` f32, labels `|T|×|C|` u8);
//! a segment set has two (data `|S|×|C|×k` f32, channel labels `|S|×|C|` u8);
//! region and patient labels are re-derived on load. A JSON sidecar with
//! the same metadata is written next to the file for inspection.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ChannelMap, Provenance, Recording, SegmentSet, SegmentationConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SEEGDATA";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Recording(Recording),
    Segments(SegmentSet),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kind: String,
    sample_rate: f64,
    channel_map: ChannelMap,
    #[serde(default)]
    segmentation: Option<SegmentationConfig>,
    #[serde(default)]
    first_segment: usize,
    #[serde(default)]
    provenance: Option<Provenance>,
}

impl Dataset {
    pub fn store(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (kind, meta) = match self {
            Dataset::Recording(r) => (
                0u8,
                Meta {
                    kind: "recording".into(),
                    sample_rate: r.sample_rate(),
                    channel_map: r.channel_map().clone(),
                    segmentation: None,
                    first_segment: 0,
                    provenance: r.provenance().cloned(),
                },
            ),
            Dataset::Segments(s) => (
                1u8,
                Meta {
                    kind: "segments".into(),
                    sample_rate: s.sample_rate(),
                    channel_map: s.channel_map().clone(),
                    segmentation: Some(s.config()),
                    first_segment: s.first_segment(),
                    provenance: None,
                },
            ),
        };
        let meta_json = serde_json::to_vec(&meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(kind);
        buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_json);
        match self {
            Dataset::Recording(r) => {
                write_f32_block(&mut buf, r.samples().shape(), r.samples().iter());
                write_u8_block(&mut buf, r.labels().shape(), r.labels().iter());
            }
            Dataset::Segments(s) => {
                write_f32_block(&mut buf, s.data().shape(), s.data().iter());
                write_u8_block(&mut buf, s.channel_labels().shape(), s.channel_labels().iter());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

        let sidecar = sidecar_path(path);
        let pretty = serde_json::to_vec_pretty(&meta)?;
        fs::write(&sidecar, pretty).map_err(|e| Error::io(sidecar, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Malformed("bad magic".into()));
        }
        let version = r.u32()?;
        if version > FORMAT_VERSION || version == 0 {
            return Err(Error::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let kind = r.u8()?;
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;

        let (a_shape, a_f32) = r.f32_block()?;
        let (b_shape, b_u8) = r.u8_block()?;
        let remaining = bytes.len() - r.pos;
        if remaining < CHECKSUM_LEN {
            return Err(Error::Truncated(format!(
                "{remaining} trailing bytes, expected a {CHECKSUM_LEN}-byte checksum"
            )));
        }
        if remaining > CHECKSUM_LEN {
            return Err(Error::Malformed(format!("{} unexpected trailing bytes", remaining - CHECKSUM_LEN)));
        }
        let digest = Sha256::digest(&bytes[..r.pos]);
        if digest.as_slice() != &bytes[r.pos..] {
            return Err(Error::Checksum);
        }

        match kind {
            0 => {
                let samples = to_array2(a_shape, a_f32)?;
                let labels = to_array2(b_shape, b_u8)?;
                Ok(Dataset::Recording(Recording::new(
                    samples,
                    labels,
                    meta.sample_rate,
                    meta.channel_map,
                    meta.provenance,
                )?))
            }
            1 => {
                if a_shape.len() != 3 {
                    return Err(Error::Malformed("segment data must be 3-D".into()));
                }
                let data = Array3::from_shape_vec((a_shape[0], a_shape[1], a_shape[2]), a_f32)
                    .map_err(|e| Error::Malformed(e.to_string()))?;
                let labels = to_array2(b_shape, b_u8)?;
                let config = meta
                    .segmentation
                    .ok_or_else(|| Error::Malformed("segment set without segmentation".into()))?;
                Ok(Dataset::Segments(SegmentSet::from_parts(
                    data,
                    labels,
                    config,
                    meta.channel_map,
                    meta.sample_rate,
                    meta.first_segment,
                )?))
            }
            other => Err(Error::Malformed(format!("unknown dataset kind {other}"))),
        }
    }

    pub fn into_recording(self) -> Result<Recording> {
        match self {
            Dataset::Recording(r) => Ok(r),
            Dataset::Segments(_) => Err(Error::Malformed("expected a recording, found segments".into())),
        }
    }

    pub fn into_segments(self) -> Result<SegmentSet> {
        match self {
            Dataset::Segments(s) => Ok(s),
            Dataset::Recording(_) => Err(Error::Malformed("expected segments, found a recording".into())),
        }
    }
}

/// `data.seeg` → `data.seeg.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn write_dims(buf: &mut Vec<u8>, dtype: u8, shape: &[usize]) {
    buf.push(dtype);
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn write_f32_block<'a>(buf: &mut Vec<u8>, shape: &[usize], values: impl Iterator<Item = &'a f32>) {
    write_dims(buf, 0, shape);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_u8_block<'a>(buf: &mut Vec<u8>, shape: &[usize], values: impl Iterator<Item = &'a u8>) {
    write_dims(buf, 1, shape);
    buf.extend(values.copied());
}

fn to_array2<T>(shape: Vec<usize>, v: Vec<T>) -> Result<Array2<T>> {
    if shape.len() != 2 {
        return Err(Error::Malformed(format!("expected 2-D block, found {}-D", shape.len())));
    }
    Array2::from_shape_vec((shape[0], shape[1]), v).map_err(|e| Error::Malformed(e.to_string()))
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dims(&mut self, dtype: u8) -> Result<(Vec<usize>, usize)> {
        let found = self.u8()?;
        if found != dtype {
            return Err(Error::Malformed(format!("block dtype {found}, expected {dtype}")));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(self.u64()?).map_err(|_| Error::Malformed("dimension overflow".into()))?;
            count = count.checked_mul(d).ok_or_else(|| Error::Malformed("block too large".into()))?;
            shape.push(d);
        }
        Ok((shape, count))
    }

    fn f32_block(&mut self) -> Result<(Vec<usize>, Vec<f32>)> {
        let (shape, count) = self.dims(0)?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Malformed("block too large".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, values))
    }

    fn u8_block(&mut self) -> Result<(Vec<usize>, Vec<u8>)> {
        let (shape, count) = self.dims(1)?;
        Ok((shape, self.take(count)?.to_vec()))
    }
}
