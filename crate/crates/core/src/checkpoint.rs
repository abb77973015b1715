//! Versioned binary checkpoints for pretrained encoders and full detectors.
//!
//! ```text
//! magic        8 bytes   "SEEGCKPT"
//! version      u32
//! header_len   u32
//! header       JSON: kind, configs, parameter manifest
//! values       f64 little-endian, parameters in manifest order, row-major
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bcpc::{BcpcConfig, BcpcModel, BcpcNet};
use crate::data::ChannelMap;
use crate::error::{Error, Result};
use crate::model::{Ablation, Detector, ModelConfig};
use crate::params::Params;
use crate::storage::Reader;
use crate::tape::Mat;

pub const MAGIC: &[u8; 8] = b"SEEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Header {
    Bcpc {
        bcpc: BcpcConfig,
        params: Vec<ParamEntry>,
        /// Free-form run information (seed, steps, losses).
        #[serde(default)]
        meta: serde_json::Value,
    },
    Detector {
        bcpc: BcpcConfig,
        model: ModelConfig,
        ablation: Ablation,
        channel_map: ChannelMap,
        params: Vec<ParamEntry>,
        #[serde(default)]
        meta: serde_json::Value,
    },
}

impl Header {
    fn entries(&self) -> &[ParamEntry] {
        match self {
            Header::Bcpc { params, .. } | Header::Detector { params, .. } => params,
        }
    }
}

fn manifest(params: &Params) -> Vec<ParamEntry> {
    params
        .ids()
        .map(|id| ParamEntry {
            name: params.name(id).to_string(),
            rows: params.get(id).nrows(),
            cols: params.get(id).ncols(),
            frozen: params.is_frozen(id),
        })
        .collect()
}

pub fn encode(header: &Header, params: &Params) -> Result<Vec<u8>> {
    let head = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(head.len() + 8 * params.count_scalars() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    for id in params.ids() {
        for v in params.get(id).iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Params)> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Malformed("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version == 0 || version > CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let mut params = Params::new();
    for e in header.entries() {
        let raw = r.take(8 * e.rows * e.cols)?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let m = Mat::from_shape_vec((e.rows, e.cols), vals).map_err(|err| Error::Malformed(err.to_string()))?;
        let id = params.add(e.name.clone(), m);
        params.set_frozen(id, e.frozen);
    }
    let body = r.pos;
    let rest = bytes.len() - body;
    if rest < 32 {
        return Err(Error::Truncated(format!("{rest} trailing bytes, expected a 32-byte checksum")));
    }
    if rest > 32 {
        return Err(Error::Malformed(format!("{} unexpected trailing bytes", rest - 32)));
    }
    if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
        return Err(Error::Checksum);
    }
    Ok((header, params))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Header, Params)> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_bcpc(model: &BcpcModel, meta: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let header = Header::Bcpc {
        bcpc: model.net.config.clone(),
        params: manifest(&model.params),
        meta,
    };
    write(path.as_ref(), &encode(&header, &model.params)?)
}

pub fn load_bcpc(path: impl AsRef<Path>) -> Result<BcpcModel> {
    match load(path)? {
        (Header::Bcpc { bcpc, .. }, params) => {
            let net = BcpcNet::attach(&params, bcpc)?;
            Ok(BcpcModel { net, params })
        }
        (Header::Detector { .. }, _) => Err(Error::Malformed("expected a pretrained encoder, found a detector".into())),
    }
}

pub fn save_detector(det: &Detector, meta: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let header = Header::Detector {
        bcpc: det.bcpc.config.clone(),
        model: det.config,
        ablation: det.ablation,
        channel_map: det.channel_map.clone(),
        params: manifest(&det.params),
        meta,
    };
    write(path.as_ref(), &encode(&header, &det.params)?)
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<(Detector, serde_json::Value)> {
    match load(path)? {
        (
            Header::Detector {
                bcpc,
                model,
                ablation,
                channel_map,
                meta,
                ..
            },
            params,
        ) => Ok((Detector::assemble(params, bcpc, channel_map, model, ablation)?, meta)),
        (Header::Bcpc { .. }, _) => Err(Error::Malformed("expected a detector, found a pretrained encoder".into())),
    }
}
