//! Checkpoint files for trained networks.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic            8 bytes ("FMCKPT01" or "SMCKPT01")
//! version          u32
//! header length    u32
//! header           UTF-8 JSON {"network": NetworkConfig, "meta": any}
//! tensor count     u32
//! per tensor, in declaration order:
//!   name length u16, name bytes, rank u8, dims u32 x rank, values f64 x prod(dims)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{NetworkConfig, UNet};
use crate::channel::Reader;
use crate::error::{Error, Result};

pub const FM_MAGIC: &[u8; 8] = b"FMCKPT01";
pub const SM_MAGIC: &[u8; 8] = b"SMCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode_checkpoint(magic: &[u8; 8], net: &UNet, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        network: net.config().clone(),
        meta: meta.clone(),
    })?;
    let store = net.params();
    let mut buf = Vec::with_capacity(24 + header.len() + store.len() * 8 + store.entries().len() * 48);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(store.entries().len() as u32).to_le_bytes());
    for (i, e) in store.entries().iter().enumerate() {
        buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in store.get(super::params::ParamId(i)) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(magic: &[u8; 8], bytes: &[u8]) -> Result<(UNet, serde_json::Value)> {
    let mut r = Reader::new(bytes);
    r.magic(magic)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32("header length")? as usize;
    let header_at = r.pos() as u64;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::format(header_at, format!("bad header JSON: {e}")))?;
    let mut net = UNet::new(header.network)
        .map_err(|e| Error::format(header_at, format!("bad network config: {e}")))?;

    let count_at = r.pos() as u64;
    let count = r.u32("tensor count")? as usize;
    let expected: Vec<_> = net.params().entries().to_vec();
    if count != expected.len() {
        return Err(Error::format(
            count_at,
            format!("{count} tensors, network declares {}", expected.len()),
        ));
    }
    let mut values = Vec::with_capacity(net.param_count());
    for e in &expected {
        let at = r.pos() as u64;
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "name")?).into_owned();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        if name != e.name || shape != e.shape {
            return Err(Error::format(
                at,
                format!(
                    "tensor {name:?} {shape:?} where {:?} {:?} was expected",
                    e.name, e.shape
                ),
            ));
        }
        for _ in 0..e.len {
            let at = r.pos() as u64;
            let v = r.f64("value")?;
            if !v.is_finite() {
                return Err(Error::format(at, format!("non-finite value in {name}")));
            }
            values.push(v);
        }
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos() as u64, format!("{} trailing bytes", r.remaining())));
    }
    net.params_mut().load_flat(&values)?;
    Ok((net, header.meta))
}

pub fn save_checkpoint(path: impl AsRef<Path>, magic: &[u8; 8], net: &UNet, meta: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(magic, net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, magic: &[u8; 8]) -> Result<(UNet, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(magic, &bytes)
}
