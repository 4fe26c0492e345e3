//! Latent cache files: a 16-byte header (`DILT` magic, then channels,
//! height and width as little-endian `u32`) followed by the entries as
//! little-endian `f32` in `(c, h, w)` order.

use std::fs;
use std::path::Path;

use crate::diffusion::Latent;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DILT";
const HEADER_LEN: usize = 16;

pub fn encode_latent(z: &Latent) -> Vec<u8> {
    let (c, h, w) = z.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * c * h * w);
    out.extend_from_slice(MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in z.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes a clean latent.
pub fn decode_latent(bytes: &[u8]) -> Result<Latent> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::CorruptCache("bad latent header".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let shape = (dim(0), dim(1), dim(2));
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * shape.0 * shape.1 * shape.2 {
        return Err(Error::CorruptCache(format!(
            "latent body is {} bytes, header says {:?}",
            body.len(),
            shape
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let data = crate::diffusion::latent::from_flat(shape, values)?;
    Latent::clean(data).map_err(|_| Error::CorruptCache("non-finite latent".into()))
}

pub fn write_latent(path: &Path, z: &Latent) -> Result<()> {
    super::write_atomic(path, &encode_latent(z))
}

pub fn read_latent(path: &Path) -> Result<Latent> {
    decode_latent(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
