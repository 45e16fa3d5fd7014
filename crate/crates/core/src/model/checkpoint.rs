//! Checkpoint serialization.
//!
//! Layout: magic `SCKP`, u32 format version, u64 header length, JSON header
//! (model config and vocab sizes), then every parameter tensor in the fixed
//! visit order as u64 rows, u64 cols, and row-major little-endian f32 data.
//! Save-load-save reproduces the file byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCKP";
const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    src_vocab: usize,
    tgt_vocab: usize,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let header = Header {
        format_version: VERSION,
        config: params.cfg.clone(),
        src_vocab: params.src_vocab,
        tgt_vocab: params.tgt_vocab,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Invalid(format!("checkpoint header: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    params.visit_params(&mut |p| {
        let (rows, cols) = p.w.dim();
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        for &v in p.w.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });

    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| Error::MalformedFile {
        path: path.to_owned(),
        reason: reason.into(),
    };

    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let slice = bytes
            .get(cursor..cursor + n)
            .ok_or_else(|| bad("truncated checkpoint"))?;
        cursor += n;
        Ok(slice)
    };

    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(header_len)?)
        .map_err(|e| bad(&format!("header json: {e}")))?;

    let mut params = ModelParams::new(&header.config, header.src_vocab, header.tgt_vocab, 0)?;
    let mut failure: Option<Error> = None;
    params.visit_params_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        let mut read_tensor = || -> Result<()> {
            let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            if (rows, cols) != p.w.dim() {
                return Err(bad(&format!(
                    "tensor {} has shape ({rows},{cols}), expected {:?}",
                    p.name,
                    p.w.dim()
                )));
            }
            let data = take(rows * cols * 4)?;
            for (slot, chunk) in p.w.iter_mut().zip(data.chunks_exact(4)) {
                *slot = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            Ok(())
        };
        if let Err(e) = read_tensor() {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(params)
}
