//! Checkpoint container: an 8-byte magic, a little-endian u64 length prefix,
//! a UTF-8 JSON metadata block, then little-endian float32 parameter blobs in
//! the order the metadata declares.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NextScaleModel};
use crate::nn::HasParams;
use crate::tokenizer::{ScaleSchedule, TokenizerMeta, TokenizerParams};

pub const TOKENIZER_MAGIC: &[u8; 8] = b"AVARCTK1";
pub const MODEL_MAGIC: &[u8; 8] = b"AVARCNS1";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorDecl {
    name: String,
    shape: Vec<usize>,
}

fn tensor_decls(obj: &mut dyn HasParams) -> Vec<TensorDecl> {
    let mut decls = Vec::new();
    obj.visit_params("", &mut |p| {
        decls.push(TensorDecl {
            name: p.name,
            shape: p.value.shape().to_vec(),
        });
    });
    decls
}

fn write_container(
    path: &Path,
    magic: &[u8; 8],
    mut meta: Value,
    obj: &mut dyn HasParams,
) -> Result<()> {
    let decls = tensor_decls(obj);
    meta["version"] = CONTAINER_VERSION.into();
    meta["tensors"] = serde_json::to_value(&decls).expect("tensor decls serialize");
    let meta_bytes = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    obj.visit_params("", &mut |p| {
        for v in p.value.iter() {
            // little-endian f32 blobs
            let _ = w.write_all(&(*v as f32).to_le_bytes());
        }
    });
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(Value, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut got_magic = [0u8; 8];
    r.read_exact(&mut got_magic).map_err(|_| {
        Error::Format(format!("{} is too short to be a checkpoint", path.display()))
    })?;
    if &got_magic != magic {
        return Err(Error::Format(format!(
            "bad checkpoint magic in {}: expected {:?}, got {:?}",
            path.display(),
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got_magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let meta_len = u64::from_le_bytes(len_bytes) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: Value = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("invalid checkpoint metadata: {e}")))?;
    let version = meta
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("checkpoint metadata lacks a version".into()))?;
    if version != u64::from(CONTAINER_VERSION) {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {CONTAINER_VERSION})"
        )));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() % 4 != 0 {
        return Err(Error::Format("parameter blob length not a multiple of 4".into()));
    }
    let floats = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((meta, floats))
}

/// Copy `floats` into `obj`'s parameters, validating names and shapes against
/// the metadata declarations.
fn fill_params(obj: &mut dyn HasParams, meta: &Value, floats: &[f32]) -> Result<()> {
    let decls: Vec<TensorDecl> = serde_json::from_value(
        meta.get("tensors")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint metadata lacks tensor declarations".into()))?,
    )
    .map_err(|e| Error::Format(format!("bad tensor declarations: {e}")))?;

    let mut idx = 0usize;
    let mut offset = 0usize;
    let mut failure: Option<Error> = None;
    obj.visit_params("", &mut |mut p| {
        if failure.is_some() {
            return;
        }
        let Some(decl) = decls.get(idx) else {
            failure = Some(Error::Format("checkpoint has fewer tensors than model".into()));
            return;
        };
        if decl.name != p.name || decl.shape != p.value.shape() {
            failure = Some(Error::Format(format!(
                "tensor {idx} mismatch: checkpoint has {} {:?}, model expects {} {:?}",
                decl.name,
                decl.shape,
                p.name,
                p.value.shape()
            )));
            return;
        }
        let n = p.value.len();
        if offset + n > floats.len() {
            failure = Some(Error::Format("checkpoint blob shorter than declared".into()));
            return;
        }
        for (dst, src) in p.value.iter_mut().zip(&floats[offset..offset + n]) {
            *dst = f64::from(*src);
        }
        offset += n;
        idx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if idx != decls.len() {
        return Err(Error::Format("checkpoint has more tensors than model".into()));
    }
    if offset != floats.len() {
        return Err(Error::Format("checkpoint blob longer than declared".into()));
    }
    Ok(())
}

pub fn save_tokenizer(path: &Path, params: &TokenizerParams) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "tokenizer",
        "meta": params.meta,
        "schedule": params.schedule,
    });
    write_container(path, TOKENIZER_MAGIC, meta, &mut params.clone())
}

pub fn load_tokenizer(path: &Path) -> Result<TokenizerParams> {
    let (meta, floats) = read_container(path, TOKENIZER_MAGIC)?;
    let tk_meta: TokenizerMeta = serde_json::from_value(
        meta.get("meta")
            .cloned()
            .ok_or_else(|| Error::Format("tokenizer checkpoint lacks 'meta'".into()))?,
    )
    .map_err(|e| Error::Format(format!("bad tokenizer meta: {e}")))?;
    let schedule: ScaleSchedule = serde_json::from_value(
        meta.get("schedule")
            .cloned()
            .ok_or_else(|| Error::Format("tokenizer checkpoint lacks 'schedule'".into()))?,
    )
    .map_err(|e| Error::Format(format!("bad schedule: {e}")))?;
    let mut params = TokenizerParams::init(tk_meta, schedule, 0)?;
    fill_params(&mut params, &meta, &floats)?;
    Ok(params)
}

pub fn save_model(path: &Path, model: &NextScaleModel) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "nextscale",
        "config": model.config,
        "null_trained": model.null_trained,
        "null_label_id": model.n_classes(),
    });
    write_container(path, MODEL_MAGIC, meta, &mut model.clone())
}

pub fn load_model(path: &Path) -> Result<NextScaleModel> {
    let (meta, floats) = read_container(path, MODEL_MAGIC)?;
    let config: ModelConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::Format("model checkpoint lacks 'config'".into()))?,
    )
    .map_err(|e| Error::Format(format!("bad model config: {e}")))?;
    let null_trained = meta
        .get("null_trained")
        .and_then(|v| v.as_bool())
        .unwrap_or(false);
    let mut model = NextScaleModel::init(config);
    fill_params(&mut model, &meta, &floats)?;
    model.set_null_trained(null_trained);
    Ok(model)
}
