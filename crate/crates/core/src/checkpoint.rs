//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MDTALCK\0"
//! version  u32
//! header   u32 length + UTF-8 JSON
//! n_blocks u32
//! block*   u16 name length, name, u8 dtype (0 = f32, 1 = f64),
//!          u8 ndim, u32 dims[ndim], row-major data
//! ```
//!
//! Model checkpoints store weights as f32. Resume states store f64 so an
//! interrupted run continues bit-for-bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserParams, ModelConfig};
use crate::error::{Error, Result};
use crate::sampler::DecodeConfig;
use crate::synthgen::SynthConfig;

pub const MAGIC: &[u8; 8] = b"MDTALCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub header: serde_json::Value,
    pub blocks: Vec<TensorBlock>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(ck: &RawCheckpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&ck.header)?;
    out.extend_from_slice(
        &u32::try_from(header.len())
            .map_err(|_| ck_err("header too large"))?
            .to_le_bytes(),
    );
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ck.blocks.len() as u32).to_le_bytes());
    for b in &ck.blocks {
        let expected: usize = b.shape.iter().product();
        if expected != b.data.len() {
            return Err(ck_err(format!(
                "block {} declares {expected} values, holds {}",
                b.name,
                b.data.len()
            )));
        }
        let name = b.name.as_bytes();
        out.extend_from_slice(
            &u16::try_from(name.len())
                .map_err(|_| ck_err("block name too long"))?
                .to_le_bytes(),
        );
        out.extend_from_slice(name);
        out.push(match b.dtype {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        out.push(b.shape.len() as u8);
        for &d in &b.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match b.dtype {
            DType::F32 => b
                .data
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => b
                .data
                .iter()
                .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ck_err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(buf: &[u8]) -> Result<RawCheckpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(ck_err("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(ck_err(format!("unsupported version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(c.take(hlen)?)?;
    let n_blocks = c.u32()?;
    let mut blocks = Vec::with_capacity(n_blocks as usize);
    for _ in 0..n_blocks {
        let nlen = c.u16()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| ck_err("block name is not UTF-8"))?;
        let dtype = match c.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(ck_err(format!("unknown dtype {other}"))),
        };
        let ndim = c.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => c
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => c
                .take(n * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        };
        blocks.push(TensorBlock {
            name,
            dtype,
            shape,
            data,
        });
    }
    if c.pos != buf.len() {
        return Err(ck_err("trailing bytes after last block"));
    }
    Ok(RawCheckpoint { header, blocks })
}

pub fn write_raw(path: &Path, ck: &RawCheckpoint) -> Result<()> {
    let bytes = encode(ck)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// JSON header of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: String,
    pub model: ModelConfig,
    pub task: SynthConfig,
    pub vocab: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn param_blocks(params: &DenoiserParams, dtype: DType, prefix: &str) -> Vec<TensorBlock> {
    params
        .params()
        .iter()
        .map(|p| TensorBlock {
            name: format!("{prefix}{}", p.name),
            dtype,
            shape: p.value.shape().to_vec(),
            data: p.value.iter().copied().collect(),
        })
        .collect()
}

/// Fill `params` from blocks named `prefix + param name`.
pub fn load_param_blocks(
    params: &mut DenoiserParams,
    blocks: &[TensorBlock],
    prefix: &str,
) -> Result<()> {
    for p in params.params_mut() {
        let name = format!("{prefix}{}", p.name);
        let b = blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| ck_err(format!("missing block {name}")))?;
        if b.shape != p.value.shape() {
            return Err(Error::ShapeMismatch {
                what: name,
                expected: p.value.shape().to_vec(),
                got: b.shape.clone(),
            });
        }
        for (dst, &src) in p.value.iter_mut().zip(&b.data) {
            *dst = src;
        }
    }
    Ok(())
}

pub fn model_checkpoint(
    params: &DenoiserParams,
    task: &SynthConfig,
    meta: serde_json::Value,
) -> Result<RawCheckpoint> {
    let vocab: serde_json::Value = serde_json::from_str(&task.vocabulary()?.to_json()?)?;
    let header = ModelHeader {
        kind: "model".into(),
        model: params.config.clone(),
        task: task.clone(),
        vocab,
        meta,
    };
    Ok(RawCheckpoint {
        header: serde_json::to_value(&header)?,
        blocks: param_blocks(params, DType::F32, ""),
    })
}

pub fn save_model(
    path: &Path,
    params: &DenoiserParams,
    task: &SynthConfig,
    meta: serde_json::Value,
) -> Result<()> {
    write_raw(path, &model_checkpoint(params, task, meta)?)
}

/// A model checkpoint after loading.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub params: DenoiserParams,
    pub task: SynthConfig,
    pub meta: serde_json::Value,
}

impl LoadedModel {
    /// Decoding settings recorded by the training run, or defaults sized to
    /// the model's step table.
    pub fn decode_config(&self) -> Result<DecodeConfig> {
        match self.meta.get("run").and_then(|r| r.get("decode")) {
            Some(v) => Ok(serde_json::from_value(v.clone())?),
            None => Ok(DecodeConfig {
                n_steps: self
                    .params
                    .config
                    .n_steps
                    .min(DecodeConfig::default().n_steps),
                ..DecodeConfig::default()
            }),
        }
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    model_from_raw(&read_raw(path)?)
}

pub fn model_from_raw(raw: &RawCheckpoint) -> Result<LoadedModel> {
    let header: ModelHeader = serde_json::from_value(raw.header.clone())?;
    if header.kind != "model" {
        return Err(ck_err(format!(
            "expected a model checkpoint, found `{}`",
            header.kind
        )));
    }
    let mut params = DenoiserParams::zeros(header.model)?;
    load_param_blocks(&mut params, &raw.blocks, "")?;
    Ok(LoadedModel {
        params,
        task: header.task,
        meta: header.meta,
    })
}
