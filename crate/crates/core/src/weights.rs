//! Reader and writer for the safetensors container layout.
//!
//! ```text
//! [u64 little-endian N][N bytes of UTF-8 JSON header][raw tensor bytes]
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype": "F64", "shape": [...], "data_offsets": [begin, end]}` with
//! offsets relative to the first byte after the header, plus an optional
//! `"__metadata__"` object of string pairs. Files are always written with
//! `F64` data in sorted-name order and a header padded with spaces to an
//! 8-byte boundary, so equal contents serialize to equal bytes. `F32`
//! tensors are accepted on read and widened.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Decodes a complete file image. Nothing is returned unless every
    /// tensor decodes.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let prefix: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| parse_err(0, format!("file of {} bytes has no length prefix", bytes.len())))?;
        let header_len = u64::from_le_bytes(prefix);
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| {
                parse_err(
                    0,
                    format!(
                        "header length {header_len} exceeds the {} bytes that follow",
                        bytes.len() - 8
                    ),
                )
            })? as usize;
        let header_text = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| parse_err(8 + e.valid_up_to(), "header is not UTF-8"))?;
        let header: Map<String, Value> =
            serde_json::from_str(header_text.trim_end()).map_err(|e| parse_err(8, format!("header JSON: {e}")))?;
        let data = &bytes[header_end..];

        let mut metadata = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        let mut covered = 0usize;
        for (name, entry) in &header {
            if name == METADATA_KEY {
                let obj = entry
                    .as_object()
                    .ok_or_else(|| parse_err(8, "__metadata__ is not an object"))?;
                for (k, v) in obj {
                    let v = v
                        .as_str()
                        .ok_or_else(|| parse_err(8, format!("metadata `{k}` is not a string")))?;
                    metadata.insert(k.clone(), v.to_string());
                }
                continue;
            }
            let bad = |what: &str| parse_err(8, format!("tensor `{name}`: {what}"));
            let dtype = entry
                .get("dtype")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("missing dtype"))?;
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing shape"))?
                .iter()
                .map(|v| v.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
            let offsets: Vec<usize> = entry
                .get("data_offsets")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing data_offsets"))?
                .iter()
                .map(|v| v.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("data_offsets must be integers"))?;
            let [begin, end] = offsets[..] else {
                return Err(bad("data_offsets must have two entries"));
            };
            if begin > end || end > data.len() {
                return Err(parse_err(
                    header_end + begin.min(data.len()),
                    format!(
                        "tensor `{name}` spans [{begin}, {end}) but only {} data bytes exist",
                        data.len()
                    ),
                ));
            }
            let width = match dtype {
                "F64" => 8,
                "F32" => 4,
                other => return Err(bad(&format!("unsupported dtype {other}"))),
            };
            let numel: usize = shape.iter().product();
            if end - begin != numel * width {
                return Err(parse_err(
                    header_end + begin,
                    format!(
                        "tensor `{name}` of shape {shape:?} needs {} bytes, has {}",
                        numel * width,
                        end - begin
                    ),
                ));
            }
            let raw = &data[begin..end];
            let values: Vec<f64> = if width == 8 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            };
            covered += end - begin;
            tensors.insert(name.clone(), Tensor::new(shape, values)?);
        }
        if covered != data.len() {
            return Err(parse_err(
                header_end,
                format!("tensors cover {covered} of {} data bytes", data.len()),
            ));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta: Map<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.into(), Value::Object(meta));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.numel() * 8;
            header.insert(
                name.clone(),
                json!({
                    "dtype": "F64",
                    "shape": t.shape(),
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header JSON");
        while !header_bytes.len().is_multiple_of(8) {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Bytes occupied by the length prefix plus the header.
    pub fn header_size(bytes: &[u8]) -> Option<usize> {
        let prefix: [u8; 8] = bytes.get(..8)?.try_into().ok()?;
        Some(8 + u64::from_le_bytes(prefix) as usize)
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}
