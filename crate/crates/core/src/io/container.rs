//! The MTS1 tensor container.
//!
//! Layout: the magic `MTS1`, a little-endian `u32` header length, a UTF-8
//! JSON header, then the payload of concatenated little-endian `f32`
//! buffers. The header maps each tensor name to
//! `{"dtype": "f32", "shape": [...], "offset": o, "order": "row-major"}`
//! where `o` is a byte offset into the payload. The reserved key
//! `__meta__` carries free-form JSON alongside the tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTS1";
pub const META_KEY: &str = "__meta__";
const PREAMBLE: usize = 8;

/// Named tensors plus optional metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: Option<Value>,
}

impl TensorFile {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        TensorFile { tensors, meta: None }
    }

    pub fn with_meta(mut self, meta: Value) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name == META_KEY {
                return Err(Error::contract(format!("`{META_KEY}` is a reserved tensor name")));
            }
            header.insert(
                name.clone(),
                json!({"dtype": "f32", "shape": t.shape(), "offset": offset, "order": "row-major"}),
            );
            offset += 4 * t.len();
        }
        if let Some(meta) = &self.meta {
            header.insert(META_KEY.to_string(), meta.clone());
        }
        let header = serde_json::to_vec(&Value::Object(header))?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::contract("container header exceeds 4 GiB"))?;

        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected `MTS1`"));
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::format(4, "truncated header length"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let payload_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::format(
                    4,
                    format!("header length {header_len} exceeds file size {}", bytes.len()),
                )
            })?;
        let header: Value = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| Error::format(PREAMBLE, format!("header is not valid JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(Error::format(PREAMBLE, "header is not a JSON object"));
        };
        let payload = &bytes[payload_start..];

        let mut meta = None;
        let mut entries = Vec::new();
        for (name, entry) in header {
            if name == META_KEY {
                meta = Some(entry);
                continue;
            }
            let (shape, offset) = parse_entry(&name, &entry)?;
            let len: usize = shape.iter().product();
            entries.push((name, shape, offset, len * 4));
        }

        // Offsets must tile the payload without gaps or overlaps.
        entries.sort_by_key(|e| e.2);
        let mut cursor = 0usize;
        for (name, _, offset, size) in &entries {
            if *offset != cursor {
                let what = if *offset < cursor { "overlaps the previous tensor" } else { "leaves a gap" };
                return Err(Error::format(
                    payload_start + offset,
                    format!("tensor `{name}` at payload offset {offset} {what}"),
                ));
            }
            cursor += size;
            if cursor > payload.len() {
                return Err(Error::format(
                    payload_start + offset,
                    format!(
                        "tensor `{name}` needs {size} bytes, payload is truncated at {} bytes",
                        payload.len()
                    ),
                ));
            }
        }
        if cursor != payload.len() {
            return Err(Error::format(
                payload_start + cursor,
                format!("{} trailing payload bytes", payload.len() - cursor),
            ));
        }

        let mut tensors = BTreeMap::new();
        for (name, shape, offset, size) in entries {
            let data = payload[offset..offset + size]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::format(payload_start + offset, format!("tensor `{name}`: {e}")))?;
            tensors.insert(name, t);
        }
        Ok(TensorFile { tensors, meta })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn parse_entry(name: &str, entry: &Value) -> Result<(Vec<usize>, usize)> {
    let bad = |msg: String| Error::format(PREAMBLE, format!("entry `{name}`: {msg}"));
    let obj = entry.as_object().ok_or_else(|| bad("not an object".into()))?;
    match obj.get("dtype").and_then(Value::as_str) {
        Some("f32") => {}
        other => return Err(bad(format!("unsupported dtype {other:?}"))),
    }
    if let Some(order) = obj.get("order") {
        if order.as_str() != Some("row-major") {
            return Err(bad(format!("unsupported order {order}")));
        }
    }
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape".into()))?
        .iter()
        .map(|d| d.as_u64().filter(|&d| d > 0).map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape extents must be positive integers".into()))?;
    if shape.is_empty() {
        return Err(bad("empty shape".into()));
    }
    let offset = obj
        .get("offset")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("missing offset".into()))? as usize;
    Ok((shape, offset))
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    TensorFile::new(tensors.clone()).write(path)
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    Ok(TensorFile::read(path)?.tensors)
}
