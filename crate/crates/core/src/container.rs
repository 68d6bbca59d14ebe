//! Reader and writer for the safetensors container layout.
//!
//! ```text
//! [u64 LE header length N][N bytes JSON header][raw little-endian payload]
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, data_offsets}` where the
//! offsets are relative to the payload start, plus an optional
//! `__metadata__` object of string pairs. F32, F16 and BF16 payloads are
//! accepted; half-precision data is widened to f32 on read. Writes always
//! emit F32 with tensors laid out in sorted-name order, and the header is
//! space-padded to an 8-byte boundary.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, RawTensor>,
}

#[derive(Debug, Clone, Copy)]
enum Dtype {
    F32,
    F16,
    Bf16,
}

impl Dtype {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::Bf16),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::Bf16 => 2,
        }
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    let Some(len_bytes) = bytes.get(..8) else {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("file holds {} bytes, need 8 for the header length", bytes.len()),
        });
    };
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Parse {
            offset: 8,
            message: format!(
                "header length {header_len} exceeds the {} bytes that follow",
                bytes.len() - 8
            ),
        })?;

    let header: Map<String, Value> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| Error::Parse {
            offset: 8 + if e.line() == 1 { e.column().saturating_sub(1) } else { 0 },
            message: format!("invalid JSON header: {e}"),
        })?;

    let payload = &bytes[header_end..];
    let mut container = Container::default();
    let mut spans = Vec::new();

    for (name, entry) in header {
        if name == METADATA_KEY {
            container.metadata = parse_metadata(&entry, header_end)?;
            continue;
        }
        let bad = |message: String| Error::Parse {
            offset: 8,
            message: format!("tensor `{name}`: {message}"),
        };
        let dtype_str = entry
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing dtype".into()))?;
        let dtype = Dtype::parse(dtype_str)
            .ok_or_else(|| bad(format!("unsupported dtype {dtype_str}")))?;
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing shape".into()))?
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("shape must hold non-negative integers".into()))?;
        let offsets: Vec<usize> = entry
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .and_then(|a| a.iter().map(|v| v.as_u64().map(|x| x as usize)).collect())
            .ok_or_else(|| bad("data_offsets must be [begin, end]".into()))?;
        let (begin, end) = (offsets[0], offsets[1]);
        if begin > end || end > payload.len() {
            return Err(Error::Parse {
                offset: header_end + begin.min(payload.len()),
                message: format!(
                    "tensor `{name}` spans [{begin}, {end}) but payload holds {} bytes",
                    payload.len()
                ),
            });
        }
        let count: usize = shape.iter().product();
        if count * dtype.width() != end - begin {
            return Err(Error::Parse {
                offset: header_end + begin,
                message: format!(
                    "tensor `{name}` with shape {shape:?} and dtype {dtype_str} needs {} bytes, header gives {}",
                    count * dtype.width(),
                    end - begin
                ),
            });
        }
        spans.push((begin, end, name.clone()));
        let values = decode(&payload[begin..end], dtype);
        container.tensors.insert(name, RawTensor { shape, values });
    }

    spans.sort();
    let mut cursor = 0;
    for (begin, end, name) in &spans {
        if *begin != cursor {
            return Err(Error::Parse {
                offset: header_end + cursor.min(*begin),
                message: format!("payload is not contiguous before tensor `{name}`"),
            });
        }
        cursor = *end;
    }
    if cursor != payload.len() {
        return Err(Error::Parse {
            offset: header_end + cursor,
            message: format!("{} trailing payload bytes", payload.len() - cursor),
        });
    }
    Ok(container)
}

fn parse_metadata(entry: &Value, header_end: usize) -> Result<BTreeMap<String, String>> {
    let obj = entry.as_object().ok_or_else(|| Error::Parse {
        offset: 8,
        message: format!("{METADATA_KEY} must be an object"),
    })?;
    obj.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), s.clone())),
            _ => Err(Error::Parse {
                offset: 8.min(header_end),
                message: format!("{METADATA_KEY}.{k} must be a string"),
            }),
        })
        .collect()
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::Bf16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

/// Serializes tensors as F32. Values are rounded to f32; the same input always
/// yields the same bytes.
pub fn encode_container<'a, I>(metadata: &BTreeMap<String, String>, tensors: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, Vec<usize>, &'a [f64])>,
{
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));

    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.into(), json!(metadata));
    }
    let mut offset = 0usize;
    for (name, shape, values) in &sorted {
        let end = offset + values.len() * 4;
        header.insert(
            (*name).to_owned(),
            json!({ "dtype": "F32", "shape": shape, "data_offsets": [offset, end] }),
        );
        offset = end;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, _, values) in &sorted {
        for &v in values.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
