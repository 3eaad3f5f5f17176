// SPDX-License-Identifier: MIT OR Apache-2.0

//! CLVA-TRACE v1 binary format.
//!
//! ```text
//! offset  size  content
//! 0       8     ASCII magic "CLVATRC1"
//! 8       4     u32 LE metadata length M
//! 12      M     UTF-8 JSON metadata
//! 12+M    ...   attention: for layer, for head: seq_len*seq_len f32 LE, row-major
//! ...     ...   values (iff has_values): for layer, for head: seq_len*head_dim f32 LE
//! ```
//!
//! No padding and no compression. Reading a file and writing it back
//! reproduces the original bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::trace::{AttentionTrace, TraceMeta, SCHEMA_VERSION};

pub const MAGIC: &[u8; 8] = b"CLVATRC1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    model_id: String,
    layers: usize,
    heads: usize,
    seq_len: usize,
    head_dim: usize,
    spans: TokenLayout,
    has_values: bool,
    #[serde(default)]
    notes: String,
    #[serde(default)]
    extra: std::collections::BTreeMap<String, String>,
}

/// Serializes `trace` into `sink`, returning the number of bytes written.
pub fn write_trace<W: Write>(trace: &AttentionTrace, mut sink: W) -> Result<usize> {
    let meta = trace.meta();
    let header = Header {
        schema_version: SCHEMA_VERSION,
        model_id: meta.model_id.clone(),
        layers: trace.layers(),
        heads: trace.heads(),
        seq_len: trace.seq_len(),
        head_dim: trace.head_dim(),
        spans: *trace.layout(),
        has_values: trace.has_values(),
        notes: meta.notes.clone(),
        extra: meta.extra.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let meta_len = u32::try_from(json.len()).map_err(|_| Error::Metadata("metadata exceeds 4 GiB".into()))?;

    let payload_len = trace.attention().len() + trace.values().map_or(0, <[f64]>::len);
    let mut buf = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 4 * payload_len);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&meta_len.to_le_bytes());
    buf.extend_from_slice(&json);
    push_f32(&mut buf, trace.attention(), "attention")?;
    if let Some(v) = trace.values() {
        push_f32(&mut buf, v, "value")?;
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len())
}

fn push_f32(buf: &mut Vec<u8>, xs: &[f64], what: &str) -> Result<()> {
    for &x in xs {
        let q = x as f32;
        if !q.is_finite() {
            return Err(Error::Shape(format!("{what} entry {x} is not representable as a finite f32")));
        }
        buf.extend_from_slice(&q.to_le_bytes());
    }
    Ok(())
}

/// Parses and validates a trace from `source`.
pub fn read_trace<R: Read>(mut source: R) -> Result<AttentionTrace> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Parses and validates a trace from an in-memory buffer.
pub fn decode(bytes: &[u8]) -> Result<AttentionTrace> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(MAGIC.len())]).into_owned();
        return Err(Error::BadMagic { found });
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(Error::Truncated { expected: MAGIC.len() + 4, actual: bytes.len() });
    }
    let meta_len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < meta_len {
        return Err(Error::Truncated { expected: 12 + meta_len, actual: bytes.len() });
    }
    let header: Header =
        serde_json::from_slice(&rest[..meta_len]).map_err(|e| Error::Metadata(format!("invalid metadata JSON: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Metadata(format!("unsupported schema_version {}", header.schema_version)));
    }
    if header.seq_len != header.spans.seq_len() {
        return Err(Error::Metadata(format!(
            "seq_len {} disagrees with spans ending at {}",
            header.seq_len,
            header.spans.seq_len()
        )));
    }
    if header.has_values && header.head_dim == 0 {
        return Err(Error::Metadata("has_values requires head_dim > 0".into()));
    }

    let s = header.seq_len;
    let n_attn = header.layers * header.heads * s * s;
    let n_vals = if header.has_values { header.layers * header.heads * s * header.head_dim } else { 0 };
    let payload = &rest[meta_len..];
    let expected = 4 * (n_attn + n_vals);
    if payload.len() < expected {
        return Err(Error::Truncated { expected, actual: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::SizeMismatch { expected, actual: payload.len() });
    }

    let floats: Vec<f64> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    let (attn, vals) = floats.split_at(n_attn);
    let values = header.has_values.then(|| vals.to_vec());
    let meta = TraceMeta { model_id: header.model_id, notes: header.notes, extra: header.extra };
    AttentionTrace::new(header.layers, header.heads, header.head_dim, header.spans, attn.to_vec(), values, meta)
}

/// Writes a trace to `path`.
pub fn save(trace: &AttentionTrace, path: impl AsRef<std::path::Path>) -> Result<usize> {
    let f = std::fs::File::create(path)?;
    write_trace(trace, std::io::BufWriter::new(f))
}

/// Reads a trace from `path`.
pub fn load(path: impl AsRef<std::path::Path>) -> Result<AttentionTrace> {
    decode(&std::fs::read(path)?)
}
