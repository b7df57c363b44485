//! Parameter files: a line-oriented text header followed by a little-endian
//! payload.
//!
//! ```text
//! hrmark-params 1
//! dtype f32
//! param stem.conv1.weight 16 3 3 3
//! buffer stem.conv1.bn.running_mean 16 1 1 1
//! ...
//! payload 123456
//! sha256 <hex digest of payload>
//! end
//! <payload bytes>
//! ```
//!
//! Tensors appear in the payload in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Scalar, Shape, Tensor};

pub const PARAMS_MAGIC: &str = "hrmark-params";
pub const PARAMS_VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut header = format!("{PARAMS_MAGIC} {PARAMS_VERSION}\ndtype {}\n", T::DTYPE);
    let entries = params
        .params()
        .map(|e| ("param", e))
        .chain(params.buffers().map(|e| ("buffer", e)));
    for (kind, (name, t)) in entries {
        let [n, c, h, w] = t.shape();
        header.push_str(&format!("{kind} {name} {n} {c} {h} {w}\n"));
        t.data().iter().for_each(|v| v.write_le(&mut payload));
    }
    header.push_str(&format!(
        "payload {}\nsha256 {}\nend\n",
        payload.len(),
        hex(&Sha256::digest(&payload))
    ));
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

/// Writes `params` to `path` through a temporary file renamed into place.
pub fn write_params<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let bytes = encode(params);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Entry {
    buffer: bool,
    name: String,
    shape: Shape,
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Load(format!("corrupt parameter file: {msg}"))
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("header ends early"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not UTF-8"))
    };

    let first = next_line()?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(PARAMS_MAGIC) {
        return Err(Error::Load("not a parameter file (bad magic)".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("missing version"))?;
    if version != PARAMS_VERSION {
        return Err(Error::Load(format!(
            "unsupported parameter file version {version} (expected {PARAMS_VERSION})"
        )));
    }

    let mut dtype = None;
    let mut entries = Vec::new();
    let mut payload_len = None;
    let mut digest = None;
    loop {
        let line = next_line()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end"] => break,
            ["dtype", d] => dtype = Some(d.parse::<DType>().map_err(corrupt)?),
            [kind @ ("param" | "buffer"), name, dims @ ..] if dims.len() == 4 => {
                let mut shape = [0; 4];
                for (s, d) in shape.iter_mut().zip(dims) {
                    *s = d.parse().map_err(|_| corrupt(format!("bad dimension in `{line}`")))?;
                }
                entries.push(Entry {
                    buffer: *kind == "buffer",
                    name: name.to_string(),
                    shape,
                });
            }
            ["payload", n] => {
                payload_len = Some(n.parse::<usize>().map_err(|_| corrupt("bad payload length"))?)
            }
            ["sha256", h] => digest = Some(h.to_string()),
            _ => return Err(corrupt(format!("unrecognized header line `{line}`"))),
        }
    }
    let dtype = dtype.ok_or_else(|| corrupt("missing dtype"))?;
    let payload_len = payload_len.ok_or_else(|| corrupt("missing payload length"))?;
    let digest = digest.ok_or_else(|| corrupt("missing checksum"))?;

    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(corrupt(format!(
            "payload is {} bytes, header says {payload_len} (truncated?)",
            payload.len()
        )));
    }
    if hex(&Sha256::digest(payload)) != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let width = dtype.size_of();
    let expected: usize = entries.iter().map(|e| numel(e.shape) * width).sum();
    if expected != payload_len {
        return Err(corrupt(format!(
            "header shapes need {expected} bytes but payload has {payload_len}"
        )));
    }

    let mut out = ModelParams::new();
    let mut off = 0;
    for e in entries {
        let n = numel(e.shape);
        let chunk = &payload[off..off + n * width];
        off += n * width;
        let data: Vec<T> = match dtype {
            DType::F32 => chunk
                .chunks_exact(4)
                .map(|b| T::of(f32::read_le(b) as f64))
                .collect(),
            DType::F64 => chunk.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        let t = Tensor::new(e.shape, data)?;
        let dup = if e.buffer {
            out.buffer(&e.name).is_some()
        } else {
            out.get(&e.name).is_some()
        };
        if dup {
            return Err(corrupt(format!("duplicate entry `{}`", e.name)));
        }
        if e.buffer {
            out.insert_buffer(e.name, t);
        } else {
            out.insert(e.name, t);
        }
    }
    Ok(out)
}

/// Reads a parameter file, converting to `T` if the file was written at another precision.
pub fn read_params<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
