//! Binary model file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "XDNC"                 4 bytes
//! version                u32
//! header length          u64
//! header                 UTF-8 text, one `key=value` record per line
//! payload                f64 values: each layer's weights in declaration
//!                        order, then the classifier bias
//! checksum               u64, wrapping sum of all payload bytes
//! ```
//!
//! Header records:
//!
//! ```text
//! role=teacher|student
//! input=c,h,w
//! layer=conv c_in=.. c_out=.. k=.. stride=.. pad=.. act=.. elems=..
//! layer=linear d_in=.. d_out=.. act=none elems=.. bias=..
//! origin=i,j,...        (optional, one line per convolution)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Activation, LayerKind, LayerSpec, Network, Role};
use crate::error::{ModelFormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XDNC";
pub const FORMAT_VERSION: u32 = 1;

fn header_text(net: &Network) -> String {
    let mut s = String::new();
    let role = match net.role() {
        Role::Teacher => "teacher",
        Role::Student => "student",
    };
    s.push_str(&format!("role={role}\n"));
    let [c, h, w] = net.input_shape();
    s.push_str(&format!("input={c},{h},{w}\n"));
    for (spec, wt) in net.layers().iter().zip(net.weights()) {
        match spec.kind {
            LayerKind::Conv {
                c_in,
                c_out,
                k,
                stride,
                pad,
            } => s.push_str(&format!(
                "layer=conv c_in={c_in} c_out={c_out} k={k} stride={stride} pad={pad} act={} elems={}\n",
                spec.activation.name(),
                wt.len()
            )),
            LayerKind::Linear { d_in, d_out } => s.push_str(&format!(
                "layer=linear d_in={d_in} d_out={d_out} act={} elems={} bias={}\n",
                spec.activation.name(),
                wt.len(),
                net.bias().len()
            )),
        }
    }
    if let Some(origin) = net.channel_origin() {
        for o in origin {
            let list: Vec<String> = o.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("origin={}\n", list.join(",")));
        }
    }
    s
}

/// Serializes a network to bytes.
pub fn write_model(net: &Network) -> Vec<u8> {
    let header = header_text(net);
    let mut payload = Vec::new();
    for w in net.weights() {
        for v in w.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in net.bias() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = byte_sum(&payload);
    let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_model(net))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    read_model(&fs::read(path)?)
}

fn byte_sum(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

struct ParsedHeader {
    role: Role,
    input: [usize; 3],
    layers: Vec<(LayerSpec, usize)>,
    bias_len: usize,
    origin: Vec<Vec<usize>>,
}

fn header_err(msg: impl Into<String>) -> ModelFormatError {
    ModelFormatError::Header(msg.into())
}

fn parse_usize_list(s: &str) -> std::result::Result<Vec<usize>, ModelFormatError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| header_err(format!("bad integer {t:?}")))
        })
        .collect()
}

fn parse_header(text: &str) -> std::result::Result<ParsedHeader, ModelFormatError> {
    let mut role = None;
    let mut input = None;
    let mut layers = Vec::new();
    let mut bias_len = 0;
    let mut origin = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line
            .split_once('=')
            .ok_or_else(|| header_err(format!("no '=' in {line:?}")))?;
        match key {
            "role" => {
                role = Some(match rest {
                    "teacher" => Role::Teacher,
                    "student" => Role::Student,
                    other => return Err(header_err(format!("unknown role {other:?}"))),
                })
            }
            "input" => {
                let v = parse_usize_list(rest)?;
                let arr: [usize; 3] = v
                    .try_into()
                    .map_err(|_| header_err("input needs three extents"))?;
                input = Some(arr);
            }
            "origin" => origin.push(parse_usize_list(rest)?),
            "layer" => {
                let mut parts = rest.split_whitespace();
                let kind = parts.next().unwrap_or_default();
                let fields: HashMap<&str, &str> = parts
                    .map(|p| {
                        p.split_once('=')
                            .ok_or_else(|| header_err(format!("bad field {p:?}")))
                    })
                    .collect::<std::result::Result<_, _>>()?;
                let num = |name: &str| -> std::result::Result<usize, ModelFormatError> {
                    fields
                        .get(name)
                        .ok_or_else(|| header_err(format!("layer missing {name}")))?
                        .parse()
                        .map_err(|_| header_err(format!("bad value for {name}")))
                };
                let act = fields
                    .get("act")
                    .and_then(|a| Activation::parse(a))
                    .ok_or_else(|| header_err("layer missing or unknown act"))?;
                let spec = match kind {
                    "conv" => LayerSpec {
                        kind: LayerKind::Conv {
                            c_in: num("c_in")?,
                            c_out: num("c_out")?,
                            k: num("k")?,
                            stride: num("stride")?,
                            pad: num("pad")?,
                        },
                        activation: act,
                    },
                    "linear" => {
                        bias_len = num("bias")?;
                        LayerSpec {
                            kind: LayerKind::Linear {
                                d_in: num("d_in")?,
                                d_out: num("d_out")?,
                            },
                            activation: act,
                        }
                    }
                    other => return Err(header_err(format!("unknown layer kind {other:?}"))),
                };
                layers.push((spec, num("elems")?));
            }
            other => return Err(header_err(format!("unknown header key {other:?}"))),
        }
    }
    Ok(ParsedHeader {
        role: role.ok_or_else(|| header_err("missing role"))?,
        input: input.ok_or_else(|| header_err("missing input"))?,
        layers,
        bias_len,
        origin,
    })
}

fn take(bytes: &[u8], at: usize, len: usize) -> std::result::Result<&[u8], ModelFormatError> {
    bytes
        .get(at..at.saturating_add(len))
        .ok_or(ModelFormatError::Truncated {
            needed: (at as u64).saturating_add(len as u64),
            available: bytes.len() as u64,
        })
}

/// Decodes a model file, distinguishing each corruption class.
pub fn read_model(bytes: &[u8]) -> Result<Network> {
    let magic: [u8; 4] = take(bytes, 0, 4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(ModelFormatError::BadMagic(magic).into());
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelFormatError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| ModelFormatError::Truncated {
        needed: header_len,
        available: bytes.len() as u64,
    })?;
    let header_bytes = take(bytes, 16, header_len)?;
    let text = std::str::from_utf8(header_bytes).map_err(|_| header_err("header is not UTF-8"))?;
    let header = parse_header(text)?;

    for (i, (spec, elems)) in header.layers.iter().enumerate() {
        let expected: usize = spec.weight_shape().iter().product();
        if *elems != expected {
            return Err(ModelFormatError::LengthMismatch(format!(
                "layer {i} declares {elems} elements but its shape holds {expected}"
            ))
            .into());
        }
    }
    let total: usize = header.layers.iter().map(|(_, e)| e).sum::<usize>() + header.bias_len;
    let payload_start = 16 + header_len;
    let payload_len = total * 8;
    let needed = payload_start as u64 + payload_len as u64 + 8;
    if (bytes.len() as u64) < needed {
        return Err(ModelFormatError::Truncated {
            needed,
            available: bytes.len() as u64,
        }
        .into());
    }
    if (bytes.len() as u64) > needed {
        return Err(ModelFormatError::LengthMismatch(format!(
            "header declares {total} values but {} extra bytes follow",
            bytes.len() as u64 - needed
        ))
        .into());
    }
    let payload = &bytes[payload_start..payload_start + payload_len];
    let stored = u64::from_le_bytes(
        bytes[payload_start + payload_len..]
            .try_into()
            .expect("8 bytes"),
    );
    let computed = byte_sum(payload);
    if stored != computed {
        return Err(ModelFormatError::Checksum { stored, computed }.into());
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut specs = Vec::with_capacity(header.layers.len());
    let mut weights = Vec::with_capacity(header.layers.len());
    for (spec, elems) in &header.layers {
        let data: Vec<f64> = values.by_ref().take(*elems).collect();
        weights.push(Tensor::new(spec.weight_shape(), data)?);
        specs.push(*spec);
    }
    let bias: Vec<f64> = values.collect();
    let origin = (!header.origin.is_empty()).then_some(header.origin);
    Network::new(header.input, specs, weights, bias, header.role)?.with_channel_origin(origin)
}
