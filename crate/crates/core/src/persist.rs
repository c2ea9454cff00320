//! Artifact files: a structured-text header followed by flat little-endian
//! f32 blocks. One format backs datasets, classifier checkpoints, GAN
//! checkpoints, resampling weights and sample dumps; the `kind` field keeps
//! them from being confused and `payload-hash` catches corruption.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{FicsError, Result};
use crate::rng::fnv1a64;

const MAGIC: &str = "fics-artifact";
const VERSION: &str = "v1";

/// Ordered `key: value` fields. Keys may not contain ':'; values may not
/// contain newlines (embed JSON one-liners for structured values).
#[derive(Clone, Debug, Default)]
pub struct Header {
    fields: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Header::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let v = value.to_string();
        assert!(!key.contains(':') && !key.contains('\n'), "bad header key {key:?}");
        assert!(!v.contains('\n'), "header value for {key:?} contains a newline");
        self.fields.push((key.to_string(), v));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| FicsError::bad_artifact(path, format!("missing header field `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        self.require(key, path)?.parse().map_err(|_| {
            FicsError::bad_artifact(path, format!("unparseable header field `{key}`"))
        })
    }

    pub fn parse_json<T: serde::de::DeserializeOwned>(&self, key: &str, path: &Path) -> Result<T> {
        serde_json::from_str(self.require(key, path)?).map_err(|e| {
            FicsError::bad_artifact(path, format!("bad JSON in header field `{key}`: {e}"))
        })
    }

    pub fn set_json<T: serde::Serialize>(&mut self, key: &str, value: &T) -> &mut Self {
        self.set(key, serde_json::to_string(value).expect("header JSON serialization"))
    }
}

fn payload_bytes(blocks: &[&[f32]]) -> Vec<u8> {
    let total: usize = blocks.iter().map(|b| b.len() * 4).sum();
    let mut bytes = Vec::with_capacity(total);
    for block in blocks {
        for v in *block {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn write_artifact(path: &Path, kind: &str, header: &Header, blocks: &[&[f32]]) -> Result<()> {
    let payload = payload_bytes(blocks);
    let hash = fnv1a64(&payload);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| FicsError::io(path, e))?;
        }
    }
    let file = File::create(path).map_err(|e| FicsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| FicsError::io(path, e);
    writeln!(w, "{MAGIC} {VERSION}").map_err(io)?;
    writeln!(w, "kind: {kind}").map_err(io)?;
    for (k, v) in &header.fields {
        writeln!(w, "{k}: {v}").map_err(io)?;
    }
    let lens: Vec<String> = blocks.iter().map(|b| b.len().to_string()).collect();
    writeln!(w, "blocks: {}", blocks.len()).map_err(io)?;
    writeln!(w, "block-lens: {}", lens.join(",")).map_err(io)?;
    writeln!(w, "payload-hash: {hash:016x}").map_err(io)?;
    writeln!(w, "end-header").map_err(io)?;
    w.write_all(&payload).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_artifact(path: &Path, expected_kind: &str) -> Result<(Header, Vec<Vec<f32>>)> {
    let file = File::open(path).map_err(|e| FicsError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| FicsError::io(path, e))?;

    // Split the text header from the binary payload at the end-header line.
    let marker = b"\nend-header\n";
    let split = raw
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| FicsError::bad_artifact(path, "missing end-header marker"))?;
    let head_text = std::str::from_utf8(&raw[..split])
        .map_err(|_| FicsError::bad_artifact(path, "header is not utf-8"))?;
    let payload = &raw[split + marker.len()..];

    let mut lines = head_text.lines();
    let first = lines
        .next()
        .ok_or_else(|| FicsError::bad_artifact(path, "empty header"))?;
    match first.split_once(' ') {
        Some((m, v)) if m == MAGIC => {
            if v != VERSION {
                return Err(FicsError::VersionMismatch {
                    path: path.to_path_buf(),
                    found: v.to_string(),
                    expected: VERSION.to_string(),
                });
            }
        }
        _ => return Err(FicsError::bad_artifact(path, "not a fics artifact")),
    }

    let mut header = Header::new();
    for line in lines {
        let (k, v) = line
            .split_once(": ")
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| FicsError::bad_artifact(path, format!("malformed line {line:?}")))?;
        header.set(k, v.trim_start());
    }

    let kind = header.require("kind", path)?;
    if kind != expected_kind {
        return Err(FicsError::KindMismatch {
            path: path.to_path_buf(),
            found: kind.to_string(),
            expected: expected_kind.to_string(),
        });
    }

    let n_blocks: usize = header.parse("blocks", path)?;
    let lens: Vec<usize> = {
        let raw = header.require("block-lens", path)?;
        if raw.is_empty() {
            vec![]
        } else {
            raw.split(',')
                .map(|s| s.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| FicsError::bad_artifact(path, "bad block-lens"))?
        }
    };
    if lens.len() != n_blocks {
        return Err(FicsError::bad_artifact(path, "block count disagrees with block-lens"));
    }
    let total: usize = lens.iter().sum();
    if payload.len() != total * 4 {
        return Err(FicsError::bad_artifact(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), total * 4),
        ));
    }

    let stored = header.require("payload-hash", path)?.to_string();
    let computed = format!("{:016x}", fnv1a64(payload));
    if stored != computed {
        return Err(FicsError::HashMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let mut blocks = Vec::with_capacity(n_blocks);
    let mut off = 0;
    for len in lens {
        let mut block = Vec::with_capacity(len);
        for i in 0..len {
            let b = &payload[(off + i) * 4..(off + i) * 4 + 4];
            block.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        off += len;
        blocks.push(block);
    }
    Ok((header, blocks))
}

/// Kind field of an artifact without reading its payload.
pub fn peek_kind(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| FicsError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut chunk = [0u8; 4096];
    let n = r.read(&mut chunk).map_err(|e| FicsError::io(path, e))?;
    let text = String::from_utf8_lossy(&chunk[..n]);
    for line in text.lines().skip(1) {
        if let Some(rest) = line.strip_prefix("kind:") {
            return Ok(rest.trim().to_string());
        }
        if line == "end-header" {
            break;
        }
    }
    Err(FicsError::bad_artifact(path, "no kind field"))
}

/// FNV-1a of a whole file, as a 16-hex string (stage input fingerprints).
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| FicsError::io(path, e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}
