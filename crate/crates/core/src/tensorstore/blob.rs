//! The `VSF1` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VSF1" | header_len: u32 | header: UTF-8 text, header_len bytes | payload: f32 LE, row-major
//! ```
//!
//! The header is a fixed sequence of `key=value` lines, each terminated by `\n`,
//! in exactly this order:
//!
//! ```text
//! role=<features|queries|keys|attention_rows|pose|depth|depth_mask>
//! dtype=f32
//! shape=<d0>,<d1>,...
//! layer=<u32 or "none">
//! view_id=<non-empty, no newline>
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"VSF1";
const PREAMBLE_LEN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"VSF1\"")]
    BadMagic([u8; 4]),
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("shape {shape:?} implies {expected} scalars but the payload holds {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported dtype {0:?}, only f32 is supported")]
    UnsupportedDtype(String),
    #[error("shape {shape:?} is not valid for role {role}")]
    InvalidShape { role: Role, shape: Vec<usize> },
    #[error("invalid view id {0:?}")]
    InvalidViewId(String),
}

impl TensorError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TensorError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// What a tensor carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Features,
    Queries,
    Keys,
    AttentionRows,
    Pose,
    Depth,
    DepthMask,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Features,
        Role::Queries,
        Role::Keys,
        Role::AttentionRows,
        Role::Pose,
        Role::Depth,
        Role::DepthMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Features => "features",
            Role::Queries => "queries",
            Role::Keys => "keys",
            Role::AttentionRows => "attention_rows",
            Role::Pose => "pose",
            Role::Depth => "depth",
            Role::DepthMask => "depth_mask",
        }
    }

    /// Whether `shape` has the rank (and for poses, the extent) this role requires.
    pub fn accepts_shape(self, shape: &[usize]) -> bool {
        match self {
            Role::Features | Role::Queries | Role::Keys | Role::AttentionRows => shape.len() == 3,
            Role::Pose => shape == [4, 4] || shape == [3, 4],
            Role::Depth | Role::DepthMask => shape.len() == 2,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| TensorError::Header(format!("unknown role {s:?}")))
    }
}

/// Metadata of a tensor file, readable without touching the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub role: Role,
    pub shape: Vec<usize>,
    pub layer: Option<u32>,
    pub view_id: String,
}

impl TensorHeader {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self) -> Result<(), TensorError> {
        if self.shape.is_empty() || self.shape.contains(&0) || !self.role.accepts_shape(&self.shape) {
            return Err(TensorError::InvalidShape {
                role: self.role,
                shape: self.shape.clone(),
            });
        }
        if self
            .shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(TensorError::Header(format!("shape {:?} is too large", self.shape)));
        }
        if self.view_id.is_empty() || self.view_id.contains('\n') {
            return Err(TensorError::InvalidViewId(self.view_id.clone()));
        }
        Ok(())
    }

    fn encode(&self) -> String {
        let shape = self.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let layer = self.layer.map_or_else(|| "none".to_string(), |l| l.to_string());
        format!(
            "role={}\ndtype=f32\nshape={}\nlayer={}\nview_id={}\n",
            self.role, shape, layer, self.view_id
        )
    }

    fn decode(text: &str) -> Result<Self, TensorError> {
        let body = text
            .strip_suffix('\n')
            .ok_or_else(|| TensorError::Header("header must end with a newline".into()))?;
        let lines: Vec<&str> = body.split('\n').collect();
        const KEYS: [&str; 5] = ["role", "dtype", "shape", "layer", "view_id"];
        if lines.len() != KEYS.len() {
            return Err(TensorError::Header(format!(
                "expected {} header lines, found {}",
                KEYS.len(),
                lines.len()
            )));
        }
        let mut values = [""; 5];
        for (slot, (line, key)) in values.iter_mut().zip(lines.iter().zip(KEYS)) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TensorError::Header(format!("line {line:?} has no '='")))?;
            if k != key {
                return Err(TensorError::Header(format!("expected key {key:?}, found {k:?}")));
            }
            *slot = v;
        }
        let [role, dtype, shape, layer, view_id] = values;

        let role: Role = role.parse()?;
        if dtype != "f32" {
            return Err(TensorError::UnsupportedDtype(dtype.to_string()));
        }
        let shape = shape
            .split(',')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| TensorError::Header(format!("bad shape entry {d:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let layer = match layer {
            "none" => None,
            l => Some(
                l.parse::<u32>()
                    .map_err(|_| TensorError::Header(format!("bad layer {l:?}")))?,
            ),
        };
        let header = TensorHeader {
            role,
            shape,
            layer,
            view_id: view_id.to_string(),
        };
        header.validate()?;
        Ok(header)
    }
}

/// A dense f32 tensor plus the metadata the rest of the pipeline needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub role: Role,
    pub shape: Vec<usize>,
    pub layer: Option<u32>,
    pub view_id: String,
    pub data: Vec<f32>,
}

impl TensorBlob {
    /// Builds a blob, checking every container invariant.
    pub fn new(
        role: Role,
        shape: Vec<usize>,
        layer: Option<u32>,
        view_id: impl Into<String>,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let blob = TensorBlob {
            role,
            shape,
            layer,
            view_id: view_id.into(),
            data,
        };
        blob.validate()?;
        Ok(blob)
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            role: self.role,
            shape: self.shape.clone(),
            layer: self.layer,
            view_id: self.view_id.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let header = self.header();
        header.validate()?;
        let expected = header.numel();
        if expected != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                shape: self.shape.clone(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    /// Bit-exact equality (distinguishes NaN payloads and signed zeros).
    pub fn bit_eq(&self, other: &TensorBlob) -> bool {
        self.header() == other.header()
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        self.validate()?;
        let header = self.header().encode();
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let (header, payload_offset) = parse_preamble(bytes)?;
        let payload = &bytes[payload_offset..];
        let expected = header.numel() * 4;
        if payload.len() < expected {
            return Err(TensorError::Truncated {
                expected: payload_offset + expected,
                actual: bytes.len(),
            });
        }
        if payload.len() > expected {
            return Err(TensorError::ShapeMismatch {
                shape: header.shape,
                expected: expected / 4,
                actual: payload.len() / 4,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(TensorBlob {
            role: header.role,
            shape: header.shape,
            layer: header.layer,
            view_id: header.view_id,
            data,
        })
    }
}

/// Parses magic, header length and header; returns the header and payload offset.
fn parse_preamble(bytes: &[u8]) -> Result<(TensorHeader, usize), TensorError> {
    if bytes.len() < 4 {
        return Err(TensorError::Truncated {
            expected: PREAMBLE_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(TensorError::Truncated {
            expected: PREAMBLE_LEN,
            actual: bytes.len(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("length checked")) as usize;
    let end = PREAMBLE_LEN + header_len;
    if bytes.len() < end {
        return Err(TensorError::Truncated {
            expected: end,
            actual: bytes.len(),
        });
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE_LEN..end])
        .map_err(|_| TensorError::Header("header is not valid UTF-8".into()))?;
    Ok((TensorHeader::decode(text)?, end))
}

pub fn write_tensor(blob: &TensorBlob, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let path = path.as_ref();
    let bytes = blob.to_bytes()?;
    let file = File::create(path).map_err(|e| TensorError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| TensorError::io(path, e))?;
    w.flush().map_err(|e| TensorError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorBlob, TensorError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| TensorError::io(path, e))?;
    TensorBlob::from_bytes(&bytes)
}

/// Reads and validates only the header, checking the file length against the
/// declared shape without loading the payload.
pub fn read_header(path: impl AsRef<Path>) -> Result<TensorHeader, TensorError> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| TensorError::io(path, e))?;
    let file_len = file.metadata().map_err(|e| TensorError::io(path, e))?.len() as usize;

    let mut preamble = Vec::with_capacity(PREAMBLE_LEN);
    (&mut file)
        .take(PREAMBLE_LEN as u64)
        .read_to_end(&mut preamble)
        .map_err(|e| TensorError::io(path, e))?;
    if preamble.len() >= 4 && &preamble[..4] != MAGIC {
        return Err(TensorError::BadMagic(preamble[..4].try_into().expect("len")));
    }
    if preamble.len() < PREAMBLE_LEN {
        return Err(TensorError::Truncated {
            expected: PREAMBLE_LEN,
            actual: preamble.len(),
        });
    }
    let header_len = u32::from_le_bytes(preamble[4..8].try_into().expect("len")) as usize;
    let mut head = preamble;
    (&mut file)
        .take(header_len as u64)
        .read_to_end(&mut head)
        .map_err(|e| TensorError::io(path, e))?;
    let (header, offset) = parse_preamble(&head)?;

    let expected = offset + 4 * header.numel();
    if file_len < expected {
        return Err(TensorError::Truncated {
            expected,
            actual: file_len,
        });
    }
    if file_len > expected {
        return Err(TensorError::ShapeMismatch {
            expected: header.numel(),
            shape: header.shape,
            actual: (file_len - offset) / 4,
        });
    }
    Ok(header)
}
