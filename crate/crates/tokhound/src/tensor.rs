//! Minimal reader/writer for the bit-exact tensor container used for
//! embedding matrices, fixtures, and indicator sidecars.
//!
//! File layout: an 8-byte little-endian unsigned header length `N`, then `N`
//! bytes of JSON mapping tensor name → `{"dtype", "shape", "data_offsets"}`,
//! then one contiguous little-endian payload. Offsets are relative to the
//! start of the payload. This is the widely used "safetensors" layout; files
//! written here load in other safetensors readers and vice versa.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Errors from container parsing. Embedding-level checks (missing tensors,
/// shape or finiteness violations) live in [`crate::embeddings`].
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("tensor file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {0:?} (supported: F16, F32, F64)")]
    UnsupportedDtype(String),
    #[error("tensor {name:?} data range {begin}..{end} does not fit the payload (len {payload_len}) or its shape")]
    TruncatedData { name: String, begin: usize, end: usize, payload_len: usize },
}

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F16,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One tensor, converted to f64 on read.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

/// Reads every tensor in a container file. Tensor order follows the
/// (sorted) header map, so iteration is deterministic.
pub fn read_tensor_file(path: &Path) -> Result<BTreeMap<String, Tensor>, TensorError> {
    let bytes = std::fs::read(path)?;
    read_tensor_bytes(&bytes)
}

/// Reads every tensor from in-memory container bytes.
pub fn read_tensor_bytes(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, TensorError> {
    if bytes.len() < 8 {
        return Err(TensorError::MalformedHeader(format!(
            "file is {} bytes, too short for the 8-byte header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            TensorError::MalformedHeader(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| TensorError::MalformedHeader(format!("header JSON: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut tensors = BTreeMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value).map_err(|e| {
            TensorError::MalformedHeader(format!("entry for tensor {name:?}: {e}"))
        })?;
        let dtype = match entry.dtype.as_str() {
            "F16" => Dtype::F16,
            "F32" => Dtype::F32,
            "F64" => Dtype::F64,
            other => return Err(TensorError::UnsupportedDtype(other.to_string())),
        };
        let (begin, end) = entry.data_offsets;
        let count: usize = entry.shape.iter().product();
        let fits = begin <= end
            && end <= payload.len()
            && end - begin == count * dtype.size();
        if !fits {
            return Err(TensorError::TruncatedData {
                name,
                begin,
                end,
                payload_len: payload.len(),
            });
        }
        let raw = &payload[begin..end];
        let data = match dtype {
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| f16_bits_to_f64(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        tensors.insert(name, Tensor { dtype, shape: entry.shape, data });
    }
    Ok(tensors)
}

/// A tensor queued for writing.
pub struct TensorOut<'a> {
    pub name: &'a str,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Writes a container file. Data is narrowed from f64 to the requested dtype
/// (F16 writing is unsupported; fixtures and sidecars use F32/F64).
pub fn write_tensor_file(path: &Path, tensors: &[TensorOut<'_>]) -> Result<(), TensorError> {
    let mut entries = BTreeMap::new();
    let mut payload = Vec::new();
    for t in tensors {
        assert_eq!(
            t.shape.iter().product::<usize>(),
            t.data.len(),
            "shape/data mismatch for tensor {:?}",
            t.name
        );
        let begin = payload.len();
        match t.dtype {
            Dtype::F16 => panic!("F16 writing is not supported"),
            Dtype::F32 => {
                for &v in t.data {
                    payload.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in t.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        entries.insert(
            t.name.to_string(),
            serde_json::json!({
                "dtype": match t.dtype { Dtype::F16 => "F16", Dtype::F32 => "F32", Dtype::F64 => "F64" },
                "shape": t.shape,
                "data_offsets": [begin, payload.len()],
            }),
        );
    }
    let mut header = serde_json::to_vec(&entries).expect("header serialization");
    // Pad to 8-byte alignment with spaces, matching common writers.
    while header.len() % 8 != 0 {
        header.push(b' ');
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(&header)?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

/// IEEE 754 binary16 → f64, covering subnormals, infinities and NaNs.
fn f16_bits_to_f64(bits: u16) -> f64 {
    let sign = if bits >> 15 == 1 { -1.0 } else { 1.0 };
    let exponent = (bits >> 10) & 0x1F;
    let mantissa = (bits & 0x3FF) as f64;
    match exponent {
        0 => sign * mantissa * 2f64.powi(-24), // subnormal (or zero)
        0x1F => {
            if mantissa == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        e => sign * (1.0 + mantissa / 1024.0) * 2f64.powi(e as i32 - 15),
    }
}
