use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::tensor::{element_count, DType, Tensor};
use super::TransportError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    Zlib,
    None,
}

impl Codec {
    pub fn tag(self) -> &'static str {
        match self {
            Codec::Zlib => "zlib",
            Codec::None => "none",
        }
    }

    pub fn parse(tag: &str) -> Result<Self, TransportError> {
        match tag {
            "zlib" => Ok(Codec::Zlib),
            "none" => Ok(Codec::None),
            other => Err(TransportError::UnsupportedCodec(other.to_string())),
        }
    }
}

/// Self-describing activation payload. Tags are kept as strings so envelopes
/// naming codecs this build does not ship still parse.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PayloadEnvelope {
    pub compression: String,
    pub data: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl PayloadEnvelope {
    /// Canonical serialized bytes; this is what routing measures and hashes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        crate::canonical::to_vec(self).expect("envelope serializes")
    }

    pub fn from_canonical(bytes: &[u8]) -> Result<Self, TransportError> {
        crate::canonical::from_slice(bytes).map_err(|e| TransportError::Malformed(e.to_string()))
    }

    /// Length of the (possibly compressed) bytes carried in `data`.
    pub fn payload_len(&self) -> Result<usize, TransportError> {
        Ok(BASE64.decode(&self.data)?.len())
    }
}

pub fn encode_payload(t: &Tensor, codec: Codec) -> PayloadEnvelope {
    let bytes = match codec {
        Codec::None => t.bytes().to_vec(),
        Codec::Zlib => {
            let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
            enc.write_all(t.bytes())
                .expect("writing to a Vec cannot fail");
            enc.finish().expect("writing to a Vec cannot fail")
        }
    };
    PayloadEnvelope {
        compression: codec.tag().to_string(),
        data: BASE64.encode(bytes),
        dtype: t.dtype().as_str().to_string(),
        shape: t.shape().to_vec(),
    }
}

pub fn decode_payload(e: &PayloadEnvelope) -> Result<Tensor, TransportError> {
    let dtype = DType::parse(&e.dtype)?;
    let codec = Codec::parse(&e.compression)?;
    let raw = BASE64.decode(&e.data)?;
    let expected = element_count(&e.shape) * dtype.size();
    let bytes = match codec {
        Codec::None => raw,
        Codec::Zlib => {
            // Read one byte past the expected size so oversized payloads are caught
            // without inflating unbounded input.
            let mut out = Vec::with_capacity(expected);
            ZlibDecoder::new(raw.as_slice())
                .take(expected as u64 + 1)
                .read_to_end(&mut out)
                .map_err(|err| TransportError::Decompress(err.to_string()))?;
            out
        }
    };
    if bytes.len() != expected {
        return Err(TransportError::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    Tensor::new(dtype, e.shape.clone(), bytes)
}

/// Percentage of bytes saved: `100 * (1 - compressed / raw)`.
pub fn compression_ratio<T: Float>(raw_len: u64, compressed_len: u64) -> T {
    assert!(
        raw_len > 0,
        "compression ratio needs a non-empty raw payload"
    );
    let hundred = T::from(100.0).unwrap();
    let raw = T::from(raw_len).unwrap();
    let compressed = T::from(compressed_len).unwrap();
    hundred * (T::one() - compressed / raw)
}
