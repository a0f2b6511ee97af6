use serde::{Deserialize, Serialize};

use super::TransportError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    Float32,
    Int64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Int64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Int64 => "int64",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TransportError> {
        match s {
            "float32" => Ok(DType::Float32),
            "int64" => Ok(DType::Int64),
            other => Err(TransportError::UnknownDtype(other.to_string())),
        }
    }
}

/// Dense row-major little-endian tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TransportError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TransportError::InvalidShape(shape));
        }
        let expected = element_count(&shape) * dtype.size();
        if data.len() != expected {
            return Err(TransportError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self, TransportError> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor::new(DType::Float32, shape, data)
    }

    pub fn from_i64(shape: Vec<usize>, values: &[i64]) -> Result<Self, TransportError> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor::new(DType::Int64, shape, data)
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let len = element_count(&shape) * dtype.size();
        Tensor::new(dtype, shape, vec![0; len]).expect("zeros has a consistent length")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        element_count(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements widened/narrowed to f32 regardless of dtype.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self.dtype {
            DType::Float32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::Int64 => self
                .data
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
        }
    }

    pub fn to_i64_vec(&self) -> Option<Vec<i64>> {
        (self.dtype == DType::Int64).then(|| {
            self.data
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
    }
}
