//! Stage executors. The affine reference executor stands in for a real model
//! runtime: its artefact is a seed plus dimensions, and it produces bit-identical
//! weights on every platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::{element_count, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecutorError {
    #[error("malformed artefact: {0}")]
    Artefact(String),
    #[error("input has {actual} features per row, expected {expected}")]
    InputShape { expected: usize, actual: usize },
}

/// Opens artefact bytes into a runnable session.
pub trait StageExecutor: Send + Sync {
    fn open(&self, blob: &[u8]) -> Result<Box<dyn StageSession>, ExecutorError>;
}

pub trait StageSession: Send {
    fn run(&mut self, input: &Tensor) -> Result<Tensor, ExecutorError>;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExecutor;

struct IdentitySession;

impl StageExecutor for IdentityExecutor {
    fn open(&self, _blob: &[u8]) -> Result<Box<dyn StageSession>, ExecutorError> {
        Ok(Box::new(IdentitySession))
    }
}

impl StageSession for IdentitySession {
    fn run(&mut self, input: &Tensor) -> Result<Tensor, ExecutorError> {
        Ok(input.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    None,
}

/// Serialized form of an affine stage: `y = tanh?(A x + b)` per batch row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineArtefact {
    pub kind: String,
    pub seed: u64,
    /// Features per batch row of the input.
    pub in_dim: usize,
    /// Output shape; the leading (batch) entry is taken from the input.
    pub output_shape: Vec<usize>,
    pub activation: Activation,
}

impl AffineArtefact {
    pub const KIND: &'static str = "affine";

    pub fn new(
        seed: u64,
        input_shape: &[usize],
        output_shape: &[usize],
        activation: Activation,
    ) -> Self {
        AffineArtefact {
            kind: Self::KIND.into(),
            seed,
            in_dim: element_count(&input_shape[1..]),
            output_shape: output_shape.to_vec(),
            activation,
        }
    }

    pub fn out_dim(&self) -> usize {
        element_count(&self.output_shape[1..])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        crate::canonical::to_vec(self).expect("artefact serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ExecutorError> {
        let a: AffineArtefact = crate::canonical::from_slice(bytes)
            .map_err(|e| ExecutorError::Artefact(e.to_string()))?;
        if a.kind != Self::KIND {
            return Err(ExecutorError::Artefact(format!(
                "unknown kind `{}`",
                a.kind
            )));
        }
        if a.output_shape.is_empty() || a.in_dim == 0 || a.out_dim() == 0 {
            return Err(ExecutorError::Artefact("empty dimensions".into()));
        }
        Ok(a)
    }

    /// Weights `A` (out_dim x in_dim, row-major) followed by bias `b`.
    pub fn materialize(&self) -> (Vec<f32>, Vec<f32>) {
        let mut rng = SplitMix64(self.seed);
        let a = (0..self.out_dim() * self.in_dim)
            .map(|_| rng.weight())
            .collect();
        let b = (0..self.out_dim()).map(|_| rng.weight()).collect();
        (a, b)
    }
}

pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [-0.1, 0.1).
    pub fn weight(&mut self) -> f32 {
        let unit = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        (unit * 0.2 - 0.1) as f32
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AffineExecutor;

struct AffineSession {
    artefact: AffineArtefact,
    a: Vec<f32>,
    b: Vec<f32>,
}

impl StageExecutor for AffineExecutor {
    fn open(&self, blob: &[u8]) -> Result<Box<dyn StageSession>, ExecutorError> {
        let artefact = AffineArtefact::from_bytes(blob)?;
        let (a, b) = artefact.materialize();
        Ok(Box::new(AffineSession { artefact, a, b }))
    }
}

impl StageSession for AffineSession {
    fn run(&mut self, input: &Tensor) -> Result<Tensor, ExecutorError> {
        let in_dim = self.artefact.in_dim;
        let out_dim = self.artefact.out_dim();
        let batch = input.shape().first().copied().unwrap_or(1);
        let x = input.to_f32_vec();
        if batch == 0 || x.len() != batch * in_dim {
            return Err(ExecutorError::InputShape {
                expected: in_dim,
                actual: x.len() / batch.max(1),
            });
        }
        let mut y = Vec::with_capacity(batch * out_dim);
        for row in x.chunks(in_dim) {
            for j in 0..out_dim {
                let weights = &self.a[j * in_dim..(j + 1) * in_dim];
                let mut acc = 0.0f32;
                for (w, v) in weights.iter().zip(row) {
                    acc += w * v;
                }
                let v = acc + self.b[j];
                y.push(match self.artefact.activation {
                    Activation::Tanh => v.tanh(),
                    Activation::None => v,
                });
            }
        }
        let mut shape = self.artefact.output_shape.clone();
        shape[0] = batch;
        Ok(Tensor::from_f32(shape, &y).expect("shape matches data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 0 from the published splitmix64 reference.
        let mut r = SplitMix64(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn weights_stay_in_range() {
        let mut r = SplitMix64(42);
        for _ in 0..10_000 {
            let w = r.weight();
            assert!((-0.1..0.1).contains(&w), "{w}");
        }
    }

    #[test]
    fn affine_by_hand() {
        let art = AffineArtefact::new(7, &[1, 2], &[1, 1], Activation::None);
        let (a, b) = art.materialize();
        let x = Tensor::from_f32(vec![1, 2], &[1.0, 2.0]).unwrap();
        let y = AffineExecutor
            .open(&art.to_bytes())
            .unwrap()
            .run(&x)
            .unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.to_f32_vec(), vec![(a[0] * 1.0 + a[1] * 2.0) + b[0]]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let art = AffineArtefact::new(3, &[1, 4], &[1, 3], Activation::Tanh);
        let mut s = AffineExecutor.open(&art.to_bytes()).unwrap();
        let rows = [[0.5f32, -1.0, 2.0, 0.0], [1.0, 1.0, 1.0, 1.0]];
        let both = s
            .run(&Tensor::from_f32(vec![2, 4], &rows.concat()).unwrap())
            .unwrap()
            .to_f32_vec();
        let first = s
            .run(&Tensor::from_f32(vec![1, 4], &rows[0]).unwrap())
            .unwrap()
            .to_f32_vec();
        let second = s
            .run(&Tensor::from_f32(vec![1, 4], &rows[1]).unwrap())
            .unwrap()
            .to_f32_vec();
        assert_eq!(both, [first, second].concat());
    }

    #[test]
    fn int_inputs_are_cast() {
        let art = AffineArtefact::new(1, &[1, 3], &[1, 2], Activation::None);
        let mut s = AffineExecutor.open(&art.to_bytes()).unwrap();
        let i = s
            .run(&Tensor::from_i64(vec![1, 3], &[1, 2, 3]).unwrap())
            .unwrap();
        let f = s
            .run(&Tensor::from_f32(vec![1, 3], &[1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(i, f);
    }

    #[test]
    fn wrong_width_is_an_error() {
        let art = AffineArtefact::new(1, &[1, 3], &[1, 2], Activation::None);
        let mut s = AffineExecutor.open(&art.to_bytes()).unwrap();
        let err = s
            .run(&Tensor::from_f32(vec![1, 4], &[0.0; 4]).unwrap())
            .err();
        assert_eq!(
            err,
            Some(ExecutorError::InputShape {
                expected: 3,
                actual: 4
            })
        );
    }

    #[test]
    fn foreign_artefact_rejected() {
        assert!(AffineExecutor.open(b"not json").is_err());
        assert!(AffineExecutor.open(br#"{"kind":"onnx"}"#).is_err());
    }

    #[test]
    fn identity_passes_through() {
        let t = Tensor::from_f32(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(IdentityExecutor.open(b"").unwrap().run(&t).unwrap(), t);
    }
}
