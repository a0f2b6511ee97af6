//! Generators and reference computations shared by property tests.

use proptest::prelude::*;
use shardflow::transport::{Codec, DType, Tensor};

pub fn tensor() -> impl Strategy<Value = Tensor> {
    (any::<bool>(), prop::collection::vec(1usize..6, 1..4))
        .prop_flat_map(|(int, shape)| {
            let dtype = if int { DType::Int64 } else { DType::Float32 };
            let n = shape.iter().product::<usize>() * dtype.size();
            (
                Just(dtype),
                Just(shape),
                prop::collection::vec(any::<u8>(), n),
            )
        })
        .prop_map(|(d, s, bytes)| Tensor::new(d, s, bytes).unwrap())
}

pub fn codec() -> impl Strategy<Value = Codec> {
    prop_oneof![Just(Codec::Zlib), Just(Codec::None)]
}

/// Entropy weights written out directly from the textbook definition.
pub fn reference_weights(m: &[Vec<f64>]) -> Vec<f64> {
    let rows = m.len();
    let cols = m[0].len();
    let mut d = Vec::new();
    for j in 0..cols {
        let col: Vec<f64> = m.iter().map(|r| r[j]).collect();
        let total: f64 = col.iter().sum();
        let e = if total == 0.0 || col.iter().all(|&v| v == col[0]) {
            1.0
        } else {
            -col.iter()
                .map(|v| v / total)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
                / (rows as f64).ln()
        };
        d.push((1.0 - e).max(0.0));
    }
    let s: f64 = d.iter().sum();
    if s == 0.0 {
        vec![1.0 / cols as f64; cols]
    } else {
        d.iter().map(|x| x / s).collect()
    }
}

pub fn raw_matrix() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (2usize..8, 2usize..6).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..1000.0, c), r),
            0..c,
        )
    })
}

/// Indices sorted by descending score, ties by index.
pub fn order(scores: &[f64]) -> Vec<usize> {
    let mut o: Vec<usize> = (0..scores.len()).collect();
    o.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    o
}
