use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("no logit vectors to aggregate")]
    Empty,
    #[error("logit vector {index} has length {len}, expected {expected}")]
    ShapeMismatch {
        index: usize,
        len: usize,
        expected: usize,
    },
}

/// Averaged logits and the winning class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub mean_logits: Vec<T>,
    pub predicted_class: usize,
}

/// Element-wise mean in input order; argmax with the lowest index winning ties.
pub fn aggregate_results<T: Float>(logits: &[Vec<T>]) -> Result<Prediction<T>, AggregateError> {
    let first = logits.first().ok_or(AggregateError::Empty)?;
    let width = first.len();
    if width == 0 {
        return Err(AggregateError::ShapeMismatch {
            index: 0,
            len: 0,
            expected: 1,
        });
    }
    let mut sums = vec![T::zero(); width];
    for (index, row) in logits.iter().enumerate() {
        if row.len() != width {
            return Err(AggregateError::ShapeMismatch {
                index,
                len: row.len(),
                expected: width,
            });
        }
        for (s, &v) in sums.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    let count = T::from(logits.len()).unwrap();
    let mean_logits: Vec<T> = sums.into_iter().map(|s| s / count).collect();
    let predicted_class = argmax(&mean_logits);
    Ok(Prediction {
        mean_logits,
        predicted_class,
    })
}

fn argmax<T: Float>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_class() {
        let p = aggregate_results(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(p.mean_logits, vec![4.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(p.predicted_class, 0);
    }

    #[test]
    fn single_input() {
        let p = aggregate_results(&[vec![0.3f32, 0.7]]).unwrap();
        assert_eq!(p.predicted_class, 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let p = aggregate_results(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(p.predicted_class, 0);
    }

    #[test]
    fn ragged_input_rejected() {
        assert_eq!(
            aggregate_results(&[vec![1.0, 2.0], vec![1.0]]),
            Err(AggregateError::ShapeMismatch {
                index: 1,
                len: 1,
                expected: 2
            })
        );
        assert_eq!(aggregate_results::<f64>(&[]), Err(AggregateError::Empty));
    }
}
