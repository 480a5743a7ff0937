//! Fixtures shared by the benchmarks.

use rfsolve::attnfield::AttentionGeometry;
use rfsolve::{AnalyticField, AttentionField, MlpField, Tensor};

/// Deterministic, well-spread state of the given shape.
pub fn state(shape: &[usize]) -> Tensor {
    let len = shape.iter().product::<usize>();
    let data = (0..len).map(|i| (i as f64 * 0.7 + 0.3).sin() * 1.5).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rotation() -> AnalyticField {
    AnalyticField::rotation(1.0).unwrap()
}

pub fn gaussian() -> AnalyticField {
    AnalyticField::gaussian_pair_ot(vec![2.0, -1.0], vec![0.5, 0.8], vec![0.0, 0.0]).unwrap()
}

pub fn mlp() -> MlpField {
    MlpField::default_2d(0)
}

pub fn attention() -> AttentionField {
    AttentionField::random(AttentionGeometry::default(), 0).unwrap()
}
