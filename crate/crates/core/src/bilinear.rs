//! Bilinear pooling of two feature-map streams.
//!
//! The pooled vector is laid out as `n_b` consecutive sub-vectors of length
//! `n_a`; sub-vector `t` is stream A modulated by channel `t` of stream B.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, Matrix};

/// A `channels × locations` stream output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Matrix,
}

impl FeatureMap {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.cols() == 0 {
            return Err(Error::Degenerate("feature map has no locations".into()));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map value".into()));
        }
        Ok(FeatureMap { values })
    }

    pub fn from_vec(channels: usize, locations: usize, data: Vec<f32>) -> Result<Self> {
        FeatureMap::new(Matrix::from_vec(channels, locations, data)?)
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn locations(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilinearFeature {
    n_a: usize,
    n_b: usize,
    data: Vec<f32>,
}

impl BilinearFeature {
    pub fn new(n_a: usize, n_b: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_a * n_b {
            return Err(Error::shape("BilinearFeature::new", (n_a, n_b), (data.len(), 1)));
        }
        Ok(BilinearFeature { n_a, n_b, data })
    }

    pub fn zeros(n_a: usize, n_b: usize) -> Self {
        BilinearFeature {
            n_a,
            n_b,
            data: vec![0.0; n_a * n_b],
        }
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    /// Total dimension `n_a · n_b`.
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_a, self.n_b)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Zero-based sub-vector `t` (the part modulated by stream-B channel `t`).
    pub fn sub_vector(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_a..(t + 1) * self.n_a]
    }

    pub fn sub_vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.n_a.max(1)).take(self.n_b)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn apply(&self, transform: PostTransform) -> Result<BilinearFeature> {
        match transform {
            PostTransform::None => Ok(self.clone()),
            PostTransform::SqrtL2 => {
                let rooted: Vec<f64> = self
                    .data
                    .iter()
                    .map(|&v| (v as f64).signum() * (v as f64).abs().sqrt())
                    .collect();
                let normed = l2_normalize(&rooted)?;
                BilinearFeature::new(self.n_a, self.n_b, normed.into_iter().map(|v| v as f32).collect())
            }
        }
    }
}

/// Optional transform applied after pooling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PostTransform {
    #[default]
    None,
    /// Signed square root followed by ℓ2 normalization.
    SqrtL2,
}

impl fmt::Display for PostTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PostTransform::None => "none",
            PostTransform::SqrtL2 => "sqrt-l2",
        })
    }
}

impl FromStr for PostTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PostTransform::None),
            "sqrt-l2" => Ok(PostTransform::SqrtL2),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

/// Mean representation of one category's exemplars.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryRepresentation {
    pub category: u32,
    pub representation: BilinearFeature,
    pub exemplar_count: usize,
}

/// Sum over locations of the vectorized outer products `fa(·,l) fb(·,l)ᵀ`.
///
/// Entries are accumulated in `f64` over locations in ascending order.
pub fn pool(fa: &FeatureMap, fb: &FeatureMap) -> Result<BilinearFeature> {
    if fa.locations() != fb.locations() {
        return Err(Error::shape(
            "pool",
            fa.values.shape(),
            fb.values.shape(),
        ));
    }
    let (n_a, n_b, locations) = (fa.channels(), fb.channels(), fa.locations());
    let mut data = Vec::with_capacity(n_a * n_b);
    for t in 0..n_b {
        let b_row = fb.values.row(t);
        for i in 0..n_a {
            let a_row = fa.values.row(i);
            let mut acc = 0.0f64;
            for l in 0..locations {
                acc += a_row[l] as f64 * b_row[l] as f64;
            }
            data.push(acc as f32);
        }
    }
    Ok(BilinearFeature { n_a, n_b, data })
}

pub fn category_mean(features: &[&BilinearFeature], category: u32) -> Result<CategoryRepresentation> {
    let first = features.first().ok_or(Error::Empty("category exemplars"))?;
    let shape = first.shape();
    let mut acc = vec![0.0f64; first.dim()];
    for f in features {
        if f.shape() != shape {
            return Err(Error::shape("category_mean", shape, f.shape()));
        }
        for (a, &v) in acc.iter_mut().zip(&f.data) {
            *a += v as f64;
        }
    }
    let n = features.len() as f64;
    let data = acc.into_iter().map(|a| (a / n) as f32).collect();
    Ok(CategoryRepresentation {
        category,
        representation: BilinearFeature {
            n_a: shape.0,
            n_b: shape.1,
            data,
        },
        exemplar_count: features.len(),
    })
}
