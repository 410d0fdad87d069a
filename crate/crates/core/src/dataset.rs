use std::collections::BTreeMap;
use std::fmt;

use crate::bilinear::{BilinearFeature, PostTransform};
use crate::error::{Error, Result};

/// Which side of the category split a dataset comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Meta-training categories.
    Auxiliary,
    /// Held-out categories for few-shot testing.
    Novel,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Auxiliary => "auxiliary",
            Role::Novel => "novel",
        })
    }
}

/// Labelled bilinear features with a per-category item index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    role: Role,
    n_a: usize,
    n_b: usize,
    features: Vec<BilinearFeature>,
    labels: Vec<u32>,
    index: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn new(role: Role, n_a: usize, n_b: usize, features: Vec<BilinearFeature>, labels: Vec<u32>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::shape("Dataset::new", (features.len(), 1), (labels.len(), 1)));
        }
        let mut index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, (f, &label)) in features.iter().zip(&labels).enumerate() {
            if f.shape() != (n_a, n_b) {
                return Err(Error::shape("Dataset::new", (n_a, n_b), f.shape()));
            }
            index.entry(label).or_default().push(i);
        }
        Ok(Dataset {
            role,
            n_a,
            n_b,
            features,
            labels,
            index,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[BilinearFeature] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &BilinearFeature {
        &self.features[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    /// Distinct labels in ascending order.
    pub fn categories(&self) -> Vec<u32> {
        self.index.keys().copied().collect()
    }

    pub fn category_count(&self) -> usize {
        self.index.len()
    }

    pub fn items(&self, category: u32) -> &[usize] {
        self.index.get(&category).map_or(&[], |v| v.as_slice())
    }

    pub fn min_items_per_category(&self) -> usize {
        self.index.values().map(Vec::len).min().unwrap_or(0)
    }

    /// Errors unless every category holds at least `needed` items.
    pub fn require_items(&self, needed: usize) -> Result<()> {
        for (label, items) in &self.index {
            if items.len() < needed {
                return Err(Error::Sampling(format!(
                    "category {label} has {} items, {needed} required",
                    items.len()
                )));
            }
        }
        Ok(())
    }

    pub fn require_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::Config(format!("expected a {role} dataset, got {}", self.role)));
        }
        Ok(())
    }

    /// Errors if the two datasets share a category.
    pub fn ensure_disjoint(&self, other: &Dataset) -> Result<()> {
        if let Some(shared) = self.index.keys().find(|k| other.index.contains_key(k)) {
            return Err(Error::Config(format!(
                "category {shared} appears in both the auxiliary and novel sets"
            )));
        }
        Ok(())
    }

    /// True if the labels are exactly `0..category_count()`.
    pub fn labels_contiguous(&self) -> bool {
        self.index.keys().enumerate().all(|(i, &k)| i as u32 == k)
    }

    pub fn transformed(&self, transform: PostTransform) -> Result<Dataset> {
        if transform == PostTransform::None {
            return Ok(self.clone());
        }
        let features = self
            .features
            .iter()
            .map(|f| f.apply(transform))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            features,
            ..self.clone()
        })
    }
}
