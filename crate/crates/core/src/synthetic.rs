//! Synthetic bilinear features with planted part structure.
//!
//! Every (category, sub-vector) pair gets its own unit direction; an item's
//! sub-vector `t` is that direction plus isotropic Gaussian noise. Categories
//! are split at random into disjoint auxiliary and novel sets.

use crate::bilinear::BilinearFeature;
use crate::dataset::{Dataset, Role};
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensor::l2_normalize;

/// Share of categories held out as novel.
pub const DEFAULT_NOVEL_FRACTION: f64 = 0.25;
/// Minimum angle in radians between planted directions of one sub-vector.
pub const DEFAULT_MIN_SEPARATION: f64 = 0.2;

const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub categories: usize,
    pub items_per_category: usize,
    pub n_a: usize,
    pub n_b: usize,
    /// Standard deviation of the per-coordinate noise.
    pub noise: f64,
    pub novel_categories: usize,
    pub min_separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(categories: usize, items_per_category: usize, n_a: usize, n_b: usize, noise: f64, seed: u64) -> Self {
        let novel = ((categories as f64 * DEFAULT_NOVEL_FRACTION).round() as usize).max(1);
        SyntheticSpec {
            categories,
            items_per_category,
            n_a,
            n_b,
            noise,
            novel_categories: novel,
            min_separation: DEFAULT_MIN_SEPARATION,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_a == 0 || self.n_b == 0 {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        if self.items_per_category == 0 {
            return Err(Error::Config("each category needs at least one item".into()));
        }
        if self.novel_categories == 0 || self.novel_categories >= self.categories {
            return Err(Error::Config(format!(
                "need at least one auxiliary and one novel category, got {} novel of {}",
                self.novel_categories, self.categories
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.min_separation) {
            return Err(Error::Config("min_separation must lie in [0, π)".into()));
        }
        Ok(())
    }
}

/// Planted directions, indexed `[category][sub-vector]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedMeans(pub Vec<Vec<Vec<f64>>>);

fn plant_means(spec: &SyntheticSpec, rng: &mut Rng) -> Result<PlantedMeans> {
    let max_cos = spec.min_separation.cos();
    let mut means = vec![Vec::with_capacity(spec.n_b); spec.categories];
    for t in 0..spec.n_b {
        let mut placed: Vec<Vec<f64>> = Vec::with_capacity(spec.categories);
        for _ in 0..spec.categories {
            let mut attempts = 0;
            let dir = loop {
                attempts += 1;
                if attempts > MAX_REJECTIONS {
                    return Err(Error::Config(format!(
                        "cannot place {} directions in {} dims with separation {} rad",
                        spec.categories, spec.n_a, spec.min_separation
                    )));
                }
                let raw: Vec<f64> = (0..spec.n_a).map(|_| rng.normal()).collect();
                let Ok(dir) = l2_normalize(&raw) else { continue };
                let ok = placed
                    .iter()
                    .all(|p| p.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
                if ok {
                    break dir;
                }
            };
            placed.push(dir);
        }
        for (c, dir) in placed.into_iter().enumerate() {
            debug_assert_eq!(means[c].len(), t);
            means[c].push(dir);
        }
    }
    Ok(PlantedMeans(means))
}

/// Returns `(auxiliary, novel)` datasets plus the planted directions.
pub fn generate_with_means(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, PlantedMeans)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed, streams::SYNTHETIC);
    let means = plant_means(spec, &mut rng)?;
    let mut novel_ids = rng.sample_indices(spec.categories, spec.novel_categories);
    novel_ids.sort_unstable();

    let (mut aux_f, mut aux_l, mut nov_f, mut nov_l) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (c, parts) in means.0.iter().enumerate() {
        let is_novel = novel_ids.binary_search(&c).is_ok();
        for _ in 0..spec.items_per_category {
            let mut data = Vec::with_capacity(spec.n_a * spec.n_b);
            for dir in parts {
                data.extend(dir.iter().map(|&m| (m + spec.noise * rng.normal()) as f32));
            }
            let x = BilinearFeature::new(spec.n_a, spec.n_b, data)?;
            if is_novel {
                nov_f.push(x);
                nov_l.push(c as u32);
            } else {
                aux_f.push(x);
                aux_l.push(c as u32);
            }
        }
    }
    let aux = Dataset::new(Role::Auxiliary, spec.n_a, spec.n_b, aux_f, aux_l)?;
    let novel = Dataset::new(Role::Novel, spec.n_a, spec.n_b, nov_f, nov_l)?;
    Ok((aux, novel, means))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    generate_with_means(spec).map(|(a, n, _)| (a, n))
}
