//! Exemplar-to-classifier mappings.
//!
//! A [`MappingModel`] is a list of independent MLP banks. The piecewise model
//! has one bank per stream-B channel, each mapping an `n_a` sub-vector to an
//! `n_a` sub-classifier; the global model is a single bank over the whole
//! `n_a · n_b` vector. Concatenating bank outputs in order yields the
//! classifier.

use std::fmt;
use std::str::FromStr;

use crate::bilinear::CategoryRepresentation;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::Rng;
use crate::tensor::{elu, Matrix, ELU_ALPHA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MappingKind {
    Piecewise,
    Global,
}

impl MappingKind {
    pub fn tag(self) -> u32 {
        match self {
            MappingKind::Piecewise => 0,
            MappingKind::Global => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(MappingKind::Piecewise),
            1 => Some(MappingKind::Global),
            _ => None,
        }
    }
}

impl fmt::Display for MappingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingKind::Piecewise => "piecewise",
            MappingKind::Global => "global",
        })
    }
}

impl FromStr for MappingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "piecewise" => Ok(MappingKind::Piecewise),
            "global" => Ok(MappingKind::Global),
            other => Err(Error::Config(format!("unknown mapping kind `{other}`"))),
        }
    }
}

/// Shape of one MLP: `layers` affine maps with ELU between them.
///
/// One layer is a single affine `input → output`. More layers chain
/// `input → hidden`, `(layers − 2) × (hidden → hidden)`, `hidden → output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: usize,
    pub hidden: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        if self.layers > 1 && self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` per affine map.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        if self.layers == 1 {
            return vec![(self.output_dim, self.input_dim)];
        }
        let mut shapes = vec![(self.hidden, self.input_dim)];
        shapes.extend(std::iter::repeat_n((self.hidden, self.hidden), self.layers - 2));
        shapes.push((self.output_dim, self.hidden));
        shapes
    }

    pub fn parameter_count(&self) -> u128 {
        let (i, o, h) = (self.input_dim as u128, self.output_dim as u128, self.hidden as u128);
        match self.layers {
            0 => 0,
            1 => o * i + o,
            l => (i * h + h) + (l as u128 - 2) * (h * h + h) + (h * o + o),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `fan_out × fan_in`.
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Affine {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Affine {
            weight: Matrix::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weight.matvec(x)?;
        for (v, &b) in z.iter_mut().zip(&self.bias) {
            *v += b as f64;
        }
        Ok(z)
    }
}

/// Intermediates of one traced forward pass.
#[derive(Clone, Debug)]
pub(crate) struct MlpTrace {
    /// Input to each affine map.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each affine map.
    pub preacts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.preacts.last().expect("trace of a non-empty MLP")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Affine>,
}

impl Mlp {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Mlp {
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(o, i)| Affine::zeros(o, i))
                .collect(),
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    fn init(spec: &MlpSpec, rng: &mut Rng) -> Self {
        let mut mlp = Mlp::zeros(spec);
        for layer in &mut mlp.layers {
            let (fan_out, fan_in) = layer.weight.shape();
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.uniform(-s, s) as f32;
            }
        }
        mlp
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h)?;
            if l < last {
                h.iter_mut().for_each(|v| *v = elu(*v, ELU_ALPHA));
            }
        }
        Ok(h)
    }

    pub(crate) fn forward_traced(&self, x: &[f64]) -> Result<MlpTrace> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h)?;
            inputs.push(h);
            h = if l < last {
                z.iter().map(|&v| elu(v, ELU_ALPHA)).collect()
            } else {
                Vec::new()
            };
            preacts.push(z);
        }
        Ok(MlpTrace { inputs, preacts })
    }

    pub fn parameters(&self) -> impl Iterator<Item = &f32> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.iter()))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.data_mut().iter_mut().chain(l.bias.iter_mut()))
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: MappingKind,
    pub n_a: usize,
    pub n_b: usize,
    pub layers: usize,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.n_a * self.n_b
    }

    pub fn bank_count(&self) -> usize {
        match self.kind {
            MappingKind::Piecewise => self.n_b,
            MappingKind::Global => 1,
        }
    }

    /// Input (and output) width of each bank.
    pub fn bank_width(&self) -> usize {
        match self.kind {
            MappingKind::Piecewise => self.n_a,
            MappingKind::Global => self.feature_dim(),
        }
    }

    pub fn bank_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.bank_width(),
            output_dim: self.bank_width(),
            layers: self.layers,
            hidden: self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_a == 0 || self.n_b == 0 {
            return Err(Error::Config(format!(
                "feature dims must be positive, got n_a={} n_b={}",
                self.n_a, self.n_b
            )));
        }
        self.bank_spec().validate()
    }

    /// Closed-form scalar parameter count; allocates nothing.
    pub fn parameter_count(&self) -> u128 {
        self.bank_count() as u128 * self.bank_spec().parameter_count()
    }
}

pub fn parameter_count(model: &MappingModel) -> u128 {
    model.config.parameter_count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingModel {
    config: ModelConfig,
    banks: Vec<Mlp>,
}

impl MappingModel {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let spec = config.bank_spec();
        let banks = (0..config.bank_count()).map(|_| Mlp::init(&spec, rng)).collect();
        Ok(MappingModel { config, banks })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.bank_spec();
        Ok(MappingModel {
            config,
            banks: (0..config.bank_count()).map(|_| Mlp::zeros(&spec)).collect(),
        })
    }

    pub fn from_banks(config: ModelConfig, banks: Vec<Mlp>) -> Result<Self> {
        let reference = MappingModel::zeros(config)?;
        if banks.len() != reference.banks.len()
            || !banks.iter().zip(&reference.banks).all(|(a, b)| a.same_shape(b))
        {
            return Err(Error::Config("bank shapes do not match the model configuration".into()));
        }
        Ok(MappingModel { config, banks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> MappingKind {
        self.config.kind
    }

    pub fn banks(&self) -> &[Mlp] {
        &self.banks
    }

    pub fn banks_mut(&mut self) -> &mut [Mlp] {
        &mut self.banks
    }

    pub fn parameters(&self) -> impl Iterator<Item = &f32> {
        self.banks.iter().flat_map(|b| b.parameters())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.banks.iter_mut().flat_map(|b| b.parameters_mut())
    }

    pub fn is_congruent(&self, banks: &[Mlp]) -> bool {
        self.banks.len() == banks.len() && self.banks.iter().zip(banks).all(|(a, b)| a.same_shape(b))
    }

    fn check_rep(&self, rep: &CategoryRepresentation) -> Result<()> {
        let shape = rep.representation.shape();
        if shape != (self.config.n_a, self.config.n_b) {
            return Err(Error::shape("generate_classifier", (self.config.n_a, self.config.n_b), shape));
        }
        Ok(())
    }

    /// Classifier `F_k` for one category: bank `t` sees only segment `t`.
    pub fn generate_classifier(&self, rep: &CategoryRepresentation) -> Result<Vec<f64>> {
        self.check_rep(rep)?;
        let x = rep.representation.to_f64();
        let width = self.config.bank_width();
        let mut out = Vec::with_capacity(x.len());
        for (bank, segment) in self.banks.iter().zip(x.chunks_exact(width)) {
            out.extend(bank.forward(segment)?);
        }
        Ok(out)
    }

    pub(crate) fn trace_classifier(&self, rep: &CategoryRepresentation) -> Result<Vec<MlpTrace>> {
        self.check_rep(rep)?;
        let x = rep.representation.to_f64();
        self.banks
            .iter()
            .zip(x.chunks_exact(self.config.bank_width()))
            .map(|(bank, segment)| bank.forward_traced(segment))
            .collect()
    }

    pub fn generate_bank(&self, reps: &[CategoryRepresentation], exec: Execution) -> Result<ClassifierBank> {
        let classifiers = par::try_map_range(exec, reps.len(), |k| self.generate_classifier(&reps[k]))?;
        Ok(ClassifierBank {
            categories: reps.iter().map(|r| r.category).collect(),
            classifiers,
        })
    }
}

/// One generated classifier per episode category, in episode order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank {
    pub categories: Vec<u32>,
    pub classifiers: Vec<Vec<f64>>,
}

impl ClassifierBank {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// `F_c · x` for every category.
    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        self.classifiers
            .iter()
            .map(|f| crate::tensor::dot_mixed(f, x))
            .collect()
    }
}
