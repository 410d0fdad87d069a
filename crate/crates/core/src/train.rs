//! Episode loss, reverse-mode gradients for the mapping banks, SGD, and a
//! central-difference gradient check.
//!
//! Exemplar representations and query features are constants: gradients
//! flow only into mapping parameters.

use crate::bilinear::{BilinearFeature, CategoryRepresentation};
use crate::error::{Error, Result};
use crate::mapping::{Mlp, MlpTrace, MappingModel};
use crate::par::{self, Execution};
use crate::rng::Rng;
use crate::tensor::{argmax, dot_mixed, elu_derivative, log_sum_exp, Matrix, ELU_ALPHA};

/// A labelled query feature.
pub type Query<'a> = (&'a BilinearFeature, u32);

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Mean negative log-likelihood over all queries.
    pub loss: f64,
    pub per_query: Vec<f64>,
    pub accuracy: f64,
}

/// Gradients shaped exactly like the model's banks.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub banks: Vec<Mlp>,
}

impl GradientSet {
    pub fn zeros_like(model: &MappingModel) -> Self {
        GradientSet {
            banks: model
                .banks()
                .iter()
                .map(|b| {
                    let mut z = b.clone();
                    z.parameters_mut().for_each(|v| *v = 0.0);
                    z
                })
                .collect(),
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = &f32> {
        self.banks.iter().flat_map(|b| b.parameters())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.banks.iter_mut().flat_map(|b| b.parameters_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().all(|v| v.is_finite())
    }
}

fn fingerprint(model: &MappingModel) -> u64 {
    // FNV-1a over parameter bits.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in model.parameters() {
        h ^= v.to_bits() as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Recorded {
    fingerprint: u64,
    report: LossReport,
    /// `traces[k][t]`: category `k`, bank `t`.
    traces: Vec<Vec<MlpTrace>>,
    /// `dJ/dF_k` for every category, length `D` each.
    classifier_grads: Vec<Vec<f64>>,
}

/// Records one forward episode pass so that [`EpisodeTape::backward`] can
/// reuse its intermediates.
pub struct EpisodeTape {
    execution: Execution,
    recorded: Option<Recorded>,
}

impl Default for EpisodeTape {
    fn default() -> Self {
        EpisodeTape::new(Execution::default())
    }
}

impl EpisodeTape {
    pub fn new(execution: Execution) -> Self {
        EpisodeTape {
            execution,
            recorded: None,
        }
    }

    pub fn report(&self) -> Option<&LossReport> {
        self.recorded.as_ref().map(|r| &r.report)
    }

    pub fn forward(
        &mut self,
        model: &MappingModel,
        reps: &[CategoryRepresentation],
        queries: &[Query<'_>],
    ) -> Result<&LossReport> {
        self.recorded = None;
        if reps.is_empty() {
            return Err(Error::Empty("episode categories"));
        }
        if queries.is_empty() {
            return Err(Error::Empty("episode queries"));
        }
        let categories: Vec<u32> = reps.iter().map(|r| r.category).collect();
        for (i, c) in categories.iter().enumerate() {
            if categories[..i].contains(c) {
                return Err(Error::Config(format!("category {c} appears twice in the episode")));
            }
        }
        let dim = model.config().feature_dim();
        let targets = queries
            .iter()
            .map(|(x, label)| {
                if x.shape() != (model.config().n_a, model.config().n_b) {
                    return Err(Error::shape("episode query", (model.config().n_a, model.config().n_b), x.shape()));
                }
                categories
                    .iter()
                    .position(|c| c == label)
                    .ok_or(Error::UnknownLabel(*label))
            })
            .collect::<Result<Vec<usize>>>()?;

        let traces = par::try_map_range(self.execution, reps.len(), |k| model.trace_classifier(&reps[k]))?;
        let classifiers: Vec<Vec<f64>> = traces
            .iter()
            .map(|banks| banks.iter().flat_map(|t| t.output().iter().copied()).collect())
            .collect();

        struct QueryOutcome {
            loss: f64,
            correct: bool,
            /// `p_c − 1[c = y]` per category.
            residual: Vec<f64>,
        }
        let outcomes = par::try_map_range(self.execution, queries.len(), |q| {
            let x = queries[q].0.data();
            let logits: Vec<f64> = classifiers.iter().map(|f| dot_mixed(f, x)).collect();
            let lse = log_sum_exp(&logits)?;
            let y = targets[q];
            let residual: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(c, &s)| (s - lse).exp() - if c == y { 1.0 } else { 0.0 })
                .collect();
            Ok::<_, Error>(QueryOutcome {
                loss: lse - logits[y],
                correct: argmax(&logits) == Some(y),
                residual,
            })
        })?;

        let n = queries.len() as f64;
        let per_query: Vec<f64> = outcomes.iter().map(|o| o.loss).collect();
        let loss = per_query.iter().sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("episode loss {loss}")));
        }
        let accuracy = outcomes.iter().filter(|o| o.correct).count() as f64 / n;

        let mut classifier_grads = vec![vec![0.0f64; dim]; reps.len()];
        for (o, (x, _)) in outcomes.iter().zip(queries) {
            for (g, &r) in classifier_grads.iter_mut().zip(&o.residual) {
                let scale = r / n;
                for (gi, &xi) in g.iter_mut().zip(x.data()) {
                    *gi += scale * xi as f64;
                }
            }
        }

        self.recorded = Some(Recorded {
            fingerprint: fingerprint(model),
            report: LossReport {
                loss,
                per_query,
                accuracy,
            },
            traces,
            classifier_grads,
        });
        Ok(&self.recorded.as_ref().expect("just recorded").report)
    }

    /// Exact gradients of the recorded episode loss.
    pub fn backward(&self, model: &MappingModel) -> Result<GradientSet> {
        let rec = self.recorded.as_ref().ok_or(Error::NoForwardPass)?;
        if fingerprint(model) != rec.fingerprint {
            return Err(Error::StaleForwardPass);
        }
        let width = model.config().bank_width();
        let banks = par::map_range(self.execution, model.banks().len(), |t| {
            let bank = &model.banks()[t];
            let mut acc: Vec<(Vec<f64>, Vec<f64>)> = bank
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.data().len()], vec![0.0; l.bias.len()]))
                .collect();
            for (k, grads) in rec.classifier_grads.iter().enumerate() {
                let upstream = &grads[t * width..(t + 1) * width];
                backprop_bank(bank, &rec.traces[k][t], upstream, &mut acc);
            }
            Mlp {
                layers: bank
                    .layers
                    .iter()
                    .zip(acc)
                    .map(|(l, (w, b))| crate::mapping::Affine {
                        weight: Matrix::from_vec(
                            l.weight.rows(),
                            l.weight.cols(),
                            w.into_iter().map(|v| v as f32).collect(),
                        )
                        .expect("congruent gradient shape"),
                        bias: b.into_iter().map(|v| v as f32).collect(),
                    })
                    .collect(),
            }
        });
        let grads = GradientSet { banks };
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient entry".into()));
        }
        Ok(grads)
    }

    /// Hidden-layer pre-activations of the recorded pass, flattened.
    fn hidden_preacts(&self) -> Vec<f64> {
        let Some(rec) = &self.recorded else {
            return Vec::new();
        };
        rec.traces
            .iter()
            .flatten()
            .flat_map(|t| {
                let hidden = t.preacts.len() - 1;
                t.preacts[..hidden].iter().flatten().copied()
            })
            .collect()
    }
}

fn backprop_bank(bank: &Mlp, trace: &MlpTrace, upstream: &[f64], acc: &mut [(Vec<f64>, Vec<f64>)]) {
    let mut delta = upstream.to_vec();
    for l in (0..bank.layers.len()).rev() {
        let layer = &bank.layers[l];
        let input = &trace.inputs[l];
        let cols = layer.weight.cols();
        let (gw, gb) = &mut acc[l];
        for (r, &d) in delta.iter().enumerate() {
            gb[r] += d;
            if d != 0.0 {
                for (g, &x) in gw[r * cols..(r + 1) * cols].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
        }
        if l > 0 {
            let back = layer
                .weight
                .matvec_transposed(&delta)
                .expect("trace matches bank shape");
            delta = back
                .into_iter()
                .zip(&trace.preacts[l - 1])
                .map(|(g, &z)| g * elu_derivative(z, ELU_ALPHA))
                .collect();
        }
    }
}

/// Loss of one episode without retaining intermediates for backward.
pub fn episode_loss(
    model: &MappingModel,
    reps: &[CategoryRepresentation],
    queries: &[Query<'_>],
) -> Result<LossReport> {
    let mut tape = EpisodeTape::new(Execution::Sequential);
    tape.forward(model, reps, queries).cloned()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// SGD with an optional heavy-ball momentum buffer.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Option<Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: None,
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn step(&mut self, model: &mut MappingModel, grads: &GradientSet) -> Result<()> {
        if !model.is_congruent(&grads.banks) {
            return Err(Error::Config("gradient set is not shaped like the model".into()));
        }
        let lr = self.config.learning_rate as f32;
        if self.config.momentum == 0.0 {
            for (p, &g) in model.parameters_mut().zip(grads.parameters()) {
                *p -= lr * g;
            }
            return Ok(());
        }
        let mu = self.config.momentum as f32;
        let velocity = self
            .velocity
            .get_or_insert_with(|| vec![0.0; grads.parameters().count()]);
        for ((p, &g), v) in model.parameters_mut().zip(grads.parameters()).zip(velocity.iter_mut()) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// One stateless SGD step (no momentum history).
pub fn sgd_step(model: &mut MappingModel, grads: &GradientSet, config: &SgdConfig) -> Result<()> {
    Sgd::new(*config)?.step(model, grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation moved an ELU
    /// pre-activation within `10ε` of zero.
    pub rejected: usize,
}

/// Floor on the denominator of the relative error, so coordinates whose
/// true gradient is ~0 are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares [`EpisodeTape::backward`] against central differences on a
/// random subsample of at least `samples` coordinates (all of them if the
/// model is smaller).
pub fn grad_check(
    model: &MappingModel,
    reps: &[CategoryRepresentation],
    queries: &[Query<'_>],
    epsilon: f32,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let mut tape = EpisodeTape::new(Execution::Sequential);
    tape.forward(model, reps, queries)?;
    let analytic: Vec<f32> = tape.backward(model)?.parameters().copied().collect();
    let base_hidden = tape.hidden_preacts();

    let total = analytic.len();
    let coords = if total <= samples {
        (0..total).collect()
    } else {
        let mut picked = rng.sample_indices(total, samples);
        picked.sort_unstable();
        picked
    };

    let guard = 10.0 * epsilon as f64;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        rejected: 0,
    };
    for &i in &coords {
        let original = *probe.parameters().nth(i).expect("index in range");
        let plus = original + epsilon;
        let minus = original - epsilon;

        *probe.parameters_mut().nth(i).expect("index in range") = plus;
        let j_plus = tape.forward(&probe, reps, queries)?.loss;
        let hidden_plus = tape.hidden_preacts();
        *probe.parameters_mut().nth(i).expect("index in range") = minus;
        let j_minus = tape.forward(&probe, reps, queries)?.loss;
        let hidden_minus = tape.hidden_preacts();
        *probe.parameters_mut().nth(i).expect("index in range") = original;

        let near_kink = base_hidden
            .iter()
            .zip(&hidden_plus)
            .zip(&hidden_minus)
            .any(|((&z, &zp), &zm)| (zp != z || zm != z) && (z.abs() < guard || zp.abs() < guard || zm.abs() < guard));
        if near_kink {
            report.rejected += 1;
            continue;
        }

        // The realized step after rounding to f32 storage.
        let step = plus as f64 - minus as f64;
        let numeric = (j_plus - j_minus) / step;
        let exact = analytic[i] as f64;
        let denom = exact.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (exact - numeric).abs() / denom;
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
