//! Episode sampling, the episodic training loop, and the repeated-trial
//! evaluation protocol (mapping model, cosine k-NN, depth sweep, mapping
//! comparison).

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use crate::bilinear::{category_mean, CategoryRepresentation};
use crate::dataset::{Dataset, Role};
use crate::error::{Error, Result};
use crate::mapping::{ClassifierBank, MappingKind, MappingModel, ModelConfig};
use crate::par::{self, Execution};
use crate::rng::{streams, Rng};
use crate::stats::{paired_ttest, TTestReport};
use crate::tensor::{argmax, dot, l2_normalize};
use crate::train::{EpisodeTape, Query, Sgd, SgdConfig};

/// Queries per category at test time.
pub const DEFAULT_QUERIES: usize = 20;
/// Evaluation repetitions.
pub const DEFAULT_TRIALS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub categories: Vec<u32>,
    /// Item indices per category, parallel to `categories`.
    pub exemplars: Vec<Vec<usize>>,
    pub queries: Vec<Vec<usize>>,
}

impl Episode {
    pub fn representations(&self, data: &Dataset) -> Result<Vec<CategoryRepresentation>> {
        self.categories
            .iter()
            .zip(&self.exemplars)
            .map(|(&c, items)| {
                let feats: Vec<_> = items.iter().map(|&i| data.feature(i)).collect();
                category_mean(&feats, c)
            })
            .collect()
    }

    pub fn labelled_queries<'a>(&self, data: &'a Dataset) -> Vec<Query<'a>> {
        self.categories
            .iter()
            .zip(&self.queries)
            .flat_map(|(&c, items)| items.iter().map(move |&i| (data.feature(i), c)))
            .collect()
    }
}

fn split_categories(data: &Dataset, categories: Vec<u32>, n_e: usize, n_q: usize, rng: &mut Rng) -> Episode {
    let mut exemplars = Vec::with_capacity(categories.len());
    let mut queries = Vec::with_capacity(categories.len());
    for &c in &categories {
        let items = data.items(c);
        let picked = rng.sample_indices(items.len(), n_e + n_q);
        exemplars.push(picked[..n_e].iter().map(|&j| items[j]).collect());
        queries.push(picked[n_e..].iter().map(|&j| items[j]).collect());
    }
    Episode {
        categories,
        exemplars,
        queries,
    }
}

fn check_counts(n_e: usize, n_q: usize) -> Result<()> {
    if n_e == 0 {
        return Err(Error::Config("at least one exemplar per category is required".into()));
    }
    if n_q == 0 {
        return Err(Error::Config("at least one query per category is required".into()));
    }
    Ok(())
}

/// Draws `c_e` categories, then `n_e` exemplars and `n_q` disjoint queries
/// from each, all uniformly without replacement.
pub fn sample_episode(data: &Dataset, c_e: usize, n_e: usize, n_q: usize, rng: &mut Rng) -> Result<Episode> {
    check_counts(n_e, n_q)?;
    if c_e == 0 {
        return Err(Error::Config("an episode needs at least one category".into()));
    }
    let all = data.categories();
    if all.len() < c_e {
        return Err(Error::Sampling(format!(
            "{} categories available, {c_e} requested",
            all.len()
        )));
    }
    data.require_items(n_e + n_q)?;
    let chosen = rng.sample_indices(all.len(), c_e).into_iter().map(|i| all[i]).collect();
    Ok(split_categories(data, chosen, n_e, n_q, rng))
}

/// One evaluation trial: every category of `data`, in ascending label order.
pub fn sample_trial(data: &Dataset, n_e: usize, n_q: usize, rng: &mut Rng) -> Result<Episode> {
    check_counts(n_e, n_q)?;
    if data.category_count() == 0 {
        return Err(Error::Empty("evaluation categories"));
    }
    data.require_items(n_e + n_q)?;
    Ok(split_categories(data, data.categories(), n_e, n_q, rng))
}

/// Classifiers for every category of `data` from `repetitions` independent
/// `n_e`-exemplar draws; repetition `r` draws from `rng.substream(r)`.
pub fn classifier_repetitions(
    data: &Dataset,
    model: &MappingModel,
    n_e: usize,
    repetitions: usize,
    rng: &Rng,
    exec: Execution,
) -> Result<Vec<(Episode, ClassifierBank)>> {
    check_counts(n_e, 1)?;
    data.require_items(n_e)?;
    par::try_map_range(exec, repetitions, |r| {
        let mut rep_rng = rng.substream(r as u64);
        let episode = split_categories(data, data.categories(), n_e, 0, &mut rep_rng);
        let bank = model.generate_bank(&episode.representations(data)?, Execution::Sequential)?;
        Ok((episode, bank))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single trial.
    pub std: f64,
}

impl TrialResult {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = if accuracies.is_empty() { 0.0 } else { accuracies.iter().sum::<f64>() / n };
        let std = if accuracies.len() < 2 {
            0.0
        } else {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        TrialResult { accuracies, mean, std }
    }

    pub fn trials(&self) -> usize {
        self.accuracies.len()
    }

    /// `mean±std` in percent, two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_e: usize,
    pub n_q: usize,
    pub trials: usize,
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_e: 1,
            n_q: DEFAULT_QUERIES,
            trials: DEFAULT_TRIALS,
            execution: Execution::default(),
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("at least one trial is required".into()));
        }
        check_counts(self.n_e, self.n_q)
    }
}

/// Runs `cfg.trials` independent trials; trial `i` draws from
/// `rng.substream(i)`, so any two protocols given the same `rng` see the
/// same exemplar/query splits.
fn run_trials<F>(data: &Dataset, cfg: &EvalConfig, rng: &Rng, classify: F) -> Result<TrialResult>
where
    F: Fn(&Episode) -> Result<f64> + Sync + Send,
{
    cfg.validate()?;
    data.require_items(cfg.n_e + cfg.n_q)?;
    let accuracies = par::try_map_range(cfg.execution, cfg.trials, |i| {
        let mut trial_rng = rng.substream(i as u64);
        let episode = sample_trial(data, cfg.n_e, cfg.n_q, &mut trial_rng)?;
        classify(&episode)
    })?;
    Ok(TrialResult::from_accuracies(accuracies))
}

/// Predicted label per query, in `Episode::labelled_queries` order, by
/// arg-max score (lowest index wins ties).
fn predictions_by_scores<S>(data: &Dataset, episode: &Episode, score: S) -> Result<Vec<u32>>
where
    S: Fn(&[f32]) -> Result<Vec<f64>>,
{
    let mut out = Vec::with_capacity(episode.queries.iter().map(Vec::len).sum());
    for items in &episode.queries {
        for &i in items {
            let scores = score(data.feature(i).data())?;
            let k = argmax(&scores).ok_or(Error::Empty("classifier scores"))?;
            out.push(episode.categories[k]);
        }
    }
    Ok(out)
}

fn accuracy(episode: &Episode, predicted: &[u32]) -> f64 {
    let truth = episode
        .categories
        .iter()
        .zip(&episode.queries)
        .flat_map(|(&c, items)| std::iter::repeat_n(c, items.len()));
    let correct = truth.zip(predicted).filter(|(t, p)| t == *p).count();
    correct as f64 / predicted.len() as f64
}

/// Labels assigned to the episode's queries by classifiers that `model`
/// generates from its exemplars.
pub fn model_predictions(data: &Dataset, model: &MappingModel, episode: &Episode) -> Result<Vec<u32>> {
    let bank = model.generate_bank(&episode.representations(data)?, Execution::Sequential)?;
    predictions_by_scores(data, episode, |x| Ok(bank.scores(x)))
}

/// Labels assigned to the episode's queries by cosine similarity to the
/// ℓ2-normalized exemplar means.
pub fn knn_predictions(data: &Dataset, episode: &Episode) -> Result<Vec<u32>> {
    let prototypes = episode
        .representations(data)?
        .iter()
        .map(|r| l2_normalize(&r.representation.to_f64()))
        .collect::<Result<Vec<_>>>()?;
    predictions_by_scores(data, episode, |x| {
        let q = l2_normalize(&x.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
        Ok(prototypes.iter().map(|p| dot(p, &q)).collect())
    })
}

/// Few-shot accuracy of classifiers generated by `model` over all novel
/// categories at once.
pub fn evaluate(data: &Dataset, model: &MappingModel, cfg: &EvalConfig, rng: &Rng) -> Result<TrialResult> {
    data.require_role(Role::Novel)?;
    run_trials(data, cfg, rng, |episode| {
        Ok(accuracy(episode, &model_predictions(data, model, episode)?))
    })
}

/// Cosine nearest-prototype baseline: exemplars are averaged, then the mean
/// and every query are ℓ2-normalized.
pub fn knn_baseline(data: &Dataset, cfg: &EvalConfig, rng: &Rng) -> Result<TrialResult> {
    data.require_role(Role::Novel)?;
    run_trials(data, cfg, rng, |episode| Ok(accuracy(episode, &knn_predictions(data, episode)?)))
}

/// Stop training once validation accuracy reaches a target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStop {
    /// Validate after every `every` episodes.
    pub every: usize,
    pub target_accuracy: f64,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub c_e: usize,
    pub n_e: usize,
    pub n_q: usize,
    pub sgd: SgdConfig,
    pub execution: Execution,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 2000,
            c_e: 5,
            n_e: 1,
            n_q: DEFAULT_QUERIES,
            sgd: SgdConfig::default(),
            execution: Execution::default(),
            early_stop: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// Validation accuracy and the episode count at which training stopped
    /// early, if it did.
    pub stopped_early: Option<(usize, f64)>,
}

impl TrainLog {
    /// One `episode<TAB>J<TAB>accuracy` line per episode.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{}\t{:.9}\t{:.6}", e.episode, e.loss, e.accuracy).expect("write to String");
        }
        out
    }

    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }
}

/// Episodic meta-training: per episode sample, average exemplars, generate
/// classifiers, score the queries, then take one SGD step on the mean loss.
pub fn train(
    data: &Dataset,
    mut model: MappingModel,
    cfg: &TrainConfig,
    rng: &mut Rng,
    validation: Option<&Dataset>,
) -> Result<(MappingModel, TrainLog)> {
    data.require_role(Role::Auxiliary)?;
    let mut sgd = Sgd::new(cfg.sgd)?;
    let mut tape = EpisodeTape::new(cfg.execution);
    let mut log = TrainLog::default();
    let val_rng = rng.substream(u64::MAX);
    for episode_index in 0..cfg.episodes {
        let episode = sample_episode(data, cfg.c_e, cfg.n_e, cfg.n_q, rng)?;
        let reps = episode.representations(data)?;
        let queries = episode.labelled_queries(data);
        let report = tape.forward(&model, &reps, &queries)?;
        log.entries.push(LogEntry {
            episode: episode_index,
            loss: report.loss,
            accuracy: report.accuracy,
        });
        let grads = tape.backward(&model)?;
        sgd.step(&mut model, &grads)?;

        if let (Some(stop), Some(val)) = (cfg.early_stop, validation) {
            if stop.every > 0 && (episode_index + 1) % stop.every == 0 {
                let acc = evaluate(val, &model, &stop.eval, &val_rng)?.mean;
                if acc >= stop.target_accuracy {
                    log.stopped_early = Some((episode_index + 1, acc));
                    break;
                }
            }
        }
    }
    Ok((model, log))
}

/// Everything needed for one train-then-evaluate run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub model: MappingModel,
    pub log: TrainLog,
    pub result: TrialResult,
}

/// Trains on `aux` and evaluates on `novel`. Init, training and evaluation
/// use separate streams of `cfg.seed`.
pub fn run_experiment(aux: &Dataset, novel: &Dataset, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    aux.ensure_disjoint(novel)?;
    let model = MappingModel::init(cfg.model, &mut Rng::new(cfg.seed, streams::INIT))?;
    let (model, log) = train(aux, model, &cfg.train, &mut Rng::new(cfg.seed, streams::TRAIN), None)?;
    let result = evaluate(novel, &model, &cfg.eval, &Rng::new(cfg.seed, streams::EVAL))?;
    Ok(ExperimentOutcome { model, log, result })
}

/// Trains and evaluates one model per depth with identical seeds and data.
pub fn depth_ablation(
    aux: &Dataset,
    novel: &Dataset,
    base: &ExperimentConfig,
    layers: RangeInclusive<usize>,
) -> Result<Vec<(usize, TrialResult)>> {
    if layers.is_empty() || *layers.start() == 0 {
        return Err(Error::Config(format!("invalid layer range {layers:?}")));
    }
    let depths: Vec<usize> = layers.collect();
    par::try_map_range(base.eval.execution, depths.len(), |i| {
        let mut cfg = *base;
        cfg.model.layers = depths[i];
        Ok((depths[i], run_experiment(aux, novel, &cfg)?.result))
    })
}

/// Hidden width for a global mapping whose parameter count is closest to
/// `target` (ties go to the smaller width).
pub fn matched_global_hidden(n_a: usize, n_b: usize, layers: usize, target: u128) -> usize {
    let count = |h: usize| {
        ModelConfig {
            kind: MappingKind::Global,
            n_a,
            n_b,
            layers,
            hidden: h,
        }
        .parameter_count()
    };
    let mut best = (1usize, count(1).abs_diff(target));
    let mut h = 1usize;
    while count(h) <= target {
        h += 1;
        let d = count(h).abs_diff(target);
        if d < best.1 {
            best = (h, d);
        }
    }
    best.0
}

#[derive(Clone, Debug)]
pub struct MappingComparison {
    pub piecewise: TrialResult,
    pub global: TrialResult,
    pub piecewise_parameters: u128,
    pub global_parameters: u128,
    pub global_hidden: usize,
    pub ttest: TTestReport,
}

/// Piecewise vs. a parameter-matched global mapping on the same data, seeds
/// and evaluation splits; the paired test is piecewise − global.
pub fn compare_mappings(aux: &Dataset, novel: &Dataset, piecewise: &ExperimentConfig) -> Result<MappingComparison> {
    if piecewise.model.kind != MappingKind::Piecewise {
        return Err(Error::Config("comparison baseline must be configured as piecewise".into()));
    }
    let p_count = piecewise.model.parameter_count();
    let mut global = *piecewise;
    global.model.kind = MappingKind::Global;
    if global.model.layers > 1 {
        global.model.hidden = matched_global_hidden(global.model.n_a, global.model.n_b, global.model.layers, p_count);
    }
    let runs = par::try_map_range(piecewise.eval.execution, 2, |i| {
        run_experiment(aux, novel, if i == 0 { piecewise } else { &global }).map(|o| o.result)
    })?;
    let [p, g]: [TrialResult; 2] = runs.try_into().expect("two runs");
    let ttest = paired_ttest(&p, &g)?;
    Ok(MappingComparison {
        piecewise: p,
        global: g,
        piecewise_parameters: p_count,
        global_parameters: global.model.parameter_count(),
        global_hidden: global.model.hidden,
        ttest,
    })
}
