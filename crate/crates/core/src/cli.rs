//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bilinear::PostTransform;
use crate::dataset::{Dataset, Role};
use crate::episodes::{
    classifier_repetitions, compare_mappings, depth_ablation, evaluate, knn_baseline, train, EarlyStop, EvalConfig,
    ExperimentConfig, TrainConfig,
};
use crate::error::Error;
use crate::io::{self, RunConfig};
use crate::mapping::{MappingKind, MappingModel, ModelConfig};
use crate::par::Execution;
use crate::rng::{streams, Rng};
use crate::stats::paired_ttest;
use crate::synthetic::{generate_synthetic, SyntheticSpec};
use crate::train::{grad_check, SgdConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Largest gradient-check relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "fsfg", version, about = "Few-shot fine-grained recognition with piecewise classifier mappings")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate auxiliary and novel synthetic feature files.
    GenSynthetic(GenArgs),
    /// Bilinear-pool a feature-map file into a feature file.
    Pool(PoolArgs),
    /// Episodically train a mapping model.
    Train(TrainArgs),
    /// Few-shot evaluation of a trained model.
    Eval(EvalArgs),
    /// Cosine nearest-neighbour baseline.
    Knn(KnnArgs),
    /// Train and evaluate one model per depth.
    AblateDepth(AblateArgs),
    /// Piecewise vs. parameter-matched global mapping with a paired t-test.
    CompareMappings(ExperimentArgs),
    /// Print the exact parameter count of a mapping model.
    Paramcount(ParamcountArgs),
    /// Export generated classifiers for external visualization.
    ExportClassifiers(ExportArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value = "piecewise", value_parser = parse_kind)]
    mapping: MappingKind,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 1024)]
    hidden: usize,
}

#[derive(Debug, Args)]
struct EpisodeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Categories per training episode; defaults to the number of novel
    /// categories when a novel set is given.
    #[arg(long = "c-e")]
    c_e: Option<usize>,
    #[arg(long = "n-e", default_value_t = 1)]
    n_e: usize,
    #[arg(long = "n-q", default_value_t = 20)]
    n_q: usize,
}

#[derive(Debug, Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    categories: usize,
    #[arg(long, default_value_t = 40)]
    items: usize,
    #[arg(long, default_value_t = 8)]
    na: usize,
    #[arg(long, default_value_t = 8)]
    nb: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    /// Number of novel categories (default: a quarter of all categories).
    #[arg(long)]
    novel_categories: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    aux_out: PathBuf,
    #[arg(long)]
    novel_out: PathBuf,
}

#[derive(Debug, Args)]
struct PoolArgs {
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "none", value_parser = parse_transform)]
    normalize: PostTransform,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    aux: PathBuf,
    /// Novel set; sets the default C_E and is the validation set for early
    /// stopping.
    #[arg(long)]
    novel: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training log path (default: standard output).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_parser = parse_transform)]
    normalize: Option<PostTransform>,
    /// Validate every this many episodes (requires --novel and --val-target).
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    val_target: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    novel: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "n-e", default_value_t = 1)]
    n_e: usize,
    #[arg(long = "n-q", default_value_t = 20)]
    n_q: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, value_parser = parse_transform)]
    normalize: Option<PostTransform>,
    /// Also run the k-NN baseline on the same splits and append a paired
    /// t-test.
    #[arg(long)]
    paired_knn: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KnnArgs {
    #[arg(long)]
    novel: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "n-e", default_value_t = 1)]
    n_e: usize,
    #[arg(long = "n-q", default_value_t = 20)]
    n_q: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, value_parser = parse_transform)]
    normalize: Option<PostTransform>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    aux: PathBuf,
    #[arg(long)]
    novel: PathBuf,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, value_parser = parse_transform)]
    normalize: Option<PostTransform>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, default_value_t = 1)]
    min_layers: usize,
    #[arg(long, default_value_t = 4)]
    max_layers: usize,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Debug, Args)]
struct ParamcountArgs {
    #[arg(long)]
    na: usize,
    #[arg(long)]
    nb: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    novel: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "n-e", default_value_t = 5)]
    n_e: usize,
    #[arg(long, default_value_t = 50)]
    repetitions: usize,
    #[arg(long, value_parser = parse_transform)]
    normalize: Option<PostTransform>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    na: usize,
    #[arg(long, default_value_t = 8)]
    nb: usize,
    #[arg(long, default_value_t = 5)]
    categories: u32,
    #[arg(long = "n-q", default_value_t = 4)]
    n_q: usize,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f32,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
}

fn parse_kind(s: &str) -> Result<MappingKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_transform(s: &str) -> Result<PostTransform, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

enum Failure {
    Lib(Error),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

type CliResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(rendered.as_bytes()) } else { err.write_all(rendered.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Lib(e)) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
        Err(Failure::Numerical(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_NUMERICAL
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(a, out),
        Command::Pool(a) => pool(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Knn(a) => knn_cmd(a, out),
        Command::AblateDepth(a) => ablate(a, out),
        Command::CompareMappings(a) => compare(a, out),
        Command::Paramcount(a) => paramcount(a, out),
        Command::ExportClassifiers(a) => export(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
    }
}

/// Notes gathered while loading inputs, printed after the config line.
type Notes = Vec<String>;

fn emit(out: &mut dyn Write, config: &RunConfig, notes: &Notes) -> std::io::Result<()> {
    writeln!(out, "#config\t{}", config.line())?;
    for n in notes {
        writeln!(out, "{n}")?;
    }
    Ok(())
}

fn load(path: &Path, role: Role, transform: PostTransform, notes: &mut Notes) -> Result<Dataset, Failure> {
    let data = io::load_features(path, role)?;
    if let Some(map) = io::label_remap(&data) {
        let pairs: Vec<String> = map.iter().map(|(l, i)| format!("{l}->{i}")).collect();
        notes.push(format!("#labels\t{}\t{}", path.display(), pairs.join(" ")));
    }
    Ok(data.transformed(transform)?)
}

fn write_or_print(path: Option<&Path>, text: &str, out: &mut dyn Write) -> CliResult {
    match path {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn resolve_c_e(c_e: Option<usize>, novel: Option<&Dataset>) -> Result<usize, Failure> {
    match (c_e, novel) {
        (Some(c), _) => Ok(c),
        (None, Some(n)) => Ok(n.category_count()),
        (None, None) => Err(Error::Config("--c-e is required when no novel set is given".into()).into()),
    }
}

fn model_config(m: &ModelArgs, n_a: usize, n_b: usize) -> ModelConfig {
    ModelConfig {
        kind: m.mapping,
        n_a,
        n_b,
        layers: m.layers,
        hidden: m.hidden,
    }
}

fn push_model(cfg: &mut RunConfig, m: &ModelConfig) {
    cfg.push("model", m.kind)
        .push("n_a", m.n_a)
        .push("n_b", m.n_b)
        .push("layers", m.layers)
        .push("hidden", m.hidden);
}

fn gen_synthetic(a: GenArgs, out: &mut dyn Write) -> CliResult {
    let notes = Notes::new();
    let mut spec = SyntheticSpec::new(a.categories, a.items, a.na, a.nb, a.sigma, a.seed);
    if let Some(n) = a.novel_categories {
        spec.novel_categories = n;
    }
    let mut cfg = RunConfig::default();
    cfg.push("command", "gen-synthetic")
        .push("seed", spec.seed)
        .push("categories", spec.categories)
        .push("novel_categories", spec.novel_categories)
        .push("items", spec.items_per_category)
        .push("n_a", spec.n_a)
        .push("n_b", spec.n_b)
        .push("sigma", spec.noise)
        .push("min_separation", spec.min_separation);
    emit(out, &cfg, &notes)?;
    let (aux, novel) = generate_synthetic(&spec)?;
    io::save_features(&a.aux_out, &aux)?;
    io::save_features(&a.novel_out, &novel)?;
    writeln!(out, "auxiliary\t{}\t{} items\t{} categories", a.aux_out.display(), aux.len(), aux.category_count())?;
    writeln!(out, "novel\t{}\t{} items\t{} categories", a.novel_out.display(), novel.len(), novel.category_count())?;
    Ok(())
}

fn pool(a: PoolArgs, out: &mut dyn Write) -> CliResult {
    let notes = Notes::new();
    let mut cfg = RunConfig::default();
    cfg.push("command", "pool").push("normalize", a.normalize);
    emit(out, &cfg, &notes)?;
    let pairs = io::decode_feature_maps(&fs::read(&a.maps)?)?;
    let data = io::pool_pairs(&pairs, a.normalize, Role::Auxiliary)?;
    io::save_features(&a.out, &data)?;
    writeln!(out, "pooled\t{}\t{} items\tn_a={}\tn_b={}", a.out.display(), data.len(), data.n_a(), data.n_b())?;
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut notes = Notes::new();
    let transform = a.normalize.unwrap_or_default();
    let aux = load(&a.aux, Role::Auxiliary, transform, &mut notes)?;
    let novel = match &a.novel {
        Some(p) => {
            let n = load(p, Role::Novel, transform, &mut notes)?;
            aux.ensure_disjoint(&n)?;
            Some(n)
        }
        None => None,
    };
    let c_e = resolve_c_e(a.episode.c_e, novel.as_ref())?;
    let model_cfg = model_config(&a.model, aux.n_a(), aux.n_b());
    let early_stop = match (a.val_every, a.val_target) {
        (None, None) => None,
        (Some(every), Some(target)) if novel.is_some() && every > 0 => Some(EarlyStop {
            every,
            target_accuracy: target,
            eval: EvalConfig {
                n_e: a.episode.n_e,
                n_q: a.episode.n_q,
                ..EvalConfig::default()
            },
        }),
        _ => {
            return Err(Error::Config("--val-every (positive) and --val-target must be given together, with --novel".into()).into())
        }
    };
    let train_cfg = TrainConfig {
        episodes: a.optim.episodes,
        c_e,
        n_e: a.episode.n_e,
        n_q: a.episode.n_q,
        sgd: SgdConfig {
            learning_rate: a.optim.lr,
            momentum: a.optim.momentum,
        },
        execution: Execution::Parallel,
        early_stop,
    };

    let mut cfg = RunConfig::default();
    cfg.push("command", "train").push("seed", a.episode.seed);
    push_model(&mut cfg, &model_cfg);
    cfg.push("episodes", train_cfg.episodes)
        .push("c_e", c_e)
        .push("n_e", train_cfg.n_e)
        .push("n_q", train_cfg.n_q)
        .push("lr", train_cfg.sgd.learning_rate)
        .push("momentum", train_cfg.sgd.momentum)
        .push("normalize", transform);
    if let Some(s) = &early_stop {
        cfg.push("val_every", s.every).push("val_target", s.target_accuracy);
    }
    emit(out, &cfg, &notes)?;

    let model = MappingModel::init(model_cfg, &mut Rng::new(a.episode.seed, streams::INIT))?;
    let (model, log) = train(
        &aux,
        model,
        &train_cfg,
        &mut Rng::new(a.episode.seed, streams::TRAIN),
        novel.as_ref(),
    )?;
    write_or_print(a.log.as_deref(), &log.to_tsv(), out)?;
    io::save_model(&a.checkpoint, &model)?;
    if let Some((episodes, acc)) = log.stopped_early {
        writeln!(out, "#early-stop\tepisodes={episodes}\tvalidation_accuracy={acc:.6}")?;
    }
    if let Some(last) = log.last() {
        writeln!(out, "#final\tJ={:.6}\taccuracy={:.6}", last.loss, last.accuracy)?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let mut notes = Notes::new();
    let transform = a.normalize.unwrap_or_default();
    let model = io::load_model(&a.checkpoint)?;
    let eval = EvalConfig {
        n_e: a.n_e,
        n_q: a.n_q,
        trials: a.trials,
        execution: Execution::Parallel,
    };
    let novel = load(&a.novel, Role::Novel, transform, &mut notes)?;
    let mut cfg = RunConfig::default();
    cfg.push("command", "eval")
        .push("seed", a.seed)
        .push("c_e", novel.category_count())
        .push("n_e", eval.n_e)
        .push("n_q", eval.n_q)
        .push("trials", eval.trials);
    push_model(&mut cfg, model.config());
    cfg.push("normalize", transform);
    emit(out, &cfg, &notes)?;

    let rng = Rng::new(a.seed, streams::EVAL);
    let result = evaluate(&novel, &model, &eval, &rng)?;
    let ttest = if a.paired_knn {
        let knn = knn_baseline(&novel, &eval, &rng)?;
        Some((paired_ttest(&result, &knn)?, knn.summary()))
    } else {
        None
    };
    let text = io::format_results(&cfg, &result, ttest.as_ref().map(|(t, _)| ("knn", t)));
    write_or_print(a.out.as_deref(), &text, out)?;
    writeln!(out, "#summary\t{}", result.summary())?;
    if let Some((_, knn)) = &ttest {
        writeln!(out, "#summary\tknn\t{knn}")?;
    }
    Ok(())
}

fn knn_cmd(a: KnnArgs, out: &mut dyn Write) -> CliResult {
    let mut notes = Notes::new();
    let transform = a.normalize.unwrap_or(PostTransform::SqrtL2);
    let eval = EvalConfig {
        n_e: a.n_e,
        n_q: a.n_q,
        trials: a.trials,
        execution: Execution::Parallel,
    };
    let novel = load(&a.novel, Role::Novel, transform, &mut notes)?;
    let mut cfg = RunConfig::default();
    cfg.push("command", "knn")
        .push("seed", a.seed)
        .push("c_e", novel.category_count())
        .push("n_e", eval.n_e)
        .push("n_q", eval.n_q)
        .push("trials", eval.trials)
        .push("model", "knn")
        .push("layers", 0)
        .push("normalize", transform);
    emit(out, &cfg, &notes)?;
    let result = knn_baseline(&novel, &eval, &Rng::new(a.seed, streams::EVAL))?;
    write_or_print(a.out.as_deref(), &io::format_results(&cfg, &result, None), out)?;
    writeln!(out, "#summary\t{}", result.summary())?;
    Ok(())
}

fn experiment(a: &ExperimentArgs) -> Result<(Dataset, Dataset, ExperimentConfig, RunConfig, Notes), Failure> {
    let mut notes = Notes::new();
    let transform = a.normalize.unwrap_or_default();
    let aux = load(&a.aux, Role::Auxiliary, transform, &mut notes)?;
    let novel = load(&a.novel, Role::Novel, transform, &mut notes)?;
    aux.ensure_disjoint(&novel)?;
    let c_e = resolve_c_e(a.episode.c_e, Some(&novel))?;
    let exp = ExperimentConfig {
        seed: a.episode.seed,
        model: model_config(&a.model, aux.n_a(), aux.n_b()),
        train: TrainConfig {
            episodes: a.optim.episodes,
            c_e,
            n_e: a.episode.n_e,
            n_q: a.episode.n_q,
            sgd: SgdConfig {
                learning_rate: a.optim.lr,
                momentum: a.optim.momentum,
            },
            execution: Execution::Sequential,
            early_stop: None,
        },
        eval: EvalConfig {
            n_e: a.episode.n_e,
            n_q: a.episode.n_q,
            trials: a.trials,
            execution: Execution::Parallel,
        },
    };
    let mut cfg = RunConfig::default();
    cfg.push("seed", exp.seed);
    push_model(&mut cfg, &exp.model);
    cfg.push("episodes", exp.train.episodes)
        .push("c_e", c_e)
        .push("n_e", exp.train.n_e)
        .push("n_q", exp.train.n_q)
        .push("lr", exp.train.sgd.learning_rate)
        .push("momentum", exp.train.sgd.momentum)
        .push("trials", exp.eval.trials)
        .push("normalize", transform);
    Ok((aux, novel, exp, cfg, notes))
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> CliResult {
    let (aux, novel, exp, mut cfg, notes) = experiment(&a.experiment)?;
    cfg.0.insert(0, ("command".into(), "ablate-depth".into()));
    cfg.push("min_layers", a.min_layers).push("max_layers", a.max_layers);
    emit(out, &cfg, &notes)?;
    let rows = depth_ablation(&aux, &novel, &exp, a.min_layers..=a.max_layers)?;
    write_or_print(a.experiment.out.as_deref(), &io::format_depth_table(&cfg, &rows), out)?;
    for (depth, r) in &rows {
        writeln!(out, "#summary\tlayers={depth}\t{}", r.summary())?;
    }
    Ok(())
}

fn compare(a: ExperimentArgs, out: &mut dyn Write) -> CliResult {
    let (aux, novel, exp, mut cfg, notes) = experiment(&a)?;
    cfg.0.insert(0, ("command".into(), "compare-mappings".into()));
    emit(out, &cfg, &notes)?;
    let cmp = compare_mappings(&aux, &novel, &exp)?;
    write_or_print(a.out.as_deref(), &io::format_comparison(&cfg, &cmp), out)?;
    writeln!(
        out,
        "#summary\tpiecewise={}\tglobal={}\tp={:.3e}",
        cmp.piecewise.summary(),
        cmp.global.summary(),
        cmp.ttest.p_value
    )?;
    Ok(())
}

fn paramcount(a: ParamcountArgs, out: &mut dyn Write) -> CliResult {
    let notes = Notes::new();
    let m = model_config(&a.model, a.na, a.nb);
    m.validate()?;
    let mut cfg = RunConfig::default();
    cfg.push("command", "paramcount");
    push_model(&mut cfg, &m);
    emit(out, &cfg, &notes)?;
    writeln!(out, "{}", m.parameter_count())?;
    Ok(())
}

fn export(a: ExportArgs, out: &mut dyn Write) -> CliResult {
    let mut notes = Notes::new();
    let transform = a.normalize.unwrap_or_default();
    let model = io::load_model(&a.checkpoint)?;
    let novel = load(&a.novel, Role::Novel, transform, &mut notes)?;
    let mut cfg = RunConfig::default();
    cfg.push("command", "export-classifiers")
        .push("seed", a.seed)
        .push("n_e", a.n_e)
        .push("repetitions", a.repetitions);
    push_model(&mut cfg, model.config());
    cfg.push("normalize", transform);
    emit(out, &cfg, &notes)?;
    let draws = classifier_repetitions(
        &novel,
        &model,
        a.n_e,
        a.repetitions,
        &Rng::new(a.seed, streams::EXPORT),
        Execution::Parallel,
    )?;
    let banks: Vec<_> = draws.into_iter().map(|(_, b)| b).collect();
    io::export_classifiers(&a.out, &banks)?;
    writeln!(out, "exported\t{}\t{} rows", a.out.display(), banks.iter().map(|b| b.len()).sum::<usize>())?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let notes = Notes::new();
    use crate::bilinear::{BilinearFeature, CategoryRepresentation};

    let m = model_config(&a.model, a.na, a.nb);
    let mut cfg = RunConfig::default();
    cfg.push("command", "gradcheck").push("seed", a.seed);
    push_model(&mut cfg, &m);
    cfg.push("categories", a.categories)
        .push("n_q", a.n_q)
        .push("epsilon", a.epsilon)
        .push("samples", a.samples);
    emit(out, &cfg, &notes)?;

    let model = MappingModel::init(m, &mut Rng::new(a.seed, streams::INIT))?;
    let mut rng = Rng::new(a.seed, streams::GRADCHECK);
    let feature = |rng: &mut Rng| {
        BilinearFeature::new(a.na, a.nb, (0..a.na * a.nb).map(|_| rng.normal() as f32).collect())
    };
    let reps = (0..a.categories)
        .map(|c| {
            Ok(CategoryRepresentation {
                category: c,
                representation: feature(&mut rng)?,
                exemplar_count: 1,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let queries = (0..a.categories)
        .flat_map(|c| std::iter::repeat_n(c, a.n_q))
        .map(|c| Ok((feature(&mut rng)?, c)))
        .collect::<crate::Result<Vec<_>>>()?;
    let refs: Vec<_> = queries.iter().map(|(x, c)| (x, *c)).collect();
    let report = grad_check(&model, &reps, &refs, a.epsilon, a.samples, &mut rng)?;
    writeln!(
        out,
        "max_relative_error\t{:.3e}\tchecked\t{}\trejected\t{}",
        report.max_relative_error, report.checked, report.rejected
    )?;
    if report.checked == 0 || report.max_relative_error >= GRADCHECK_TOLERANCE {
        return Err(Failure::Numerical(format!(
            "gradient check failed: max relative error {:.3e} over {} coordinates",
            report.max_relative_error, report.checked
        )));
    }
    Ok(())
}
