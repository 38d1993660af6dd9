//! The `afine` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use afine_core::checkpoint;
use afine_core::config::{load_config, BackboneChoice, RunConfig};
use afine_core::data::{
    aggregate_all, build_training_set, build_triplets, dataset_statistics, mos_triplets, parse_ratios, read_id_list,
    read_labels, read_mos, read_triplets, read_votes, split_dataset, triplet_ids, write_id_list, write_labels,
    write_statistics, write_triplets, Corpus, Label, TripletMode,
};
use afine_core::eval::{
    evaluate, filter_subsets, plot_reports, read_eval_pairs, report_csv, validation_set, write_eval_pairs,
    write_report_csv, write_report_json, AfineMetric, EvalPair, Metric, PsnrMetric, SsimMetric,
};
use afine_core::synthetic;
use afine_core::train::{
    gradient_check, train_phase, write_trace, GradientCheckOptions, Phase, TrainOptions, TrainingSet,
};
use afine_core::{Image, ModelParameters, ParamGroup, ParamMask};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// A problem with how the command was invoked.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "afine", version, about = "Adaptive fidelity-naturalness image quality assessment")]
struct Cli {
    /// Directory that image ids are resolved against [env: AFINE_CORPUS_ROOT]
    #[arg(long, global = true)]
    corpus_root: Option<PathBuf>,

    /// error, warn, info, debug or trace
    #[arg(long, global = true)]
    log_level: Option<String>,

    /// Validate inputs without writing anything
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the model in one or all phases
    Train(TrainArgs),
    /// Score one test image against a reference
    Score(ScoreArgs),
    /// Two-alternative forced-choice accuracy over a pair manifest
    Eval(EvalArgs),
    /// Majority-vote raw annotations into labels
    Aggregate(AggregateArgs),
    /// Build training triplets from labels or MOS records
    MakeTriplets(MakeTripletsArgs),
    /// Split content ids into train/val/test lists
    Split(SplitArgs),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Write a freshly initialised checkpoint
    Init(InitArgs),
    /// Write a synthetic corpus with known quality ordering
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    phase: String,
    /// Start from this checkpoint instead of `init_checkpoint` or a fresh model
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for checkpoints and the loss trace
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, `key=value`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricName {
    Afine,
    Psnr,
    Ssim,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "afine")]
    metric: MetricName,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "afine")]
    metric: MetricName,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Keep only pairs with this subset tag; repeatable
    #[arg(long)]
    subset: Vec<String>,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[arg(long)]
    votes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MakeTripletsArgs {
    #[arg(long, conflicts_with = "mos", required_unless_present = "mos")]
    labels: Option<PathBuf>,
    /// ref-as-test, cross-test or both
    #[arg(long, default_value = "both")]
    mode: String,
    /// MOS records (`reference_id,image_id,mos`) instead of labels
    #[arg(long)]
    mos: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    contents: PathBuf,
    #[arg(long, default_value = "7:1:2")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GroupName {
    Backbone,
    Naturalness,
    Fidelity,
    Scale,
    Calibration,
}

impl From<GroupName> for ParamGroup {
    fn from(g: GroupName) -> Self {
        match g {
            GroupName::Backbone => ParamGroup::Backbone,
            GroupName::Naturalness => ParamGroup::Naturalness,
            GroupName::Fidelity => ParamGroup::Fidelity,
            GroupName::Scale => ParamGroup::Scale,
            GroupName::Calibration => ParamGroup::Calibration,
        }
    }
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Checkpoint to check; a seeded toy model otherwise
    #[arg(long)]
    model: Option<PathBuf>,
    /// Groups to check; all when omitted
    #[arg(long, value_enum)]
    group: Vec<GroupName>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Side of the synthetic images used as the batch
    #[arg(long, default_value_t = 16)]
    size: usize,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long, default_value = "toy")]
    backbone: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    contents: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Distortion levels, comma separated
    #[arg(long, default_value = "1,2,3,4", value_delimiter = ',')]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Globals {
    corpus_root_flag: Option<PathBuf>,
    corpus_root_env: Option<PathBuf>,
    dry_run: bool,
}

impl Globals {
    fn corpus_root(&self) -> Option<PathBuf> {
        self.corpus_root_flag.clone().or_else(|| self.corpus_root_env.clone())
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    init_logging(cli.log_level.as_deref());
    let globals = Globals {
        corpus_root_flag: cli.corpus_root,
        corpus_root_env: std::env::var_os("AFINE_CORPUS_ROOT").map(PathBuf::from),
        dry_run: cli.dry_run,
    };
    match dispatch(cli.command, &globals) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}

fn init_logging(level: Option<&str>) {
    let _ = env_logger::Builder::new()
        .filter_level(log::LevelFilter::Trace)
        .format_timestamp(None)
        .try_init();
    set_log_level(level.unwrap_or("info"));
}

fn set_log_level(level: &str) {
    match level.parse::<log::LevelFilter>() {
        Ok(l) => log::set_max_level(l),
        Err(_) => warn!("unknown log level {level:?}, keeping the current one"),
    }
}

/// The error chain joined by `: `, skipping causes the previous message already quotes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Maps an error to its exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<afine_core::Error>() {
        Some(afine_core::Error::Numeric(_)) => EXIT_NUMERIC,
        Some(afine_core::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn dispatch(command: Command, g: &Globals) -> Result<()> {
    match command {
        Command::Train(a) => train(a, g),
        Command::Score(a) => score(a, g),
        Command::Eval(a) => eval(a, g),
        Command::Aggregate(a) => aggregate(a, g),
        Command::MakeTriplets(a) => make_triplets(a, g),
        Command::Split(a) => split(a, g),
        Command::Gradcheck(a) => gradcheck(a, g),
        Command::Init(a) => init(a, g),
        Command::Synth(a) => synth(a, g),
    }
}

fn load_model(path: &Path) -> Result<ModelParameters> {
    checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn parse_phases(s: &str) -> Result<Vec<Phase>> {
    if s == "all" {
        return Ok(Phase::ALL.to_vec());
    }
    s.parse::<u32>()
        .ok()
        .and_then(Phase::from_number)
        .map(|p| vec![p])
        .ok_or_else(|| usage(format!("--phase must be 1, 2, 3 or all, got {s:?}")))
}

fn run_config(a: &TrainArgs, g: &Globals) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p).map_err(|e| usage(format!("{e}")))?,
        None => RunConfig::default(),
    };
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    // flag, then config file, then environment
    if g.corpus_root_flag.is_some() || cfg.corpus_root.is_none() {
        cfg.corpus_root = g.corpus_root();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, g: &Globals) -> Result<()> {
    let cfg = run_config(&a, g)?;
    set_log_level(&cfg.log_level);
    let phases = parse_phases(&a.phase)?;
    cfg.validate_paths()?;
    if let Some(r) = &a.resume {
        if !r.is_file() {
            bail!(afine_core::Error::Data(format!("--resume {} does not exist", r.display())));
        }
    }
    let triplets_path = cfg
        .train_triplets
        .clone()
        .ok_or_else(|| usage("train_triplets is not set (config file or --set train_triplets=PATH)"))?;
    let corpus = Corpus::new(
        cfg.corpus_root
            .clone()
            .ok_or_else(|| usage("no corpus root: pass --corpus-root, set AFINE_CORPUS_ROOT or corpus_root"))?,
    );
    let triplets = read_triplets(&triplets_path)?;
    corpus.require(triplet_ids(&triplets))?;
    let val_pairs = match &cfg.val_pairs {
        Some(p) => {
            let pairs = read_eval_pairs(p)?;
            corpus.require(pair_ids(&pairs))?;
            Some(pairs)
        }
        None => None,
    };
    let mut params = match a.resume.as_ref().or(cfg.init_checkpoint.as_ref()) {
        Some(p) => load_model(p)?,
        None => ModelParameters::init(cfg.backbone.config(cfg.seed))?,
    };
    info!(
        "{} triplets, {} validation pairs, phases {:?}, {} parameters",
        triplets.len(),
        val_pairs.as_ref().map_or(0, Vec::len),
        phases.iter().map(|p| p.number()).collect::<Vec<_>>(),
        params.num_parameters()
    );
    if g.dry_run {
        println!("dry run: configuration and {} triplets resolved", triplets.len());
        return Ok(());
    }

    let data: TrainingSet = build_training_set(&triplets, |id| corpus.load(id))?;
    let validation = match &val_pairs {
        Some(pairs) => Some(validation_set(pairs, |id| corpus.load(id))?),
        None => None,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut trace = Vec::new();
    let result = (|| -> Result<()> {
        for phase in &phases {
            let options = TrainOptions {
                validation: validation.as_ref(),
                checkpoint_dir: Some(a.out.clone()),
            };
            let outcome = train_phase(params.clone(), &data, &cfg.train_config(*phase), &options)?;
            trace.extend(outcome.trace);
            params = outcome.params;
            checkpoint::save(&params, a.out.join("model.ckpt"))?;
            info!("phase {} done, best validation accuracy {:?}", phase.number(), outcome.best_val_accuracy);
        }
        Ok(())
    })();
    write_trace(a.out.join("trace.csv"), &trace)?;
    result?;
    println!("{}", a.out.join("model.ckpt").display());
    Ok(())
}

fn pair_ids(pairs: &[EvalPair]) -> impl Iterator<Item = &str> {
    pairs
        .iter()
        .flat_map(|p| [p.reference_id.as_str(), p.y_id.as_str(), p.z_id.as_str()])
}

fn metric(name: MetricName, model: Option<&Path>) -> Result<Box<dyn Metric>> {
    Ok(match name {
        MetricName::Afine => {
            let path = model.ok_or_else(|| usage("--metric afine needs --model PATH (create one with `afine init` or `afine train`)"))?;
            Box::new(AfineMetric { params: load_model(path)? })
        }
        MetricName::Psnr => Box::new(PsnrMetric),
        MetricName::Ssim => Box::new(SsimMetric),
    })
}

fn score(a: ScoreArgs, g: &Globals) -> Result<()> {
    let m = metric(a.metric, a.model.as_deref())?;
    let reference = Image::load(&a.reference)?;
    let test = Image::load(&a.test)?;
    if g.dry_run {
        println!("dry run: inputs resolved");
        return Ok(());
    }
    let value = m.score(&reference, &test)?;
    if !value.is_finite() {
        bail!(afine_core::Error::Numeric(format!("{} score is {value}", m.name())));
    }
    println!("{value}");
    if let Some(path) = &a.json_out {
        let record = serde_json::json!({
            "metric": m.name(),
            "value": value,
            "ref": a.reference,
            "test": a.test,
        });
        fs::write(path, serde_json::to_string_pretty(&record)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval(a: EvalArgs, g: &Globals) -> Result<()> {
    let m = metric(a.metric, a.model.as_deref())?;
    let mut pairs = read_eval_pairs(&a.manifest)?;
    if !a.subset.is_empty() {
        pairs = filter_subsets(&pairs, &a.subset);
        if pairs.is_empty() {
            bail!(afine_core::Error::Data(format!("no pairs carry the subset tag(s) {:?}", a.subset)));
        }
    }
    let root = g
        .corpus_root()
        .unwrap_or_else(|| a.manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    let corpus = Corpus::new(root);
    corpus.require(pair_ids(&pairs))?;
    if g.dry_run {
        println!("dry run: {} pairs resolved", pairs.len());
        return Ok(());
    }
    let mut report = evaluate(m.as_ref(), &pairs, &|id| corpus.load(id))?;
    if let Some(model) = &a.model {
        if a.metric == MetricName::Afine {
            report.checkpoint = Some(format!("{} ({})", model.display(), checkpoint::fingerprint(&load_model(model)?)?));
        }
    }
    for w in &report.warnings {
        warn!("{w}");
    }
    print!("{}", report_csv(&report));
    write_report_csv(&a.report, &report)?;
    if let Some(p) = &a.json {
        write_report_json(p, &report)?;
    }
    if let Some(p) = &a.plot {
        plot_reports(std::slice::from_ref(&report), p)?;
    }
    Ok(())
}

fn aggregate(a: AggregateArgs, g: &Globals) -> Result<()> {
    let labels = aggregate_all(&read_votes(&a.votes)?)?;
    let stats = dataset_statistics(&labels);
    let f = stats.fractions();
    println!(
        "worse {} ({:.2}%), similar {} ({:.2}%), better {} ({:.2}%), outlier {} ({:.2}%)",
        stats.worse,
        100.0 * f[0],
        stats.similar,
        100.0 * f[1],
        stats.better,
        100.0 * f[2],
        stats.outlier,
        100.0 * f[3]
    );
    if g.dry_run {
        return Ok(());
    }
    write_labels(&a.out, &labels)?;
    if let Some(p) = &a.stats_out {
        write_statistics(p, &stats)?;
    }
    Ok(())
}

fn make_triplets(a: MakeTripletsArgs, g: &Globals) -> Result<()> {
    let triplets = match (&a.labels, &a.mos) {
        (Some(labels), None) => {
            let mode: TripletMode = a.mode.parse().map_err(usage)?;
            let mut labels = read_labels(labels)?;
            let before = labels.len();
            labels.retain(|l| l.label != Label::Outlier);
            if labels.len() < before {
                info!("dropped {} outlier label(s)", before - labels.len());
            }
            build_triplets(&labels, mode)?
        }
        (None, Some(mos)) => mos_triplets(&read_mos(mos)?)?,
        _ => return Err(usage("pass exactly one of --labels or --mos")),
    };
    if let Some(root) = g.corpus_root() {
        Corpus::new(root).require(triplet_ids(&triplets))?;
    }
    println!("{} triplets", triplets.len());
    if !g.dry_run {
        write_triplets(&a.out, &triplets)?;
    }
    Ok(())
}

fn split(a: SplitArgs, g: &Globals) -> Result<()> {
    let ratios = parse_ratios(&a.ratios).map_err(|e| usage(format!("{e}")))?;
    let ids = read_id_list(&a.contents)?;
    let s = split_dataset(&ids, ratios, a.seed)?;
    println!("train {}, val {}, test {}", s.train.len(), s.val.len(), s.test.len());
    if !g.dry_run {
        write_id_list(a.out_dir.join("train.txt"), &s.train)?;
        write_id_list(a.out_dir.join("val.txt"), &s.val)?;
        write_id_list(a.out_dir.join("test.txt"), &s.test)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, g: &Globals) -> Result<()> {
    let params = match &a.model {
        Some(p) => load_model(p)?,
        None => ModelParameters::init(BackboneChoice::Toy.config(a.seed))?,
    };
    if !(a.step > 0.0) || !(a.tolerance > 0.0) {
        return Err(usage("--step and --tolerance must be positive"));
    }
    let contents = synthetic::generate(2, &[1.0, 3.0], a.size, a.seed);
    let data = build_training_set(&synthetic::triplets(&contents), |id| {
        Ok(synthetic::find(&contents, id).expect("generated id").clone())
    })?;
    let groups: Vec<ParamGroup> = if a.group.is_empty() {
        ParamGroup::ALL.to_vec()
    } else {
        a.group.iter().map(|&g| g.into()).collect()
    };
    if g.dry_run {
        println!("dry run: {} parameters, {} triplets", params.num_parameters(), data.triplets.len());
        return Ok(());
    }
    let options = GradientCheckOptions {
        step: a.step,
        samples_per_tensor: a.samples,
        seed: a.seed,
        ..Default::default()
    };
    let report = gradient_check(&params, &data.images, &data.triplets, ParamMask::of(&groups), |_| true, &options)?;
    println!("parameter,index,analytic,numeric,relative_error");
    for e in &report.entries {
        println!("{},{},{:.9e},{:.9e},{:.3e}", e.name, e.index, e.analytic, e.numeric, e.relative_error);
    }
    let worst = report.max_relative_error();
    if worst >= a.tolerance {
        bail!(afine_core::Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} >= {:.1e}",
            a.tolerance
        )));
    }
    eprintln!("max relative error {worst:.3e} over {} entries", report.entries.len());
    Ok(())
}

fn init(a: InitArgs, g: &Globals) -> Result<()> {
    let backbone: BackboneChoice = a.backbone.parse().map_err(usage)?;
    let params = ModelParameters::init(backbone.config(a.seed))?;
    println!("{} parameters", params.num_parameters());
    if !g.dry_run {
        checkpoint::save(&params, &a.out)?;
    }
    Ok(())
}

fn synth(a: SynthArgs, g: &Globals) -> Result<()> {
    if a.contents < 3 || a.size < 8 || a.levels.is_empty() {
        return Err(usage("synth needs --contents >= 3, --size >= 8 and at least one level"));
    }
    let contents = synthetic::generate(a.contents, &a.levels, a.size, a.seed);
    let ids: Vec<String> = contents.iter().map(|c| c.id.clone()).collect();
    println!("{} contents, {} images", contents.len(), contents.len() * (1 + a.levels.len()));
    if g.dry_run {
        return Ok(());
    }
    let images = a.out_dir.join("images");
    synthetic::write_images(&contents, &images)?;
    write_id_list(a.out_dir.join("contents.txt"), &ids)?;
    write_triplets(a.out_dir.join("triplets.csv"), &synthetic::triplets(&contents))?;
    write_eval_pairs(a.out_dir.join("pairs.csv"), &synthetic::eval_pairs(&contents))?;
    let conf = format!(
        "# synthetic corpus\ncorpus_root = {}\ntrain_triplets = {}\nval_pairs = {}\nbackbone = toy\nseed = {}\n\
         lr_phase1 = 2e-3\nlr_phase2 = 0.2\nlr_phase3 = 5e-2\niters_phase1 = 200\niters_phase2 = 200\niters_phase3 = 200\n\
         cosine_period_iters = 200\nbatch_size = 16\ncheckpoint_every = 100\n",
        images.display(),
        a.out_dir.join("triplets.csv").display(),
        a.out_dir.join("pairs.csv").display(),
        a.seed
    );
    fs::write(a.out_dir.join("afine.conf"), conf).context("writing afine.conf")?;
    Ok(())
}
