//! The `fnm` command-line tool.
//!
//! Every subcommand that writes files can also write a run manifest with
//! `--manifest <path>`; `fnm replay <path>` re-runs it and checks that the
//! outputs come out byte for byte identical.

pub mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fnm_core::eval::{evaluate, DEFAULT_IOU};
use fnm_core::io::{
    load_annotations, load_detections, load_model, save_annotations, save_detections, save_json, save_model,
    to_canonical_json, write_text, AnnotationSet, DatasetPaths, ModelBundle,
};
use fnm_core::priors::{fit_priors, DEFAULT_PRIOR_GRID};
use fnm_core::stability::{
    clamp_context, epsilon_h, posterior_at, posterior_derivative, required_samples, CurveParams,
};
use fnm_core::synth::{run_oracle, sample_dataset, Template};
use fnm_core::{
    fit_relations, BinningConfig, CategoryMap, Engine, InferenceConfig, PriorTable, RelationModel, Strategies,
};

use manifest::{strip_manifest_flag, RunManifest, Touched};

static QUIET: AtomicBool = AtomicBool::new(false);

/// Progress and warnings on stderr, silenced by `--quiet`.
macro_rules! note {
    ($($arg:tt)*) => {
        if !QUIET.load(Ordering::Relaxed) {
            eprintln!($($arg)*);
        }
    };
}

/// Human-readable reports on stdout, silenced by `--quiet`.
macro_rules! report {
    ($($arg:tt)*) => {
        if !QUIET.load(Ordering::Relaxed) {
            print!($($arg)*);
        }
    };
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TOLERANCE: i32 = 4;

/// A computed quantity missed its required bound.
#[derive(Debug)]
pub struct ToleranceFailure(pub String);

impl fmt::Display for ToleranceFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ToleranceFailure {}

/// Bad configuration detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "fnm", version, about = "Contextual rescoring of object detections")]
pub struct Cli {
    /// Write a run manifest to this path.
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Print only errors; files are still written.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (annotations.json, detections.json).
    Synth(SynthArgs),
    /// Count spatial relations in annotated scenes.
    Train(TrainArgs),
    /// Choose per-category priors that maximize training AP.
    FitPriors(FitPriorsArgs),
    /// Rescore detections with a trained model.
    Rescore(RescoreArgs),
    /// Match detections to ground truth and report AP.
    Eval(EvalArgs),
    /// Tabulate the posterior as a function of the (clamped) context probability.
    Curve(CurveArgs),
    /// Context tolerance and sample count for a target posterior accuracy.
    SampleSize(SampleSizeArgs),
    /// Compare rescoring with exact posteriors on small synthetic scenes.
    OracleCheck(OracleArgs),
    /// Re-run a recorded command and verify its outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Built-in template name or path to a template file.
    #[arg(long, default_value = "benchmark")]
    pub template: String,
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    /// Defaults to the template seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Binning configuration file; defaults to the standard grid with unit
    /// scale factors for every annotated category.
    #[arg(long)]
    pub binning: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub max_neighbors: u8,
    #[arg(long, default_value_t = fnm_core::relation::DEFAULT_SMOOTHING)]
    pub smoothing: f64,
    /// Initial prior of every category.
    #[arg(long, default_value_t = fnm_core::relation::DEFAULT_PRIOR)]
    pub prior: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferenceArgs {
    /// Inference configuration file; flags below override its fields.
    #[arg(long = "config")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gating: Option<String>,
    #[arg(long)]
    pub neighbor_search: Option<String>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub max_neighbors: Option<u8>,
    #[arg(long)]
    pub iterations: Option<u32>,
    #[arg(long)]
    pub derivative_threshold: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub candidate_floor: Option<f64>,
}

impl InferenceArgs {
    pub fn resolve(&self, touched: &mut Touched) -> Result<InferenceConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                touched.read(p);
                fnm_core::io::load_json(p)?
            }
            None => InferenceConfig::default(),
        };
        if let Some(v) = &self.gating {
            cfg.gating = v.clone();
        }
        if let Some(v) = &self.neighbor_search {
            cfg.neighbor_search = v.clone();
        }
        if let Some(v) = &self.schedule {
            cfg.schedule = v.clone();
        }
        if let Some(v) = self.max_neighbors {
            cfg.max_neighbors = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.derivative_threshold {
            cfg.derivative_threshold = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.candidate_floor {
            cfg.candidate_floor = v;
        }
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct FitPriorsArgs {
    #[arg(long, env = "FNM_MODEL")]
    pub model: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Candidate prior values, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PRIOR_GRID.to_vec())]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_IOU)]
    pub iou: f64,
    #[arg(long, default_value = "eleven-point")]
    pub ap: String,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Write the grid search as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RescoreArgs {
    #[arg(long, env = "FNM_MODEL")]
    pub model: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Write per-image neighbor choices, gating and sparsity flags.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU)]
    pub iou: f64,
    #[arg(long, default_value = "eleven-point")]
    pub ap: String,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Exit with status 4 when mAP falls below this value.
    #[arg(long)]
    pub min_map: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub detector_prob: f64,
    #[arg(long, default_value_t = fnm_core::relation::DEFAULT_PRIOR)]
    pub prior: f64,
    #[arg(long, default_value_t = 101)]
    pub points: usize,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleSizeArgs {
    #[arg(long)]
    pub detector_prob: f64,
    #[arg(long, default_value_t = fnm_core::relation::DEFAULT_PRIOR)]
    pub prior: f64,
    /// The context probability h* being estimated.
    #[arg(long)]
    pub context: f64,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value = "clique")]
    pub template: String,
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(value_name = "MANIFEST")]
    pub recording: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status. Errors are reported on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let raw: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, &raw) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<ToleranceFailure>().is_some() {
        EXIT_TOLERANCE
    } else if e.downcast_ref::<UsageError>().is_some()
        || matches!(
            e.downcast_ref::<fnm_core::Error>(),
            Some(fnm_core::Error::UnknownStrategy { .. })
        )
    {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

/// Runs a parsed command; `raw` is the argument list after the program name.
pub fn run(cli: Cli, raw: &[String]) -> Result<()> {
    QUIET.store(cli.quiet, Ordering::Relaxed);
    let mut recorded = strip_manifest_flag(raw);
    // A model taken from FNM_MODEL is written out so a replay does not depend
    // on the environment.
    if let Command::Rescore(RescoreArgs { model, .. }) | Command::FitPriors(FitPriorsArgs { model, .. }) = &cli.command
    {
        if !recorded.iter().any(|a| a == "--model" || a.starts_with("--model=")) {
            recorded.push("--model".into());
            recorded.push(model.display().to_string());
        }
    }
    let mut touched = Touched::default();
    let result = dispatch(cli.command, &mut touched);
    // A tolerance failure still leaves complete outputs worth recording.
    let tolerance = matches!(&result, Err(e) if e.downcast_ref::<ToleranceFailure>().is_some());
    if let Some(path) = &cli.manifest {
        if result.is_ok() || tolerance {
            RunManifest::record(recorded, &touched)?.save(path)?;
        }
    }
    result
}

fn dispatch(command: Command, t: &mut Touched) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, t),
        Command::Train(a) => train(a, t),
        Command::FitPriors(a) => fit_priors_cmd(a, t),
        Command::Rescore(a) => rescore(a, t),
        Command::Eval(a) => eval(a, t),
        Command::Curve(a) => curve(a, t),
        Command::SampleSize(a) => sample_size(a),
        Command::OracleCheck(a) => oracle_check(a, t),
        Command::Replay(a) => replay(a),
    }
}

fn load_template(name: &str, t: &mut Touched) -> Result<Template> {
    let path = Path::new(name);
    if path.is_file() {
        t.read(path);
        let text = fnm_core::io::read_text(path)?;
        return Template::from_json(&text).with_context(|| format!("in template {}", path.display()));
    }
    Template::builtin(name).map_err(|e| UsageError(format!("{e}; or give a path to a template file")).into())
}

fn synth(a: SynthArgs, t: &mut Touched) -> Result<()> {
    let template = load_template(&a.template, t)?;
    let seed = a.seed.unwrap_or(template.seed());
    let template = template
        .spatial()
        .map_err(|_| UsageError("clique templates have no images; use `fnm oracle-check`".into()))?;
    let ds = sample_dataset(&template, a.scenes, seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let paths = DatasetPaths::in_dir(&a.out);
    let set = AnnotationSet {
        categories: CategoryMap::from_names(ds.categories.clone()),
        scenes: ds.annotated_scenes(),
        warnings: Vec::new(),
    };
    save_annotations(&set, &paths.annotations)?;
    save_detections(&ds.detections(), &set.categories, &paths.detections)?;
    t.wrote(&paths.annotations);
    t.wrote(&paths.detections);
    note!(
        "{} scenes, {} objects, {} detections -> {}",
        ds.scenes.len(),
        ds.ground_truth().len(),
        ds.detections().len(),
        a.out.display()
    );
    Ok(())
}

fn load_annotation_set(path: &Path, t: &mut Touched) -> Result<AnnotationSet> {
    t.read(path);
    let set = load_annotations(path)?;
    for w in set.warnings.iter().take(3) {
        note!("warning: {w}");
    }
    if set.warnings.len() > 3 {
        note!("warning: ... and {} more", set.warnings.len() - 3);
    }
    Ok(set)
}

fn train(a: TrainArgs, t: &mut Touched) -> Result<()> {
    let set = load_annotation_set(&a.annotations, t)?;
    let binning = match &a.binning {
        Some(p) => {
            t.read(p);
            let b: BinningConfig = fnm_core::io::load_json(p)?;
            b
        }
        None => BinningConfig::with_categories(set.categories.names()),
    };
    let table = fit_relations(&set.scenes, binning, a.max_neighbors)?.with_smoothing(a.smoothing)?;
    let priors = PriorTable::uniform(table.categories().to_vec(), a.prior)?;
    let bundle = ModelBundle {
        model: RelationModel::new(table, priors)?,
        category_ids: set.categories,
    };
    save_model(&bundle, &a.out)?;
    t.wrote(&a.out);
    note!(
        "{} scenes, {} categories -> {}",
        set.scenes.len(),
        bundle.model.table.categories().len(),
        a.out.display()
    );
    Ok(())
}

fn load_bundle(path: &Path, t: &mut Touched) -> Result<ModelBundle> {
    t.read(path);
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn engine(args: &InferenceArgs, t: &mut Touched) -> Result<Engine> {
    Ok(Engine::new(args.resolve(t)?, &Strategies::builtin())?)
}

fn fit_priors_cmd(a: FitPriorsArgs, t: &mut Touched) -> Result<()> {
    let mut bundle = load_bundle(&a.model, t)?;
    let set = load_annotation_set(&a.annotations, t)?;
    t.read(&a.detections);
    let dets = load_detections(&a.detections, &bundle.category_ids)?;
    let engine = engine(&a.inference, t)?;
    let ap = Strategies::builtin().ap.get(&a.ap)?;
    let search = fit_priors(&bundle.model, &set.scenes, &dets, &engine, &a.grid, a.iou, ap.as_ref())?;
    for (cat, v) in search.priors.iter() {
        note!("{cat}: {v}");
    }
    if let Some(p) = &a.trace {
        let mut csv = String::from("category,prior,ap\n");
        for (cat, v, ap) in &search.trace {
            csv.push_str(&format!("{cat},{v},{ap:.9}\n"));
        }
        write_text(p, &csv)?;
        t.wrote(p);
    }
    bundle.model.priors = search.priors;
    save_model(&bundle, &a.out)?;
    t.wrote(&a.out);
    Ok(())
}

fn rescore(a: RescoreArgs, t: &mut Touched) -> Result<()> {
    let bundle = load_bundle(&a.model, t)?;
    t.read(&a.detections);
    let dets = load_detections(&a.detections, &bundle.category_ids)?;
    let out = engine(&a.inference, t)?.rescore_images(&bundle.model, &dets, a.jobs)?;
    if out.unknown_category > 0 {
        note!(
            "warning: {} detections of categories unknown to the model kept their scores",
            out.unknown_category
        );
    }
    save_detections(&out.detections, &bundle.category_ids, &a.out)?;
    t.wrote(&a.out);
    if let Some(p) = &a.diagnostics {
        save_json(&out.images, p)?;
        t.wrote(p);
    }
    note!("{} detections in {} images rescored", dets.len(), out.images.len());
    Ok(())
}

fn eval(a: EvalArgs, t: &mut Touched) -> Result<()> {
    let set = load_annotation_set(&a.annotations, t)?;
    t.read(&a.detections);
    let dets = load_detections(&a.detections, &set.categories)?;
    let ap = Strategies::builtin().ap.get(&a.ap)?;
    let report = evaluate(&dets, &set.ground_truth(), a.iou, ap.as_ref())?;
    report!("{report}\n");
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv())?;
        t.wrote(p);
    }
    if let Some(p) = &a.json {
        save_json(&report, p)?;
        t.wrote(p);
    }
    if let Some(min) = a.min_map {
        if report.map < min {
            bail!(ToleranceFailure(format!("mAP {:.6} below required {min}", report.map)));
        }
    }
    Ok(())
}

fn curve(a: CurveArgs, t: &mut Touched) -> Result<()> {
    if a.points < 2 {
        bail!(UsageError("need at least 2 points".into()));
    }
    let params = CurveParams::new(a.detector_prob, a.prior)?;
    let mut csv = String::from("context,posterior,derivative\n");
    for i in 0..a.points {
        let h = clamp_context(i as f64 / (a.points - 1) as f64);
        csv.push_str(&format!(
            "{},{:.12},{:.12}\n",
            h,
            posterior_at(params, h)?,
            posterior_derivative(params, h)?
        ));
    }
    match &a.out {
        Some(p) => {
            write_text(p, &csv)?;
            t.wrote(p);
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn sample_size(a: SampleSizeArgs) -> Result<()> {
    let params = CurveParams::new(a.detector_prob, a.prior)?;
    let eps_h = epsilon_h(params, a.context, a.epsilon)?;
    println!("posterior {:.9}", posterior_at(params, a.context)?);
    println!("epsilon_h {eps_h:.9}");
    if eps_h.is_finite() {
        println!("samples {}", required_samples(eps_h, a.delta)?);
    } else {
        println!("samples 0");
    }
    Ok(())
}

fn oracle_check(a: OracleArgs, t: &mut Touched) -> Result<()> {
    let template = load_template(&a.template, t)?;
    let seed = a.seed.unwrap_or(template.seed());
    let template = template
        .clique()
        .map_err(|_| UsageError("oracle-check needs a clique template".into()))?;
    let report = run_oracle(&template, a.scenes, seed)?;
    report!("{}", to_canonical_json(&report)?);
    if let Some(p) = &a.out {
        save_json(&report, p)?;
        t.wrote(p);
    }
    if report.max_abs_error > a.tolerance {
        bail!(ToleranceFailure(format!(
            "max abs error {:.3e} exceeds tolerance {:.3e}",
            report.max_abs_error, a.tolerance
        )));
    }
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let m = RunManifest::load(&a.recording)?;
    if m.tool_version != env!("CARGO_PKG_VERSION") {
        note!("warning: manifest written by version {}", m.tool_version);
    }
    let changed = m.changed_inputs()?;
    if !changed.is_empty() {
        bail!("inputs changed since the run was recorded: {}", changed.join(", "));
    }
    if m.args.first().map(String::as_str) == Some("replay") {
        bail!(UsageError("a replay manifest cannot itself be replayed".into()));
    }
    let mut argv = vec!["fnm".to_string()];
    argv.extend(m.args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| anyhow!("recorded arguments no longer parse: {e}"))?;
    let mut touched = Touched::default();
    let outcome = dispatch(cli.command, &mut touched);
    if let Err(e) = outcome {
        if e.downcast_ref::<ToleranceFailure>().is_none() {
            return Err(e);
        }
    }
    let differ = m.differing_outputs()?;
    if !differ.is_empty() {
        bail!(ToleranceFailure(format!(
            "outputs differ from the recording: {}",
            differ.join(", ")
        )));
    }
    note!("{} outputs reproduced byte for byte", m.outputs.len());
    Ok(())
}
