//! The `mkl` command line: batch description and hard-negative synthesis,
//! the toy training run and the gradient checks.
//!
//! Every output is line-delimited JSON. Exit codes: 0 success, 1 invalid
//! input or arguments, 2 I/O failure, 3 numerical failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::annotations::{self, AnnotationError, Dataset, Hierarchy, SceneAnnotation};
use crate::gradcheck::{self, CheckedLoss, GradcheckConfig};
use crate::mi::{LossConfig, MiError};
use crate::negatives::{
    self, FailureSet, NegativeError, ScoreRecord, DEFAULT_NUM_NEGATIVES,
};
use crate::prompting::{self, PromptError, PromptTemplate, Renderer, TemplateSet};
use crate::seeds;
use crate::training::{self, SyntheticConfig, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Metrics log written by `train-toy` inside `--out`.
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Checkpoint written by `train-toy` inside `--out`.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        match e {
            AnnotationError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<NegativeError> for CliError {
    fn from(e: NegativeError) -> Self {
        match e {
            NegativeError::Io { .. } => CliError::Io(e.to_string()),
            NegativeError::Prompt(p) => p.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MiError> for CliError {
    fn from(e: MiError) -> Self {
        match e {
            MiError::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e {
            TrainError::Prompt(p) => p.into(),
            TrainError::Negative(n) => n.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mkl", version, about = "Prompt-generated supervision and contrastive alignment tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one description per image.
    Describe(DescribeArgs),
    /// Synthesize hard-negative descriptions per image.
    Negatives(NegativesArgs),
    /// Train the toy detector on synthetic scenes.
    TrainToy(TrainArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// COCO-style detection JSON.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Template file; the built-in set when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Threads rendering images in parallel. Output order never changes.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Args)]
pub struct NegativesArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// `category<TAB>parent` lines; every category is its own parent when
    /// omitted.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    /// Line-delimited classifier scores.
    #[arg(long, conflicts_with = "no_scores", required_unless_present = "no_scores")]
    pub scores: Option<PathBuf>,
    /// Category confusion only.
    #[arg(long)]
    pub no_scores: bool,
    #[arg(long = "n-h", default_value_t = DEFAULT_NUM_NEGATIVES)]
    pub n_h: usize,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long, default_value_t = crate::mi::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long = "lambda-vg", default_value_t = crate::mi::DEFAULT_LAMBDA_VG)]
    pub lambda_vg: f64,
    #[arg(long = "lambda-lg", default_value_t = crate::mi::DEFAULT_LAMBDA_LG)]
    pub lambda_lg: f64,
    #[arg(long = "lambda-o", default_value_t = crate::mi::DEFAULT_LAMBDA_O)]
    pub lambda_o: f64,
}

impl LossArgs {
    pub fn to_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda_vg: self.lambda_vg,
            lambda_lg: self.lambda_lg,
            lambda_o: self.lambda_o,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory receiving the metrics log and the checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Template file; the built-in set when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long = "n-h", default_value_t = DEFAULT_NUM_NEGATIVES)]
    pub n_h: usize,
    #[arg(long, default_value_t = crate::embedding::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long = "batch-size", default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long)]
    pub no_hard_negatives: bool,
    #[arg(long)]
    pub no_object_level: bool,
    #[arg(long)]
    pub no_image_level: bool,
    /// Epochs trained before hard negatives switch on.
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long, default_value_t = 8)]
    pub categories: usize,
    #[arg(long, default_value_t = 2000)]
    pub scenes: usize,
    #[arg(long = "eval-scenes", default_value_t = 320)]
    pub eval_scenes: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
    pub instances: usize,
    #[arg(long, default_value_t = crate::mi::DEFAULT_TAU)]
    pub tau: f64,
    /// JSON report; the summary still goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test hook: negate the analytic gradient of one loss.
    #[arg(long, hide = true)]
    pub sabotage: Option<CheckedLoss>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("mkl: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Describe(a) => cmd_describe(a),
        Command::Negatives(a) => cmd_negatives(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn load_templates(path: Option<&Path>) -> Result<Vec<PromptTemplate>> {
    Ok(match path {
        Some(p) => prompting::load_templates(p)?,
        None => prompting::builtin_templates(),
    })
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Io(format!("stdout: {e}")))
        }
    }
}

fn check_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        return Err(CliError::Validation("--workers must be at least 1".into()));
    }
    Ok(())
}

/// Applies `f` to every item on up to `workers` threads and concatenates
/// the results in input order.
pub fn map_ordered<T, F>(items: &[T], workers: usize, f: F) -> Result<String>
where
    T: Sync,
    F: Fn(&T) -> Result<String> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let mut parts: Vec<(usize, Result<String>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(rank, part)| {
                let f = &f;
                scope.spawn(move || (rank, part.iter().map(f).collect::<Result<String>>()))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    parts.sort_by_key(|(rank, _)| *rank);
    parts.into_iter().map(|(_, r)| r).collect()
}

fn json_line<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("records serialize") + "\n"
}

fn load_input(input: &InputArgs) -> Result<(Dataset, Vec<PromptTemplate>)> {
    check_workers(input.workers)?;
    let (dataset, _) = annotations::load_dataset(&input.annotations)?;
    let templates = load_templates(input.templates.as_deref())?;
    Ok((dataset, templates))
}

pub fn cmd_describe(args: &DescribeArgs) -> Result<()> {
    let input = &args.input;
    let (dataset, templates) = load_input(input)?;
    let renderer = Renderer::new(&templates, &dataset.categories)?;
    let text = map_ordered(&dataset.scenes, input.workers, |scene| {
        let d = renderer
            .describe(scene, seeds::image_seed(input.seed, scene.image_id))
            .map_err(|e| CliError::Validation(format!("image {}: {e}", scene.image_id)))?;
        Ok(json_line(&d.to_record(scene.image_id)))
    })?;
    write_output(input.out.as_deref(), &text)
}

/// Groups score records by image, rejecting records for unknown images and
/// score vectors of the wrong width.
fn index_scores(
    records: Vec<ScoreRecord>,
    dataset: &Dataset,
) -> Result<BTreeMap<i64, Vec<ScoreRecord>>> {
    let known: BTreeSet<i64> = dataset.scenes.iter().map(|s| s.image_id).collect();
    let orphans: BTreeSet<i64> = records
        .iter()
        .map(|r| r.image_id)
        .filter(|id| !known.contains(id))
        .collect();
    if !orphans.is_empty() {
        let ids: Vec<String> = orphans.iter().map(i64::to_string).collect();
        return Err(CliError::Validation(format!(
            "score records reference unknown image ids: {}",
            ids.join(", ")
        )));
    }
    let width = dataset.categories.len() + 1;
    let mut by_image: BTreeMap<i64, Vec<ScoreRecord>> = BTreeMap::new();
    for r in records {
        if let Some(k) = r.predictions.iter().position(|p| p.scores.len() != width) {
            return Err(CliError::Validation(format!(
                "image {} prediction {k}: {} scores, expected {width}",
                r.image_id,
                r.predictions[k].scores.len()
            )));
        }
        by_image.entry(r.image_id).or_default().push(r);
    }
    Ok(by_image)
}

fn negatives_for(
    scene: &SceneAnnotation,
    scores: Option<&Vec<ScoreRecord>>,
    hierarchy: &Hierarchy,
    renderer: &Renderer<'_>,
    args: &NegativesArgs,
) -> Result<String> {
    let id = scene.image_id;
    let named = |e: NegativeError| -> CliError {
        let inner: CliError = e.into();
        match inner {
            CliError::Validation(m) => CliError::Validation(format!("image {id}: {m}")),
            other => other,
        }
    };
    let seed = seeds::image_seed(args.input.seed, id);
    let anchor = renderer.describe(scene, seed).map_err(|e| named(e.into()))?;
    let failures = match scores {
        Some(records) => {
            let preds: Vec<_> = records.iter().flat_map(|r| r.to_predictions()).collect();
            negatives::detect_failures(&preds).map_err(named)?
        }
        None => FailureSet::default(),
    };
    match negatives::build_negative_set(
        scene,
        &anchor,
        &failures,
        hierarchy,
        renderer,
        args.n_h,
        seeds::negative_seed(args.input.seed, id),
    ) {
        Ok(set) => Ok(set.to_records(id).iter().map(json_line).collect()),
        Err(NegativeError::EmptyScene { .. }) => {
            eprintln!("mkl: image {id}: no objects to edit, skipped");
            Ok(String::new())
        }
        Err(e) => Err(named(e)),
    }
}

pub fn cmd_negatives(args: &NegativesArgs) -> Result<()> {
    let input = &args.input;
    if args.n_h == 0 {
        return Err(CliError::Validation("--n-h must be at least 1".into()));
    }
    let (dataset, templates) = load_input(input)?;
    let hierarchy = match &args.hierarchy {
        Some(p) => annotations::load_hierarchy(p, &dataset.categories)?,
        None => Hierarchy::singletons(&dataset.categories),
    };
    let scores = match (&args.scores, args.no_scores) {
        (Some(p), false) => index_scores(negatives::load_scores(p)?, &dataset)?,
        _ => BTreeMap::new(),
    };
    let renderer = Renderer::new(&templates, &dataset.categories)?;
    let text = map_ordered(&dataset.scenes, input.workers, |scene| {
        negatives_for(scene, scores.get(&scene.image_id), &hierarchy, &renderer, args)
    })?;
    write_output(input.out.as_deref(), &text)
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss.to_config(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            n_h: self.n_h,
            dim: self.dim,
            enable_image_level: !self.no_image_level,
            enable_object_level: !self.no_object_level,
            enable_hard_negatives: !self.no_hard_negatives,
            warmup_epochs: self.warmup,
            workers: self.workers,
            template_set: TemplateSet::Cqps,
            ..TrainConfig::default()
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_categories: self.categories,
            scenes: self.scenes,
            eval_scenes: self.eval_scenes,
            seed: self.seed,
            ..SyntheticConfig::default()
        }
    }
}

pub fn cmd_train_toy(args: &TrainArgs) -> Result<()> {
    let config = args.train_config();
    let dataset = training::generate_synthetic(&args.synthetic_config())?;
    let templates = match &args.templates {
        Some(p) => prompting::load_templates(p)?,
        None => training::default_templates(&config),
    };
    let outcome = training::train(&dataset, &templates, &dataset.hierarchy, &config)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let metrics = args.out.join(METRICS_FILE);
    fs::write(&metrics, outcome.report.to_jsonl()).map_err(|e| CliError::io(&metrics, e))?;
    let checkpoint = args.out.join(CHECKPOINT_FILE);
    fs::write(&checkpoint, outcome.detector.to_bytes())
        .map_err(|e| CliError::io(&checkpoint, e))?;
    let r = &outcome.report;
    println!(
        "retrieval_top1={:.4} object_alignment_top1={:.4} sibling_confusion_rate={:.4}",
        r.retrieval_top1, r.object_alignment_top1, r.sibling_confusion_rate
    );
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.instances == 0 {
        return Err(CliError::Validation("--instances must be at least 1".into()));
    }
    let config = GradcheckConfig {
        instances: args.instances,
        tau: args.tau,
        sabotage: args.sabotage,
        ..GradcheckConfig::new(args.seed)
    };
    let report = gradcheck::run_gradcheck(&config)?;
    for c in &report.checks {
        println!(
            "{:<16} {} max_rel_error={:.3e} coordinates={}",
            c.loss.name(),
            if c.passed { "PASS" } else { "FAIL" },
            c.max_rel_error,
            c.coordinates
        );
    }
    println!(
        "{:<16} {} tau={:e}",
        "stability",
        if report.stability.all_finite { "PASS" } else { "FAIL" },
        report.stability.tau
    );
    if let Some(p) = &args.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        fs::write(p, json).map_err(|e| CliError::io(p, e))?;
    }
    if report.passed() {
        return Ok(());
    }
    let mut lines: Vec<String> = report
        .failures()
        .map(|c| match &c.worst {
            Some(w) => format!(
                "{} failed: max relative error {:.3e} at instance {} {}[{}, {}] (analytic {:.6e}, numeric {:.6e})",
                c.loss, c.max_rel_error, w.instance, w.tensor, w.row, w.col, w.analytic, w.numeric
            ),
            None => format!("{} failed: max relative error {:.3e}", c.loss, c.max_rel_error),
        })
        .collect();
    if !report.stability.all_finite {
        lines.push(format!("non-finite loss at tau = {:e}", report.stability.tau));
    }
    Err(CliError::Numerical(lines.join("\n")))
}
