//! Command-line front end: `train`, `synthesize`, `eval`, `gen-synthetic`.
//!
//! Exit status is 0 on success, 1 on a runtime error and 2 on a usage error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bilevel::EtaReset;
use crate::coupled::PairBatch;
use crate::dataset::manifest::load_manifest;
use crate::dataset::ppm::{load_image, save_image};
use crate::dataset::synthetic::{
    export_synthetic, generate_synthetic, sample_pairs, SyntheticSpec,
};
use crate::error::Error;
use crate::metrics::{batch_transfer_errors, median, model_recovery, quantile};
use crate::model::{load_model, save_model, HyperParams, ModelBundle};
use crate::synthesis::synthesize_sequence;
use crate::train::{train, TrainOptions, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "agedict",
    version,
    about = "Aging dictionary learning and age progression"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn PCA bases and aging dictionaries from paired samples.
    Train(TrainArgs),
    /// Age a face image through successive groups.
    Synthesize(SynthesizeArgs),
    /// Report transfer error and atom recovery of a model.
    Eval(EvalArgs),
    /// Write a planted dataset: images, manifest, truth model and spec.
    GenSynthetic(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EtaResetArg {
    Global,
    PerGroup,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("data").required(true).args(["manifest", "synthetic"])))]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Train on a generated planted dataset.
    #[arg(long, value_name = "SPEC.json")]
    pub synthetic: Option<PathBuf>,
    /// Number of age groups (manifest default: largest group present;
    /// synthetic: taken from the spec).
    #[arg(long, value_name = "G")]
    pub groups: Option<usize>,
    /// Atoms per dictionary [default: 80, or the spec's k with --synthetic].
    #[arg(long, value_name = "K")]
    pub atoms: Option<usize>,
    /// PCA dimension [default: 2000, or the spec's m with --synthetic].
    #[arg(long, value_name = "M")]
    pub pca_dim: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Base SGD step; the step for the n0-th sample is eta0 / n0.
    #[arg(long, default_value_t = 4.0)]
    pub eta0: f64,
    /// First value of the sample counter n0 [default: batch size].
    #[arg(long, value_name = "N0")]
    pub n0_start: Option<usize>,
    #[arg(long, value_enum, default_value_t = EtaResetArg::PerGroup)]
    pub eta_reset: EtaResetArg,
    /// Epoch cap per pair of groups.
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "MODEL.adlm")]
    pub out: PathBuf,
    /// Objective trace, CSV `epoch,group,objective,grad_norm`.
    #[arg(long, value_name = "TRACE.csv")]
    pub trace: Option<PathBuf>,
    /// Stop after coupled initialization.
    #[arg(long)]
    pub skip_bilevel: bool,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long, value_name = "MODEL.adlm")]
    pub model: PathBuf,
    #[arg(long, value_name = "FACE.ppm")]
    pub input: PathBuf,
    #[arg(long, value_name = "G")]
    pub from_group: usize,
    #[arg(long, value_name = "T")]
    pub to_group: usize,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("reference").required(true).args(["truth", "manifest"])))]
pub struct EvalArgs {
    #[arg(long, value_name = "MODEL.adlm")]
    pub model: PathBuf,
    /// Planted model; held-out pairs are drawn from it.
    #[arg(long, value_name = "TRUTH.adlm")]
    pub truth: Option<PathBuf>,
    /// Held-out pairs from a manifest.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Spec for drawing held-out pairs from --truth [default: built-in
    /// spec with the truth's dimensions].
    #[arg(long, value_name = "SPEC.json", requires = "truth")]
    pub synthetic: Option<PathBuf>,
    /// Held-out pairs per batch drawn from --truth.
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    /// Seed of the held-out draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV `group,metric,value`; stdout when absent.
    #[arg(long, value_name = "OUT.csv")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset spec [default: built-in planted fixture].
    #[arg(long, value_name = "SPEC.json")]
    pub spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

/// Failure of a command, split by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io(e))
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(cli: Cli) -> CmdResult {
    let Cli { threads, command } = cli;
    let job = move || match command {
        Command::Train(a) => cmd_train(&a),
        Command::Synthesize(a) => cmd_synthesize(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(&a),
    };
    match threads {
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Runtime(Error::Input(e.to_string())))?
            .install(job),
        None => job(),
    }
}

/// Spec and hyperparameter problems are the caller's to fix.
fn usage_if_input(e: Error) -> Failure {
    match e {
        Error::Input(msg) | Error::Format(msg) => Failure::Usage(msg),
        other => Failure::Runtime(other),
    }
}

fn read_spec(path: &Path) -> std::result::Result<SyntheticSpec, Failure> {
    let text = fs::read_to_string(path).map_err(|e| {
        Failure::Runtime(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })?;
    SyntheticSpec::from_json(&text).map_err(usage_if_input)
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> CmdResult) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut sink = BufWriter::new(File::create(path)?);
    write(&mut sink)?;
    sink.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Failure {
    Failure::Runtime(Error::Io(std::io::Error::other(e.to_string())))
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult {
    let (batches, groups, k_default, m_default) = match (&a.manifest, &a.synthetic) {
        (Some(path), _) => {
            let manifest = load_manifest(path, a.groups)?;
            if manifest.is_empty() {
                return Err(Failure::Usage(format!(
                    "manifest {} has no rows",
                    path.display()
                )));
            }
            let (batches, _) = manifest.load_batches()?;
            (batches, manifest.groups, 80, 2000)
        }
        (None, Some(path)) => {
            let spec = read_spec(path)?;
            if a.groups.is_some_and(|g| g != spec.groups) {
                return Err(Failure::Usage(format!(
                    "--groups conflicts with the spec's {} groups",
                    spec.groups
                )));
            }
            let data = generate_synthetic(&spec)?;
            (data.batches, spec.groups, spec.k, spec.m)
        }
        (None, None) => {
            return Err(Failure::Usage(
                "--manifest or --synthetic is required".into(),
            ))
        }
    };
    let params = HyperParams {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        gamma: a.gamma,
        k: a.atoms.unwrap_or(k_default),
        m: a.pca_dim.unwrap_or(m_default),
        groups,
        eta0: a.eta0,
        ..HyperParams::default()
    };
    params.validate().map_err(usage_if_input)?;
    if a.n0_start == Some(0) {
        return Err(Failure::Usage("--n0-start must be at least 1".into()));
    }
    let mut options = TrainOptions {
        skip_bilevel: a.skip_bilevel,
        ..TrainOptions::default()
    };
    options.bilevel.max_epochs = a.max_epochs;
    options.bilevel.n0_start = a.n0_start;
    options.bilevel.eta_reset = match a.eta_reset {
        EtaResetArg::Global => EtaReset::Global,
        EtaResetArg::PerGroup => EtaReset::PerGroup,
    };

    let outcome = train(&batches, &params, a.seed, &options)?;
    write_file(&a.out, |w| Ok(save_model(&outcome.model, w)?))?;
    if let Some(path) = &a.trace {
        write_file(path, |w| write_trace(&outcome, w))?;
    }
    match &outcome.bilevel {
        Some(b) => println!(
            "wrote {} (bilevel epochs per group pair {:?}, converged {:?})",
            a.out.display(),
            b.epochs,
            b.converged
        ),
        None => println!(
            "wrote {} (coupled only, {} iterations)",
            a.out.display(),
            outcome.coupled.objective_trace.len().saturating_sub(1)
        ),
    }
    Ok(())
}

/// Bi-level rows, or for coupled-only runs one row per coupled iteration
/// with group 0 and an empty gradient norm.
fn write_trace<W: Write>(outcome: &TrainOutcome, sink: W) -> CmdResult {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["epoch", "group", "objective", "grad_norm"])
        .map_err(csv_error)?;
    match &outcome.bilevel {
        Some(b) => {
            for r in &b.trace {
                w.write_record([
                    r.epoch.to_string(),
                    r.group.to_string(),
                    r.objective.to_string(),
                    r.grad_norm.to_string(),
                ])
                .map_err(csv_error)?;
            }
        }
        None => {
            for (i, v) in outcome.coupled.objective_trace.iter().enumerate() {
                w.write_record([i.to_string(), "0".into(), v.to_string(), String::new()])
                    .map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_model(path: &Path) -> std::result::Result<ModelBundle, Failure> {
    let bytes = fs::read(path).map_err(|e| {
        Failure::Runtime(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })?;
    load_model(bytes.as_slice()).map_err(|e| match e {
        Error::Format(msg) => Failure::Runtime(Error::Format(format!("{}: {msg}", path.display()))),
        other => Failure::Runtime(other),
    })
}

pub fn cmd_synthesize(a: &SynthesizeArgs) -> CmdResult {
    if a.to_group <= a.from_group {
        return Err(Failure::Usage(format!(
            "--to-group ({}) must exceed --from-group ({})",
            a.to_group, a.from_group
        )));
    }
    let model = read_model(&a.model)?;
    if a.from_group == 0 || a.to_group > model.groups() {
        return Err(Failure::Usage(format!(
            "groups must lie in 1..={} for this model",
            model.groups()
        )));
    }
    let image = load_image(&a.input)?;
    if image.pixels.len() != model.f {
        return Err(Failure::Runtime(Error::Dimension(format!(
            "{} has {} values, the model expects {}",
            a.input.display(),
            image.pixels.len(),
            model.f
        ))));
    }
    let outputs = synthesize_sequence(&image.pixels, &model, a.from_group, a.to_group)?;
    fs::create_dir_all(&a.out_dir)?;
    for (i, y) in outputs.iter().enumerate() {
        let group = a.from_group + 1 + i;
        save_image(y, image.dims, a.out_dir.join(format!("step_{group}.ppm")))?;
    }
    println!("wrote {} images to {}", outputs.len(), a.out_dir.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let model = read_model(&a.model)?;
    let mut rows: Vec<(String, &str, f64)> = Vec::new();
    let mut batches: Vec<PairBatch> = Vec::new();

    if let Some(path) = &a.truth {
        let truth = read_model(path)?;
        let recovery = model_recovery(&model, &truth)?;
        let spec = match &a.synthetic {
            Some(p) => read_spec(p)?,
            None => SyntheticSpec::default(),
        };
        let spec = SyntheticSpec {
            f: truth.f,
            m: truth.params.m,
            k: truth.params.k,
            groups: truth.groups(),
            pairs_per_batch: a.pairs,
            seed: a.seed,
            ..spec
        };
        spec.validate().map_err(usage_if_input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        for g in 1..truth.groups() {
            batches.push(sample_pairs(&truth, g, a.pairs, &spec, &mut rng)?.0);
        }
        for (g, r) in recovery.iter().enumerate() {
            rows.push(((g + 1).to_string(), "atom_recovery", r.score));
        }
    } else if let Some(path) = &a.manifest {
        let manifest = load_manifest(path, Some(model.groups()))?;
        if manifest.is_empty() {
            return Err(Failure::Usage(format!(
                "manifest {} has no rows",
                path.display()
            )));
        }
        for g in 1..model.groups() {
            if let Some((batch, _)) = manifest.load_batch(g)? {
                batches.push(batch);
            }
        }
        if batches.is_empty() {
            return Err(Failure::Usage(format!(
                "manifest {} has no pairs in neighbouring groups",
                path.display()
            )));
        }
    }

    let mut all = Vec::new();
    for batch in &batches {
        let errs = batch_transfer_errors(&model, batch)?;
        let g = batch.group.to_string();
        rows.push((
            g.clone(),
            "transfer_error_median",
            median(&errs).expect("non-empty"),
        ));
        rows.push((
            g,
            "transfer_error_p90",
            quantile(&errs, 0.9).expect("non-empty"),
        ));
        all.extend(errs);
    }
    if !all.is_empty() {
        rows.push((
            "all".into(),
            "transfer_error_median",
            median(&all).expect("non-empty"),
        ));
        rows.push((
            "all".into(),
            "transfer_error_p90",
            quantile(&all, 0.9).expect("non-empty"),
        ));
    }

    let emit = |sink: &mut dyn Write| -> CmdResult {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["group", "metric", "value"])
            .map_err(csv_error)?;
        for (g, metric, v) in &rows {
            w.write_record([g.as_str(), metric, &v.to_string()])
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    };
    match &a.report {
        Some(path) => write_file(path, |w| emit(w)),
        None => emit(&mut std::io::stdout().lock()),
    }
}

pub fn cmd_gen_synthetic(a: &GenArgs) -> CmdResult {
    let mut spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(usage_if_input)?;
    let data = generate_synthetic(&spec)?;
    let n = export_synthetic(&spec, &data, &a.out_dir)?;
    println!(
        "wrote {} batches, {n} images to {}",
        data.batches.len(),
        a.out_dir.display()
    );
    Ok(())
}
