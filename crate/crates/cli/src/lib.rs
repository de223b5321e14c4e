//! Command-line experiment runner: simulate, train, sweep, evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fsrl::autodiff::AdamConfig;
use fsrl::datagen::{gen_example, Dependence, Kind};
use fsrl::dataio::{export_csv, export_schema, DatasetSchema, Preprocessor, Table};
use fsrl::downstream::ClassifierConfig;
use fsrl::experiment::{
    aggregate, default_alpha_grid, run_cell, sweep, AlphaSummary, CellResult, Mode, RunConfig, RunMetrics, Splits,
    Trained, DEFAULT_DEPENDENCE_ROWS,
};
use fsrl::mlp::MlpConfig;
use fsrl::par::Execution;
use fsrl::representation::{LossTrace, TrainingConfig};

/// Worker-slot count for sweeps.
pub const WORKERS_ENV: &str = "FSRL_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "fsrl",
    version,
    about = "Fair sufficient representation learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated dataset as train/val/test CSVs.
    Simulate(SimulateArgs),
    /// Train a representation and classifier, then evaluate on the test split.
    Train(TrainArgs),
    /// Train over a grid of alpha values and seeds.
    Sweep(SweepArgs),
    /// Recompute metrics of saved models on a labeled CSV.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    IndepLinear,
    IndepNonlinear,
    DepLinear,
    DepNonlinear,
}

impl Generator {
    fn parts(self) -> (Dependence, Kind) {
        match self {
            Generator::IndepLinear => (Dependence::Independent, Kind::Linear),
            Generator::IndepNonlinear => (Dependence::Independent, Kind::Nonlinear),
            Generator::DepLinear => (Dependence::Dependent, Kind::Linear),
            Generator::DepNonlinear => (Dependence::Dependent, Kind::Nonlinear),
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub generator: Generator,
    #[arg(long, default_value_t = 10_000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1_000)]
    pub n_val: usize,
    #[arg(long, default_value_t = 1_000)]
    pub n_test: usize,
    /// Desk-scale sizes 4000/500/500 (overrides the size flags).
    #[arg(long)]
    pub desk: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Location of train/val/test CSVs and their schema.
#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Directory holding train.csv, val.csv, test.csv and schema.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, requires_all = ["val", "test", "schema"], conflicts_with = "data")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> Result<DataPaths> {
        match (&self.data, &self.train) {
            (Some(dir), None) => Ok(DataPaths {
                train: dir.join("train.csv"),
                val: dir.join("val.csv"),
                test: dir.join("test.csv"),
                schema: self.schema.clone().unwrap_or_else(|| dir.join("schema.json")),
            }),
            (None, Some(train)) => Ok(DataPaths {
                train: train.clone(),
                val: self.val.clone().context("--val is required")?,
                test: self.test.clone().context("--test is required")?,
                schema: self.schema.clone().context("--schema is required")?,
            }),
            _ => bail!("give either --data DIR or --train/--val/--test/--schema"),
        }
    }
}

/// Model and optimizer settings shared by `train` and `sweep`.
#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lambda: f64,
    /// Hidden widths of the representation network, comma separated; `0` for a linear map.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub hidden: Vec<usize>,
    /// Representation dimension.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub decay_interval: usize,
    #[arg(long, default_value_t = 0.5)]
    pub decay_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw one Gaussian reference sample per run instead of one per batch.
    #[arg(long)]
    pub freeze_gaussian: bool,
    /// Return the weights of the epoch with the lowest validation loss.
    #[arg(long)]
    pub keep_best: bool,
    /// Hidden widths of the classifier head; empty gives logistic regression.
    #[arg(long, value_delimiter = ',')]
    pub clf_hidden: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub clf_epochs: usize,
    /// Feed raw representation values to the classifier.
    #[arg(long)]
    pub no_standardize: bool,
    /// Train the unconstrained end-to-end network instead.
    #[arg(long)]
    pub baseline: bool,
    /// Test rows used for the distance covariance diagnostics.
    #[arg(long, default_value_t = DEFAULT_DEPENDENCE_ROWS)]
    pub dependence_rows: usize,
}

impl ModelArgs {
    pub fn run_config(&self, input_dim: usize) -> RunConfig {
        let hidden: Vec<usize> = self.hidden.iter().copied().filter(|&w| w > 0).collect();
        let optimizer = AdamConfig {
            lr: self.lr,
            decay_interval: self.decay_interval,
            decay_rate: self.decay_rate,
            ..AdamConfig::default()
        };
        RunConfig {
            mode: if self.baseline { Mode::DnnBaseline } else { Mode::Fsrl },
            mlp: MlpConfig::new(input_dim, hidden, self.dim, self.seed),
            training: TrainingConfig {
                alpha: self.alpha,
                lambda: self.lambda,
                batch_size: self.batch_size,
                epochs: self.epochs,
                optimizer: optimizer.clone(),
                seed: self.seed,
                gaussian_resample: !self.freeze_gaussian,
                keep_best_validation: self.keep_best,
            },
            classifier: ClassifierConfig {
                hidden: self.clf_hidden.iter().copied().filter(|&w| w > 0).collect(),
                epochs: self.clf_epochs,
                batch_size: self.batch_size,
                optimizer,
                seed: self.seed,
                standardize: !self.no_standardize,
            },
            dependence_rows: self.dependence_rows,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Alpha grid, comma separated; defaults to 0.1, 0.15, ..., 1.0.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Run cells one at a time.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub model_dir: PathBuf,
    /// Labeled CSV with the same columns as the training data.
    #[arg(long)]
    pub data: PathBuf,
    /// Write the report here instead of printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub schema: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Digest with the path recorded relative to `dir`.
fn local_digest(dir: &Path, path: &Path) -> Result<FileDigest> {
    let mut d = digest(path)?;
    d.path = path.strip_prefix(dir).unwrap_or(path).to_path_buf();
    Ok(d)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimulationManifest {
    pub generator: Generator,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub files: Vec<FileDigest>,
}

pub fn simulate(args: &SimulateArgs) -> Result<SimulationManifest> {
    let (n_train, n_val, n_test) = if args.desk {
        (4000, 500, 500)
    } else {
        (args.n_train, args.n_val, args.n_test)
    };
    ensure!(n_train > 0 && n_val > 0 && n_test > 0, "split sizes must be positive");
    let (dep, kind) = args.generator.parts();
    let all = gen_example(dep, kind, n_train + n_val + n_test, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut files = Vec::new();
    let ranges = [
        ("train", 0, n_train),
        ("val", n_train, n_val),
        ("test", n_train + n_val, n_test),
    ];
    for (name, start, len) in ranges {
        let mut part = all.select(&(start..start + len).collect::<Vec<_>>());
        part.provenance = format!("{} split={name} rows={start}..{}", all.provenance, start + len);
        let path = args.out.join(format!("{name}.csv"));
        export_csv(&part, &path).with_context(|| format!("writing {}", path.display()))?;
        files.push(local_digest(&args.out, &path)?);
    }
    let schema_path = args.out.join("schema.json");
    export_schema(&all).save(&schema_path)?;
    files.push(local_digest(&args.out, &schema_path)?);
    let manifest = SimulationManifest {
        generator: args.generator,
        seed: args.seed,
        n_train,
        n_val,
        n_test,
        files,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Encoded splits plus what is needed to encode more data the same way.
pub struct LoadedData {
    pub splits: Splits,
    pub preprocessor: Preprocessor,
    pub inputs: Vec<FileDigest>,
    pub dropped: [usize; 3],
}

pub fn load_data(paths: &DataPaths) -> Result<LoadedData> {
    let schema = DatasetSchema::load(&paths.schema).with_context(|| format!("schema {}", paths.schema.display()))?;
    let read = |p: &Path| Table::read(p).with_context(|| format!("reading {}", p.display()));
    let (train, val, test) = (read(&paths.train)?, read(&paths.val)?, read(&paths.test)?);
    let preprocessor = Preprocessor::fit(&train, &schema)?;
    let mut enc = Vec::new();
    for (t, p) in [(&train, &paths.train), (&val, &paths.val), (&test, &paths.test)] {
        let mut e = preprocessor
            .transform(t)
            .with_context(|| format!("encoding {}", p.display()))?;
        e.batch.provenance = p.display().to_string();
        enc.push(e);
    }
    let dropped = [enc[0].dropped, enc[1].dropped, enc[2].dropped];
    let mut it = enc.into_iter().map(|e| e.batch);
    let splits = Splits {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    };
    let inputs = [&paths.train, &paths.val, &paths.test, &paths.schema]
        .into_iter()
        .map(|p| digest(p))
        .collect::<Result<_>>()?;
    Ok(LoadedData {
        splits,
        preprocessor,
        inputs,
        dropped,
    })
}

/// Combined hash of the input files, in order.
fn content_hash(inputs: &[FileDigest]) -> String {
    let mut h = Sha256::new();
    for f in inputs {
        h.update(f.sha256.as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Traces {
    pub representation: Option<LossTrace>,
    pub classifier: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub input_hash: String,
    /// Rows dropped for missing values in train, val and test.
    pub dropped_rows: [usize; 3],
    pub evaluated_on: PathBuf,
    pub traces: Option<Traces>,
    pub metrics: RunMetrics,
    /// GAP scaled by 100.
    pub gap_percent: Option<f64>,
    pub wall_clock_secs: f64,
}

pub const METRICS_HEADER: &str = "alpha,seed,mode,accuracy,error_rate,delta_dp,gap,dcov_ry,dcov_ra,energy_gauss";

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Fsrl => "fsrl",
        Mode::DnnBaseline => "dnn_baseline",
    }
}

pub fn metrics_row(alpha: f64, seed: u64, mode: Mode, m: &RunMetrics) -> String {
    format!(
        "{alpha},{seed},{},{},{},{},{},{},{},{}",
        mode_name(mode),
        m.accuracy,
        m.error_rate,
        m.delta_dp,
        m.gap.map_or(String::new(), |g| g.to_string()),
        m.dcov_ry,
        m.dcov_ra,
        m.energy_gauss
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn train(args: &TrainArgs) -> Result<RunReport> {
    let start = Instant::now();
    let paths = args.data.paths()?;
    let data = load_data(&paths)?;
    let cfg = args.model.run_config(data.splits.train.dim());
    cfg.check()?;
    let out = run_cell(&cfg, &data.splits)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out.join("models.json"), &out.trained)?;
    data.preprocessor.save(args.out.join("preprocessor.json"))?;
    let report = RunReport {
        input_hash: content_hash(&data.inputs),
        inputs: data.inputs,
        dropped_rows: data.dropped,
        evaluated_on: paths.test.clone(),
        traces: Some(Traces {
            representation: out.representation_trace,
            classifier: out.classifier_trace,
        }),
        gap_percent: out.metrics.gap.map(|g| 100.0 * g),
        metrics: out.metrics,
        config: cfg,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&args.out.join("report.json"), &report)?;
    let row = metrics_row(
        report.config.training.alpha,
        report.config.training.seed,
        report.config.mode,
        &report.metrics,
    );
    fs::write(args.out.join("metrics.csv"), format!("{METRICS_HEADER}\n{row}\n"))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepReport {
    pub base_config: RunConfig,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub input_hash: String,
    pub cells: Vec<CellResult>,
    pub summary: Vec<AlphaSummary>,
    pub wall_clock_secs: f64,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.metrics.is_err()).count()
    }
}

pub const SUMMARY_HEADER: &str = "alpha,succeeded,failed,accuracy_mean,accuracy_sd,error_rate_mean,error_rate_sd,\
delta_dp_mean,delta_dp_sd,gap_mean,gap_sd,dcov_ry_mean,dcov_ry_sd,dcov_ra_mean,dcov_ra_sd,energy_gauss_mean,energy_gauss_sd";

fn summary_row(s: &AlphaSummary) -> String {
    let cols = [
        s.accuracy,
        s.error_rate,
        s.delta_dp,
        s.gap,
        s.dcov_ry,
        s.dcov_ra,
        s.energy_gauss,
    ];
    let mut row = format!("{},{},{}", s.alpha, s.succeeded, s.failed);
    for c in cols {
        match c {
            Some(v) => row.push_str(&format!(",{},{}", v.mean, v.sd)),
            None => row.push_str(",,"),
        }
    }
    row
}

pub fn run_sweep(args: &SweepArgs) -> Result<SweepReport> {
    let start = Instant::now();
    let data = load_data(&args.data.paths()?)?;
    let base = args.model.run_config(data.splits.train.dim());
    base.check()?;
    let alphas = if args.alphas.is_empty() {
        default_alpha_grid()
    } else {
        args.alphas.clone()
    };
    ensure!(!args.seeds.is_empty(), "at least one seed is required");
    let exec = if args.sequential {
        Execution::Sequential
    } else {
        Execution::available()
    };
    let cells = sweep(&base, &data.splits, &alphas, &args.seeds, exec);
    let summary = aggregate(&cells);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut rows = format!("{METRICS_HEADER},error\n");
    for c in &cells {
        match &c.metrics {
            Ok(m) => rows.push_str(&format!("{},\n", metrics_row(c.alpha, c.seed, base.mode, m))),
            Err(e) => rows.push_str(&format!(
                "{},{},{},,,,,,,,\"{}\"\n",
                c.alpha,
                c.seed,
                mode_name(base.mode),
                e.replace('"', "'")
            )),
        }
    }
    fs::write(args.out.join("cells.csv"), rows)?;
    let mut table = format!("{SUMMARY_HEADER}\n");
    for s in &summary {
        table.push_str(&summary_row(s));
        table.push('\n');
    }
    fs::write(args.out.join("summary.csv"), table)?;
    let report = SweepReport {
        base_config: base,
        alphas,
        seeds: args.seeds.clone(),
        input_hash: content_hash(&data.inputs),
        inputs: data.inputs,
        cells,
        summary,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&args.out.join("sweep.json"), &report)?;
    Ok(report)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<RunReport> {
    let start = Instant::now();
    let trained: Trained = read_json(&args.model_dir.join("models.json"))?;
    let preprocessor = Preprocessor::load(args.model_dir.join("preprocessor.json"))?;
    let train_report: RunReport = read_json(&args.model_dir.join("report.json"))?;
    let table = Table::read(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let encoded = preprocessor
        .transform(&table)
        .with_context(|| format!("{} does not match the training schema", args.data.display()))?;
    let expected = trained.representation().input_dim();
    ensure!(
        encoded.batch.dim() == expected,
        "encoded data has {} columns, model expects {expected}",
        encoded.batch.dim()
    );
    let cfg = train_report.config;
    let metrics = trained.evaluate(&encoded.batch, cfg.dependence_rows, cfg.training.seed)?;
    let inputs = vec![digest(&args.data)?];
    let report = RunReport {
        input_hash: content_hash(&inputs),
        inputs,
        dropped_rows: [0, 0, encoded.dropped],
        evaluated_on: args.data.clone(),
        traces: None,
        gap_percent: metrics.gap.map(|g| 100.0 * g),
        metrics,
        config: cfg,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    match &args.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(report)
}

/// Applies the worker-slot count from the environment to the global pool.
pub fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .with_context(|| format!("{WORKERS_ENV}={v:?} is not a count"))?;
    ensure!(n > 0, "{WORKERS_ENV} must be at least 1");
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker pool")?;
    Ok(())
}

/// Runs a command; `Ok(false)` means some sweep cells failed.
pub fn run(cli: &Cli) -> Result<bool> {
    configure_workers()?;
    match &cli.command {
        Command::Simulate(a) => {
            let m = simulate(a)?;
            eprintln!(
                "wrote {} / {} / {} rows to {}",
                m.n_train,
                m.n_val,
                m.n_test,
                a.out.display()
            );
            Ok(true)
        }
        Command::Train(a) => {
            let r = train(a)?;
            let m = r.metrics;
            eprintln!(
                "accuracy {:.4}  error {:.4}  delta_dp {:.4}  dcov_ry {:.4}  dcov_ra {:.4}  energy {:.4}",
                m.accuracy, m.error_rate, m.delta_dp, m.dcov_ry, m.dcov_ra, m.energy_gauss
            );
            Ok(true)
        }
        Command::Sweep(a) => {
            let r = run_sweep(a)?;
            for c in r.cells.iter().filter(|c| c.metrics.is_err()) {
                eprintln!(
                    "cell alpha={} seed={} failed: {}",
                    c.alpha,
                    c.seed,
                    c.metrics.as_ref().unwrap_err()
                );
            }
            eprintln!("{} cells, {} failed", r.cells.len(), r.failures());
            Ok(r.failures() == 0)
        }
        Command::Evaluate(a) => {
            evaluate(a)?;
            Ok(true)
        }
    }
}
