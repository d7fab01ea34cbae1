//! Command-line front end. Each subcommand reads a run config, writes its
//! artifacts plus a `manifest.json` into one output directory, and maps
//! failures to exit codes (2 config, 3 numerical, 4 i/o).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{
    benchmark_for, grad_error_curve, pseudo_value_distribution, run_variants, score_designs, search_designs,
    standardized_offline, summarize, tasks_for, train_on, AblationAxis, GridRun, GridSpec, Method, Oracle, Variant,
    GRAD_ERROR_HEADER,
};
use crate::config::{parse_config, RunConfig, OUT_DIR_ENV};
use crate::dataio::{write_dataset, write_score_rows, ScoreRow};
use crate::error::CliError;
use crate::numerics::RngState;
use crate::search::write_designs;
use crate::sim4opt::TaskBundle;
use crate::surrogate::{SurrogateNet, CHECKPOINT_MAGIC};

#[derive(Debug, Parser)]
#[command(name = "optbias", version, about = "Offline optimization with synthetic-task meta-learned surrogates")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run config; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config and the OPTBIAS_OUT variable).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 runs strictly sequentially. Outputs do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Sim4opt,
    Random,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a benchmark's offline set and generate a synthetic task bundle.
    GenTasks {
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "sim4opt")]
        generator: Generator,
        /// Also score each trajectory's top design under the oracle.
        #[arg(long)]
        histogram: bool,
    },
    /// Meta-train (or pretrain) a surrogate on a task bundle.
    MetaTrain {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Pool all tasks into one regression problem instead.
        #[arg(long)]
        pretrain: bool,
    },
    /// Fine-tune a checkpoint on the offline set stored in a bundle.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Gradient search from the offline set; optionally score the designs.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        score: bool,
    },
    /// Run the method x benchmark x seed grid end to end.
    Bench {
        /// Restrict to these benchmarks (repeatable).
        #[arg(long = "benchmark")]
        benchmarks: Vec<String>,
        /// Restrict to these methods (repeatable).
        #[arg(long = "method")]
        methods: Vec<String>,
        /// Restrict to these seeds (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Gradient error of value-regression surrogates against training fraction.
    GradError {
        #[arg(long)]
        benchmark: Option<String>,
    },
    /// Ablation grid along one axis: meta, generator, gp or k.
    Ablate {
        #[arg(long)]
        axis: String,
    },
    /// Human-readable summary of a bundle, checkpoint or CSV file.
    Inspect { path: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenTasks { .. } => "gen-tasks",
            Command::MetaTrain { .. } => "meta-train",
            Command::Finetune { .. } => "finetune",
            Command::Search { .. } => "search",
            Command::Bench { .. } => "bench",
            Command::GradError { .. } => "grad-error",
            Command::Ablate { .. } => "ablate",
            Command::Inspect { .. } => "inspect",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PlannedRun {
    pub benchmark: String,
    pub method: String,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command. It deliberately leaves out the
/// output directory and worker count, neither of which affects results.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a Command,
    pub seeds: Vec<u64>,
    pub planned_runs: Vec<PlannedRun>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub config: &'a RunConfig,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    outputs: Vec<String>,
    inputs: Vec<InputHash>,
    planned: Vec<PlannedRun>,
    seeds: Vec<u64>,
}

impl Ctx {
    fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.out.join(name)
    }

    fn create(&mut self, name: &str) -> Result<std::io::BufWriter<fs::File>, CliError> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let f = fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(std::io::BufWriter::new(f))
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    fn seed(&self, s: Option<u64>) -> u64 {
        s.unwrap_or(self.cfg.seeds[0])
    }

    fn benchmark(&self, b: &Option<String>) -> Result<Oracle, CliError> {
        let name = b.clone().unwrap_or_else(|| self.cfg.benchmarks[0].clone());
        Oracle::by_name(&name).map_err(|e| CliError::config("benchmark", e.to_string()))
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { crate::error::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    // The override is kept out of the recorded config so that snapshots
    // do not depend on where a run was written.
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output.dir.clone());
    let jobs = match cli.common.jobs {
        Some(0) => return Err(CliError::config("--jobs", "must be >= 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::config("--jobs", e.to_string()))?;
    pool.install(|| dispatch(&cli, cfg, out))
}

fn dispatch(cli: &Cli, cfg: RunConfig, out: PathBuf) -> Result<(), CliError> {
    if let Command::Inspect { path } = &cli.command {
        let mut stdout = std::io::stdout().lock();
        return inspect(path, &mut stdout);
    }
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut ctx = Ctx {
        seeds: cfg.seeds.clone(),
        cfg,
        out,
        outputs: Vec::new(),
        inputs: Vec::new(),
        planned: Vec::new(),
    };
    if let Some(p) = &cli.common.config {
        ctx.input(p)?;
    }
    match &cli.command {
        Command::GenTasks {
            benchmark,
            seed,
            generator,
            histogram,
        } => gen_tasks(&mut ctx, benchmark, *seed, *generator, *histogram)?,
        Command::MetaTrain { tasks, seed, pretrain } => meta_train_cmd(&mut ctx, tasks, *seed, *pretrain)?,
        Command::Finetune { checkpoint, tasks, seed } => finetune_cmd(&mut ctx, checkpoint, tasks, *seed)?,
        Command::Search {
            checkpoint,
            tasks,
            benchmark,
            seed,
            score,
        } => search_cmd(&mut ctx, checkpoint, tasks, benchmark, *seed, *score)?,
        Command::Bench {
            benchmarks,
            methods,
            seeds,
        } => bench_cmd(&mut ctx, benchmarks, methods, seeds)?,
        Command::GradError { benchmark } => grad_error_cmd(&mut ctx, benchmark)?,
        Command::Ablate { axis } => ablate_cmd(&mut ctx, axis)?,
        Command::Inspect { .. } => unreachable!("handled above"),
    }
    let mut w = ctx.create("config.toml")?;
    w.write_all(ctx.cfg.to_toml().as_bytes())?;
    w.flush()?;
    let manifest_path = ctx.out.join("manifest.json");
    let manifest = Manifest {
        tool: "optbias",
        version: env!("CARGO_PKG_VERSION"),
        command: &cli.command,
        seeds: ctx.seeds.clone(),
        planned_runs: std::mem::take(&mut ctx.planned),
        inputs: std::mem::take(&mut ctx.inputs),
        outputs: ctx.outputs.clone(),
        config: &ctx.cfg,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| CliError::io(&manifest_path, e))?;
    log::info!("{} finished; outputs in {}", cli.command.name(), ctx.out.display());
    Ok(())
}

fn gen_tasks(ctx: &mut Ctx, benchmark: &Option<String>, seed: Option<u64>, generator: Generator, histogram: bool) -> Result<(), CliError> {
    let oracle = ctx.benchmark(benchmark)?;
    let seed = ctx.seed(seed);
    ctx.seeds = vec![seed];
    let b = benchmark_for(&oracle, ctx.cfg.n_full, ctx.cfg.frac, seed)?;
    let (ds, scaler) = standardized_offline(&b)?;
    let method = match generator {
        Generator::Sim4opt => Method::Optbias,
        Generator::Random => Method::OptbiasRandomGen,
    };
    let tasks = tasks_for(method, &ds, &ctx.cfg.pipeline(), seed)?;
    if histogram {
        let h = pseudo_value_distribution(&tasks, &oracle, &scaler, b.y_bounds, b.offline_subset.max_z())?;
        let mut w = ctx.create("pseudo_values.csv")?;
        h.write_csv(&mut w)?;
        w.flush()?;
        log::info!("exceed fraction {:.4}", h.exceed_fraction);
    }
    let mut w = ctx.create("offline.csv")?;
    write_dataset(&b.offline_subset, &mut w)?;
    w.flush()?;
    let name = match generator {
        Generator::Sim4opt => "sim4opt",
        Generator::Random => "random",
    };
    let bundle = TaskBundle::new(name, ctx.cfg.sim4opt.clone(), ds, scaler, tasks);
    let w = ctx.create("tasks.json")?;
    bundle.to_writer(w)?;
    Ok(())
}

fn load_bundle(ctx: &mut Ctx, path: &Path) -> Result<TaskBundle, CliError> {
    ctx.input(path)?;
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(TaskBundle::from_reader(std::io::BufReader::new(f))?)
}

fn load_net(ctx: &mut Ctx, path: &Path) -> Result<SurrogateNet, CliError> {
    ctx.input(path)?;
    SurrogateNet::load(path).map_err(|e| CliError::io(path, e))
}

fn meta_train_cmd(ctx: &mut Ctx, tasks: &Path, seed: Option<u64>, pretrain: bool) -> Result<(), CliError> {
    let seed = ctx.seed(seed);
    ctx.seeds = vec![seed];
    let bundle = load_bundle(ctx, tasks)?;
    let method = if pretrain { Method::OptbiasPretrain } else { Method::Optbias };
    let (net, stats) = train_on(method, &bundle.tasks, bundle.offline.dim(), &ctx.cfg.pipeline(), seed)?;
    let p = ctx.path("meta.ckpt");
    net.save(&p).map_err(|e| CliError::io(&p, e))?;
    let mut w = ctx.create("train_log.csv")?;
    stats.write_csv(&mut w, ctx.cfg.output.wall_clock)?;
    w.flush()?;
    Ok(())
}

fn finetune_cmd(ctx: &mut Ctx, checkpoint: &Path, tasks: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let seed = ctx.seed(seed);
    ctx.seeds = vec![seed];
    let bundle = load_bundle(ctx, tasks)?;
    let mut net = load_net(ctx, checkpoint)?;
    let mut rng = RngState::new(seed).derive(crate::bench::streams::FINETUNE);
    let losses = crate::metatrain::finetune(&mut net, &bundle.offline, &ctx.cfg.finetune, &mut rng)?;
    let p = ctx.path("finetuned.ckpt");
    net.save(&p).map_err(|e| CliError::io(&p, e))?;
    let mut w = ctx.create("finetune_log.csv")?;
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}

fn search_cmd(
    ctx: &mut Ctx,
    checkpoint: &Path,
    tasks: &Path,
    benchmark: &Option<String>,
    seed: Option<u64>,
    score: bool,
) -> Result<(), CliError> {
    let seed = ctx.seed(seed);
    ctx.seeds = vec![seed];
    let oracle = ctx.benchmark(benchmark)?;
    let bundle = load_bundle(ctx, tasks)?;
    let net = load_net(ctx, checkpoint)?;
    if bundle.offline.dim() != oracle.dim {
        return Err(CliError::config(
            "benchmark",
            format!("{} has dimension {}, the bundle {}", oracle.name(), oracle.dim, bundle.offline.dim()),
        ));
    }
    let designs = search_designs(&net, &bundle.offline, &bundle.scaler, &oracle.domain, &ctx.cfg.search, seed)?;
    let mut w = ctx.create("designs.csv")?;
    write_designs(&designs, &net, &bundle.scaler, &mut w).map_err(|e| CliError::Io(e.to_string()))?;
    w.flush()?;
    if score {
        let b = benchmark_for(&oracle, ctx.cfg.n_full, ctx.cfg.frac, seed)?;
        let r = score_designs("search", &b, &designs, &bundle.scaler, seed, 0.0)?;
        let mut w = ctx.create("scores.csv")?;
        write_score_rows(&[r.row(false)], &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn write_grid(ctx: &mut Ctx, prefix: &str, runs: &[GridRun]) -> Result<(), CliError> {
    let wall = ctx.cfg.output.wall_clock;
    let rows: Vec<ScoreRow> = runs.iter().map(|r| r.report.row(wall)).collect();
    let mut w = ctx.create(&format!("{prefix}scores.csv"))?;
    write_score_rows(&rows, &mut w)?;
    w.flush()?;
    let summary = summarize(&rows)?;
    let mut w = ctx.create(&format!("{prefix}summary.csv"))?;
    summary.write_csv(&mut w)?;
    w.flush()?;
    let mut w = ctx.create(&format!("{prefix}candidates.csv"))?;
    writeln!(w, "method,benchmark,seed,candidate,score")?;
    for r in runs {
        for (i, s) in r.report.candidate_scores.iter().enumerate() {
            writeln!(w, "{},{},{},{i},{s}", r.report.method, r.report.benchmark, r.report.seed)?;
        }
    }
    w.flush()?;
    for r in runs {
        let name = format!("{prefix}designs/{}_{}_{}.csv", r.report.benchmark, r.report.method, r.report.seed);
        let mut w = ctx.create(&name)?;
        write_designs(&r.artifacts.designs, &r.artifacts.net, &r.artifacts.scaler, &mut w)
            .map_err(|e| CliError::Io(e.to_string()))?;
        w.flush()?;
    }
    Ok(())
}

fn plan(ctx: &mut Ctx, spec: &GridSpec, labels: &[String]) {
    ctx.seeds = spec.seeds.clone();
    for b in &spec.benchmarks {
        for m in labels {
            for &s in &spec.seeds {
                ctx.planned.push(PlannedRun {
                    benchmark: b.clone(),
                    method: m.clone(),
                    seed: s,
                });
            }
        }
    }
}

fn bench_cmd(ctx: &mut Ctx, benchmarks: &[String], methods: &[String], seeds: &[u64]) -> Result<(), CliError> {
    let mut spec = ctx.cfg.grid();
    if !benchmarks.is_empty() {
        spec.benchmarks = benchmarks.to_vec();
    }
    if !methods.is_empty() {
        spec.methods = methods
            .iter()
            .map(|m| Method::parse(m).map_err(|e| CliError::config("--method", e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    if !seeds.is_empty() {
        spec.seeds = seeds.to_vec();
    }
    spec.validate().map_err(|e| CliError::config("benchmarks", e.to_string()))?;
    let cfg = ctx.cfg.pipeline();
    let variants: Vec<Variant> = spec.methods.iter().map(|&m| Variant::plain(m, &cfg)).collect();
    let labels: Vec<String> = variants.iter().map(|v| v.label.clone()).collect();
    plan(ctx, &spec, &labels);
    let runs = run_variants(&spec, &variants)?;
    write_grid(ctx, "", &runs)
}

fn ablate_cmd(ctx: &mut Ctx, axis: &str) -> Result<(), CliError> {
    let axis = AblationAxis::parse(axis).map_err(|e| CliError::config("--axis", e.to_string()))?;
    let spec = ctx.cfg.grid();
    let variants = axis.variants(&ctx.cfg.pipeline());
    let labels: Vec<String> = variants.iter().map(|v| v.label.clone()).collect();
    plan(ctx, &spec, &labels);
    let runs = run_variants(&spec, &variants)?;
    let prefix = format!("ablate_{}_", format!("{axis:?}").to_lowercase());
    write_grid(ctx, &prefix, &runs)
}

fn grad_error_cmd(ctx: &mut Ctx, benchmark: &Option<String>) -> Result<(), CliError> {
    let mut gcfg = ctx.cfg.grad_error.clone();
    if let Some(b) = benchmark {
        gcfg.benchmark = b.clone();
    }
    let oracle = Oracle::by_name(&gcfg.benchmark).map_err(|e| CliError::config("benchmark", e.to_string()))?;
    ctx.seeds = ctx.cfg.seeds.clone();
    let rows = grad_error_curve(&oracle, &gcfg.fractions, &gcfg, &ctx.cfg.seeds)?;
    let mut w = ctx.create("grad_error.csv")?;
    writeln!(w, "{GRAD_ERROR_HEADER}")?;
    for r in &rows {
        writeln!(w, "{},{},{}", r.fraction, r.mean_grad_error, r.std)?;
    }
    w.flush()?;
    let mut w = ctx.create("grad_error_seeds.csv")?;
    writeln!(w, "fraction,seed,grad_error")?;
    for r in &rows {
        for (s, e) in ctx.cfg.seeds.iter().zip(&r.per_seed) {
            writeln!(w, "{},{s},{e}", r.fraction)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a readable summary of a checkpoint, task bundle or CSV file.
pub fn inspect<W: Write>(path: &Path, w: &mut W) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let net = SurrogateNet::read_checkpoint(&mut bytes.as_slice()).map_err(|e| CliError::io(path, e))?;
        let a = net.arch();
        writeln!(w, "surrogate checkpoint {}", path.display())?;
        writeln!(w, "  input_dim    {}", a.input_dim)?;
        writeln!(w, "  hidden       {:?}", a.hidden)?;
        writeln!(w, "  leaky_slope  {}", a.leaky_slope)?;
        writeln!(w, "  norm         {:?}", a.norm)?;
        writeln!(w, "  mode         {:?}", net.mode())?;
        writeln!(w, "  parameters   {}", net.param_count())?;
        let l2 = net.params().iter().map(|p| p * p).sum::<f64>().sqrt();
        writeln!(w, "  param_l2     {l2:.6}")?;
        for (i, s) in net.stats().iter().enumerate() {
            let lo = s.var.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.var.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            writeln!(w, "  layer {i} running var in [{lo:.4e}, {hi:.4e}]")?;
        }
        return Ok(());
    }
    if bytes.first() == Some(&b'{') {
        let b = TaskBundle::from_reader(bytes.as_slice())?;
        writeln!(w, "task bundle {}", path.display())?;
        writeln!(w, "  generator    {}", b.generator)?;
        writeln!(w, "  offline      {} x {}", b.offline.len(), b.offline.dim())?;
        writeln!(w, "  tasks        {}", b.tasks.len())?;
        writeln!(w, "  task  family    lengthscale  variance  trajectories  states  pairs  label_range")?;
        for t in &b.tasks {
            let states = t.trajectories.first().map_or(0, |tr| tr.len());
            writeln!(
                w,
                "  {:<5} {:<9} {:<12.4} {:<9.4} {:<13} {:<7} {:<6} {:.4}",
                t.task_id,
                format!("{:?}", t.params.family).to_lowercase(),
                t.params.lengthscale,
                t.params.signal_variance,
                t.trajectories.len(),
                states,
                t.pair_count(),
                t.label_range()
            )?;
        }
        return Ok(());
    }
    let text = String::from_utf8(bytes).map_err(|_| CliError::io(path, "not a checkpoint, bundle or text file"))?;
    let mut lines = text.lines();
    writeln!(w, "csv {}", path.display())?;
    writeln!(w, "  columns  {}", lines.next().unwrap_or(""))?;
    writeln!(w, "  rows     {}", lines.count())?;
    Ok(())
}
