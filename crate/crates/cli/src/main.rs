use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tdfn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Phase};
use tdfn::config::RunConfig;
use tdfn::data::{default_data_dir, Dataset, Split};
use tdfn::eval::{evaluate_budgets, evaluate_mcp_sweep, run_episode, sample_rng, EpisodeConfig, EvalReport, Policy};
use tdfn::fixation::SampleMode;
use tdfn::geometry::{Architecture, Geometry};
use tdfn::model::TdfnModel;
use tdfn::train::{EpochMetrics, PolicyMetrics, PolicyTrainer, TaskTrainer};
use tdfn::viz::write_panel;

#[derive(Parser)]
#[command(name = "tdfn", version, about = "Train and evaluate a task-driven fixation network on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network (`task`) or the fixation policy (`fpg`).
    Train {
        #[command(subcommand)]
        phase: TrainPhase,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(subcommand)]
        kind: EvalKind,
    },
    /// Write per-step PGM panels of fixation episodes.
    Visualize(VisualizeArgs),
}

#[derive(Subcommand)]
enum TrainPhase {
    /// Phase 1: everything but the policy head, with random fixations.
    Task(TrainArgs),
    /// Phase 2: the policy head alone; needs a phase-1 checkpoint.
    Fpg(TrainArgs),
}

#[derive(Subcommand)]
enum EvalKind {
    /// Accuracy at a fixed number of fixations.
    Budget(EvalArgs),
    /// Accuracy when episodes stop once the top class probability reaches
    /// a threshold.
    Mcp(EvalArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Output path (checkpoint, CSV file or panel directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Per-epoch metrics log (default: next to the checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Fixation budget(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// MCP threshold(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    threshold: Vec<f32>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    /// Evaluate only the first N validation samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    common: Common,
    /// Validation sample indices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<usize>,
    /// Maximum number of fixations.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    mode: Option<String>,
}

/// Error that should exit with the usage status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { phase } => match phase {
            TrainPhase::Task(args) => train_task(args),
            TrainPhase::Fpg(args) => train_fpg(args),
        },
        Command::Eval { kind } => match kind {
            EvalKind::Budget(args) => eval_budget(args),
            EvalKind::Mcp(args) => eval_mcp(args),
        },
        Command::Visualize(args) => visualize(args),
    }
}

/// Defaults, then the config file, then flags.
fn base_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data_dir {
        c.data_dir = Some(d.clone());
    }
    if let Some(f) = &common.from {
        c.from = Some(f.clone());
    }
    if let Some(o) = &common.out {
        c.out = Some(o.clone());
    }
    if let Some(s) = common.seed {
        c.train.seed = s;
    }
    Ok(c)
}

fn data_dir(c: &RunConfig) -> PathBuf {
    c.data_dir.clone().unwrap_or_else(default_data_dir)
}

fn load_split(c: &RunConfig, split: Split) -> Result<Dataset> {
    let dir = data_dir(c);
    Dataset::load(&dir, split, 32).with_context(|| {
        format!(
            "loading the {} split from {} (run scripts/fetch_mnist.sh or pass --data-dir)",
            split.as_str(),
            dir.display()
        )
    })
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn apply_train_flags(c: &mut RunConfig, args: &TrainArgs, phase: Phase) {
    if let Some(a) = args.alpha {
        c.train.alpha = a;
    }
    match phase {
        Phase::Fpg => {
            if let Some(e) = args.epochs {
                c.train.epochs_phase2 = e;
            }
            if let Some(b) = args.batch_size {
                c.train.fpg_batch_size = b;
            }
        }
        _ => {
            if let Some(e) = args.epochs {
                c.train.epochs_phase1 = e;
            }
            if let Some(b) = args.batch_size {
                c.train.batch_size = b;
            }
        }
    }
}

/// Opens the metrics log and writes the effective training config as `#`
/// lines. Paths are left out so logs of identical runs compare equal.
fn open_log(path: &Path, config: &RunConfig, header: &str) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for line in config.train.render().lines() {
        writeln!(f, "# {line}")?;
    }
    writeln!(f, "{header}")?;
    Ok(f)
}

fn checkpoint_out(c: &RunConfig, default: &str) -> Result<PathBuf> {
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(default));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(out)
}

fn log_path(args: &TrainArgs, out: &Path) -> PathBuf {
    args.log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.csv", out.display())))
}

fn train_task(args: TrainArgs) -> Result<()> {
    let mut c = base_config(&args.common)?;
    apply_train_flags(&mut c, &args, Phase::Task);
    c.train.validate()?;
    let out = checkpoint_out(&c, "checkpoints/task.tdfn")?;
    let data = load_split(&c, Split::Train)?;

    let mut trainer = match &c.from {
        Some(path) => {
            let ckpt = load(path)?;
            let mut t = TaskTrainer::new(ckpt.model, c.train.clone())?;
            if let (Phase::Task, Some(opt)) = (ckpt.phase, ckpt.optimizer) {
                t.adam = opt.adam;
                t.resume_at(ckpt.epochs as usize);
            }
            t
        }
        None => TaskTrainer::new(
            TdfnModel::new(Geometry::default(), Architecture::default(), c.train.seed)?,
            c.train.clone(),
        )?,
    };
    let log = log_path(&args, &out);
    let mut f = open_log(&log, &c, EpochMetrics::CSV_HEADER)?;
    for _ in 0..c.train.epochs_phase1 {
        let m = trainer.run_epoch(&data)?;
        println!("{}", m.csv_line());
        writeln!(f, "{}", m.csv_line())?;
        save_checkpoint(&trainer.checkpoint(), &out)?;
    }
    if c.train.epochs_phase1 == 0 {
        save_checkpoint(&trainer.checkpoint(), &out)?;
    }
    eprintln!("wrote {} and {}", out.display(), log.display());
    Ok(())
}

fn train_fpg(args: TrainArgs) -> Result<()> {
    let mut c = base_config(&args.common)?;
    apply_train_flags(&mut c, &args, Phase::Fpg);
    c.train.validate()?;
    let Some(from) = c.from.clone() else {
        return Err(usage(
            "`train fpg` needs a phase-1 checkpoint: pass --from <file> (create one with `tdfn train task`)",
        ));
    };
    let ckpt = load(&from)?;
    if ckpt.phase == Phase::Init {
        bail!("{} has not been through phase 1 yet; run `tdfn train task` first", from.display());
    }
    let out = checkpoint_out(&c, "checkpoints/fpg.tdfn")?;
    let data = load_split(&c, Split::Train)?;
    let mut trainer = PolicyTrainer::new(ckpt.model, c.train.clone())?;
    if let (Phase::Fpg, Some(opt)) = (ckpt.phase, ckpt.optimizer) {
        trainer.adam = opt.adam;
        trainer.resume_at(ckpt.epochs as usize);
    }
    let log = log_path(&args, &out);
    let mut f = open_log(&log, &c, PolicyMetrics::CSV_HEADER)?;
    for _ in 0..c.train.epochs_phase2 {
        let m = trainer.run_epoch(&data)?;
        println!("{}", m.csv_line());
        writeln!(f, "{}", m.csv_line())?;
        save_checkpoint(&trainer.checkpoint(), &out)?;
    }
    if c.train.epochs_phase2 == 0 {
        save_checkpoint(&trainer.checkpoint(), &out)?;
    }
    eprintln!("wrote {} and {}", out.display(), log.display());
    Ok(())
}

struct EvalSetup {
    config: RunConfig,
    model: TdfnModel,
    data: Dataset,
}

fn eval_setup(args: &EvalArgs) -> Result<EvalSetup> {
    let mut c = base_config(&args.common)?;
    if let Some(p) = &args.policy {
        c.policy = p.parse().map_err(|e: tdfn::Error| usage(e.to_string()))?;
    }
    if let Some(m) = &args.mode {
        c.mode = Some(m.parse().map_err(|e: tdfn::Error| usage(e.to_string()))?);
    }
    if let Some(l) = args.limit {
        c.limit = l;
    }
    let Some(from) = c.from.clone() else {
        return Err(usage("evaluation needs a checkpoint: pass --from <file>"));
    };
    let model = load(&from)?.model;
    let data = load_split(&c, Split::Validation)?;
    Ok(EvalSetup { config: c, model, data })
}

fn emit(reports: &[EvalReport], out: Option<&Path>) -> Result<()> {
    let mut text = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        text.push_str(&format!("{r}\n"));
    }
    print!("{text}");
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval_budget(args: EvalArgs) -> Result<()> {
    let budgets = match args.n.is_empty() {
        true => None,
        false => Some(args.n.clone()),
    };
    if !args.threshold.is_empty() {
        return Err(usage("`eval budget` takes --n; use `eval mcp` for thresholds"));
    }
    let s = eval_setup(&args)?;
    let regions = s.model.geometry.num_regions();
    let budgets = budgets.unwrap_or_else(|| vec![s.config.budget]);
    if let Some(bad) = budgets.iter().find(|&&n| n > regions) {
        return Err(usage(format!("budget {bad} is outside 0..={regions}")));
    }
    // The learned policy is scored greedily unless told otherwise.
    let mode = s.config.mode.unwrap_or(match s.config.policy {
        Policy::Fpg => SampleMode::Argmax,
        Policy::Random => SampleMode::Sample,
    });
    let reports = evaluate_budgets(&s.model, &s.data, s.config.policy, mode, &budgets, s.config.train.seed, s.config.limit)?;
    emit(&reports, s.config.out.as_deref())
}

fn eval_mcp(args: EvalArgs) -> Result<()> {
    if !args.n.is_empty() {
        return Err(usage("`eval mcp` takes --threshold; use `eval budget` for fixed budgets"));
    }
    if let Some(p) = &args.policy {
        if p != "fpg" {
            return Err(usage("MCP evaluation runs the learned policy only (--policy fpg)"));
        }
    }
    let s = eval_setup(&args)?;
    let thresholds = match (args.threshold.is_empty(), s.config.threshold) {
        (false, _) => args.threshold.clone(),
        (true, Some(t)) => vec![t],
        (true, None) => return Err(usage("`eval mcp` needs --threshold")),
    };
    if let Some(bad) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(usage(format!("threshold {bad} is outside (0, 1)")));
    }
    let mode = s.config.mode.unwrap_or(SampleMode::Sample);
    let reports = evaluate_mcp_sweep(&s.model, &s.data, mode, &thresholds, s.config.train.seed, s.config.limit)?;
    emit(&reports, s.config.out.as_deref())
}

fn visualize(args: VisualizeArgs) -> Result<()> {
    let mut c = base_config(&args.common)?;
    if let Some(p) = &args.policy {
        c.policy = p.parse().map_err(|e: tdfn::Error| usage(e.to_string()))?;
    }
    if let Some(m) = &args.mode {
        c.mode = Some(m.parse().map_err(|e: tdfn::Error| usage(e.to_string()))?);
    }
    if let Some(n) = args.n {
        c.budget = n;
    }
    if args.threshold.is_some() {
        c.threshold = args.threshold;
    }
    let Some(from) = c.from.clone() else {
        return Err(usage("visualize needs a checkpoint: pass --from <file>"));
    };
    let model = load(&from)?.model;
    let regions = model.geometry.num_regions();
    if c.budget > regions {
        return Err(usage(format!("--n {} is outside 0..={regions}", c.budget)));
    }
    let data = load_split(&c, Split::Validation)?;
    if let Some(&bad) = args.samples.iter().find(|&&i| i >= data.len()) {
        bail!("sample {bad} is out of range for {} validation images", data.len());
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("panels"));
    let episode = EpisodeConfig {
        policy: c.policy,
        mode: c.mode.unwrap_or(SampleMode::Sample),
        max_steps: c.budget,
        mcp_threshold: c.threshold,
        keep_reconstructions: true,
    };
    for &i in &args.samples {
        let mut rng = sample_rng(c.train.seed, i);
        let trace = run_episode(&model, &data.image_tensor(i), episode, &mut rng)?;
        let dir = out.join(format!("sample_{i:05}"));
        write_panel(&dir, &model.geometry, data.image(i), data.label(i), &trace)?;
        println!(
            "{}: label {} prediction {} after {} fixations",
            dir.display(),
            data.label(i),
            trace.prediction(),
            trace.steps_used()
        );
    }
    Ok(())
}
