mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use vbi_transfer::check::{run_suite, SuiteOptions};
use vbi_transfer::data::{DomainData, UnlabeledSet};
use vbi_transfer::evalrep::{report_table, BhmScores, RunMetric};
use vbi_transfer::hiermud::{load_model, predict_target, save_model, train, write_history_csv, TaskSpec};
use vbi_transfer::sim::{dataset_generate, read_manifest, MANIFEST_FILE};
use vbi_transfer::validate::{select, write_sweep_csv};
use vbi_transfer::{Error, Result};

use config::Config;

/// Written next to a checkpoint so `evaluate` knows how the run was made.
const RUN_FILE: &str = "run.toml";
const METRICS_FILE: &str = "metrics.csv";

mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const MISSING_DATA: u8 = 3;
    pub const DIVERGED: u8 = 4;
    pub const CHECK_FAILED: u8 = 5;
}

#[derive(Parser)]
#[command(name = "vbi-transfer", version, about = "Drive-by bridge damage diagnosis with hierarchical domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the experiment grid into a dataset directory.
    GenData(#[command(flatten)] Common),
    /// Train on the source bridge, adapting to the target bridge.
    Train(#[command(flatten)] Common),
    /// Pick hyperparameters by reverse validation.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Candidates trained at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a trained run on the labeled target trials.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Aggregate evaluations into a table and CSV.
    Report(#[command(flatten)] Common),
    /// Run the invariant and oracle suite.
    Check {
        #[command(flatten)]
        common: Common,
        /// Multiplies every training epoch count.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Leave out the multi-run transfer benchmark.
        #[arg(long)]
        skip_transfer: bool,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = Config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Creates `dir`, refusing to touch an existing `marker` unless forced.
fn prepare_out(dir: &Path, marker: &str, force: bool) -> Result<()> {
    if dir.join(marker).exists() && !force {
        return Err(Error::AlreadyExists(dir.join(marker)));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let grid = cfg.data.grid(cfg.seed);
    grid.validate()?;
    let out = c.out.clone().unwrap_or_else(|| cfg.data.root());
    fs::create_dir_all(&out)?;
    let manifest = dataset_generate(&grid, &out, c.force)?;
    println!("{} trials written to {}", manifest.n_trials(), out.display());
    Ok(())
}

fn missing_ok(e: Error) -> Result<()> {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Error::MissingData(_) => Ok(()),
        e => Err(e),
    }
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let tc = cfg.train.resolve(cfg.seed);
    let tasks = TaskSpec::bhm();
    tc.validate(&tasks)?;
    let name = format!("{}-{}-{}-s{}", cfg.train.baseline.name(), cfg.data.source, cfg.data.target, cfg.seed);
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    prepare_out(&out, RUN_FILE, c.force)?;

    let d = &cfg.data;
    let root = d.root();
    let manifest = read_manifest(&root).map_err(|e| missing(e, &root))?;
    let source = DomainData::load(&manifest, &root, &d.source, d.vehicle_id.as_deref(), d.augmentations, cfg.seed, &d.stft)?;
    let target_root = d.target_root();
    let load_target = || -> Result<DomainData> {
        let m = read_manifest(&target_root)?;
        DomainData::load(&m, &target_root, &d.target, d.vehicle_id.as_deref(), d.augmentations, cfg.seed, &d.stft)
    };
    let (target, eval) = match load_target() {
        Ok(t) => {
            let raw = (0..t.set.len()).step_by(d.augmentations + 1).collect::<Vec<_>>();
            (t.set.without_labels(), Some(t.set.subset(&raw)))
        }
        Err(e) if !tc.adapts() => {
            missing_ok(e)?;
            info!("no target data under {}; {} does not use it", target_root.display(), cfg.train.baseline.name());
            (UnlabeledSet::empty(source.set.shape()), None)
        }
        Err(e) => return Err(missing(e, &target_root)),
    };
    info!("training {} on {} source and {} target samples", cfg.train.baseline.name(), source.set.len(), target.len());
    let run = train(&tasks, &source.set, &target, &tc, eval.as_ref())?;
    save_model(&out, &run.model, &run.store)?;
    write_history_csv(fs::File::create(out.join("history.csv"))?, &tasks, &run.history)?;
    fs::write(out.join(RUN_FILE), cfg.to_toml())?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

/// Maps an unreadable dataset to `MissingData`.
fn missing(e: Error, dir: &Path) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::MissingData(format!("no dataset at {} ({} not found)", dir.display(), MANIFEST_FILE))
        }
        e => e,
    }
}

fn evaluate(c: &Common, run: &Path) -> Result<()> {
    let text = fs::read_to_string(run.join(RUN_FILE))
        .map_err(|_| Error::MissingData(format!("{} has no {RUN_FILE}; is it a train output?", run.display())))?;
    let cfg = Config::parse(&text)?;
    let (model, store) = load_model(run)?;
    let d = &cfg.data;
    let root = d.target_root();
    let manifest = read_manifest(&root).map_err(|e| missing(e, &root))?;
    let target = DomainData::load(&manifest, &root, &d.target, d.vehicle_id.as_deref(), 0, cfg.seed, &d.stft)?;
    let preds = predict_target(&model, &store, &target.set.without_labels())?;
    let scores = BhmScores::score(&preds, &target.set);
    let vehicle = d.vehicle_id.clone().unwrap_or_else(|| {
        let mut ids: Vec<&str> = manifest.entries.iter().map(|e| e.vehicle_id.as_str()).collect();
        ids.dedup();
        ids.join("+")
    });
    let rows: Vec<RunMetric> = BhmScores::TASKS
        .iter()
        .zip(scores.values())
        .map(|(task, value)| RunMetric {
            task: task.to_string(),
            method: cfg.train.baseline.name().into(),
            source: d.source.clone(),
            target: d.target.clone(),
            vehicle: vehicle.clone(),
            seed: cfg.seed,
            value,
        })
        .collect();
    let out = c.out.clone().unwrap_or_else(|| run.to_path_buf());
    prepare_out(&out, METRICS_FILE, c.force)?;
    let mut w = csv::Writer::from_path(out.join(METRICS_FILE)).map_err(Error::from)?;
    for r in &rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush()?;
    print!("{}", report_table(&rows)?.text);
    Ok(())
}

fn sweep(c: &Common, jobs: usize) -> Result<()> {
    let cfg = load_config(c)?;
    let tasks = TaskSpec::bhm();
    let base = cfg.train.resolve(cfg.seed);
    let space = cfg.sweep.space(base);
    for cand in space.candidates() {
        cand.cfg.validate(&tasks)?;
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("sweep"));
    prepare_out(&out, "sweep.csv", c.force)?;
    let d = &cfg.data;
    let root = d.root();
    let manifest = read_manifest(&root).map_err(|e| missing(e, &root))?;
    let source = DomainData::load(&manifest, &root, &d.source, d.vehicle_id.as_deref(), d.augmentations, cfg.seed, &d.stft)?;
    let troot = d.target_root();
    let tmanifest = read_manifest(&troot).map_err(|e| missing(e, &troot))?;
    let target = DomainData::load(&tmanifest, &troot, &d.target, d.vehicle_id.as_deref(), d.augmentations, cfg.seed, &d.stft)?;
    let sel = select(&space, &tasks, &source.set, &target.set.without_labels(), cfg.sweep.folds, cfg.seed, jobs)?;
    write_sweep_csv(fs::File::create(out.join("sweep.csv"))?, &sel.scores)?;

    let b = &sel.best.cfg;
    let mut best = cfg.clone();
    best.train.learning_rate = Some(b.learning_rate);
    best.train.batch_size = Some(b.batch_size);
    best.train.lambda_d0 = Some(b.lambda_d0);
    best.train.lambda_dm = Some(b.lambda_dm);
    best.train.arch = Some(config::ArchSpec::Custom(b.arch.clone()));
    fs::write(out.join("best.toml"), best.to_toml())?;
    for (cand, score) in &sel.scores {
        println!("{} reverse score {:.4}", cand.id, score.mean);
    }
    println!("best {} written to {}", sel.best.id, out.join("best.toml").display());
    Ok(())
}

fn collect_metrics(path: &Path, out: &mut Vec<RunMetric>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() || p.file_name().is_some_and(|n| n == METRICS_FILE) {
                collect_metrics(&p, out)?;
            }
        }
        return Ok(());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::MissingData(format!("{}: {e}", path.display())))?;
    for row in r.deserialize() {
        out.push(row.map_err(Error::from)?);
    }
    Ok(())
}

fn report(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let inputs = if cfg.report.inputs.is_empty() { vec![PathBuf::from("runs")] } else { cfg.report.inputs.clone() };
    let mut runs = Vec::new();
    for p in &inputs {
        if !p.exists() {
            return Err(Error::MissingData(format!("report input {} does not exist", p.display())));
        }
        collect_metrics(p, &mut runs)?;
    }
    if runs.is_empty() {
        return Err(Error::MissingData("no evaluations found".into()));
    }
    let table = report_table(&runs)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("report"));
    prepare_out(&out, "report.csv", c.force)?;
    fs::write(out.join("report.txt"), &table.text)?;
    fs::write(out.join("report.csv"), &table.csv)?;
    print!("{}", table.text);

    let r = &cfg.report;
    let mut absent = Vec::new();
    for m in &r.methods {
        for s in &r.seeds {
            for col in &r.columns {
                for task in BhmScores::TASKS {
                    let found = runs.iter().any(|x| &x.method == m && x.seed == *s && &x.column() == col && x.task == task);
                    if !found {
                        absent.push(format!("{m}/{task}/{col}/seed {s}"));
                    }
                }
            }
        }
    }
    if !absent.is_empty() {
        return Err(Error::MissingData(format!("{} requested runs missing: {}", absent.len(), absent.join(", "))));
    }
    Ok(())
}

fn check(c: &Common, scale: f64, skip_transfer: bool) -> Result<bool> {
    let work_dir = c.out.clone().unwrap_or_else(|| PathBuf::from("check"));
    fs::create_dir_all(&work_dir)?;
    let opts = SuiteOptions { work_dir: work_dir.clone(), epoch_scale: scale, transfer: !skip_transfer };
    let mut lines = String::new();
    let results = run_suite(&opts, |r| {
        println!("{}", r.line());
        lines.push_str(&r.line());
        lines.push('\n');
    });
    fs::write(work_dir.join("check.txt"), lines)?;
    Ok(results.iter().all(|r| r.passed))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::Toml(_) | Error::AlreadyExists(_) => exit::CONFIG,
        Error::MissingData(_) => exit::MISSING_DATA,
        Error::Diverged { .. } => exit::DIVERGED,
        _ => exit::OTHER,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train_cmd(c),
        Command::Sweep { common, jobs } => sweep(common, *jobs),
        Command::Evaluate { common, run } => evaluate(common, run),
        Command::Report(c) => report(c),
        Command::Check { common, scale, skip_transfer } => match check(common, *scale, *skip_transfer) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(exit::CHECK_FAILED),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
