//! Command-line front door: budget | expert | distill | eval | export.
//!
//! Exit codes: 0 ok, 2 config, 3 I/O or format, 4 fingerprint mismatch.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use nsd_core::config::RunConfig;
use nsd_core::container::TensorContainer;
use nsd_core::dataset::{load_dataset, Dataset};
use nsd_core::decomposition::{budget_check, DistillState};
use nsd_core::error::Error;
use nsd_core::evalharness::{evaluate_synthetic, export_images};
use nsd_core::matching::{distill, train_expert, ExpertBank, StepMetrics, Trajectory};
use nsd_core::rng::SeedSplitter;
use nsd_core::transforms::init_distill_state;

#[derive(Parser)]
#[command(name = "nsd", version, about = "Spectral dataset distillation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Config file (flat `section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. --set distill.iterations=200
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Resolve decomposition dims and report the storage budget.
    Budget(RunArgs),
    /// Train expert trajectories on real data and persist the bank.
    Expert(RunArgs),
    /// Run (or resume) distillation against the expert bank.
    Distill(RunArgs),
    /// Train fresh models on a distilled checkpoint and report accuracy.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate; defaults to <out.dir>/state.nsdt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export the synthesized images of a checkpoint as a PGM/PPM grid.
    Export {
        /// Checkpoint file to render.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
        /// Grid columns.
        #[arg(long, default_value_t = 8)]
        cols: usize,
    },
}

fn main() -> ExitCode {
    nsd_core::par::init_threads_from_env();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Budget(args) => cmd_budget(&args),
        Cmd::Expert(args) => cmd_expert(&args),
        Cmd::Distill(args) => cmd_distill(&args),
        Cmd::Eval { run, checkpoint } => cmd_eval(&run, checkpoint.as_deref()),
        Cmd::Export { checkpoint, out, cols } => cmd_export(&checkpoint, &out, cols),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}

fn exit_code_of(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format { .. } | Error::Data(_) => 3,
        Error::Fingerprint(_) => 4,
        _ => 2,
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), Error> {
    let source = cfg.data_source()?;
    load_dataset(&source, cfg.dataset_normalize)
}

fn build_state(cfg: &RunConfig, train: &Dataset, split: &SeedSplitter) -> Result<DistillState, Error> {
    let budget = cfg.budget(train)?;
    let kind = cfg.transform_kind()?;
    let dims = cfg.dims_override(&budget)?;
    init_distill_state(
        &budget,
        &kind,
        cfg.n_tensors(train.num_classes),
        cfg.decomp_kernels,
        cfg.decomp_u1.value(),
        dims,
        cfg.label_rule()?,
        split,
        Some(train),
    )
}

fn cmd_budget(args: &RunArgs) -> Result<ExitCode, Error> {
    let cfg = args.load()?;
    let (train, _) = load_data(&cfg)?;
    let budget = cfg.budget(&train)?;
    let split = SeedSplitter::new(cfg.seed);
    let state = build_state(&cfg, &train, &split)?;
    let report = budget_check(&state, &budget);
    let dims = state.tensor_dims();
    let image = state.image_dims();
    println!(
        "tensors={} kernels={} t=({},{},{},{}) u=({},{},{},{})",
        state.num_tensors(),
        state.num_kernels(),
        dims[0], dims[1], dims[2], dims[3],
        image[0], image[1], image[2], image[3],
    );
    println!("stored={} allowed={} utilization={:.4}", report.stored, report.allowed, report.utilization);
    println!("ratio_percent={:.4}", budget.ratio_percent(train.len())?);
    if report.ok {
        println!("budget ok");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: stored {} exceeds allowed {}", report.stored, report.allowed);
        Ok(ExitCode::from(2))
    }
}

fn bank_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("bank")
}

fn state_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("state.nsdt")
}

fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("metrics.log")
}

fn cmd_expert(args: &RunArgs) -> Result<ExitCode, Error> {
    let cfg = args.load()?;
    let (train, _) = load_data(&cfg)?;
    let spec = cfg.model_spec(&train)?;
    let expert_cfg = cfg.expert_config();
    let split = SeedSplitter::new(cfg.seed);
    let dir = bank_dir(&cfg);
    fs::create_dir_all(&dir)?;
    let trajectories: Vec<Trajectory> = nsd_core::par::map_indexed(cfg.expert_count, |k| {
        let seed = split.indexed("expert", k as u64).gen::<u64>();
        train_expert(&train, &spec, &expert_cfg, seed)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    for (k, traj) in trajectories.iter().enumerate() {
        let c = traj.to_container(&train.fingerprint)?;
        c.write_to(&dir.join(format!("traj_{k:03}.nsdt")))?;
    }
    println!("trajectories={} snapshots_each={}", trajectories.len(), trajectories[0].len());
    println!("fingerprint={}", train.fingerprint);
    Ok(ExitCode::SUCCESS)
}

fn load_bank(cfg: &RunConfig, train: &Dataset) -> Result<ExpertBank, Error> {
    let dir = bank_dir(cfg);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "nsdt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no trajectories in {}", dir.display()),
        )));
    }
    let mut trajectories = Vec::with_capacity(paths.len());
    for p in &paths {
        let c = TensorContainer::read_from(p)?;
        let (traj, fp) = Trajectory::from_container(&c)?;
        if fp != train.fingerprint {
            return Err(Error::Fingerprint(format!(
                "bank {} was trained on different data",
                p.display()
            )));
        }
        trajectories.push(traj);
    }
    ExpertBank::new(trajectories, train.fingerprint.clone())
}

fn metric_line(m: &StepMetrics) -> String {
    let guided = match m.guided_loss {
        Some(v) => format!("{v:.9e}"),
        None => "-".to_string(),
    };
    format!(
        "iter={} match={:.9e} guided={} combined={:.9e}",
        m.iteration, m.match_loss, guided, m.combined
    )
}

fn write_state(cfg: &RunConfig, state: &DistillState, digest: &str, fingerprint: &str) -> Result<(), Error> {
    let mut c = state.to_container()?;
    c.insert_meta("config_digest", digest)?;
    c.insert_meta("fingerprint", fingerprint)?;
    let tmp = state_path(cfg).with_extension("tmp");
    c.write_to(&tmp)?;
    fs::rename(&tmp, state_path(cfg))?;
    Ok(())
}

fn cmd_distill(args: &RunArgs) -> Result<ExitCode, Error> {
    let cfg = args.load()?;
    let (train, _) = load_data(&cfg)?;
    let digest = cfg.digest(train.norm.as_ref());
    let bank = load_bank(&cfg, &train)?;
    let split = SeedSplitter::new(cfg.seed);
    fs::create_dir_all(&cfg.out_dir)?;

    let spath = state_path(&cfg);
    let mpath = metrics_path(&cfg);
    let mut state = if spath.exists() {
        let c = TensorContainer::read_from(&spath)?;
        let stored_digest = c.require_meta("config_digest")?;
        if stored_digest != digest {
            return Err(Error::Config(format!(
                "checkpoint was produced by config {stored_digest}, this run is {digest}"
            )));
        }
        let stored_fp = c.require_meta("fingerprint")?;
        if stored_fp != train.fingerprint {
            return Err(Error::Fingerprint("checkpoint belongs to different data".into()));
        }
        let s = DistillState::from_container(&c)?;
        println!("resuming from step {}", s.step);
        s
    } else {
        build_state(&cfg, &train, &split)?
    };

    // Keep only metric lines the checkpoint already covers, so a
    // resumed log is byte-identical to an uninterrupted one.
    let lines: Vec<String> = if mpath.exists() {
        fs::read_to_string(&mpath)?
            .lines()
            .take(state.step as usize)
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    let mut log_file = fs::File::create(&mpath)?;
    for l in &lines {
        writeln!(log_file, "{l}")?;
    }
    log_file.flush()?;

    let distill_cfg = cfg.distill_config();
    let started = Instant::now();
    let metrics = distill(
        &mut state,
        &bank,
        &train,
        &distill_cfg,
        &split,
        |m| {
            let line = metric_line(m);
            writeln!(log_file, "{line}").expect("metric log is writable");
            println!("{line} wall_ms={}", started.elapsed().as_millis());
        },
        |s| write_state(&cfg, s, &digest, &train.fingerprint),
    )?;
    log_file.flush()?;
    write_state(&cfg, &state, &digest, &train.fingerprint)?;
    println!(
        "done: {} steps, final combined {:.6e}",
        metrics.len(),
        metrics.last().map(|m| m.combined).unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &RunArgs, checkpoint: Option<&Path>) -> Result<ExitCode, Error> {
    let cfg = args.load()?;
    let (train, test) = load_data(&cfg)?;
    let digest = cfg.digest(train.norm.as_ref());
    let spath = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| state_path(&cfg));
    let c = TensorContainer::read_from(&spath)?;
    let state = DistillState::from_container(&c)?;
    let spec = cfg.model_spec(&train)?;
    let split = SeedSplitter::new(cfg.seed);
    let report = evaluate_synthetic(&state, &test, &spec, &cfg.eval_config(), &split, &digest)?;
    println!("{}", report.to_line());
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("eval.txt"), format!("{}\n", report.to_line()))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(checkpoint: &Path, out: &Path, cols: usize) -> Result<ExitCode, Error> {
    let c = TensorContainer::read_from(checkpoint)?;
    let state = DistillState::from_container(&c)?;
    export_images(&state, out, cols)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}
