use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fvlab::fixture::{write_micro_run, FixtureSpec, Variant};
use fvlab::pipeline::{compare_runs, run, RunLedger, RunManifest, Stage, LEDGER_FILE};
use fvlab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fvlab", version, about = "Function-vector steering and logit-lens diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// JSON run manifest; other flags override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Battery directory (templates.json plus one JSONL per task).
    #[arg(long)]
    battery: Option<PathBuf>,
    /// Output directory [env: FVLAB_OUT].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores [env: FVLAB_THREADS].
    #[arg(long)]
    threads: Option<usize>,
    /// Stages to run (repeatable); only meaningful with `all`.
    #[arg(long = "stage")]
    stages: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Zero-shot and few-shot baselines.
    Baseline(RunArgs),
    /// Function-vector extraction at every swept layer.
    Extract(RunArgs),
    /// IID layer x alpha sweeps.
    Steer(RunArgs),
    /// IID gate per task.
    Gate(RunArgs),
    /// Cross-template transfer matrix.
    Transfer(RunArgs),
    /// Zero-shot and post-steering logit lens.
    Lens(RunArgs),
    /// FV vocabulary projections.
    Project(RunArgs),
    /// Activation patching between templates.
    Patch(RunArgs),
    /// Correlations, regression, permutation tests, PCA.
    Stats(RunArgs),
    /// Emit report tables from finished stages.
    Report(RunArgs),
    /// Every stage, or the `--stage` subset.
    All(RunArgs),
    /// IID deltas of run B over run A.
    Compare {
        /// Ledger file or run output directory.
        a: PathBuf,
        b: PathBuf,
        /// Write the delta report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic model, a two-task battery and a manifest.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ArchArg::Gpt2)]
        arch: ArchArg,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ArchArg {
    Gpt2,
    Llama,
}

fn env_path(name: &str) -> Option<PathBuf> {
    std::env::var_os(name).map(PathBuf::from)
}

fn env_usize(name: &str) -> Result<Option<usize>> {
    match std::env::var(name) {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Parameter(format!("{name}={v} is not a count"))),
        Err(_) => Ok(None),
    }
}

fn build_manifest(args: &RunArgs, stages: Vec<Stage>) -> Result<RunManifest> {
    let out = args.out.clone().or_else(|| env_path("FVLAB_OUT"));
    let mut m = match &args.manifest {
        Some(p) => RunManifest::load(p)?,
        None => {
            let (Some(model), Some(battery), Some(out)) = (&args.model, &args.battery, &out) else {
                return Err(Error::Parameter(
                    "without --manifest, --model, --battery and --out are required".into(),
                ));
            };
            RunManifest::new(model, battery, out)
        }
    };
    if let Some(p) = &args.model {
        m.model = p.clone();
    }
    if let Some(p) = &args.battery {
        m.battery = p.clone();
    }
    if let Some(p) = out {
        m.out = p;
    }
    if let Some(s) = args.seed {
        m.seed = s;
    }
    if let Some(t) = args.threads.or(env_usize("FVLAB_THREADS")?) {
        m.threads = t;
    }
    m.stages = stages;
    Ok(m)
}

fn ledger_at(p: &Path) -> Result<RunLedger> {
    if p.is_dir() {
        RunLedger::load(&p.join(LEDGER_FILE))
    } else {
        RunLedger::load(p)
    }
}

fn run_stages(args: &RunArgs, stages: Vec<Stage>) -> Result<()> {
    let m = build_manifest(args, stages)?;
    let result = run(&m);
    // The ledger is written even when a stage fails.
    if let Ok(ledger) = RunLedger::load(&m.ledger_path()) {
        for (stage, rec) in &ledger.stages {
            let how = if rec.recomputed { "ran" } else { "cached" };
            println!(
                "{stage:<9} {:<8} {how:<6} {:>7} ms{}",
                format!("{:?}", rec.status).to_lowercase(),
                rec.wall_clock_ms,
                rec.error.as_deref().map(|e| format!("  {e}")).unwrap_or_default()
            );
        }
        println!("coarse IID configs: {}", ledger.coarse_configs);
    }
    result.map(|_| ())
}

fn dispatch(cmd: Command) -> Result<()> {
    let single = |args: &RunArgs, stage: Stage| {
        if !args.stages.is_empty() {
            return Err(Error::Parameter("--stage only applies to `all`".into()));
        }
        run_stages(args, vec![stage])
    };
    match cmd {
        Command::Baseline(a) => single(&a, Stage::Baseline),
        Command::Extract(a) => single(&a, Stage::Extract),
        Command::Steer(a) => single(&a, Stage::Steer),
        Command::Gate(a) => single(&a, Stage::Gate),
        Command::Transfer(a) => single(&a, Stage::Transfer),
        Command::Lens(a) => single(&a, Stage::Lens),
        Command::Project(a) => single(&a, Stage::Project),
        Command::Patch(a) => single(&a, Stage::Patch),
        Command::Stats(a) => single(&a, Stage::Stats),
        Command::Report(a) => single(&a, Stage::Report),
        Command::All(a) => {
            let mut stages = if a.stages.is_empty() {
                Stage::ALL.to_vec()
            } else {
                a.stages.iter().map(|s| s.parse()).collect::<Result<Vec<Stage>>>()?
            };
            stages.sort();
            stages.dedup();
            run_stages(&a, stages)
        }
        Command::Compare { a, b, out } => {
            let report = compare_runs(&ledger_at(&a)?, &ledger_at(&b)?)?;
            let value = serde_json::to_value(&report)?;
            match out {
                Some(p) => fvlab::table::write_json(&p, &value),
                None => {
                    print!("{}", fvlab::table::json_string(&value)?);
                    Ok(())
                }
            }
        }
        Command::Fixture {
            out,
            arch,
            layers,
            d_model,
            seed,
        } => {
            let spec = FixtureSpec {
                variant: match arch {
                    ArchArg::Gpt2 => Variant::Gpt2,
                    ArchArg::Llama => Variant::Llama,
                },
                n_layers: layers,
                d_model,
                seed,
                ..FixtureSpec::default()
            };
            let m = write_micro_run(&out, &spec)?;
            println!("manifest: {}", out.join("manifest.json").display());
            println!("model:    {}", m.model.display());
            println!("battery:  {}", m.battery.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fvlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
