//! Command-line front end: data generation, training, evaluation and
//! diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evfuse::checkpoint;
use evfuse::checks;
use evfuse::config::Config;
use evfuse::datagen::{generate, ingest, split, write_jsonl, AlignedInstance, IngestOptions};
use evfuse::gradcheck::GradCheckOptions;
use evfuse::metrics::{compare_branches, render_table, write_metrics_csv, Scaling};
use evfuse::model::Stage;
use evfuse::pipeline::run_training;
use evfuse::report::{align_report, gate_report, write_jsonl as write_records};
use evfuse::trainer::TrainState;
use evfuse::{Error, ErrorClass};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "evfuse",
    version,
    about = "Event-conditioned gated text/time-series forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write it as JSON lines.
    Generate(GenerateArgs),
    /// Run the three training stages and write a checkpoint and logs.
    Train(TrainArgs),
    /// Score the restricted and full forecasts on a split.
    Eval(EvalArgs),
    /// Per-instance gate openness, Granger utility and responsibility.
    GateReport(GateArgs),
    /// Anchor tokens with their most similar time step.
    AlignReport(AlignArgs),
    /// Finite-difference gradient checks of the registered losses and blocks.
    GradCheck(GradCheckArgs),
    /// Print the default configuration.
    InitConfig(InitArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Include the simulator's text_informative flag on every record.
    #[arg(long)]
    with_oracle_flags: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoint.bin, train_log.csv and validation_log.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stages to run, e.g. `1,2,3` or `3`.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3])]
    stages: Vec<usize>,
    /// Stop after this many epochs in total (resumable).
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// Configuration for ingest shapes and the split; defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Accepted for interface uniformity; evaluation is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Report MSE ×10⁴, MAE ×10³ and DHR ×10² with two decimals (default).
    #[arg(long, conflicts_with = "raw")]
    scaled: bool,
    /// Report unscaled values.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct GateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write gate_histogram.svg.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// A registered module name or `all`.
    #[arg(long, default_value = "all")]
    module: String,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Entries sampled per parameter tensor; 0 checks all.
    #[arg(long, default_value_t = 0)]
    entries: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct InitArgs {
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed stored in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Desk-scale model and learning rate instead of the full-size defaults.
    #[arg(long)]
    desk: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Usage => EXIT_USAGE,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numerical => EXIT_NUMERICAL,
    }
}

fn write_file(path: &Path, text: &str) -> evfuse::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_stages(nums: &[usize]) -> evfuse::Result<Vec<Stage>> {
    let mut stages: Vec<Stage> = nums
        .iter()
        .map(|&n| {
            Stage::ALL
                .get(n.wrapping_sub(1))
                .copied()
                .ok_or_else(|| Error::Config(format!("stage must be 1, 2 or 3, got {n}")))
        })
        .collect::<evfuse::Result<_>>()?;
    stages.sort();
    stages.dedup();
    Ok(stages)
}

fn load_config(path: Option<&Path>) -> evfuse::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn load_split(args: &DataArgs, state: &TrainState) -> evfuse::Result<(Config, Vec<AlignedInstance>)> {
    let cfg = load_config(args.config.as_deref())?;
    let dims = state.model.dims;
    let opts = IngestOptions {
        lookback: None,
        horizon: Some(dims.horizon),
        d_x: Some(dims.d_x),
        d_y: Some(dims.d_y),
        vocab: Some(dims.vocab),
    };
    let data = ingest(&args.data, opts)?;
    let data = match args.split.as_str() {
        "all" => data,
        name => {
            let s = split(data, &cfg.split)?;
            match name {
                "train" => s.train,
                "val" => s.val,
                "test" => s.test,
                other => {
                    return Err(Error::Config(format!(
                        "unknown split `{other}`; valid: train, val, test, all"
                    )))
                }
            }
        }
    };
    if data.is_empty() {
        return Err(Error::Input(format!("split `{}` is empty", args.split)));
    }
    Ok((cfg, data))
}

fn trained_model(args: &DataArgs) -> evfuse::Result<TrainState> {
    let state = checkpoint::load(&args.checkpoint)?;
    if state.progress[Stage::Multimodal as usize] == 0 {
        return Err(Error::Contract(format!(
            "checkpoint {} has no multimodal training; run stage 3 first",
            args.checkpoint.display()
        )));
    }
    Ok(state)
}

fn cmd_generate(a: GenerateArgs) -> evfuse::Result<()> {
    let mut cfg = Config::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.scenario.seed = s;
    }
    let data = generate(&cfg.scenario)?;
    write_jsonl(&a.out, &data, a.with_oracle_flags)?;
    log::info!("wrote {} events to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> evfuse::Result<()> {
    let mut cfg = Config::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let stages = parse_stages(&a.stages)?;
    let mut opts = IngestOptions::from_scenario(&cfg.scenario);
    opts.lookback = None;
    let data = ingest(&a.data, opts)?;
    let state = a.resume.as_deref().map(checkpoint::load).transpose()?;
    if let Some(s) = &state {
        if s.model.config != cfg.model {
            log::warn!("model section of the config differs from the checkpoint; the checkpoint wins");
        }
    }
    let run = run_training(&cfg, data, state, &stages, a.max_epochs)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    checkpoint::save(&run.state, &a.out_dir.join("checkpoint.bin"))?;
    run.log.write_steps(&a.out_dir.join("train_log.csv"))?;
    run.log.write_validation(&a.out_dir.join("validation_log.csv"))?;
    for t in &run.state.transitions {
        log::info!("stage transition {:?} -> {:?}, skipped {:?}", t.from, t.to, t.skipped);
    }
    log::info!(
        "trained to step {} (epochs per stage {:?})",
        run.state.step,
        run.state.progress
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> evfuse::Result<()> {
    let state = trained_model(&a.data)?;
    let (_, data) = load_split(&a.data, &state)?;
    let name = a
        .data
        .data
        .file_stem()
        .map_or_else(|| "data".to_string(), |s| s.to_string_lossy().into_owned());
    let report = compare_branches(&state.model, &name, &data)?;
    let scaling = if a.raw { Scaling::Raw } else { Scaling::Scaled };
    write_metrics_csv(&a.out, std::slice::from_ref(&report), scaling)?;
    print!("{}", render_table(&[report], scaling));
    Ok(())
}

fn cmd_gate(a: GateArgs) -> evfuse::Result<()> {
    let state = trained_model(&a.data)?;
    let (_, data) = load_split(&a.data, &state)?;
    let report = gate_report(&state.model, &data)?;
    report.write_csvs(&a.out_dir, "gate")?;
    if a.svg {
        write_file(&a.out_dir.join("gate_histogram.svg"), &report.svg())?;
    }
    for m in &report.means {
        println!("{:<24} n={:<5} mean openness {:.4}", m.category, m.n, m.mean_openness);
    }
    Ok(())
}

fn cmd_align(a: AlignArgs) -> evfuse::Result<()> {
    let state = trained_model(&a.data)?;
    let (_, data) = load_split(&a.data, &state)?;
    let records = align_report(&state.model, &data)?;
    write_records(&a.out, &records)?;
    log::info!("wrote {} anchor records to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> evfuse::Result<bool> {
    let modules = checks::resolve(&a.module)?;
    let opts = GradCheckOptions {
        tol: a.tol,
        max_entries_per_param: (a.entries > 0).then_some(a.entries),
        ..GradCheckOptions::default()
    };
    let mut all_passed = true;
    for m in modules {
        let mut worst = 0.0f64;
        let mut passed = true;
        for seed in a.seed..a.seed + a.seeds {
            let r = checks::run_module(m, seed, GradCheckOptions { seed, ..opts })?;
            worst = worst.max(r.max_rel_err);
            passed &= r.passed;
        }
        println!(
            "{:<14} {}  max rel err {worst:.3e} over {} seed(s)",
            m,
            if passed { "PASS" } else { "FAIL" },
            a.seeds
        );
        all_passed &= passed;
    }
    Ok(all_passed)
}

fn cmd_init(a: InitArgs) -> evfuse::Result<()> {
    let mut cfg = if a.desk { Config::desk() } else { Config::default() };
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.scenario.seed = s;
    }
    let text = cfg.to_json_pretty()? + "\n";
    match a.out {
        Some(p) => write_file(&p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GateReport(a) => cmd_gate(a),
        Command::AlignReport(a) => cmd_align(a),
        Command::GradCheck(a) => match cmd_grad_check(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(EXIT_NUMERICAL);
            }
            Err(e) => Err(e),
        },
        Command::InitConfig(a) => cmd_init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
