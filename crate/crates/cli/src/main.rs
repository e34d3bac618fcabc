use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use onebit::doa::GridKind;
use onebit::experiments::{
    cmd_recover, cmd_train, run_fig3, run_fig4, run_fig6, run_table1, DoaModels, ExperimentConfig, ExperimentResult,
    Fig3Models, RecoverInput, RecoverSolver, Scale, TrainTask,
};
use onebit::unfolded::{load_model, save_model, UnfoldedModel};
use onebit::{Error, RngSeed};

/// Caps the worker threads used for Monte-Carlo runs and mini-batches.
const THREADS_ENV: &str = "ONEBIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "onebit", version, about = "1-bit sparse recovery and DOA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Preset problem sizes; defaults to the config file's `scale`, else desk.
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// TOML file overriding preset values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set signal.layers=4`. Repeatable; wins over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Paper,
    Desk,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Paper => Scale::Paper,
            ScaleArg::Desk => Scale::Desk,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    /// Sparse recovery network on the signal settings.
    Signal,
    /// DOA network on the uniform grid.
    DoaUniform,
    /// DOA network on the orthogonal grid.
    DoaOrthogonal,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write the model, training log and optimizer state.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "signal")]
        task: TaskArg,
        /// Output directory.
        #[arg(long, default_value = "train_out")]
        out: PathBuf,
    },
    /// Recover signals from a measurement file, or a DOA spectrum from a scenario file.
    Recover {
        #[command(flatten)]
        common: Common,
        /// Sensing matrix CSV, one row per measurement.
        #[arg(long, requires = "measurements", conflicts_with = "scenario")]
        matrix: Option<PathBuf>,
        /// ±1 measurements CSV, one measurement vector per row.
        #[arg(long, requires = "matrix")]
        measurements: Option<PathBuf>,
        /// Ground-truth signals CSV; enables loss and NMSE reporting.
        #[arg(long, requires = "matrix")]
        truth: Option<PathBuf>,
        /// DOA scenario TOML file.
        #[arg(long, required_unless_present = "matrix")]
        scenario: Option<PathBuf>,
        /// Trained model; without it FPC is used.
        #[arg(long, conflicts_with_all = ["fpc_config", "music"])]
        model: Option<PathBuf>,
        /// FPC settings TOML (tau, lambda0, continuation_factor, inner_iters, outer_iters).
        #[arg(long, conflicts_with = "music")]
        fpc_config: Option<PathBuf>,
        /// Use 1-bit MUSIC (scenario input only).
        #[arg(long, requires = "scenario")]
        music: bool,
        #[arg(long, default_value = "recovered.csv")]
        out: PathBuf,
    },
    /// Mean NMSE against depth for truncated FPC and both normalization variants.
    Fig3 {
        #[command(flatten)]
        common: Common,
        /// Pre-trained final-normalization model (trained if omitted).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Pre-trained per-layer-normalization model (trained if omitted).
        #[arg(long)]
        layer_norm_model: Option<PathBuf>,
        #[arg(long, default_value = "fig3.csv")]
        out: PathBuf,
    },
    /// Test NMSE and training time of the three parameter-tying variants.
    Table1 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "table1.csv")]
        out: PathBuf,
    },
    /// DOA error against SNR and snapshot count for FPC, the network and MUSIC.
    Fig4 {
        #[command(flatten)]
        common: Common,
        /// Pre-trained uniform-grid DOA model (trained if omitted).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "fig4.csv")]
        out: PathBuf,
    },
    /// DOA error of FPC and the network on the uniform and orthogonal grids.
    Fig6 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model_uniform: Option<PathBuf>,
        #[arg(long)]
        model_orthogonal: Option<PathBuf>,
        #[arg(long, default_value = "fig6.csv")]
        out: PathBuf,
    },
}

fn presets_help() -> String {
    let mut s = String::from("Scale presets (change any value with --config or --set):\n");
    for scale in [Scale::Desk, Scale::Paper] {
        let c = ExperimentConfig::preset(scale);
        let (sig, d) = (&c.signal, &c.doa);
        s.push_str(&format!(
            "  {scale}: signal M={} N={} K={}, {} train / {} test pairs, up to {} layers ({} for table1), \
             {} epochs per phase\n         DOA M={} sensors, {}-point grid, sources {:?}, J={} runs, {} layers, \
             {} training snapshots with {}..={} sources\n",
            sig.m,
            sig.n,
            sig.k,
            sig.train_pairs,
            sig.test_pairs,
            sig.layers,
            sig.table1_layers,
            sig.train.epochs_per_stage,
            d.sensors,
            d.grid_size,
            d.doas,
            d.runs,
            d.layers,
            d.train_pairs,
            d.train_sources_min,
            d.train_sources_max,
        ));
    }
    s.push_str(&format!(
        "\nEnvironment:\n  {THREADS_ENV}=N  cap worker threads\n\nExit codes: 0 success, 1 I/O or data error, \
         2 config or usage error, 3 missing model, 4 numeric failure\n"
    ));
    s
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingModel(_) => 3,
        Error::Numeric(_) | Error::Degenerate(_) | Error::InsufficientSnapshots { .. } => 4,
        _ => 1,
    }
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, RngSeed), Error> {
    let text = match &common.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let cfg = ExperimentConfig::resolve(common.scale.map(Scale::from), text.as_deref(), &common.overrides).map_err(
        |e| match (e, &common.config) {
            (Error::Config(msg), Some(p)) => Error::Config(format!("{}: {msg}", p.display())),
            (e, _) => e,
        },
    )?;
    Ok((cfg, RngSeed(common.seed)))
}

fn load_optional(path: Option<&Path>) -> Result<Option<UnfoldedModel>, Error> {
    path.map(load_model).transpose()
}

/// Writes the CSV, its metadata sidecar and any trained models next to it.
fn save_result(result: &ExperimentResult, out: &Path) -> Result<(), Error> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let meta = result.save(out)?;
    println!("wrote {} ({} rows) and {}", out.display(), result.rows.len(), meta.display());
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("result");
    for (label, model) in &result.models {
        let path = out.with_file_name(format!("{stem}_{label}.dfpc"));
        save_model(model, &path)?;
        println!("wrote {}", path.display());
    }
    for note in &result.meta.notes {
        println!("note: {note}");
    }
    for row in &result.rows {
        println!("{}", row.csv_line());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { common, task, out } => {
            let (cfg, seed) = resolve(&common)?;
            let task = match task {
                TaskArg::Signal => TrainTask::Signal,
                TaskArg::DoaUniform => TrainTask::Doa(GridKind::Uniform),
                TaskArg::DoaOrthogonal => TrainTask::Doa(GridKind::Orthogonal),
            };
            let outputs = cmd_train(&cfg, task, seed, &out)?;
            for f in &outputs.files {
                println!("wrote {}", f.display());
            }
            println!("final_loss = {}", outputs.final_loss);
        }
        Command::Recover { common, matrix, measurements, truth, scenario, model, fpc_config, music, out } => {
            // Recovery reads everything from its input files; the common flags
            // are accepted for a uniform interface and validated.
            resolve(&common)?;
            let input = match (matrix, measurements, scenario) {
                (Some(matrix), Some(measurements), None) => RecoverInput::Signal { matrix, measurements, truth },
                (None, None, Some(path)) => RecoverInput::Scenario(path),
                _ => return Err(Error::Config("give either --matrix with --measurements, or --scenario".into())),
            };
            let solver = match (model, music) {
                (Some(m), _) => RecoverSolver::Model(m),
                (None, true) => RecoverSolver::Music,
                (None, false) => RecoverSolver::Fpc(fpc_config),
            };
            let output = cmd_recover(&input, &solver, &out)?;
            println!("wrote {}", out.display());
            for (k, v) in output.summary {
                println!("{k} = {v}");
            }
        }
        Command::Fig3 { common, model, layer_norm_model, out } => {
            let (cfg, seed) = resolve(&common)?;
            let models = Fig3Models {
                final_norm: load_optional(model.as_deref())?,
                layer_norm: load_optional(layer_norm_model.as_deref())?,
            };
            save_result(&run_fig3(&cfg, seed, &models)?, &out)?;
        }
        Command::Table1 { common, out } => {
            let (cfg, seed) = resolve(&common)?;
            save_result(&run_table1(&cfg, seed)?, &out)?;
        }
        Command::Fig4 { common, model, out } => {
            let (cfg, seed) = resolve(&common)?;
            let model = load_optional(model.as_deref())?;
            save_result(&run_fig4(&cfg, seed, model.as_ref())?, &out)?;
        }
        Command::Fig6 { common, model_uniform, model_orthogonal, out } => {
            let (cfg, seed) = resolve(&common)?;
            let models = DoaModels {
                uniform: load_optional(model_uniform.as_deref())?,
                orthogonal: load_optional(model_orthogonal.as_deref())?,
            };
            save_result(&run_fig6(&cfg, seed, &models)?, &out)?;
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let help = presets_help();
    let matches = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|c| c.after_help(help.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
