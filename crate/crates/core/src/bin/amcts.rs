//! Command-line runner for arrival-rate sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use adaptive_mcts::experiment::{render_outputs, run_sweep, write_outputs, ExperimentConfig, PresetList};
use adaptive_mcts::Preset;
use clap::Parser;

#[derive(Debug, Parser)]
#[command(
    name = "amcts",
    version,
    about = "Simulate adaptive parallel MCTS serving and report latency sweeps"
)]
struct Args {
    /// Experiment file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `[experiment] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated presets: beam, vanilla, pe, pe_ne, pe_ne_boost.
    #[arg(long, value_delimiter = ',')]
    preset: Vec<Preset>,
    /// Comma-separated arrival rates in requests per second.
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    /// Output directory; overrides `[experiment] output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective config of every preset and exit.
    #[arg(long)]
    print_config: bool,
    /// Also write a JSON Lines event trace per run.
    #[arg(long)]
    trace: bool,
    /// Write the generated workload as JSON to this path and exit.
    #[arg(long)]
    dump_workload: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("amcts: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(args: Args) -> Result<(), String> {
    let source = args
        .config
        .as_ref()
        .map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| format!("{source}: {e}"))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    if !args.preset.is_empty() {
        cfg.experiment.preset = PresetList::Many(args.preset.clone());
    }
    if !args.rates.is_empty() {
        cfg.experiment.arrival_rates = args.rates.clone();
    }
    if let Some(out) = &args.out {
        cfg.experiment.output_dir = out.clone();
    }
    cfg.experiment.trace |= args.trace;
    cfg.validate("")
        .map_err(|e| format!("after command-line overrides: {e}"))?;

    if args.print_config {
        for (i, preset) in cfg.presets().into_iter().enumerate() {
            if i > 0 {
                println!();
            }
            println!("# effective config for preset {preset}");
            print!("{}", cfg.effective(preset).to_toml());
        }
        return Ok(());
    }

    if let Some(path) = &args.dump_workload {
        let workload = cfg.workload().map_err(|e| e.to_string())?;
        let json = serde_json::to_string_pretty(&workload).map_err(|e| e.to_string())?;
        std::fs::write(path, json + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(());
    }

    let points = run_sweep(&cfg, &cfg.presets(), &cfg.experiment.arrival_rates).map_err(|e| e.to_string())?;
    // everything is rendered before the first file is written
    let files = render_outputs(&points);
    write_outputs(&cfg.experiment.output_dir, &files).map_err(|e| e.to_string())?;
    let sweep = &files.last().expect("sweep table is always rendered").1;
    print!("{sweep}");
    Ok(())
}
