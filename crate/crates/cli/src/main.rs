use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use autoco::envs::{synth_generate, SyntheticConfig};
use autoco::features::load_dataset;
use autoco::harness::{
    curves_svg, derive_seed, read_batches_csv, run_experiment_with, summarize, write_outputs, CellTotals,
    ExperimentConfig,
};
use autoco::validate::{run_suite, SUITES};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "autoco", version, about = "Creative-selection bandit experiments")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Experiment config (alternative to the positional argument of `run`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for independent (algorithm, repetition) cells.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write batches.csv, summary.json and curves.svg.
    Run { config: Option<PathBuf> },
    /// Convert raw UCI files into a dataset JSON.
    PrepData {
        /// mushroom or adult
        dataset: String,
        /// Input file(s), comma separated (adult.data,adult.test).
        #[arg(value_delimiter = ',', num_args = 1, required = true)]
        input: Vec<PathBuf>,
        output: PathBuf,
    },
    /// Run a self-check suite: gradients, kl, prox or all.
    Validate { suite: String },
    /// Re-render cumulative curves from an existing batches.csv.
    Plot { batches: PathBuf, output: PathBuf },
    /// Generate a synthetic world from a config (experiment or world-only TOML).
    GenWorld { config: PathBuf, output: PathBuf },
}

type Failure = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<bool, Failure> {
    let out = Mutex::new(std::io::stdout());
    let say = |line: &str| {
        if !cli.quiet {
            let mut w = out.lock().unwrap_or_else(|p| p.into_inner());
            let _ = writeln!(w, "{line}");
        }
    };
    match &cli.command {
        Command::Run { config } => {
            let path = config
                .as_ref()
                .or(cli.config.as_ref())
                .ok_or("run needs a config path")?;
            let mut cfg = ExperimentConfig::load(path)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(d) = &cli.out_dir {
                cfg.output_dir = d.clone();
            }
            if let Some(p) = cli.parallel {
                cfg.parallel = p;
            }
            cfg.validate()?;
            let progress = |alg: &str, rep: usize, t: CellTotals| {
                say(&format!(
                    "{alg} rep {rep}: ctr {:.5} regret {:.1} ({} trials)",
                    t.ctr(),
                    t.regret,
                    t.trials
                ))
            };
            let log = run_experiment_with(&cfg, &progress)?;
            for p in write_outputs(&log, &cfg.output_dir)? {
                say(&format!("wrote {}", p.display()));
            }
            for (name, s) in summarize(&log) {
                let rel = s
                    .relative_regret
                    .map(|r| format!("  rel-regret {:.2} ± {:.2}", r.mean, r.stderr))
                    .unwrap_or_default();
                say(&format!(
                    "{name:<16} ctr {:.5} ± {:.5}  regret {:.1} ± {:.1}{rel}",
                    s.final_cum_ctr.mean, s.final_cum_ctr.stderr, s.final_cum_regret.mean, s.final_cum_regret.stderr
                ));
            }
            Ok(true)
        }
        Command::PrepData { dataset, input, output } => {
            let ds = load_dataset(dataset, input)?;
            ds.write_json(output)?;
            say(&format!("{} records -> {}", ds.records.len(), output.display()));
            Ok(true)
        }
        Command::Validate { suite } => {
            let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite.as_str()] };
            let seed = cli.seed.unwrap_or(0);
            let mut ok = true;
            for name in names {
                let report = run_suite(name, seed)?;
                for check in &report.checks {
                    say(&format!("{name}: {check}"));
                }
                ok &= report.passed();
            }
            Ok(ok)
        }
        Command::Plot { batches, output } => {
            let log = read_batches_csv(batches)?;
            std::fs::write(output, curves_svg(&log)).map_err(|e| format!("{}: {e}", output.display()))?;
            say(&format!("wrote {}", output.display()));
            Ok(true)
        }
        Command::GenWorld { config, output } => {
            let text = std::fs::read_to_string(config).map_err(|e| format!("{}: {e}", config.display()))?;
            let (synth, cfg_seed) = match ExperimentConfig::from_toml(&text) {
                Ok(c) => (c.environment.synthetic, Some(c.seed)),
                Err(_) => (toml::from_str::<SyntheticConfig>(&text)?, None),
            };
            let seed = cli.seed.or(cfg_seed).unwrap_or(0);
            // same derivation as repetition 0 of a run with this master seed
            let world_seed = derive_seed(seed, &["world", "0"]);
            let mut world = synth_generate(&synth, &mut ChaCha8Rng::seed_from_u64(world_seed))?;
            world.meta.seed = Some(world_seed);
            world.save(output)?;
            say(&format!(
                "{} products, mean ctr {:.4} -> {}",
                world.n_products(),
                world.mean_ctr(),
                output.display()
            ));
            Ok(true)
        }
    }
}
