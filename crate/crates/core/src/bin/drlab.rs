use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use drlab::experiment::{self, Benchmark, DataStore, ExperimentConfig, ScenarioOptions};
use drlab::{data, theory};

#[derive(Parser)]
#[command(name = "drlab", version, about = "Continual-learning experiments with discriminative representation loss")]
struct Cli {
    /// Dataset root holding mnist/ and fashion_mnist/ IDX files.
    #[arg(long, global = true, env = data::DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchArg {
    SplitMnist,
    PermutedMnist,
    SplitFashion,
    Gaussian2d,
}

impl From<BenchArg> for Benchmark {
    fn from(b: BenchArg) -> Self {
        match b {
            BenchArg::SplitMnist => Benchmark::SplitMnist,
            BenchArg::PermutedMnist => Benchmark::PermutedMnist,
            BenchArg::SplitFashion => Benchmark::SplitFashion,
            BenchArg::Gaussian2d => Benchmark::Gaussian2d,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run this single seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the run artifacts in a directory.
    Summarize { dir: PathBuf },
    /// Run a named scenario.
    Scenario {
        name: String,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "split-mnist")]
        benchmark: BenchArg,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = experiment::DEFAULT_SEEDS)]
        seeds: usize,
    },
    /// Check the gradient/representation sign identities numerically.
    VerifyTheorems {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Two-task 2-D demo comparing GSS-IQP and random memory.
    #[command(name = "demo-2d")]
    Demo2d {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> drlab::Result<ExitCode> {
    let store = DataStore::new(data::data_root(cli.data_dir.as_deref()));
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = Some(vec![s]);
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let artifacts = experiment::run(&cfg, &store)?;
            for a in &artifacts {
                println!(
                    "{} {} seed {}: accuracy {:.2} forgetting {:.2}{}",
                    a.config.label,
                    a.config.benchmark.name(),
                    a.seed,
                    100.0 * a.metrics.avg_accuracy,
                    100.0 * a.metrics.avg_forgetting,
                    if a.valid { "" } else { " (invalid)" }
                );
            }
            if artifacts.len() > 1 {
                print!("{}", experiment::summarize_artifacts(&artifacts)?.to_text());
            }
            Ok(if artifacts.iter().all(|a| a.valid) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Summarize { dir } => {
            print!("{}", experiment::summarize(&dir)?.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Scenario {
            name,
            out,
            benchmark,
            seeds,
        } => {
            let opts = ScenarioOptions {
                out,
                benchmark: benchmark.into(),
                seeds: (0..seeds as u64).collect(),
            };
            print!("{}", experiment::scenario(&name, &opts, &store)?.text);
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyTheorems { seeds } => {
            let lemma = theory::lemma1_check(10_000, 0)?;
            println!(
                "lemma 1: {} pairs, max relative error {:.3e}",
                lemma.n_pairs, lemma.max_rel_error
            );
            let mut ok = lemma.max_rel_error < 1e-9;
            for seed in 0..seeds as u64 {
                let t = theory::table2(seed, theory::Geometry::default(), theory::PartitionParams::default())?;
                for m in &t.models {
                    let exceptions: usize = m.rows.iter().map(|r| r.negative.exceptions).sum();
                    let violations: usize = m.rows.iter().map(|r| r.positive.violations).sum();
                    if m.model == "linear" {
                        ok &= exceptions == 0 && violations == 0;
                    }
                    println!(
                        "seed {seed} {:<10} acc {:.3}  theorem-1 exceptions {exceptions}  theorem-2 violations {violations}",
                        m.model, m.accuracy
                    );
                }
            }
            println!("{}", if ok { "all identities hold" } else { "identity check FAILED" });
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Demo2d { seeds } => {
            let seeds: Vec<u64> = (0..seeds as u64).collect();
            let (s, outcomes) = experiment::demo_2d_summary(&seeds)?;
            if let Some(o) = outcomes.first() {
                println!("seed {} after task 1:\n{}", o.seed, theory::grid_to_text(&o.grid_task1));
                println!("after task 2 with GSS-IQP memory:\n{}", theory::grid_to_text(&o.grid_task2));
            }
            println!(
                "median band fraction {:.3}; task-1 accuracy after task 2: random {:.3}, GSS-IQP {:.3}; random better on {}/{} seeds",
                s.median_band_fraction,
                drlab::metrics::mean(&s.random_task1_after),
                drlab::metrics::mean(&s.gss_task1_after),
                s.random_wins,
                seeds.len()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
