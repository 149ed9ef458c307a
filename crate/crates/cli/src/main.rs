use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltvs_core::harness::{
    self, ExperimentConfig, Manifest, Method, Policy, CHECKPOINT_FILE, TESTSET_DIR, TEST_SET_NAMES,
};
use ltvs_core::ppo::{centered_moving_average, MOVING_AVERAGE_WINDOW};
use ltvs_core::sim::{Disturbance, OperatingCondition};
use ltvs_core::{seeding, Error, Result};

#[derive(Parser)]
#[command(name = "ltvs", version, about = "Voltage-stability curtailment experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed of the command (training, test sets or the simulated scenario).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Built-in case name.
    #[arg(long, global = true)]
    case: Option<String>,
    /// Configuration override `field.path=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the PPO agent.
    Train {
        #[arg(long)]
        episodes: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Build the three evaluation scenario sets.
    MakeTestsets {
        #[arg(long)]
        size: Option<usize>,
    },
    /// Evaluate methods on the test sets.
    Evaluate {
        /// Checkpoint to evaluate (default: <out>/checkpoint.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory holding set1.json..set3.json (default: <out>/testsets).
        #[arg(long)]
        testsets: Option<PathBuf>,
        /// Comma-separated subset of drl, drl_thresholded, baseline, none.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        threshold_mw: Option<f64>,
    },
    /// Write figure CSVs from evaluation traces.
    ExportPlots {
        #[arg(long = "testset", default_value = "set1")]
        testset: String,
        #[arg(long, default_value_t = 0)]
        scenario: u64,
    },
    /// Run one scenario with one method.
    Simulate {
        /// Disturbance such as `line-trip:1`, `gen-trip:1`, `load-step:4:50`
        /// (default: sampled from the training menu).
        #[arg(long)]
        disturbance: Option<Disturbance>,
        /// Uniform load multiplier (default: sampled from the band).
        #[arg(long)]
        multiplier: Option<f64>,
        #[arg(long, default_value = "none")]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn build_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(case) = &c.case {
        cfg.network = harness::NetworkSource::Builtin(case.clone());
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    cfg.with_overrides(&c.overrides)
}

fn report_moving_averages(log: &[ltvs_core::ppo::LogRow]) {
    let rewards: Vec<f64> = log.iter().map(|r| r.total_reward).collect();
    let crashes: Vec<f64> = log.iter().map(|r| r.crashed as u8 as f64).collect();
    let ma_r = centered_moving_average(&rewards, MOVING_AVERAGE_WINDOW);
    let ma_c = centered_moving_average(&crashes, MOVING_AVERAGE_WINDOW);
    let every = (log.len() / 20).max(1);
    println!("episode  ma{MOVING_AVERAGE_WINDOW}_reward  ma{MOVING_AVERAGE_WINDOW}_crash");
    for k in (0..log.len()).filter(|k| (k + 1) % every == 0 || k + 1 == log.len()) {
        println!("{:>7}  {:>12.3}  {:>11.4}", log[k].episode, ma_r[k], ma_c[k]);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Train { episodes, resume } => {
            if let Some(n) = episodes {
                cfg.episodes = n;
            }
            if let Some(s) = cli.common.seed {
                cfg.seed = s;
            }
            let (learner, _) = harness::run_training(&cfg, resume.as_deref(), None)?;
            report_moving_averages(&learner.log);
            println!("wrote {}", cfg.out_dir.join(CHECKPOINT_FILE).display());
        }
        Command::MakeTestsets { size } => {
            if let Some(n) = size {
                cfg.test_set_size = n;
            }
            if let Some(s) = cli.common.seed {
                cfg.testset_seed = s;
            }
            let (sets, _) = harness::write_test_sets(&cfg)?;
            for s in sets {
                println!("{}: {} scenarios", s.name, s.scenarios.len());
            }
        }
        Command::Evaluate {
            checkpoint,
            testsets,
            methods,
            threshold_mw,
        } => {
            if let Some(m) = methods {
                cfg.methods = m;
            }
            if let Some(t) = threshold_mw {
                cfg.threshold_mw = t;
            }
            let testsets = testsets.unwrap_or_else(|| cfg.out_dir.join(TESTSET_DIR));
            let (report, _) = harness::run_evaluation(&cfg, checkpoint.as_deref(), &testsets)?;
            let mut stdout = std::io::stdout();
            report
                .write_csv(&mut stdout)
                .map_err(|e| Error::Simulation(format!("stdout: {e}")))?;
        }
        Command::ExportPlots { testset, scenario } => {
            if !TEST_SET_NAMES.contains(&testset.as_str()) {
                return Err(Error::Config(format!("unknown test set {testset:?}")));
            }
            for f in harness::export_plots(&cfg, &testset, scenario)? {
                println!("wrote {}", cfg.out_dir.join(f).display());
            }
        }
        Command::Simulate {
            disturbance,
            multiplier,
            method,
            checkpoint,
        } => {
            let net = cfg.validate()?;
            let seed = cli.common.seed.unwrap_or(cfg.testset_seed);
            let mut rng = seeding::stream(seed, "simulate", 0);
            let menu = match &disturbance {
                Some(d) => {
                    d.validate(&net)?;
                    vec![d.clone()]
                }
                None => cfg.training_menu.clone(),
            };
            let mut scenario = ltvs_core::env::sample_scenario(&net, &mut rng, cfg.band, &menu, 0)?;
            if let Some(m) = multiplier {
                scenario.oc = OperatingCondition {
                    seed: scenario.oc.seed,
                    ..OperatingCondition::uniform(&net, m)
                };
                ltvs_core::sim::SimulationState::init(&net, &scenario.oc)?;
            }
            let ckpt = match (method.needs_policy(), checkpoint) {
                (false, _) => None,
                (true, Some(p)) => Some(harness::load_checkpoint(&p)?),
                (true, None) => Some(harness::load_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE))?),
            };
            let policy = ckpt.as_ref().map(|c| Policy {
                actor: &c.actor,
                normalizer: &c.normalizer,
            });
            let trace = harness::run_method(&net, &scenario, method, policy, cfg.threshold_mw, &cfg.shed)?;
            let rel = PathBuf::from("simulate").join(format!("{}.jsonl", method.name()));
            let path = cfg.out_dir.join(&rel);
            std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::Simulation(e.to_string()))?;
            trace.save_jsonl(&path)?;
            Manifest::record(&cfg.out_dir, "simulate", &cfg.hash(), &[rel])?;
            println!(
                "{} under {}: {} at {:.0} s, reward {:.3}, curtailed {:.1} MW",
                method.name(),
                scenario.disturbance,
                trace.verdict.label(),
                trace.verdict.at_time_s,
                trace.total_reward,
                trace.curtailed_mw
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
