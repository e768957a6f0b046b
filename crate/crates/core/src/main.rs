use clap::{Parser, Subcommand};
use gfcsim::harness::compare::{compare, write_comparison_csv};
use gfcsim::harness::dataset::{generate_dataset, read_training_set, write_dataset, SweepConfig};
use gfcsim::harness::metrics::{extract_metrics_for, write_metrics_csv};
use gfcsim::harness::record::write_record_csv;
use gfcsim::harness::scenario::{ControllerChoice, ScenarioSpec};
use gfcsim::harness::{controller_for, ModelSource};
use gfcsim::network::run_scenario;
use gfcsim::pinn::train::{train, TrainConfig};
use gfcsim::SimError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gfcsim", version, about = "Grid-forming converter microgrid simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its sampled record.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = parse_choice)]
        controller: ControllerChoice,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate droop-controlled training data.
    GenData {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the neural controller.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario under the neural controller and write its metrics.
    Evaluate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run several controllers on one scenario.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_choice)]
        controllers: Vec<ControllerChoice>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_choice(s: &str) -> Result<ControllerChoice, String> {
    s.parse().map_err(|e: SimError| e.to_string())
}

fn model_source(p: Option<PathBuf>) -> ModelSource {
    p.map(ModelSource::File).unwrap_or_default()
}

/// Ok(true) when every run completed without diverging.
fn run(cli: Cli) -> Result<bool, SimError> {
    match cli.cmd {
        Cmd::Simulate {
            scenario,
            controller,
            model,
            out,
        } => {
            let spec = ScenarioSpec::load(&scenario)?;
            let model = model.or_else(|| spec.model.clone());
            let kind = controller_for(controller, &model_source(model))?;
            let rec = run_scenario(&spec, &spec.network()?, &kind)?;
            write_record_csv(&out, &rec)?;
            if let Some(t) = rec.diverged_at {
                log::error!("run diverged at t = {t:.5} s");
            }
            Ok(!rec.diverged)
        }
        Cmd::GenData { sweep, runs, seed, out } => {
            let cfg = SweepConfig::load(&sweep)?;
            let ds = generate_dataset(&cfg, runs, seed)?;
            write_dataset(&out, &ds)?;
            let kept = ds.runs.iter().filter(|r| r.kept).count();
            log::info!("kept {kept} of {} runs", ds.runs.len());
            Ok(true)
        }
        Cmd::Train { data, config, out } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| SimError::Config(format!("cannot read {}: {e}", config.display())))?;
            let cfg = TrainConfig::from_toml(&text)?;
            let set = read_training_set(&data)?;
            let log_path = out.with_extension("log.csv");
            match train(&set, &cfg, Some(&log_path)) {
                Ok(o) => {
                    o.model.save(&out)?;
                    log::info!("train MSE {:.6}, held-out MSE {:.6}", o.train_mse, o.heldout_mse);
                    Ok(true)
                }
                Err(SimError::Diverged(it)) => {
                    log::error!("training diverged at iteration {it}");
                    Ok(false)
                }
                Err(e) => Err(e),
            }
        }
        Cmd::Evaluate {
            scenario,
            model,
            report,
        } => {
            let spec = ScenarioSpec::load(&scenario)?;
            let kind = controller_for(ControllerChoice::Pinn, &ModelSource::File(model))?;
            let rec = run_scenario(&spec, &spec.network()?, &kind)?;
            write_metrics_csv(&report, &[extract_metrics_for(&rec, &spec)?])?;
            Ok(!rec.diverged)
        }
        Cmd::Compare {
            scenario,
            controllers,
            model,
            report,
        } => {
            let spec = ScenarioSpec::load(&scenario)?;
            let model = model.or_else(|| spec.model.clone());
            let c = compare(&spec, &controllers, &model_source(model))?;
            write_comparison_csv(&report, &c)?;
            let mut ok = true;
            for r in &c.results {
                match &r.outcome {
                    Ok((rec, _)) => ok &= !rec.diverged,
                    Err(e) if e.is_config() => return Err(SimError::Config(format!("{:?}: {e}", r.choice))),
                    Err(_) => ok = false,
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
