//! Command-line entry point: simulation, meta-sampling, training,
//! evaluation, baselines and self-checks, all driven by one TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use ctxctl_core::cltrain::{
    rollout_infer, run_curriculum, RolloutOptions, TrainState,
};
use ctxctl_core::ctxformer::{forward_all, Checkpoint, ControllerWeights, TapeWeights};
use ctxctl_core::diffcore::{self as dc, check_gradient, DTensor};
use ctxctl_core::evalharness::{
    run_test_suite, write_suite_outputs, write_trajectory_csv, AppConfig, ControllerKind,
};
use ctxctl_core::metasample::{sample_draw, write_draws};
use ctxctl_core::plant::{
    step_deterministic, DynamicsVariant, EvaporatorParams, NoiseSpec, ParamTensors,
    PlantInput, PlantState, DEFAULT_SUBSTEPS, NOMINAL_INPUT,
};
use ctxctl_core::rngstream::substream;

#[derive(Parser)]
#[command(name = "ctxctl", version, about = "Contextual-controller workbench")]
struct Cli {
    /// TOML configuration; defaults to the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the seeds in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out one sampled system open loop and write a trajectory CSV.
    Simulate {
        /// Meta-draw index.
        #[arg(long, default_value_t = 0)]
        draw: u64,
        /// Steps to simulate; defaults to the protocol horizon.
        #[arg(long)]
        steps: Option<usize>,
        /// Enable the protocol noise.
        #[arg(long)]
        noisy: bool,
    },
    /// Sample meta-draws and write them as JSON lines.
    SampleMeta {
        #[arg(long, default_value_t = 16)]
        count: u64,
    },
    /// Run the training curriculum, writing checkpoints and the loss trace.
    Train {
        /// Resume from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the test protocol against a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run only the optimal-control and identification baselines.
    Baseline,
    /// Gradient, steady-state and causality self-tests.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = json!({"error": {"kind": e.kind, "message": e.message}});
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        CliError { kind, message: message.to_string() }
    }
}

macro_rules! ctx_err {
    ($kind:expr) => {
        |e| CliError::new($kind, e)
    };
}

fn load_config(cli: &Cli) -> Result<AppConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => AppConfig::load(path).map_err(ctx_err!("config"))?,
        None => match cli.preset {
            Preset::Desk => AppConfig::desk(),
            Preset::Paper => AppConfig::paper(),
        },
    };
    if let Some(seed) = cli.seed {
        config.protocol.master_seed = seed;
    }
    Ok(config)
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(ctx_err!("io"))
}

fn fresh_weights(config: &AppConfig, seed: u64) -> ControllerWeights {
    let mut rng = substream(seed, "init");
    ControllerWeights::init(&config.train.controller, &mut rng)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let seed = cli.seed.unwrap_or(config.protocol.master_seed);
    match &cli.command {
        Command::Simulate { draw, steps, noisy } => {
            ensure_out(&cli.out)?;
            let mut dist = config.protocol.distributions.clone();
            dist.horizon = steps.unwrap_or(config.protocol.horizon);
            let meta = sample_draw(seed, *draw, &dist).map_err(ctx_err!("sample"))?;
            // zero-initialized head: the controller emits exactly the
            // operating-point input, i.e. an open-loop rollout
            let weights = fresh_weights(&config, seed);
            let opts = RolloutOptions {
                model: config.model,
                noise: if *noisy { config.protocol.noise } else { NoiseSpec::disabled() },
                noise_master: seed,
                trajectory: *draw,
                ..Default::default()
            };
            let rec = rollout_infer(&weights, &meta, &opts).map_err(ctx_err!("simulate"))?;
            let path = cli.out.join("simulate.csv");
            let mut f = std::fs::File::create(&path).map_err(ctx_err!("io"))?;
            write_trajectory_csv(&mut f, &rec).map_err(ctx_err!("io"))?;
            println!(
                "{}",
                json!({"written": path, "steps": rec.measured.len(), "rss": rec.rss})
            );
            Ok(())
        }
        Command::SampleMeta { count } => {
            ensure_out(&cli.out)?;
            let dist = config.protocol.distributions.clone();
            let draws: Result<Vec<_>, _> =
                (0..*count).map(|i| sample_draw(seed, i, &dist)).collect();
            let draws = draws.map_err(ctx_err!("sample"))?;
            let path = cli.out.join("meta.jsonl");
            let mut f = std::fs::File::create(&path).map_err(ctx_err!("io"))?;
            write_draws(&mut f, &draws).map_err(ctx_err!("io"))?;
            println!("{}", json!({"written": path, "count": count}));
            Ok(())
        }
        Command::Train { resume } => {
            ensure_out(&cli.out)?;
            let mut state = match resume {
                Some(path) => TrainState::load(path).map_err(ctx_err!("train-state"))?,
                None => TrainState::new(&config.train, seed),
            };
            let result = run_curriculum(&mut state, &config.train, Some(&cli.out))
                .map_err(ctx_err!("train"))?;
            println!(
                "{}",
                json!({
                    "stages": result.stages,
                    "iterations": result.trace.len(),
                    "out": cli.out,
                })
            );
            Ok(())
        }
        Command::Eval { checkpoint } => {
            ensure_out(&cli.out)?;
            let ckpt = Checkpoint::load(checkpoint).map_err(ctx_err!("checkpoint"))?;
            let result = run_test_suite(
                &config.protocol,
                &ckpt.weights,
                &config.oc,
                &config.ident,
                &config.model,
            )
            .map_err(ctx_err!("eval"))?;
            write_suite_outputs(&cli.out, &result).map_err(ctx_err!("io"))?;
            println!("{}", json!({"out": cli.out, "summaries": result.summaries}));
            Ok(())
        }
        Command::Baseline => {
            ensure_out(&cli.out)?;
            let mut protocol = config.protocol.clone();
            protocol.controllers.retain(|c| !matches!(c, ControllerKind::Contextual));
            if protocol.controllers.is_empty() {
                return Err(CliError::new("config", "no baseline controllers configured"));
            }
            let weights = fresh_weights(&config, seed); // unused by OC kinds
            let result =
                run_test_suite(&protocol, &weights, &config.oc, &config.ident, &config.model)
                    .map_err(ctx_err!("baseline"))?;
            write_suite_outputs(&cli.out, &result).map_err(ctx_err!("io"))?;
            println!("{}", json!({"out": cli.out, "summaries": result.summaries}));
            Ok(())
        }
        Command::Check => {
            let report = self_check(&config).map_err(ctx_err!("check"))?;
            println!("{report}");
            Ok(())
        }
    }
}

/// Fast self-tests: AD vs finite differences through one plant step, the
/// steady state of the consistent preset, and attention causality.
fn self_check(config: &AppConfig) -> Result<serde_json::Value, String> {
    // 1. gradient of a one-step rollout loss wrt the input pair
    let params = EvaporatorParams::consistent();
    let point = DTensor::constant(vec![2], vec![NOMINAL_INPUT.0, NOMINAL_INPUT.1]);
    let rel = check_gradient(
        |u| {
            let p = ParamTensors::constants(&params);
            let u1 = dc::slice_rows(u, 0, 1)?;
            let u2 = dc::slice_rows(u, 1, 2)?;
            let (x2, _) = step_deterministic(
                &p,
                &DTensor::scalar(25.0),
                &DTensor::scalar(49.743),
                &dc::reshape(&u1, vec![])?,
                &dc::reshape(&u2, vec![])?,
                DynamicsVariant::Consistent,
                DEFAULT_SUBSTEPS,
            )
            .map_err(|e| ctxctl_core::diffcore::DiffError::Domain {
                op: "plant-step",
                msg: e.to_string(),
            })?;
            dc::square(&x2)
        },
        &point,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let grad_ok = rel < 1e-5;

    // 2. fixed point of the consistent preset
    let mut state = PlantState::nominal();
    let mut max_drift = 0.0f64;
    for _ in 0..100 {
        let p = ParamTensors::constants(&params);
        let (nx, np) = step_deterministic(
            &p,
            &DTensor::scalar(state.x2),
            &DTensor::scalar(state.p2),
            &DTensor::scalar(NOMINAL_INPUT.0),
            &DTensor::scalar(NOMINAL_INPUT.1),
            DynamicsVariant::Consistent,
            DEFAULT_SUBSTEPS,
        )
        .map_err(|e| e.to_string())?;
        let next = PlantState { x2: nx.item(), p2: np.item() };
        max_drift = max_drift
            .max((next.x2 - state.x2).abs())
            .max((next.p2 - state.p2).abs());
        state = next;
    }
    let steady_ok = max_drift < 1e-3;

    // 3. causality: perturbing a future token leaves earlier outputs
    // bit-identical
    let mut rng = substream(1, "check");
    let mut weights = ControllerWeights::init(&config.train.controller, &mut rng);
    for (i, v) in weights.out_w.values.iter_mut().enumerate() {
        *v = 0.01 * ((i % 5) as f64 - 2.0);
    }
    let tw = TapeWeights::constants(&weights);
    let build = |errs: &[f64]| {
        let mut ctx = ctxctl_core::ctxformer::Context::new();
        for e in errs {
            ctx.push(
                DTensor::scalar(*e),
                (DTensor::scalar(PlantInput::nominal().p100),
                 DTensor::scalar(PlantInput::nominal().f200)),
            );
        }
        ctx
    };
    let errs: Vec<f64> = (0..6).map(|i| 0.4 * i as f64 - 1.0).collect();
    let mut errs2 = errs.clone();
    errs2[5] += 10.0;
    let a = forward_all(&tw, &weights.config, &build(&errs)).map_err(|e| e.to_string())?;
    let b = forward_all(&tw, &weights.config, &build(&errs2)).map_err(|e| e.to_string())?;
    let causal_ok = (0..5).all(|j| {
        a[j].0.item().to_bits() == b[j].0.item().to_bits()
            && a[j].1.item().to_bits() == b[j].1.item().to_bits()
    });

    let report = json!({
        "checks": {
            "gradient": {"pass": grad_ok, "max_rel_error": rel},
            "steady_state": {"pass": steady_ok, "max_drift": max_drift},
            "causality": {"pass": causal_ok},
        }
    });
    if grad_ok && steady_ok && causal_ok {
        Ok(report)
    } else {
        Err(report.to_string())
    }
}
