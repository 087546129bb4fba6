//! Closed-loop BPTT training: differentiable rollouts of the controller
//! against the simulated plant, a staged curriculum with loss-gated
//! advancement, and resumable training state.

pub mod optim;

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctxformer::{
    forward, Context, ControllerConfig, ControllerWeights, CtrlError, TapeWeights,
};
use crate::diffcore::{self as dc, DTensor, DiffError, Tape};
use crate::metasample::{sample_draw, DistributionConfig, MetaDraw, MetaError};
use crate::plant::{
    measurement_noise, process_noise, step_deterministic, DynamicsVariant, NoiseSpec,
    ParamTensors, PlantError, DEFAULT_SUBSTEPS,
};
use crate::refmodel::ReferenceModelLti;
use crate::rngstream::{noise_stream, substream};

pub use optim::{OptimizerConfig, OptimizerState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Controller(#[from] CtrlError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("closed loop diverged at step {step}")]
    Diverged { step: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("train state: {0}")]
    State(String),
}

/// Everything a rollout needs besides the draw and the weights.
#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub model: ReferenceModelLti,
    pub variant: DynamicsVariant,
    pub substeps: usize,
    pub noise: NoiseSpec,
    /// Master seed for the per-step noise streams.
    pub noise_master: u64,
    /// Trajectory id: distinct rollouts get independent noise.
    pub trajectory: u64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            model: ReferenceModelLti::default(),
            variant: DynamicsVariant::Consistent,
            substeps: DEFAULT_SUBSTEPS,
            noise: NoiseSpec::disabled(),
            noise_master: 0,
            trajectory: 0,
        }
    }
}

/// Scalar trace of one closed-loop episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub reference: Vec<f64>,
    pub desired: Vec<f64>,
    /// Measured output y_k the loss is computed on.
    pub measured: Vec<f64>,
    pub inputs: Vec<(f64, f64)>,
    pub states: Vec<(f64, f64)>,
    pub rss: f64,
}

/// Algorithm core shared by training and inference: measure, query the
/// controller on the full history, step the plant, accumulate the residual
/// sum of squares against the reference model output.
fn rollout_with(
    tw: &TapeWeights,
    config: &ControllerConfig,
    draw: &MetaDraw,
    opts: &RolloutOptions,
) -> Result<(RolloutRecord, DTensor), TrainError> {
    let n = draw.reference.len();
    assert!(n > 0, "empty reference");
    let r = &draw.reference.samples;
    let x0m = opts.model.state_matching_output(draw.initial_state.x2, r[0]);
    let desired = opts.model.desired_output(&draw.reference, x0m);

    let p = ParamTensors::constants(&draw.system);
    let mut x2 = DTensor::scalar(draw.initial_state.x2);
    let mut p2 = DTensor::scalar(draw.initial_state.p2);
    let mut prev_u = (
        DTensor::scalar(draw.initial_input.p100),
        DTensor::scalar(draw.initial_input.f200),
    );

    let mut ctx = Context::new();
    let mut terms: Vec<DTensor> = Vec::with_capacity(n);
    let mut rec = RolloutRecord {
        reference: r.clone(),
        desired: desired.clone(),
        measured: Vec::with_capacity(n),
        inputs: Vec::with_capacity(n),
        states: Vec::with_capacity(n),
        rss: 0.0,
    };

    for k in 0..n {
        let mut rng = noise_stream(opts.noise_master, opts.trajectory, k as u64);
        // stream layout per step: measurement noise first, then process
        let v = measurement_noise(&opts.noise, &mut rng);
        let w = process_noise(&opts.noise, &mut rng);

        let y = dc::offset(&x2, v)?;
        let e = dc::offset(&dc::neg(&y)?, r[k])?;
        ctx.push(e, (prev_u.0.clone(), prev_u.1.clone()));
        let (u1, u2) = forward(tw, config, &ctx)?;

        let (nx, np) = step_deterministic(&p, &x2, &p2, &u1, &u2, opts.variant, opts.substeps)?;
        x2 = dc::offset(&nx, w[0])?;
        p2 = dc::offset(&np, w[1])?;
        if !x2.all_finite() || !p2.all_finite() {
            return Err(TrainError::Diverged { step: k });
        }

        rec.measured.push(y.item());
        rec.inputs.push((u1.item(), u2.item()));
        rec.states.push((x2.item(), p2.item()));
        terms.push(dc::square(&dc::offset(&dc::neg(&y)?, desired[k])?)?);
        prev_u = (u1, u2);
    }

    let term_refs: Vec<&DTensor> = terms.iter().collect();
    let loss = dc::sum(&dc::concat(&term_refs)?)?;
    rec.rss = loss.item();
    if !rec.rss.is_finite() {
        return Err(TrainError::Diverged { step: n });
    }
    Ok((rec, loss))
}

/// Differentiable rollout: weights live on `tape`, the returned loss is the
/// RSS as a tape scalar.
pub fn rollout_loss(
    tape: &Tape,
    weights: &ControllerWeights,
    draw: &MetaDraw,
    opts: &RolloutOptions,
) -> Result<(RolloutRecord, DTensor, TapeWeights), TrainError> {
    let tw = TapeWeights::on_tape(tape, weights);
    let (rec, loss) = rollout_with(&tw, &weights.config, draw, opts)?;
    Ok((rec, loss, tw))
}

/// Pure-inference rollout, nothing recorded.
pub fn rollout_infer(
    weights: &ControllerWeights,
    draw: &MetaDraw,
    opts: &RolloutOptions,
) -> Result<RolloutRecord, TrainError> {
    let tw = TapeWeights::constants(weights);
    rollout_with(&tw, &weights.config, draw, opts).map(|(rec, _)| rec)
}

/// One rollout plus its weight gradient, in `named_tensors` order.
pub fn rollout_gradients(
    weights: &ControllerWeights,
    draw: &MetaDraw,
    opts: &RolloutOptions,
) -> Result<(RolloutRecord, Vec<Vec<f64>>), TrainError> {
    let tape = Tape::new();
    let (rec, loss, tw) = rollout_loss(&tape, weights, draw, opts)?;
    let grads = tape.backward(&loss)?;
    let mut out = Vec::with_capacity(tw.tensors.len());
    for (_, t) in &tw.tensors {
        out.push(grads.wrt(t)?.values().to_vec());
    }
    Ok((rec, out))
}

/// Which meta-distribution axes a curriculum stage samples. Frozen axes
/// reuse one fixed draw for the whole stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub index: u32,
    pub sample_system: bool,
    pub sample_reference: bool,
    pub sample_initial: bool,
    /// Advance when the smoothed loss drops below this.
    pub l_min: f64,
    pub max_iters: usize,
}

impl StageSpec {
    /// The standard three-stage curriculum. `targets` are per-stage matching
    /// error targets; L_min = N * target^2.
    pub fn curriculum(targets: [f64; 3], horizon: usize, max_iters: [usize; 3]) -> Vec<StageSpec> {
        let l = |t: f64| horizon as f64 * t * t;
        vec![
            StageSpec {
                index: 1,
                sample_system: false,
                sample_reference: false,
                sample_initial: false,
                l_min: l(targets[0]),
                max_iters: max_iters[0],
            },
            StageSpec {
                index: 2,
                sample_system: false,
                sample_reference: true,
                sample_initial: false,
                l_min: l(targets[1]),
                max_iters: max_iters[1],
            },
            StageSpec {
                index: 3,
                sample_system: true,
                sample_reference: true,
                sample_initial: false,
                l_min: l(targets[2]),
                max_iters: max_iters[2],
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub controller: ControllerConfig,
    pub distributions: DistributionConfig,
    pub optimizer: OptimizerConfig,
    /// Rollouts averaged per gradient step.
    pub batch: usize,
    /// Moving-average window for the advancement gate.
    pub loss_window: usize,
    pub noise: NoiseSpec,
    pub variant: DynamicsVariant,
    pub substeps: usize,
    pub stages: Vec<StageSpec>,
    /// Checkpoint every this many iterations; 0 means stage ends only.
    pub checkpoint_every: usize,
    pub validation_draws: usize,
}

impl TrainConfig {
    /// Full-scale configuration.
    pub fn paper() -> Self {
        TrainConfig {
            controller: ControllerConfig::paper(),
            distributions: DistributionConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch: 1,
            loss_window: 50,
            noise: NoiseSpec::disabled(),
            variant: DynamicsVariant::Consistent,
            substeps: DEFAULT_SUBSTEPS,
            stages: StageSpec::curriculum([0.05, 0.1, 0.15], 100, [20_000, 20_000, 40_000]),
            checkpoint_every: 1000,
            validation_draws: 10,
        }
    }

    /// Small model, short budgets, looser targets; minutes on a laptop.
    pub fn desk() -> Self {
        TrainConfig {
            controller: ControllerConfig::desk(),
            distributions: DistributionConfig { horizon: 50, ..Default::default() },
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                restart_period: 250,
                ..Default::default()
            },
            stages: StageSpec::curriculum([0.2, 0.3, 0.4], 50, [600, 400, 400]),
            checkpoint_every: 200,
            validation_draws: 4,
            ..Self::paper()
        }
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub stage: u32,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_trace_csv<W: std::io::Write>(mut w: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "iter,stage,loss,lr")?;
    for r in rows {
        writeln!(w, "{},{},{:.17e},{:.17e}", r.iter, r.stage, r.loss, r.lr)?;
    }
    Ok(())
}

/// Reserved draw index for the stage-frozen axes: far outside any counter
/// a training run can reach.
const FROZEN_INDEX: u64 = u64::MAX;
/// Validation draw indices start here, disjoint from training counters.
const VALIDATION_BASE: u64 = 1 << 40;

/// Build the draw for one rollout: sampled axes advance with `index`,
/// frozen axes reuse the deterministic stage-fixed draw.
pub fn compose_draw(
    master: u64,
    index: u64,
    stage: &StageSpec,
    dist: &DistributionConfig,
) -> Result<MetaDraw, MetaError> {
    let sampled = sample_draw(master, index, dist)?;
    let frozen = sample_draw(master, FROZEN_INDEX, dist)?;
    Ok(MetaDraw {
        system: if stage.sample_system { sampled.system } else { dist.base.clone() },
        reference: if stage.sample_reference { sampled.reference } else { frozen.reference },
        initial_state: if stage.sample_initial {
            sampled.initial_state
        } else {
            frozen.initial_state
        },
        initial_input: frozen.initial_input,
        seed_ids: (master, index),
    })
}

pub const TRAIN_STATE_FORMAT: &str = "ctxctl-train-state";
pub const TRAIN_STATE_VERSION: u32 = 1;

/// Resumable training state: everything a step reads or writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format: String,
    pub version: u32,
    pub master_seed: u64,
    pub weights: ControllerWeights,
    pub optimizer: OptimizerState,
    /// Index into `config.stages`.
    pub stage_idx: usize,
    pub iter_in_stage: usize,
    pub global_iter: usize,
    /// Meta-draw counter; draws are a pure function of (master, counter).
    pub draw_counter: u64,
    /// Recent per-iteration losses for the advancement gate.
    pub recent: Vec<f64>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, master_seed: u64) -> Self {
        let mut rng = substream(master_seed, "init");
        let weights = ControllerWeights::init(&config.controller, &mut rng);
        let optimizer = OptimizerState::new(config.optimizer.clone(), &weights);
        TrainState {
            format: TRAIN_STATE_FORMAT.into(),
            version: TRAIN_STATE_VERSION,
            master_seed,
            weights,
            optimizer,
            stage_idx: 0,
            iter_in_stage: 0,
            global_iter: 0,
            draw_counter: 0,
            recent: vec![],
        }
    }

    /// Mean of the recent-loss window; infinite before the first step so the
    /// gate always admits at least one iteration.
    pub fn smoothed_loss(&self) -> f64 {
        if self.recent.is_empty() {
            f64::INFINITY
        } else {
            self.recent.iter().sum::<f64>() / self.recent.len() as f64
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string(self).map_err(|e| TrainError::State(e.to_string()))?;
        Ok(std::fs::write(path, json)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let data = std::fs::read_to_string(path)?;
        let state: TrainState =
            serde_json::from_str(&data).map_err(|e| TrainError::State(e.to_string()))?;
        if state.format != TRAIN_STATE_FORMAT {
            return Err(TrainError::State(format!("unknown format {}", state.format)));
        }
        if state.version != TRAIN_STATE_VERSION {
            return Err(TrainError::State(format!("unsupported version {}", state.version)));
        }
        Ok(state)
    }
}

/// One gradient step: batch of rollouts, averaged gradients, optimizer
/// update. Returns the mean batch loss.
pub fn train_step(state: &mut TrainState, config: &TrainConfig) -> Result<f64, TrainError> {
    let stage = &config.stages[state.stage_idx];
    let b = config.batch.max(1);
    let base = state.draw_counter;
    let master = state.master_seed;

    let run_one = |i: u64| -> Result<(f64, Vec<Vec<f64>>), TrainError> {
        let idx = base + i;
        let draw = compose_draw(master, idx, stage, &config.distributions)?;
        let opts = RolloutOptions {
            variant: config.variant,
            substeps: config.substeps,
            noise: config.noise.clone(),
            noise_master: master,
            trajectory: idx,
            ..Default::default()
        };
        let (rec, grads) = rollout_gradients(&state.weights, &draw, &opts)?;
        Ok((rec.rss, grads))
    };

    // each rollout owns a private tape, so batches parallelize trivially
    let results: Vec<Result<(f64, Vec<Vec<f64>>), TrainError>> = if b > 1 {
        (0..b as u64).into_par_iter().map(run_one).collect()
    } else {
        (0..b as u64).map(run_one).collect()
    };

    let mut mean_loss = 0.0;
    let mut mean_grads: Option<Vec<Vec<f64>>> = None;
    for r in results {
        let (loss, grads) = r?;
        mean_loss += loss / b as f64;
        match &mut mean_grads {
            None => {
                let mut g = grads;
                for t in g.iter_mut() {
                    for v in t.iter_mut() {
                        *v /= b as f64;
                    }
                }
                mean_grads = Some(g);
            }
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y / b as f64;
                    }
                }
            }
        }
    }
    let mut grads = mean_grads.expect("batch >= 1");
    state.optimizer.apply(&mut state.weights, &mut grads);

    state.draw_counter += b as u64;
    state.iter_in_stage += 1;
    state.global_iter += 1;
    state.recent.push(mean_loss);
    if state.recent.len() > config.loss_window.max(1) {
        state.recent.remove(0);
    }
    Ok(mean_loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u32,
    pub iters: usize,
    pub final_loss: f64,
    pub smoothed_loss: f64,
    pub reached_l_min: bool,
    pub validation_m_rmse: Option<f64>,
}

/// Run the current stage to its gate or budget, appending to `trace` and
/// checkpointing into `out_dir` when given.
pub fn train_stage(
    state: &mut TrainState,
    config: &TrainConfig,
    trace: &mut Vec<TraceRow>,
    out_dir: Option<&Path>,
) -> Result<StageSummary, TrainError> {
    let stage = config.stages[state.stage_idx].clone();
    let mut final_loss = f64::NAN;
    while state.iter_in_stage < stage.max_iters && state.smoothed_loss() >= stage.l_min {
        let lr = state.optimizer.current_lr();
        let loss = train_step(state, config)?;
        final_loss = loss;
        trace.push(TraceRow { iter: state.global_iter - 1, stage: stage.index, loss, lr });
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && state.iter_in_stage % config.checkpoint_every == 0 {
                state.save(&dir.join("train_state_latest.json"))?;
            }
        }
    }
    let summary = StageSummary {
        stage: stage.index,
        iters: state.iter_in_stage,
        final_loss,
        smoothed_loss: state.smoothed_loss(),
        reached_l_min: state.smoothed_loss() < stage.l_min,
        validation_m_rmse: None,
    };
    if let Some(dir) = out_dir {
        state.save(&dir.join(format!("train_state_stage{}.json", stage.index)))?;
        crate::ctxformer::Checkpoint::new(
            state.weights.clone(),
            state.master_seed,
            stage.index,
        )
        .save(&dir.join(format!("checkpoint_stage{}.json", stage.index)))?;
    }
    Ok(summary)
}

/// Mean matching error over fresh validation draws, sampled along the same
/// axes the stage trains on. Noiseless.
pub fn validate(
    state: &TrainState,
    config: &TrainConfig,
    stage: &StageSpec,
) -> Result<f64, TrainError> {
    let n_draws = config.validation_draws.max(1);
    let results: Vec<Result<f64, TrainError>> = (0..n_draws as u64)
        .into_par_iter()
        .map(|v| {
            let idx = VALIDATION_BASE + v;
            let draw = compose_draw(state.master_seed, idx, stage, &config.distributions)?;
            let opts = RolloutOptions {
                variant: config.variant,
                substeps: config.substeps,
                ..Default::default()
            };
            let rec = rollout_infer(&state.weights, &draw, &opts)?;
            Ok((rec.rss / rec.measured.len() as f64).sqrt())
        })
        .collect();
    let mut sum = 0.0;
    for r in results {
        sum += r?;
    }
    Ok(sum / n_draws as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumResult {
    pub stages: Vec<StageSummary>,
    pub trace: Vec<TraceRow>,
}

/// Full curriculum: warm-started weights across stages, fresh optimizer and
/// loss window per stage, per-stage validation.
pub fn run_curriculum(
    state: &mut TrainState,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CurriculumResult, TrainError> {
    let mut trace = vec![];
    let mut stages = vec![];
    while state.stage_idx < config.stages.len() {
        let stage = config.stages[state.stage_idx].clone();
        let mut summary = train_stage(state, config, &mut trace, out_dir)?;
        summary.validation_m_rmse = Some(validate(state, config, &stage)?);
        stages.push(summary);
        state.stage_idx += 1;
        state.iter_in_stage = 0;
        state.recent.clear();
        // the schedule restarts with the stage; weights carry over
        state.optimizer = OptimizerState::new(config.optimizer.clone(), &state.weights);
    }
    if let Some(dir) = out_dir {
        let mut f = std::fs::File::create(dir.join("losses.csv"))?;
        write_trace_csv(&mut f, &trace)?;
        f.flush()?;
    }
    Ok(CurriculumResult { stages, trace })
}

#[cfg(test)]
mod tests;
