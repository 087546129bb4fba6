//! Comparison controllers: receding-horizon optimal control by single
//! shooting through the differentiable plant, and grey-box parameter
//! identification from open-loop excitation data.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cltrain::RolloutRecord;
use crate::diffcore::{self as dc, DTensor, DiffError, Tape};
use crate::plant::{
    self, measurement_noise, process_noise, step_deterministic, DynamicsVariant,
    EvaporatorParams, NoiseSpec, ParamTensors, PlantError, PlantInput, PlantState,
    DEFAULT_SUBSTEPS,
};
use crate::refmodel::{ReferenceModelLti, ReferenceSignal};
use crate::rngstream::{noise_stream, substream_indexed};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("identification data generation diverged twice")]
    ExcitationDiverged,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OCConfig {
    /// Receding horizon N_H.
    pub horizon: usize,
    /// Inner-solver iteration budget per step.
    pub iterations: usize,
    /// Inner-solver base step size.
    pub step_size: f64,
    /// Shift the previous solution as the next initial guess.
    pub warm_start: bool,
    /// Optional per-channel box bounds ((p100 lo, hi), (f200 lo, hi)).
    pub bounds: Option<((f64, f64), (f64, f64))>,
    pub variant: DynamicsVariant,
    pub substeps: usize,
}

impl Default for OCConfig {
    fn default() -> Self {
        OCConfig {
            horizon: 5,
            iterations: 200,
            step_size: 1.0,
            warm_start: true,
            bounds: None,
            variant: DynamicsVariant::Consistent,
            substeps: DEFAULT_SUBSTEPS,
        }
    }
}

impl OCConfig {
    /// Default budget scaled with the horizon: 40 inner iterations per
    /// decision step, i.e. the default 200 at N_H = 5.
    pub fn for_horizon(horizon: usize) -> Self {
        OCConfig { horizon, iterations: 40 * horizon, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.horizon == 0 {
            return Err(BaselineError::InvalidConfig("horizon must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentConfig {
    /// Gradient-step budget.
    pub max_steps: usize,
    /// Early-stop threshold on the mean squared output error.
    pub loss_threshold: f64,
    pub excitation_amplitude: (f64, f64),
    /// Step lengths in whole seconds.
    pub excitation_duration: (usize, usize),
    pub dataset_len: usize,
    /// Inner step size in the multiplicative parameter space.
    pub step_size: f64,
    pub variant: DynamicsVariant,
    pub substeps: usize,
}

impl Default for IdentConfig {
    fn default() -> Self {
        IdentConfig {
            max_steps: 100,
            loss_threshold: 1e-4,
            excitation_amplitude: (150.0, 250.0),
            excitation_duration: (1, 10),
            dataset_len: 1000,
            step_size: 0.02,
            variant: DynamicsVariant::Consistent,
            substeps: DEFAULT_SUBSTEPS,
        }
    }
}

impl IdentConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.max_steps == 0 || self.dataset_len == 0 {
            return Err(BaselineError::InvalidConfig("budgets must be positive".into()));
        }
        Ok(())
    }
}

/// Generic inner loop: adaptive moments, with backtracking so the objective
/// never increases. `eval` returns None on an infeasible point.
struct InnerSolve {
    x: Vec<f64>,
    objective: f64,
    iterations_used: usize,
    /// Objective after each accepted iteration, starting with the initial.
    trace: Vec<f64>,
    infeasible: bool,
}

fn adam_backtrack<E, G>(
    x0: Vec<f64>,
    iterations: usize,
    step_size: f64,
    eval: E,
    grad: G,
) -> InnerSolve
where
    E: Fn(&[f64]) -> Option<f64>,
    G: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    const MAX_HALVINGS: usize = 12;

    let mut x = x0;
    let Some(mut objective) = eval(&x) else {
        return InnerSolve {
            x,
            objective: f64::INFINITY,
            iterations_used: 0,
            trace: vec![],
            infeasible: true,
        };
    };
    let mut trace = vec![objective];
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut used = 0;
    let mut stalled = 0;
    for it in 0..iterations {
        // residual 1e-5 per step: far below both noise and the epsilons
        // being compared, not worth more solver time
        if objective < 1e-10 {
            break;
        }
        let Some((_, g)) = grad(&x) else { break };
        for i in 0..x.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        }
        let bias1 = 1.0 - BETA1.powi(it as i32 + 1);
        let bias2 = 1.0 - BETA2.powi(it as i32 + 1);
        let dir: Vec<f64> = (0..x.len())
            .map(|i| (m[i] / bias1) / ((v[i] / bias2).sqrt() + EPS))
            .collect();
        let mut lr = step_size;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi - lr * di).collect();
            if let Some(obj) = eval(&cand) {
                if obj <= objective {
                    x = cand;
                    objective = obj;
                    accepted = true;
                    break;
                }
            }
            lr *= 0.5;
        }
        used = it + 1;
        trace.push(objective);
        // a failed line search is not terminal: the moments keep evolving
        // and later directions can differ, so only persistent stalls exit
        if accepted {
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 20 {
                break;
            }
        }
    }
    InnerSolve { x, objective, iterations_used: used, trace, infeasible: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OCOutcome {
    pub inputs: Vec<PlantInput>,
    pub objective: f64,
    pub iterations_used: usize,
    pub infeasible: bool,
    /// Accepted objective values, non-increasing by construction.
    pub trace: Vec<f64>,
}

fn clamp_inputs(u: &mut [f64], bounds: &Option<((f64, f64), (f64, f64))>) {
    if let Some((pb, fb)) = bounds {
        for pair in u.chunks_mut(2) {
            pair[0] = pair[0].clamp(pb.0, pb.1);
            pair[1] = pair[1].clamp(fb.0, fb.1);
        }
    }
}

/// Mean squared desired-vs-predicted output over the shooting window,
/// simulated noiselessly from `state` under the candidate inputs.
fn shooting_objective(
    params: &EvaporatorParams,
    state: PlantState,
    targets: &[f64],
    u: &[f64],
    config: &OCConfig,
    want_grad: bool,
) -> Option<(f64, Option<Vec<f64>>)> {
    let m = targets.len();
    let tape = Tape::new();
    let leaves: Vec<DTensor> = if want_grad {
        u.iter().map(|v| tape.leaf(vec![], vec![*v])).collect()
    } else {
        u.iter().map(|v| DTensor::scalar(*v)).collect()
    };
    let p = ParamTensors::constants(params);
    let mut x2 = DTensor::scalar(state.x2);
    let mut p2 = DTensor::scalar(state.p2);
    let mut terms = Vec::with_capacity(m);
    for j in 0..m {
        let (nx, np) = step_deterministic(
            &p,
            &x2,
            &p2,
            &leaves[2 * j],
            &leaves[2 * j + 1],
            config.variant,
            config.substeps,
        )
        .ok()?;
        x2 = nx;
        p2 = np;
        if !x2.all_finite() || !p2.all_finite() {
            return None;
        }
        terms.push(dc::square(&dc::offset(&dc::neg(&x2).ok()?, targets[j]).ok()?).ok()?);
    }
    let term_refs: Vec<&DTensor> = terms.iter().collect();
    let loss = dc::scale(&dc::sum(&dc::concat(&term_refs).ok()?).ok()?, 1.0 / m as f64).ok()?;
    let obj = loss.item();
    if !obj.is_finite() {
        return None;
    }
    if !want_grad {
        return Some((obj, None));
    }
    let grads = tape.backward(&loss).ok()?;
    let mut g = Vec::with_capacity(u.len());
    for leaf in &leaves {
        g.push(grads.wrt(leaf).ok()?.item());
    }
    Some((obj, Some(g)))
}

/// One receding-horizon solve: minimize the window objective over the N_H
/// input pairs by single shooting from the warm start.
pub fn oc_step(
    params: &EvaporatorParams,
    state: PlantState,
    targets: &[f64],
    config: &OCConfig,
    warm: &[PlantInput],
) -> Result<OCOutcome, BaselineError> {
    config.validate()?;
    assert!(!targets.is_empty(), "empty shooting window");
    let m = targets.len();
    let mut x0 = Vec::with_capacity(2 * m);
    for j in 0..m {
        let w = warm.get(j).or(warm.last()).copied().unwrap_or(PlantInput::nominal());
        x0.push(w.p100);
        x0.push(w.f200);
    }
    clamp_inputs(&mut x0, &config.bounds);

    let bounds = config.bounds;
    let eval = |u: &[f64]| {
        let mut u = u.to_vec();
        clamp_inputs(&mut u, &bounds);
        shooting_objective(params, state, targets, &u, config, false).map(|(o, _)| o)
    };
    let grad = |u: &[f64]| {
        let mut u = u.to_vec();
        clamp_inputs(&mut u, &bounds);
        shooting_objective(params, state, targets, &u, config, true)
            .map(|(o, g)| (o, g.expect("gradient requested")))
    };
    let solve = adam_backtrack(x0, config.iterations, config.step_size, eval, grad);
    let mut u = solve.x;
    clamp_inputs(&mut u, &config.bounds);
    let inputs = u
        .chunks(2)
        .map(|c| PlantInput { p100: c[0], f200: c[1] })
        .collect();
    Ok(OCOutcome {
        inputs,
        objective: solve.objective,
        iterations_used: solve.iterations_used,
        infeasible: solve.infeasible,
        trace: solve.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OCRunStats {
    pub epsilon: f64,
    pub infeasible_steps: usize,
    pub solve_times_ms: Vec<f64>,
    pub mean_solve_time_ms: f64,
}

/// Receding-horizon rollout against the true (possibly noisy) plant with
/// true-state feedback. `model_params` may differ from `true_system`
/// (identified models); the oracle passes the same params twice.
#[allow(clippy::too_many_arguments)]
pub fn run_receding_horizon(
    true_system: &EvaporatorParams,
    model_params: &EvaporatorParams,
    reference: &ReferenceSignal,
    initial_state: PlantState,
    initial_input: PlantInput,
    config: &OCConfig,
    model: &ReferenceModelLti,
    noise: &NoiseSpec,
    noise_master: u64,
    trajectory: u64,
) -> Result<(RolloutRecord, OCRunStats), BaselineError> {
    config.validate()?;
    let n = reference.len();
    assert!(n > 0, "empty reference");
    let r = &reference.samples;
    let x0m = model.state_matching_output(initial_state.x2, r[0]);
    let desired = model.desired_output(reference, x0m);

    let mut state = initial_state;
    let mut prev = initial_input;
    let mut warm: Vec<PlantInput> = vec![initial_input; config.horizon];
    let mut rec = RolloutRecord {
        reference: r.clone(),
        desired: desired.clone(),
        measured: Vec::with_capacity(n),
        inputs: Vec::with_capacity(n),
        states: Vec::with_capacity(n),
        rss: 0.0,
    };
    let mut infeasible_steps = 0;
    let mut solve_times_ms = Vec::with_capacity(n);

    for k in 0..n {
        // same per-step noise stream layout as the closed-loop trainer, so
        // every controller on a draw sees identical realizations
        let mut rng = noise_stream(noise_master, trajectory, k as u64);
        let v = measurement_noise(noise, &mut rng);
        let w = process_noise(noise, &mut rng);
        let y = state.x2 + v;

        // choosing u_k steers y_{k+1..}; past the horizon end the window
        // holds the final desired value
        let m_len = config.horizon.min(n.saturating_sub(k)).max(1);
        let targets: Vec<f64> = (1..=m_len).map(|j| desired[(k + j).min(n - 1)]).collect();
        let t0 = Instant::now();
        let outcome = oc_step(model_params, state, &targets, config, &warm)?;
        solve_times_ms.push(t0.elapsed().as_secs_f64() * 1e3);

        let u = if outcome.infeasible {
            infeasible_steps += 1;
            prev
        } else {
            outcome.inputs[0]
        };
        if config.warm_start && !outcome.infeasible {
            // shift: drop the applied element, repeat the tail
            warm = outcome.inputs[1..].to_vec();
            warm.push(*outcome.inputs.last().expect("nonempty window"));
        }

        let p = ParamTensors::constants(true_system);
        let (nx, np) = step_deterministic(
            &p,
            &DTensor::scalar(state.x2),
            &DTensor::scalar(state.p2),
            &DTensor::scalar(u.p100),
            &DTensor::scalar(u.f200),
            config.variant,
            config.substeps,
        )?;
        state = PlantState { x2: nx.item() + w[0], p2: np.item() + w[1] };
        if !state.is_finite() {
            return Err(BaselineError::Plant(PlantError::NonFinite));
        }

        rec.measured.push(y);
        rec.inputs.push((u.p100, u.f200));
        rec.states.push((state.x2, state.p2));
        rec.rss += (desired[k] - y) * (desired[k] - y);
        prev = u;
    }

    let epsilon = rec.rss.sqrt();
    let mean = solve_times_ms.iter().sum::<f64>() / solve_times_ms.len() as f64;
    Ok((
        rec,
        OCRunStats { epsilon, infeasible_steps, solve_times_ms, mean_solve_time_ms: mean },
    ))
}

/// Open-loop excitation dataset for grey-box identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentDataset {
    pub initial_state: PlantState,
    pub inputs: Vec<(f64, f64)>,
    /// Measured outputs y_k before applying inputs[k].
    pub outputs: Vec<f64>,
}

impl IdentDataset {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

fn excitation_channel(
    master: u64,
    label_index: u64,
    n: usize,
    config: &IdentConfig,
) -> Vec<f64> {
    use rand::Rng;
    let mut rng = substream_indexed(master, "excitation", label_index);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let level = rng.gen_range(config.excitation_amplitude.0..=config.excitation_amplitude.1);
        let len = rng.gen_range(config.excitation_duration.0..=config.excitation_duration.1);
        for _ in 0..len {
            if out.len() == n {
                break;
            }
            out.push(level);
        }
    }
    out
}

/// Drive both input channels with independent random step sequences from
/// the nominal initial state and record (u, y). One resample on divergence.
pub fn generate_ident_data(
    system: &EvaporatorParams,
    config: &IdentConfig,
    master: u64,
    noise: &NoiseSpec,
) -> Result<IdentDataset, BaselineError> {
    config.validate()?;
    for attempt in 0..2u64 {
        let n = config.dataset_len;
        let p100 = excitation_channel(master, 2 * attempt, n, config);
        let f200 = excitation_channel(master, 2 * attempt + 1, n, config);
        let mut state = PlantState::nominal();
        let mut inputs = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        let mut diverged = false;
        for k in 0..n {
            let mut rng = noise_stream(master, attempt, k as u64);
            let v = measurement_noise(noise, &mut rng);
            outputs.push(state.x2 + v);
            inputs.push((p100[k], f200[k]));
            let input = PlantInput { p100: p100[k], f200: f200[k] };
            match plant::step(system, state, input, noise, &mut rng, config.variant) {
                Ok(next) => state = next,
                Err(_) => {
                    diverged = true;
                    break;
                }
            }
        }
        if !diverged {
            return Ok(IdentDataset { initial_state: PlantState::nominal(), inputs, outputs });
        }
    }
    Err(BaselineError::ExcitationDiverged)
}

/// Mean squared simulated-vs-recorded output error of `params` on the
/// dataset, with optional gradient in the multiplicative coordinates
/// params_i = base_i * exp(s_i).
fn ident_objective(
    base: &EvaporatorParams,
    s: &[f64],
    data: &IdentDataset,
    config: &IdentConfig,
    want_grad: bool,
) -> Option<(f64, Option<Vec<f64>>)> {
    let tape = Tape::new();
    let base_arr = base.as_array();
    let leaves: Vec<DTensor> = if want_grad {
        s.iter().map(|v| tape.leaf(vec![], vec![*v])).collect()
    } else {
        s.iter().map(|v| DTensor::scalar(*v)).collect()
    };
    let mut tensors = Vec::with_capacity(19);
    for i in 0..19 {
        let scaled = dc::scale(&dc::exp(&leaves[i]).ok()?, base_arr[i]).ok()?;
        tensors.push(scaled);
    }
    let p = ParamTensors(tensors);
    let mut x2 = DTensor::scalar(data.initial_state.x2);
    let mut p2 = DTensor::scalar(data.initial_state.p2);
    let n = data.len();
    let mut terms = Vec::with_capacity(n);
    for k in 0..n {
        terms.push(dc::square(&dc::offset(&dc::neg(&x2).ok()?, data.outputs[k]).ok()?).ok()?);
        let (u1, u2) = data.inputs[k];
        let (nx, np) = step_deterministic(
            &p,
            &x2,
            &p2,
            &DTensor::scalar(u1),
            &DTensor::scalar(u2),
            config.variant,
            config.substeps,
        )
        .ok()?;
        x2 = nx;
        p2 = np;
        if !x2.all_finite() || !p2.all_finite() {
            return None;
        }
    }
    let term_refs: Vec<&DTensor> = terms.iter().collect();
    let loss = dc::scale(&dc::sum(&dc::concat(&term_refs).ok()?).ok()?, 1.0 / n as f64).ok()?;
    let obj = loss.item();
    if !obj.is_finite() {
        return None;
    }
    if !want_grad {
        return Some((obj, None));
    }
    let grads = tape.backward(&loss).ok()?;
    let mut g = Vec::with_capacity(19);
    for leaf in &leaves {
        g.push(grads.wrt(leaf).ok()?.item());
    }
    Some((obj, Some(g)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub steps_used: usize,
    pub stopped_early: bool,
}

/// Estimate the 19 constants by gradient descent through the simulator,
/// starting from `initial`. Accepted steps never increase the objective, so
/// the result is never worse than the initialization.
pub fn identify_greybox(
    data: &IdentDataset,
    initial: &EvaporatorParams,
    config: &IdentConfig,
) -> Result<(EvaporatorParams, FitReport), BaselineError> {
    config.validate()?;
    if data.is_empty() {
        return Err(BaselineError::EmptyDataset);
    }
    let threshold = config.loss_threshold;
    let eval = |s: &[f64]| ident_objective(initial, s, data, config, false).map(|(o, _)| o);
    let grad = |s: &[f64]| {
        ident_objective(initial, s, data, config, true)
            .map(|(o, g)| (o, g.expect("gradient requested")))
    };
    let initial_objective = eval(&vec![0.0; 19]).ok_or(BaselineError::ExcitationDiverged)?;
    if initial_objective < threshold {
        return Ok((
            *initial,
            FitReport {
                initial_objective,
                final_objective: initial_objective,
                steps_used: 0,
                stopped_early: true,
            },
        ));
    }
    // reuse the backtracking loop but stop at the threshold
    let mut best_s = vec![0.0; 19];
    let mut best = initial_objective;
    let mut steps_used = 0;
    let mut stopped_early = false;
    let mut m = vec![0.0; 19];
    let mut v = vec![0.0; 19];
    let mut stalled = 0;
    for it in 0..config.max_steps {
        let Some((_, g)) = grad(&best_s) else { break };
        for i in 0..19 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        }
        let bias1 = 1.0 - 0.9f64.powi(it as i32 + 1);
        let bias2 = 1.0 - 0.999f64.powi(it as i32 + 1);
        let mut lr = config.step_size;
        let mut accepted = false;
        for _ in 0..12 {
            let cand: Vec<f64> = (0..19)
                .map(|i| best_s[i] - lr * (m[i] / bias1) / ((v[i] / bias2).sqrt() + 1e-8))
                .collect();
            if let Some(obj) = eval(&cand) {
                if obj <= best {
                    best_s = cand;
                    best = obj;
                    accepted = true;
                    break;
                }
            }
            lr *= 0.5;
        }
        steps_used = it + 1;
        if accepted {
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 10 {
                break;
            }
        }
        if best < threshold {
            stopped_early = true;
            break;
        }
    }
    let arr = initial.as_array();
    let mut fitted = [0.0; 19];
    for i in 0..19 {
        fitted[i] = arr[i] * best_s[i].exp();
    }
    let params = EvaporatorParams::from_array(fitted);
    params.validate()?;
    Ok((
        params,
        FitReport {
            initial_objective,
            final_objective: best,
            steps_used,
            stopped_early,
        },
    ))
}

/// Output RMSE of `params` simulated over a dataset, e.g. held-out
/// validation data.
pub fn ident_rmse(
    params: &EvaporatorParams,
    data: &IdentDataset,
    config: &IdentConfig,
) -> Result<f64, BaselineError> {
    if data.is_empty() {
        return Err(BaselineError::EmptyDataset);
    }
    let (mse, _) = ident_objective(params, &[0.0; 19], data, config, false)
        .ok_or(BaselineError::ExcitationDiverged)?;
    Ok(mse.sqrt())
}
