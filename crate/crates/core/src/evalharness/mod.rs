//! Metrics, the 20-system test protocol, summary statistics for plotting,
//! and the file formats the command-line tools read and write.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    generate_ident_data, identify_greybox, run_receding_horizon, BaselineError, IdentConfig,
    OCConfig,
};
use crate::cltrain::{rollout_infer, RolloutOptions, RolloutRecord, TrainConfig, TrainError};
use crate::ctxformer::ControllerWeights;
use crate::metasample::{sample_draw, DistributionConfig, MetaDraw, MetaError};
use crate::plant::{measurement_noise, process_noise, NoiseSpec};
use crate::refmodel::ReferenceModelLti;
use crate::rngstream::noise_stream;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
}

/// Matching root mean square error, Eq.-(17) style.
pub fn m_rmse(desired: &[f64], achieved: &[f64]) -> Result<f64, EvalError> {
    if desired.len() != achieved.len() {
        return Err(EvalError::LengthMismatch(desired.len(), achieved.len()));
    }
    if desired.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = desired.len() as f64;
    let ss: f64 = desired
        .iter()
        .zip(achieved)
        .map(|(d, a)| (d - a) * (d - a))
        .sum();
    Ok((ss / n).sqrt())
}

/// Matching error: Euclidean norm of the pointwise difference. Equals
/// sqrt(N) times the M-RMSE.
pub fn matching_error(desired: &[f64], achieved: &[f64]) -> Result<f64, EvalError> {
    if desired.len() != achieved.len() {
        return Err(EvalError::LengthMismatch(desired.len(), achieved.len()));
    }
    if desired.is_empty() {
        return Err(EvalError::Empty);
    }
    let ss: f64 = desired
        .iter()
        .zip(achieved)
        .map(|(d, a)| (d - a) * (d - a))
        .sum();
    Ok(ss.sqrt())
}

/// Linear-interpolation quantile (the "type 7" convention) on sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile out of range");
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Boxplot statistics: quartiles plus 1.5-IQR whiskers clipped to the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub whisker_lo: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_hi: f64,
    pub max: f64,
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite epsilon"));
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let whisker_lo = sorted
        .iter()
        .copied()
        .find(|v| *v >= lo_fence)
        .unwrap_or(sorted[0]);
    let whisker_hi = sorted
        .iter()
        .rev()
        .copied()
        .find(|v| *v <= hi_fence)
        .unwrap_or(sorted[sorted.len() - 1]);
    let stats = BoxStats {
        min: sorted[0],
        whisker_lo,
        q1,
        median,
        q3,
        whisker_hi,
        max: sorted[sorted.len() - 1],
    };
    debug_assert!(stats.q1 <= stats.median && stats.median <= stats.q3);
    Ok(stats)
}

/// Controllers the test suite can run on a draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ControllerKind {
    /// The trained contextual controller, zero-shot.
    Contextual,
    /// Receding-horizon OC with the true parameters.
    OracleOc { horizon: usize },
    /// Receding-horizon OC with grey-box-identified parameters.
    IdentOc { horizon: usize },
}

impl ControllerKind {
    pub fn label(&self) -> String {
        match self {
            ControllerKind::Contextual => "ctx".into(),
            ControllerKind::OracleOc { horizon } => format!("oracle-nh{horizon}"),
            ControllerKind::IdentOc { horizon } => format!("id-nh{horizon}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestProtocol {
    /// Fresh systems to test on.
    pub n_systems: usize,
    pub noise: NoiseSpec,
    pub horizon: usize,
    pub master_seed: u64,
    pub controllers: Vec<ControllerKind>,
    pub distributions: DistributionConfig,
    /// Wall-clock timings are inherently nondeterministic; disable to make
    /// every output byte reproducible.
    pub record_timings: bool,
}

impl Default for TestProtocol {
    fn default() -> Self {
        TestProtocol {
            n_systems: 20,
            noise: NoiseSpec::default_test(),
            horizon: 100,
            master_seed: 0,
            controllers: vec![
                ControllerKind::Contextual,
                ControllerKind::OracleOc { horizon: 5 },
                ControllerKind::OracleOc { horizon: 10 },
                ControllerKind::IdentOc { horizon: 5 },
            ],
            distributions: DistributionConfig::default(),
            record_timings: true,
        }
    }
}

/// Test draw indices start far above any training counter so test systems
/// can never collide with training draws under a shared master seed.
pub const TEST_DRAW_BASE: u64 = 1 << 41;

/// FNV-1a hash of the realized noise sequence of a trajectory, drawn with
/// the exact stream layout every controller uses (measurement first, then
/// process, one stream per step).
pub fn noise_hash(master: u64, trajectory: u64, horizon: usize, noise: &NoiseSpec) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for k in 0..horizon {
        let mut rng = noise_stream(master, trajectory, k as u64);
        feed(measurement_noise(noise, &mut rng));
        let w = process_noise(noise, &mut rng);
        feed(w[0]);
        feed(w[1]);
    }
    h
}

/// One (controller, draw) result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub controller: String,
    pub draw: u64,
    pub epsilon: Option<f64>,
    pub time_ms: f64,
    pub infeasible: usize,
    pub noise_hash: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub epsilons: Vec<f64>,
    pub boxplot: BoxStats,
    pub mean_time_ms: f64,
    /// Per-step mean and std of y^cl across draws.
    pub traj_mean: Vec<f64>,
    pub traj_std: Vec<f64>,
    pub infeasible_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub records: Vec<DrawRecord>,
    pub summaries: Vec<ControllerSummary>,
    /// (controller label, draw index, trajectory), for CSV export.
    pub trajectories: Vec<(String, u64, RolloutRecord)>,
}

fn run_one_controller(
    kind: ControllerKind,
    weights: &ControllerWeights,
    draw: &MetaDraw,
    trajectory: u64,
    protocol: &TestProtocol,
    oc: &OCConfig,
    ident: &IdentConfig,
    model: &ReferenceModelLti,
) -> Result<(RolloutRecord, f64, usize), EvalError> {
    match kind {
        ControllerKind::Contextual => {
            let opts = RolloutOptions {
                model: *model,
                noise: protocol.noise,
                noise_master: protocol.master_seed,
                trajectory,
                variant: oc.variant,
                substeps: oc.substeps,
            };
            let t0 = std::time::Instant::now();
            let rec = rollout_infer(weights, draw, &opts)?;
            let per_step = t0.elapsed().as_secs_f64() * 1e3 / rec.measured.len() as f64;
            Ok((rec, per_step, 0))
        }
        ControllerKind::OracleOc { horizon } => {
            let config = OCConfig { horizon, iterations: 40 * horizon, ..oc.clone() };
            let (rec, stats) = run_receding_horizon(
                &draw.system,
                &draw.system,
                &draw.reference,
                draw.initial_state,
                draw.initial_input,
                &config,
                model,
                &protocol.noise,
                protocol.master_seed,
                trajectory,
            )?;
            Ok((rec, stats.mean_solve_time_ms, stats.infeasible_steps))
        }
        ControllerKind::IdentOc { horizon } => {
            // per-draw excitation seed, decorrelated from the draw stream
            let ident_master = protocol
                .master_seed
                .wrapping_add(trajectory.wrapping_mul(0x9E3779B97F4A7C15));
            let data = generate_ident_data(&draw.system, ident, ident_master, &protocol.noise)?;
            let (fitted, _report) = identify_greybox(&data, &protocol.distributions.base, ident)?;
            let config = OCConfig { horizon, iterations: 40 * horizon, ..oc.clone() };
            let (rec, stats) = run_receding_horizon(
                &draw.system,
                &fitted,
                &draw.reference,
                draw.initial_state,
                draw.initial_input,
                &config,
                model,
                &protocol.noise,
                protocol.master_seed,
                trajectory,
            )?;
            Ok((rec, stats.mean_solve_time_ms, stats.infeasible_steps))
        }
    }
}

/// Run every configured controller on every test draw under common random
/// numbers. Per-draw controller failures are recorded, not fatal.
pub fn run_test_suite(
    protocol: &TestProtocol,
    weights: &ControllerWeights,
    oc: &OCConfig,
    ident: &IdentConfig,
    model: &ReferenceModelLti,
) -> Result<SuiteResult, EvalError> {
    if protocol.n_systems == 0 || protocol.horizon == 0 {
        return Err(EvalError::Config("n_systems and horizon must be positive".into()));
    }
    let dist = DistributionConfig { horizon: protocol.horizon, ..protocol.distributions.clone() };
    let mut records = vec![];
    let mut trajectories = vec![];

    for i in 0..protocol.n_systems as u64 {
        let trajectory = TEST_DRAW_BASE + i;
        let draw = sample_draw(protocol.master_seed, trajectory, &dist)?;
        let hash = noise_hash(protocol.master_seed, trajectory, protocol.horizon, &protocol.noise);
        for kind in &protocol.controllers {
            let label = kind.label();
            match run_one_controller(
                *kind, weights, &draw, trajectory, protocol, oc, ident, model,
            ) {
                Ok((rec, time_ms, infeasible)) => {
                    let epsilon = matching_error(&rec.desired, &rec.measured)?;
                    records.push(DrawRecord {
                        controller: label.clone(),
                        draw: i,
                        epsilon: Some(epsilon),
                        time_ms: if protocol.record_timings { time_ms } else { 0.0 },
                        infeasible,
                        noise_hash: hash,
                        error: None,
                    });
                    trajectories.push((label, i, rec));
                }
                Err(e) => records.push(DrawRecord {
                    controller: label,
                    draw: i,
                    epsilon: None,
                    time_ms: 0.0,
                    infeasible: 0,
                    noise_hash: hash,
                    error: Some(e.to_string()),
                }),
            }
        }
    }

    let mut summaries = vec![];
    for kind in &protocol.controllers {
        let label = kind.label();
        let epsilons: Vec<f64> = records
            .iter()
            .filter(|r| r.controller == label)
            .filter_map(|r| r.epsilon)
            .collect();
        if epsilons.is_empty() {
            continue;
        }
        let times: Vec<f64> = records
            .iter()
            .filter(|r| r.controller == label && r.error.is_none())
            .map(|r| r.time_ms)
            .collect();
        let infeasible_total = records
            .iter()
            .filter(|r| r.controller == label)
            .map(|r| r.infeasible)
            .sum();
        let trajs: Vec<&RolloutRecord> = trajectories
            .iter()
            .filter(|(l, _, _)| *l == label)
            .map(|(_, _, r)| r)
            .collect();
        let n_steps = trajs[0].measured.len();
        let mut traj_mean = vec![0.0; n_steps];
        let mut traj_std = vec![0.0; n_steps];
        for k in 0..n_steps {
            let vals: Vec<f64> = trajs.iter().map(|t| t.measured[k]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            traj_mean[k] = mean;
            traj_std[k] = var.sqrt();
        }
        summaries.push(ControllerSummary {
            controller: label,
            boxplot: box_stats(&epsilons)?,
            epsilons,
            mean_time_ms: times.iter().sum::<f64>() / times.len() as f64,
            traj_mean,
            traj_std,
            infeasible_total,
        });
    }
    Ok(SuiteResult { records, summaries, trajectories })
}

/// summary.csv: one row per (controller, draw).
pub fn write_summary_csv<W: std::io::Write>(
    mut w: W,
    records: &[DrawRecord],
) -> std::io::Result<()> {
    writeln!(w, "controller,draw,epsilon,time_ms,infeasible,noise_hash,error")?;
    for r in records {
        let eps = r.epsilon.map(|e| format!("{e:.17e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{:.6},{},{:016x},{}",
            r.controller,
            r.draw,
            eps,
            r.time_ms,
            r.infeasible,
            r.noise_hash,
            r.error.as_deref().unwrap_or("")
        )?;
    }
    Ok(())
}

/// Per-(controller, draw) trajectory CSV with the plotting schema.
pub fn write_trajectory_csv<W: std::io::Write>(
    mut w: W,
    rec: &RolloutRecord,
) -> std::io::Result<()> {
    writeln!(w, "k,r,y_d,y_cl,u1,u2")?;
    for k in 0..rec.measured.len() {
        writeln!(
            w,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            k, rec.reference[k], rec.desired[k], rec.measured[k], rec.inputs[k].0,
            rec.inputs[k].1
        )?;
    }
    Ok(())
}

/// Write the whole suite output tree under `dir`.
pub fn write_suite_outputs(dir: &Path, result: &SuiteResult) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("summary.csv"))?;
    write_summary_csv(&mut f, &result.records)?;
    let json = serde_json::to_string_pretty(&result.summaries)
        .map_err(|e| EvalError::Config(e.to_string()))?;
    std::fs::write(dir.join("summaries.json"), json)?;
    for (label, draw, rec) in &result.trajectories {
        let mut f = std::fs::File::create(dir.join(format!("traj_{label}_{draw}.csv")))?;
        write_trajectory_csv(&mut f, rec)?;
    }
    Ok(())
}

/// Top-level configuration file: every numeric default lives here under a
/// named key, serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub protocol: TestProtocol,
    pub oc: OCConfig,
    pub ident: IdentConfig,
    pub model: ReferenceModelLti,
}

impl AppConfig {
    /// Full-scale settings mirroring the published protocol.
    pub fn paper() -> Self {
        AppConfig {
            train: TrainConfig::paper(),
            protocol: TestProtocol::default(),
            oc: OCConfig::default(),
            ident: IdentConfig::default(),
            model: ReferenceModelLti::default(),
        }
    }

    /// Laptop-sized settings: small controller, short budgets, one RK4
    /// substep inside the OC model.
    pub fn desk() -> Self {
        AppConfig {
            train: TrainConfig::desk(),
            protocol: TestProtocol {
                n_systems: 5,
                horizon: 50,
                controllers: vec![
                    ControllerKind::Contextual,
                    ControllerKind::OracleOc { horizon: 5 },
                    ControllerKind::IdentOc { horizon: 5 },
                ],
                ..Default::default()
            },
            oc: OCConfig { substeps: 1, ..Default::default() },
            ident: IdentConfig { dataset_len: 200, max_steps: 25, ..Default::default() },
            model: ReferenceModelLti::default(),
        }
    }

    pub fn to_toml(&self) -> Result<String, EvalError> {
        toml::to_string_pretty(self).map_err(|e| EvalError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
