//! Forced-circulation evaporator: the controlled system class.
//!
//! Continuous-time dynamics discretized at Ts = 1 s with classical RK4.
//! Every function here is written over [`DTensor`] scalars, so the same
//! code path serves plain simulation (constants) and end-to-end
//! differentiation (tape-attached state, input or parameters).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DTensor, Tape};

pub const TS: f64 = 1.0;
pub const DEFAULT_SUBSTEPS: usize = 4;

/// Fixed signature of the evaporator class: 2 states, 2 inputs, 1 output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemSignature {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
}

pub const SIGNATURE: SystemSignature = SystemSignature { n_x: 2, n_u: 2, n_y: 1 };

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("invalid evaporator parameters: {0}")]
    InvalidParams(String),
    #[error("division guard violated: {0}")]
    DivisionGuard(String),
    #[error("trajectory diverged at step {step}: non-finite state")]
    Diverged { step: usize },
    #[error("non-finite state or input")]
    NonFinite,
}

/// Which right-hand side to integrate. The printed ODE and the mass/energy
/// balance of the underlying process model disagree; both are shipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsVariant {
    /// Balance-consistent signs (default); with the consistent preset the
    /// nominal operating point is a steady state.
    #[default]
    Consistent,
    /// The equations exactly as printed, kept for audit.
    PaperLiteral,
}

/// The 19 physical constants of the evaporation process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaporatorParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub phi: f64,
    pub gamma: f64,
    pub h: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "C")]
    pub cap: f64,
    #[serde(rename = "UA2")]
    pub ua2: f64,
    #[serde(rename = "Cp")]
    pub cp: f64,
    pub lambda: f64,
    pub lambda_s: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "X1")]
    pub x1: f64,
    #[serde(rename = "F3")]
    pub f3: f64,
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T200")]
    pub t200: f64,
}

impl EvaporatorParams {
    /// Published nominal constants.
    pub fn nominal() -> Self {
        EvaporatorParams {
            a: 0.5616,
            b: 0.3126,
            c: 48.43,
            d: 0.507,
            e: 55.0,
            phi: 0.1538,
            gamma: 55.0,
            h: 0.16,
            m: 20.0,
            cap: 4.0,
            ua2: 6.84,
            cp: 0.07,
            lambda: 38.5,
            lambda_s: 36.6,
            f1: 10.0,
            x1: 5.0,
            f3: 50.0,
            t1: 40.0,
            t200: 25.0,
        }
    }

    /// Nominal constants with the steam-jacket intercept adjusted so the
    /// nominal operating point is a fixed point of the consistent dynamics.
    pub fn consistent() -> Self {
        EvaporatorParams { gamma: 90.0, ..Self::nominal() }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let positive = [
            ("M", self.m),
            ("C", self.cap),
            ("lambda", self.lambda),
            ("lambda_s", self.lambda_s),
            ("Cp", self.cp),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(PlantError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.f1 + self.f3 > 0.0) {
            return Err(PlantError::InvalidParams("F1 + F3 must be > 0".into()));
        }
        if self.as_array().iter().any(|v| !v.is_finite()) {
            return Err(PlantError::InvalidParams("non-finite constant".into()));
        }
        Ok(())
    }

    pub const NAMES: [&'static str; 19] = [
        "a", "b", "c", "d", "e", "phi", "gamma", "h", "M", "C", "UA2", "Cp", "lambda",
        "lambda_s", "F1", "X1", "F3", "T1", "T200",
    ];

    pub fn as_array(&self) -> [f64; 19] {
        [
            self.a, self.b, self.c, self.d, self.e, self.phi, self.gamma, self.h, self.m,
            self.cap, self.ua2, self.cp, self.lambda, self.lambda_s, self.f1, self.x1, self.f3,
            self.t1, self.t200,
        ]
    }

    pub fn from_array(v: [f64; 19]) -> Self {
        EvaporatorParams {
            a: v[0],
            b: v[1],
            c: v[2],
            d: v[3],
            e: v[4],
            phi: v[5],
            gamma: v[6],
            h: v[7],
            m: v[8],
            cap: v[9],
            ua2: v[10],
            cp: v[11],
            lambda: v[12],
            lambda_s: v[13],
            f1: v[14],
            x1: v[15],
            f3: v[16],
            t1: v[17],
            t200: v[18],
        }
    }
}

/// Operating point used throughout: initial condition and the steady-state
/// input of the nominal (consistent) process.
pub const NOMINAL_STATE: (f64, f64) = (25.0, 49.743);
pub const NOMINAL_INPUT: (f64, f64) = (191.713, 215.888);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Product composition X2 [%]
    pub x2: f64,
    /// Operating pressure P2 [kPa]
    pub p2: f64,
}

impl PlantState {
    pub fn nominal() -> Self {
        PlantState { x2: NOMINAL_STATE.0, p2: NOMINAL_STATE.1 }
    }

    pub fn is_finite(&self) -> bool {
        self.x2.is_finite() && self.p2.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantInput {
    /// Steam pressure P100 [kPa]
    pub p100: f64,
    /// Cooling-water flow rate F200 [kg/min]
    pub f200: f64,
}

impl PlantInput {
    pub fn nominal() -> Self {
        PlantInput { p100: NOMINAL_INPUT.0, f200: NOMINAL_INPUT.1 }
    }
}

/// Discrete-time additive Gaussian noise per the state-space form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Diagonal of the 2x2 process covariance.
    pub process_cov: [f64; 2],
    pub measurement_var: f64,
    pub enabled: bool,
}

impl NoiseSpec {
    pub fn disabled() -> Self {
        NoiseSpec { process_cov: [0.1, 0.1], measurement_var: 0.1, enabled: false }
    }

    pub fn default_test() -> Self {
        NoiseSpec { process_cov: [0.1, 0.1], measurement_var: 0.1, enabled: true }
    }
}

/// Tape-attached copy of the 19 constants, for differentiating w.r.t. them
/// (grey-box identification).
pub struct ParamTensors(pub Vec<DTensor>);

impl ParamTensors {
    pub fn constants(p: &EvaporatorParams) -> Self {
        ParamTensors(p.as_array().iter().map(|v| DTensor::scalar(*v)).collect())
    }

    pub fn on_tape(tape: &Tape, p: &EvaporatorParams) -> Self {
        ParamTensors(
            p.as_array()
                .iter()
                .map(|v| tape.leaf(vec![], vec![*v]))
                .collect(),
        )
    }

    fn get(&self, i: usize) -> &DTensor {
        &self.0[i]
    }
}

// Indices into ParamTensors, matching EvaporatorParams::NAMES.
const A: usize = 0;
const B: usize = 1;
const C_: usize = 2;
const D: usize = 3;
const E: usize = 4;
const PHI: usize = 5;
const GAMMA: usize = 6;
const H: usize = 7;
const M_: usize = 8;
const CAP: usize = 9;
const UA2: usize = 10;
const CP: usize = 11;
const LAMBDA: usize = 12;
const LAMBDA_S: usize = 13;
const F1: usize = 14;
const X1: usize = 15;
const F3: usize = 16;
const T1: usize = 17;
const T200: usize = 18;

/// Algebraic intermediates of the evaporator energy balance.
pub struct Intermediates {
    pub t2: DTensor,
    pub t3: DTensor,
    pub t100: DTensor,
    pub ua1: DTensor,
    pub q100: DTensor,
    pub f100: DTensor,
    pub q200: DTensor,
    pub f2: DTensor,
    pub f4: DTensor,
    pub f5: DTensor,
}

/// Liquid-energy balance, heat steam jacket, condenser and level controller.
pub fn algebraic_chain(
    p: &ParamTensors,
    x2: &DTensor,
    p2: &DTensor,
    p100: &DTensor,
    f200: &DTensor,
) -> Result<Intermediates, PlantError> {
    if f200.values().iter().any(|v| *v <= 0.0) {
        return Err(PlantError::DivisionGuard(format!(
            "F200 must be > 0, got {}",
            f200.item()
        )));
    }
    let t2 = &(&(p.get(A) * p2) + &(p.get(B) * x2)) + p.get(C_);
    let t3 = &(p.get(D) * p2) + p.get(E);
    let t100 = &(p.get(PHI) * p100) + p.get(GAMMA);
    let ua1 = p.get(H) * &(p.get(F1) + p.get(F3));
    let q100 = &ua1 * &(&t100 - &t2);
    let f4 = &(&q100 - &(&(p.get(F1) * p.get(CP)) * &(&t2 - p.get(T1)))) / p.get(LAMBDA);
    let f100 = &q100 / p.get(LAMBDA_S);
    let denom = &DTensor::scalar(1.0)
        + &(p.get(UA2) / &(&(&DTensor::scalar(2.0) * p.get(CP)) * f200));
    let q200 = &(p.get(UA2) * &(&t3 - p.get(T200))) / &denom;
    let f5 = &q200 / p.get(LAMBDA);
    let f2 = p.get(F1) - &f4;
    Ok(Intermediates { t2, t3, t100, ua1, q100, f100, q200, f2, f4, f5 })
}

/// Continuous-time right-hand side: (dX2/dt, dP2/dt).
pub fn derivative(
    p: &ParamTensors,
    x2: &DTensor,
    p2: &DTensor,
    p100: &DTensor,
    f200: &DTensor,
    variant: DynamicsVariant,
) -> Result<(DTensor, DTensor), PlantError> {
    let ch = algebraic_chain(p, x2, p2, p100, f200)?;
    match variant {
        DynamicsVariant::Consistent => {
            let dx2 = &(&(p.get(F1) * p.get(X1)) - &(&ch.f2 * x2)) / p.get(M_);
            let dp2 = &(&ch.f4 - &ch.f5) / p.get(CAP);
            Ok((dx2, dp2))
        }
        DynamicsVariant::PaperLiteral => {
            let dx2 = &(&(p.get(F1) * x2) + &(&ch.f2 * p2)) / p.get(M_);
            let dp2 = &(&ch.f4 + &ch.f5) / p.get(CAP);
            Ok((dx2, dp2))
        }
    }
}

/// One noiseless RK4 step of Ts seconds over `substeps` substeps,
/// differentiable in state, input and parameters.
pub fn step_deterministic(
    p: &ParamTensors,
    x2: &DTensor,
    p2: &DTensor,
    p100: &DTensor,
    f200: &DTensor,
    variant: DynamicsVariant,
    substeps: usize,
) -> Result<(DTensor, DTensor), PlantError> {
    let dt = TS / substeps as f64;
    let mut x = x2.clone();
    let mut y = p2.clone();
    for _ in 0..substeps {
        let (k1x, k1y) = derivative(p, &x, &y, p100, f200, variant)?;
        let (k2x, k2y) = derivative(
            p,
            &(&x + &(&k1x * (dt / 2.0))),
            &(&y + &(&k1y * (dt / 2.0))),
            p100,
            f200,
            variant,
        )?;
        let (k3x, k3y) = derivative(
            p,
            &(&x + &(&k2x * (dt / 2.0))),
            &(&y + &(&k2y * (dt / 2.0))),
            p100,
            f200,
            variant,
        )?;
        let (k4x, k4y) = derivative(
            p,
            &(&x + &(&k3x * dt)),
            &(&y + &(&k3y * dt)),
            p100,
            f200,
            variant,
        )?;
        x = &x + &(&(&(&k1x + &(&k2x * 2.0)) + &(&(&k3x * 2.0) + &k4x)) * (dt / 6.0));
        y = &y + &(&(&(&k1y + &(&k2y * 2.0)) + &(&(&k3y * 2.0) + &k4y)) * (dt / 6.0));
    }
    Ok((x, y))
}

/// Process noise sample for a step; zero vector when disabled.
pub fn process_noise(noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> [f64; 2] {
    if !noise.enabled {
        return [0.0, 0.0];
    }
    let std = [noise.process_cov[0].sqrt(), noise.process_cov[1].sqrt()];
    [gaussian(rng) * std[0], gaussian(rng) * std[1]]
}

/// Measurement noise sample; zero when disabled.
pub fn measurement_noise(noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> f64 {
    if !noise.enabled {
        return 0.0;
    }
    gaussian(rng) * noise.measurement_var.sqrt()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per sample keeps the stream layout obvious.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Plain-f64 convenience step with additive process noise.
pub fn step(
    params: &EvaporatorParams,
    state: PlantState,
    input: PlantInput,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
    variant: DynamicsVariant,
) -> Result<PlantState, PlantError> {
    if !state.is_finite() {
        return Err(PlantError::NonFinite);
    }
    let p = ParamTensors::constants(params);
    let (nx, ny) = step_deterministic(
        &p,
        &DTensor::scalar(state.x2),
        &DTensor::scalar(state.p2),
        &DTensor::scalar(input.p100),
        &DTensor::scalar(input.f200),
        variant,
        DEFAULT_SUBSTEPS,
    )?;
    let w = process_noise(noise, rng);
    let next = PlantState { x2: nx.item() + w[0], p2: ny.item() + w[1] };
    if !next.is_finite() {
        return Err(PlantError::NonFinite);
    }
    Ok(next)
}

/// y = X2 (+ measurement noise when enabled).
pub fn measure(state: PlantState, noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> f64 {
    state.x2 + measurement_noise(noise, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradient, sum, DTensor};
    use crate::rngstream::noise_stream;

    fn chain_at(params: &EvaporatorParams, state: PlantState, input: PlantInput) -> Intermediates {
        let p = ParamTensors::constants(params);
        algebraic_chain(
            &p,
            &DTensor::scalar(state.x2),
            &DTensor::scalar(state.p2),
            &DTensor::scalar(input.p100),
            &DTensor::scalar(input.f200),
        )
        .unwrap()
    }

    #[test]
    fn nominal_temperatures() {
        let ch = chain_at(
            &EvaporatorParams::nominal(),
            PlantState { x2: 25.0, p2: 49.743 },
            PlantInput::nominal(),
        );
        assert!((ch.t2.item() - 84.1807).abs() < 1e-3, "T2 = {}", ch.t2.item());
        assert!((ch.t3.item() - 80.2197).abs() < 1e-3, "T3 = {}", ch.t3.item());
    }

    #[test]
    fn ua1_from_nominal_flows() {
        let ch = chain_at(
            &EvaporatorParams::nominal(),
            PlantState::nominal(),
            PlantInput::nominal(),
        );
        assert!((ch.ua1.item() - 9.6).abs() < 1e-12);
    }

    #[test]
    fn condenser_heat_monotone_in_cooling_flow() {
        let params = EvaporatorParams::nominal();
        let base = chain_at(&params, PlantState::nominal(), PlantInput::nominal());
        let doubled = chain_at(
            &params,
            PlantState::nominal(),
            PlantInput { f200: 2.0 * NOMINAL_INPUT.1, ..PlantInput::nominal() },
        );
        assert!(doubled.q200.item() > base.q200.item());
    }

    #[test]
    fn consistent_preset_operating_point_is_steady() {
        let p = ParamTensors::constants(&EvaporatorParams::consistent());
        let (dx2, dp2) = derivative(
            &p,
            &DTensor::scalar(NOMINAL_STATE.0),
            &DTensor::scalar(NOMINAL_STATE.1),
            &DTensor::scalar(NOMINAL_INPUT.0),
            &DTensor::scalar(NOMINAL_INPUT.1),
            DynamicsVariant::Consistent,
        )
        .unwrap();
        assert!(dx2.item().abs() < 1e-2, "dX2 = {}", dx2.item());
        assert!(dp2.item().abs() < 1e-2, "dP2 = {}", dp2.item());
    }

    #[test]
    fn paper_literal_is_not_steady_there() {
        let p = ParamTensors::constants(&EvaporatorParams::consistent());
        let (dx2, _) = derivative(
            &p,
            &DTensor::scalar(NOMINAL_STATE.0),
            &DTensor::scalar(NOMINAL_STATE.1),
            &DTensor::scalar(NOMINAL_INPUT.0),
            &DTensor::scalar(NOMINAL_INPUT.1),
            DynamicsVariant::PaperLiteral,
        )
        .unwrap();
        assert!(dx2.item().abs() > 1.0, "dX2 = {}", dx2.item());
    }

    #[test]
    fn doubling_mass_halves_composition_rate() {
        let mut perturbed = EvaporatorParams::consistent();
        perturbed.m *= 2.0;
        let state = PlantState { x2: 24.0, p2: 51.0 };
        let at = |params: &EvaporatorParams| {
            let p = ParamTensors::constants(params);
            derivative(
                &p,
                &DTensor::scalar(state.x2),
                &DTensor::scalar(state.p2),
                &DTensor::scalar(NOMINAL_INPUT.0),
                &DTensor::scalar(NOMINAL_INPUT.1),
                DynamicsVariant::Consistent,
            )
            .unwrap()
            .0
            .item()
        };
        let base = at(&EvaporatorParams::consistent());
        let halved = at(&perturbed);
        assert!((halved - base / 2.0).abs() < 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn fixed_point_survives_discrete_step() {
        let mut rng = noise_stream(0, 0, 0);
        let next = step(
            &EvaporatorParams::consistent(),
            PlantState::nominal(),
            PlantInput::nominal(),
            &NoiseSpec::disabled(),
            &mut rng,
            DynamicsVariant::Consistent,
        )
        .unwrap();
        assert!((next.x2 - NOMINAL_STATE.0).abs() < 1e-3);
        assert!((next.p2 - NOMINAL_STATE.1).abs() < 1e-3);
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut rng = noise_stream(42, 3, 5);
            step(
                &EvaporatorParams::consistent(),
                PlantState { x2: 24.0, p2: 48.0 },
                PlantInput::nominal(),
                &NoiseSpec::default_test(),
                &mut rng,
                DynamicsVariant::Consistent,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_variance_noise_equals_noiseless() {
        let noise = NoiseSpec { process_cov: [0.0, 0.0], measurement_var: 0.0, enabled: true };
        let mut rng1 = noise_stream(1, 0, 0);
        let mut rng2 = noise_stream(1, 0, 0);
        let state = PlantState { x2: 23.5, p2: 50.2 };
        let a = step(
            &EvaporatorParams::consistent(),
            state,
            PlantInput::nominal(),
            &noise,
            &mut rng1,
            DynamicsVariant::Consistent,
        )
        .unwrap();
        let b = step(
            &EvaporatorParams::consistent(),
            state,
            PlantInput::nominal(),
            &NoiseSpec::disabled(),
            &mut rng2,
            DynamicsVariant::Consistent,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(measure(state, &noise, &mut rng1), state.x2);
    }

    #[test]
    fn measurement_noise_sample_mean() {
        let state = PlantState::nominal();
        let noise = NoiseSpec::default_test();
        let n = 100_000;
        let mut sum_y = 0.0;
        for i in 0..n {
            let mut rng = noise_stream(9, 0, i);
            sum_y += measure(state, &noise, &mut rng);
        }
        let mean = sum_y / n as f64;
        let bound = 3.0 * noise.measurement_var.sqrt() / (n as f64).sqrt();
        assert!((mean - state.x2).abs() < bound, "mean {mean}");
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        // d(X2')/d(state, input) through the full RK4 chain
        let err = check_gradient(
            |v| {
                let p = ParamTensors::constants(&EvaporatorParams::consistent());
                let x2 = crate::diffcore::slice_rows(v, 0, 1)?;
                let p2 = crate::diffcore::slice_rows(v, 1, 2)?;
                let p100 = crate::diffcore::slice_rows(v, 2, 3)?;
                let f200 = crate::diffcore::slice_rows(v, 3, 4)?;
                let (nx, ny) = step_deterministic(
                    &p,
                    &crate::diffcore::reshape(&x2, vec![])?,
                    &crate::diffcore::reshape(&p2, vec![])?,
                    &crate::diffcore::reshape(&p100, vec![])?,
                    &crate::diffcore::reshape(&f200, vec![])?,
                    DynamicsVariant::Consistent,
                    DEFAULT_SUBSTEPS,
                )
                .map_err(|_| crate::diffcore::DiffError::NonFinite(0))?;
                sum(&crate::diffcore::square(&crate::diffcore::concat(&[&nx, &ny])?)?)
            },
            &DTensor::constant(vec![4], vec![24.5, 50.1, 195.0, 210.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "gradient error {err}");
    }

    #[test]
    fn perturbed_rollouts_stay_finite() {
        use rand::Rng;
        for sys in 0..10 {
            let mut rng = crate::rngstream::substream_indexed(11, "system", sys);
            let base = EvaporatorParams::consistent().as_array();
            let mut arr = base;
            for v in arr.iter_mut() {
                *v *= rng.gen_range(0.95..1.05);
            }
            let params = EvaporatorParams::from_array(arr);
            let mut state = PlantState::nominal();
            let mut noise_rng = noise_stream(11, sys, 0);
            for k in 0..100 {
                state = step(
                    &params,
                    state,
                    PlantInput::nominal(),
                    &NoiseSpec::disabled(),
                    &mut noise_rng,
                    DynamicsVariant::Consistent,
                )
                .unwrap_or_else(|_| panic!("diverged at step {k} for system {sys}"));
                assert!(state.is_finite());
            }
        }
    }

    #[test]
    fn f200_guard() {
        let p = ParamTensors::constants(&EvaporatorParams::nominal());
        let err = algebraic_chain(
            &p,
            &DTensor::scalar(25.0),
            &DTensor::scalar(49.7),
            &DTensor::scalar(191.7),
            &DTensor::scalar(0.0),
        );
        assert!(matches!(err, Err(PlantError::DivisionGuard(_))));
    }

    #[test]
    fn params_roundtrip_named_keys() {
        let p = EvaporatorParams::consistent();
        let text = toml::to_string(&p).unwrap();
        for key in EvaporatorParams::NAMES {
            assert!(text.contains(key), "missing key {key} in {text}");
        }
        let back: EvaporatorParams = toml::from_str(&text).unwrap();
        assert_eq!(p, back);
    }
}
