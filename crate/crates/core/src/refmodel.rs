//! Desired closed-loop behavior (scalar LTI reference model) and the
//! random step-reference sampler.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_HORIZON: usize = 100;

#[derive(Debug, Error)]
pub enum RefError {
    #[error("degenerate sampling range: {0}")]
    DegenerateRange(String),
}

/// x'_{k+1} = a_m x'_k + b_m r_k ; y^d_k = c_m x'_k + d_m r_k
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModelLti {
    pub a_m: f64,
    pub b_m: f64,
    pub c_m: f64,
    pub d_m: f64,
}

impl Default for ReferenceModelLti {
    fn default() -> Self {
        ReferenceModelLti { a_m: 0.4286, b_m: 0.7143, c_m: 0.5669, d_m: 0.2914 }
    }
}

impl ReferenceModelLti {
    pub fn is_stable(&self) -> bool {
        self.a_m.abs() < 1.0
    }

    pub fn dc_gain(&self) -> f64 {
        self.c_m * self.b_m / (1.0 - self.a_m) + self.d_m
    }

    /// Initial model state that makes y^d_0 equal the plant's initial
    /// noiseless output, removing the artificial startup transient.
    pub fn state_matching_output(&self, y0: f64, r0: f64) -> f64 {
        (y0 - self.d_m * r0) / self.c_m
    }

    /// Run the model over a reference from initial state `x0m`.
    pub fn desired_output(&self, reference: &ReferenceSignal, x0m: f64) -> Vec<f64> {
        let mut x = x0m;
        reference
            .samples
            .iter()
            .map(|r| {
                let y = self.c_m * x + self.d_m * r;
                x = self.a_m * x + self.b_m * r;
                y
            })
            .collect()
    }
}

/// Piecewise-constant reference over an N-step horizon [%].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSignal {
    pub samples: Vec<f64>,
}

impl ReferenceSignal {
    pub fn constant(level: f64, n: usize) -> Self {
        ReferenceSignal { samples: vec![level; n] }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Random steps: level uniform in `amplitude`, integer duration uniform in
/// `duration` seconds, last segment truncated to fit the horizon.
pub fn sample_reference(
    rng: &mut ChaCha8Rng,
    n: usize,
    amplitude: (f64, f64),
    duration: (usize, usize),
) -> Result<ReferenceSignal, RefError> {
    assert!(n > 0, "horizon must be positive");
    if amplitude.1 < amplitude.0 {
        return Err(RefError::DegenerateRange(format!(
            "amplitude [{}, {}]",
            amplitude.0, amplitude.1
        )));
    }
    if duration.0 == 0 || duration.1 < duration.0 {
        return Err(RefError::DegenerateRange(format!(
            "duration [{}, {}]",
            duration.0, duration.1
        )));
    }
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let level = rng.gen_range(amplitude.0..=amplitude.1);
        let len = rng.gen_range(duration.0..=duration.1);
        for _ in 0..len {
            if samples.len() == n {
                break;
            }
            samples.push(level);
        }
    }
    Ok(ReferenceSignal { samples })
}

pub const DEFAULT_AMPLITUDE: (f64, f64) = (20.0, 25.0);
pub const DEFAULT_DURATION: (usize, usize) = (20, 50);
