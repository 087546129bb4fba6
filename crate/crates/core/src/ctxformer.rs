//! The contextual controller: a decoder-only, causally masked Transformer
//! over (tracking-error, previous-input) tokens with a 3-parameter PID
//! output head. The forward pass is built from `diffcore` primitives so the
//! closed-loop tracking loss can be backpropagated into the weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{self as dc, DTensor, HostTensor, Tape};
use crate::plant::{NOMINAL_INPUT, TS};

#[derive(Debug, Error)]
pub enum CtrlError {
    #[error("empty context")]
    EmptyContext,
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite context entry")]
    NonFiniteContext,
    #[error(transparent)]
    Diff(#[from] dc::DiffError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalKind {
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_ctx: usize,
    pub d_model: usize,
    /// n_y + n_u = 3 for the evaporator class.
    pub token_dim: usize,
    /// n_u = 2.
    pub output_dim: usize,
    pub mlp_expansion: usize,
    pub positional: PositionalKind,
    /// Constant operating-point offset added to the controller output so a
    /// zero-initialized head emits a sensible input. Set to zero to ablate.
    pub u_bias: (f64, f64),
}

impl ControllerConfig {
    /// Full-scale preset.
    pub fn paper() -> Self {
        ControllerConfig {
            n_layers: 8,
            n_heads: 4,
            n_ctx: 100,
            d_model: 128,
            token_dim: 3,
            output_dim: 2,
            mlp_expansion: 4,
            positional: PositionalKind::Learned,
            u_bias: NOMINAL_INPUT,
        }
    }

    /// Laptop-sized preset for tests and smoke training.
    pub fn desk() -> Self {
        ControllerConfig { n_layers: 2, n_heads: 2, d_model: 32, ..Self::paper() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), CtrlError> {
        if self.d_model % self.n_heads != 0 {
            return Err(CtrlError::Checkpoint(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_ctx == 0 {
            return Err(CtrlError::Checkpoint("n_ctx must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed context standardization: raw kPa / kg-min magnitudes destabilize
/// attention, so errors and inputs are affinely scaled before embedding.
pub const ERROR_SCALE: f64 = 5.0;
pub const INPUT_SCALE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_g: HostTensor,
    pub ln1_b: HostTensor,
    pub wq: HostTensor,
    pub bq: HostTensor,
    pub wk: HostTensor,
    pub bk: HostTensor,
    pub wv: HostTensor,
    pub bv: HostTensor,
    pub wo: HostTensor,
    pub bo: HostTensor,
    pub ln2_g: HostTensor,
    pub ln2_b: HostTensor,
    pub w1: HostTensor,
    pub b1: HostTensor,
    pub w2: HostTensor,
    pub b2: HostTensor,
}

/// All transformer parameters plus the 3 PID gains (Kp, Ki, Kd).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerWeights {
    pub config: ControllerConfig,
    pub embed_w: HostTensor,
    pub embed_b: HostTensor,
    pub pos: HostTensor,
    pub layers: Vec<LayerWeights>,
    pub final_g: HostTensor,
    pub final_b: HostTensor,
    pub out_w: HostTensor,
    pub out_b: HostTensor,
    pub pid: HostTensor,
}

impl ControllerWeights {
    /// Gaussian init (std 0.02) for the body; output projection and PID
    /// gains start at zero so the untrained controller emits u_bias.
    pub fn init(config: &ControllerConfig, rng: &mut ChaCha8Rng) -> Self {
        config.validate().expect("valid controller config");
        let d = config.d_model;
        let hidden = d * config.mlp_expansion;
        let mut gauss = |shape: Vec<usize>| {
            let n = shape.iter().product();
            let values = (0..n).map(|_| sample_gaussian(rng) * 0.02).collect();
            HostTensor::new(shape, values)
        };
        let ones = |n: usize| HostTensor::new(vec![n], vec![1.0; n]);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: ones(d),
                ln1_b: HostTensor::zeros(vec![d]),
                wq: gauss(vec![d, d]),
                bq: HostTensor::zeros(vec![d]),
                wk: gauss(vec![d, d]),
                bk: HostTensor::zeros(vec![d]),
                wv: gauss(vec![d, d]),
                bv: HostTensor::zeros(vec![d]),
                wo: gauss(vec![d, d]),
                bo: HostTensor::zeros(vec![d]),
                ln2_g: ones(d),
                ln2_b: HostTensor::zeros(vec![d]),
                w1: gauss(vec![d, hidden]),
                b1: HostTensor::zeros(vec![hidden]),
                w2: gauss(vec![hidden, d]),
                b2: HostTensor::zeros(vec![d]),
            })
            .collect();
        ControllerWeights {
            config: config.clone(),
            embed_w: gauss(vec![config.token_dim, d]),
            embed_b: HostTensor::zeros(vec![d]),
            pos: gauss(vec![config.n_ctx, d]),
            layers,
            final_g: ones(d),
            final_b: HostTensor::zeros(vec![d]),
            out_w: HostTensor::zeros(vec![d, config.output_dim]),
            out_b: HostTensor::zeros(vec![config.output_dim]),
            pid: HostTensor::zeros(vec![3]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &HostTensor)> {
        let mut out: Vec<(String, &HostTensor)> = vec![
            ("embed_w".into(), &self.embed_w),
            ("embed_b".into(), &self.embed_b),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_g".into(), &self.final_g));
        out.push(("final_b".into(), &self.final_b));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out.push(("pid".into(), &self.pid));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut HostTensor)> {
        let mut out: Vec<(String, &mut HostTensor)> = vec![
            ("embed_w".into(), &mut self.embed_w),
            ("embed_b".into(), &mut self.embed_b),
            ("pos".into(), &mut self.pos),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_g".into(), &mut self.final_g));
        out.push(("final_b".into(), &mut self.final_b));
        out.push(("out_w".into(), &mut self.out_w));
        out.push(("out_b".into(), &mut self.out_b));
        out.push(("pid".into(), &mut self.pid));
        out
    }

    pub fn count_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Exact parameter count for a config, including the 3 PID gains.
pub fn count_params(config: &ControllerConfig) -> usize {
    let d = config.d_model;
    let hidden = d * config.mlp_expansion;
    let per_layer = 2 * d          // ln1
        + 4 * (d * d + d)          // q, k, v, o
        + 2 * d                    // ln2
        + d * hidden + hidden      // mlp in
        + hidden * d + d; // mlp out
    config.token_dim * d + d       // embedding
        + config.n_ctx * d         // positions
        + config.n_layers * per_layer
        + 2 * d                    // final norm
        + d * config.output_dim + config.output_dim
        + 3 // pid
}

fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Tape-attached mirror of the weights for one differentiable rollout.
pub struct TapeWeights {
    pub tensors: Vec<(String, DTensor)>,
}

impl TapeWeights {
    pub fn on_tape(tape: &Tape, w: &ControllerWeights) -> Self {
        TapeWeights {
            tensors: w
                .named_tensors()
                .into_iter()
                .map(|(name, t)| (name, tape.param(t)))
                .collect(),
        }
    }

    /// Off-tape constants, for pure inference.
    pub fn constants(w: &ControllerWeights) -> Self {
        TapeWeights {
            tensors: w
                .named_tensors()
                .into_iter()
                .map(|(name, t)| (name, DTensor::from_host(t)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &DTensor {
        &self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown weight {name}"))
            .1
    }
}

/// The growing closed-loop history fed to the controller: errors e_0..e_k
/// and inputs u_{-1}..u_{k-1}, as tape scalars.
pub struct Context {
    pub errors: Vec<DTensor>,
    pub inputs: Vec<(DTensor, DTensor)>,
}

impl Context {
    pub fn new() -> Self {
        Context { errors: vec![], inputs: vec![] }
    }

    pub fn push(&mut self, error: DTensor, prev_input: (DTensor, DTensor)) {
        self.errors.push(error);
        self.inputs.push(prev_input);
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }
}

impl Default for Context {
    fn default() -> Self {
        Self::new()
    }
}

fn causal_mask(m: usize) -> DTensor {
    let mut vals = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            vals[i * m + j] = -1e30;
        }
    }
    DTensor::constant(vec![m, m], vals)
}

/// Run the decoder stack over the truncated context window. Returns the
/// final-layernorm activations, the window start and the window length.
fn encode_window(
    weights: &TapeWeights,
    config: &ControllerConfig,
    ctx: &Context,
) -> Result<(DTensor, usize, usize), CtrlError> {
    if ctx.is_empty() {
        return Err(CtrlError::EmptyContext);
    }
    debug_assert_eq!(ctx.errors.len(), ctx.inputs.len());
    for e in &ctx.errors {
        if !e.all_finite() {
            return Err(CtrlError::NonFiniteContext);
        }
    }
    let (ub1, ub2) = config.u_bias;
    let k = ctx.len();
    let start = k.saturating_sub(config.n_ctx);
    let m = k - start;

    // token rows [e, u1, u2], standardized
    let mut rows = Vec::with_capacity(m);
    for i in start..k {
        let e = dc::scale(&ctx.errors[i], 1.0 / ERROR_SCALE)?;
        let u1 = dc::scale(&dc::offset(&ctx.inputs[i].0, -ub1)?, 1.0 / INPUT_SCALE)?;
        let u2 = dc::scale(&dc::offset(&ctx.inputs[i].1, -ub2)?, 1.0 / INPUT_SCALE)?;
        rows.push(dc::concat(&[&e, &u1, &u2])?);
    }
    let row_refs: Vec<&DTensor> = rows.iter().collect();
    let tokens = dc::stack_rows(&row_refs)?;

    let mut x = dc::add(
        &dc::matmul(&tokens, weights.get("embed_w"))?,
        weights.get("embed_b"),
    )?;
    x = dc::add(&x, &dc::slice_rows(weights.get("pos"), 0, m)?)?;

    let dh = config.head_dim();
    let mask = causal_mask(m);
    for layer in 0..config.n_layers {
        let p = |name: &str| format!("layer{layer}.{name}");
        let h = dc::layernorm(&x, weights.get(&p("ln1_g")), weights.get(&p("ln1_b")))?;
        let q = dc::add(&dc::matmul(&h, weights.get(&p("wq")))?, weights.get(&p("bq")))?;
        let key = dc::add(&dc::matmul(&h, weights.get(&p("wk")))?, weights.get(&p("bk")))?;
        let v = dc::add(&dc::matmul(&h, weights.get(&p("wv")))?, weights.get(&p("bv")))?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for hd in 0..config.n_heads {
            let qh = dc::slice_cols(&q, hd * dh, (hd + 1) * dh)?;
            let kh = dc::slice_cols(&key, hd * dh, (hd + 1) * dh)?;
            let vh = dc::slice_cols(&v, hd * dh, (hd + 1) * dh)?;
            let scores = dc::scale(
                &dc::matmul(&qh, &dc::transpose(&kh)?)?,
                1.0 / (dh as f64).sqrt(),
            )?;
            let attn = dc::softmax_last(&dc::add(&scores, &mask)?)?;
            heads.push(dc::matmul(&attn, &vh)?);
        }
        let head_refs: Vec<&DTensor> = heads.iter().collect();
        let merged = dc::concat_cols(&head_refs)?;
        let o = dc::add(&dc::matmul(&merged, weights.get(&p("wo")))?, weights.get(&p("bo")))?;
        x = dc::add(&x, &o)?;

        let mnorm = dc::layernorm(&x, weights.get(&p("ln2_g")), weights.get(&p("ln2_b")))?;
        let hid = dc::gelu(&dc::add(
            &dc::matmul(&mnorm, weights.get(&p("w1")))?,
            weights.get(&p("b1")),
        )?)?;
        let mlp = dc::add(&dc::matmul(&hid, weights.get(&p("w2")))?, weights.get(&p("b2")))?;
        x = dc::add(&x, &mlp)?;

        if !x.all_finite() {
            return Err(CtrlError::NonFiniteActivation { layer });
        }
    }

    let fin = dc::layernorm(&x, weights.get("final_g"), weights.get("final_b"))?;
    Ok((fin, start, m))
}

/// Output head for one window row: linear read-out plus the PID path over
/// the errors up to that row, shifted by the operating-point bias.
fn head_at_row(
    weights: &TapeWeights,
    config: &ControllerConfig,
    ctx: &Context,
    fin: &DTensor,
    start: usize,
    row: usize,
) -> Result<(DTensor, DTensor), CtrlError> {
    let (ub1, ub2) = config.u_bias;
    let here = dc::slice_rows(fin, row, row + 1)?;
    let u_tf = dc::add(&dc::matmul(&here, weights.get("out_w"))?, weights.get("out_b"))?;
    let u_tf = dc::reshape(&u_tf, vec![config.output_dim])?;

    // PID over the same window the transformer sees, so truncation bounds
    // the whole controller's receptive field.
    let abs = start + row;
    let window: Vec<&DTensor> = ctx.errors[start..=abs].iter().collect();
    let e_now = window[window.len() - 1];
    let e_prev = if window.len() >= 2 { window[window.len() - 2] } else { e_now };
    let integral = dc::sum(&dc::concat(&window)?)?;
    let pid = weights.get("pid");
    let kp = dc::reshape(&dc::slice_rows(pid, 0, 1)?, vec![])?;
    let ki = dc::reshape(&dc::slice_rows(pid, 1, 2)?, vec![])?;
    let kd = dc::reshape(&dc::slice_rows(pid, 2, 3)?, vec![])?;
    let u_pid = dc::add(
        &dc::add(&dc::mul(&kp, e_now)?, &dc::scale(&dc::mul(&ki, &integral)?, TS)?)?,
        &dc::scale(&dc::mul(&kd, &dc::sub(e_now, e_prev)?)?, 1.0 / TS)?,
    )?;

    let u1 = dc::offset(
        &dc::add(&dc::reshape(&dc::slice_rows(&u_tf, 0, 1)?, vec![])?, &u_pid)?,
        ub1,
    )?;
    let u2 = dc::offset(
        &dc::add(&dc::reshape(&dc::slice_rows(&u_tf, 1, 2)?, vec![])?, &u_pid)?,
        ub2,
    )?;
    if !u1.all_finite() || !u2.all_finite() {
        return Err(CtrlError::NonFiniteActivation { layer: config.n_layers });
    }
    Ok((u1, u2))
}

/// One controller query: embed the (truncated) context, run the decoder
/// blocks, add the PID path and the operating-point bias. Returns
/// (P100, F200) as tape scalars.
pub fn forward(
    weights: &TapeWeights,
    config: &ControllerConfig,
    ctx: &Context,
) -> Result<(DTensor, DTensor), CtrlError> {
    let (fin, start, m) = encode_window(weights, config, ctx)?;
    head_at_row(weights, config, ctx, &fin, start, m - 1)
}

/// Controller output at every window position from a single encoder pass,
/// for causality analysis: row i sees only tokens start..=start+i.
pub fn forward_all(
    weights: &TapeWeights,
    config: &ControllerConfig,
    ctx: &Context,
) -> Result<Vec<(DTensor, DTensor)>, CtrlError> {
    let (fin, start, m) = encode_window(weights, config, ctx)?;
    (0..m)
        .map(|row| head_at_row(weights, config, ctx, &fin, start, row))
        .collect()
}

/// Versioned checkpoint: weights + config + provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub master_seed: u64,
    pub curriculum_stage: u32,
    pub weights: ControllerWeights,
}

pub const CHECKPOINT_FORMAT: &str = "ctxctl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(weights: ControllerWeights, master_seed: u64, curriculum_stage: u32) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            master_seed,
            curriculum_stage,
            weights,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CtrlError> {
        let json = serde_json::to_string(self)
            .map_err(|e| CtrlError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| CtrlError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CtrlError> {
        let data = std::fs::read_to_string(path)
            .map_err(|e| CtrlError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&data).map_err(|e| CtrlError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(CtrlError::Checkpoint(format!("unknown format {}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CtrlError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        ckpt.weights.config.validate()?;
        Ok(ckpt)
    }
}
