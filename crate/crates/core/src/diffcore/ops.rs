//! Primitive operations. Each op computes forward values eagerly and, when
//! any input lives on a tape, records a node with its local adjoint.

use std::sync::Arc;

use super::tape::{DTensor, Tape};
use super::{DiffError, Result};

/// All inputs must agree on a tape (constants are promoted). `None` means
/// every input is a constant and the result is a constant too.
fn common_tape(op: &'static str, inputs: &[&DTensor]) -> Result<Option<Tape>> {
    let mut tape: Option<Tape> = None;
    for t in inputs {
        if let Some((tt, _)) = &t.node {
            match &tape {
                None => tape = Some(tt.clone()),
                Some(existing) if existing.same_tape(tt) => {}
                Some(_) => return Err(DiffError::TapeMismatch(op)),
            }
        }
    }
    Ok(tape)
}

fn finish(
    op: &'static str,
    inputs: &[&DTensor],
    shape: Vec<usize>,
    values: Vec<f64>,
    backward: impl Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
) -> Result<DTensor> {
    match common_tape(op, inputs)? {
        None => Ok(DTensor::constant(shape, values)),
        Some(tape) => {
            let parents: Vec<usize> = inputs
                .iter()
                .map(|t| t.node_on(&tape))
                .collect::<Result<_>>()?;
            Ok(tape.record(parents, shape, values, Box::new(backward)))
        }
    }
}

/// Broadcast pattern of a binary elementwise op.
enum Bcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    RowRhs, // [k,d] (+) [d]
}

fn bcast(op: &'static str, a: &DTensor, b: &DTensor, allow_row: bool) -> Result<Bcast> {
    if a.shape == b.shape {
        Ok(Bcast::Same)
    } else if a.is_scalar() {
        Ok(Bcast::ScalarLhs)
    } else if b.is_scalar() {
        Ok(Bcast::ScalarRhs)
    } else if allow_row && a.shape.len() == 2 && b.shape == [a.shape[1]] {
        Ok(Bcast::RowRhs)
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

pub fn add(a: &DTensor, b: &DTensor) -> Result<DTensor> {
    let pat = bcast("add", a, b, true)?;
    let (av, bv) = (a.values.clone(), b.values.clone());
    match pat {
        Bcast::Same => {
            let vals = av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect();
            let (na, nb) = (av.len(), bv.len());
            finish("add", &[a, b], a.shape.clone(), vals, move |g| {
                debug_assert_eq!(g.len(), na.max(nb));
                vec![g.to_vec(), g.to_vec()]
            })
        }
        Bcast::ScalarLhs => {
            let s = av[0];
            let vals = bv.iter().map(|y| s + y).collect();
            finish("add", &[a, b], b.shape.clone(), vals, move |g| {
                vec![vec![g.iter().sum()], g.to_vec()]
            })
        }
        Bcast::ScalarRhs => {
            let s = bv[0];
            let vals = av.iter().map(|x| x + s).collect();
            finish("add", &[a, b], a.shape.clone(), vals, move |g| {
                vec![g.to_vec(), vec![g.iter().sum()]]
            })
        }
        Bcast::RowRhs => {
            let d = b.len();
            let vals = av.iter().enumerate().map(|(i, x)| x + bv[i % d]).collect();
            finish("add", &[a, b], a.shape.clone(), vals, move |g| {
                let mut gb = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    gb[i % d] += gi;
                }
                vec![g.to_vec(), gb]
            })
        }
    }
}

pub fn sub(a: &DTensor, b: &DTensor) -> Result<DTensor> {
    let pat = bcast("sub", a, b, false)?;
    let (av, bv) = (a.values.clone(), b.values.clone());
    match pat {
        Bcast::Same => {
            let vals = av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect();
            finish("sub", &[a, b], a.shape.clone(), vals, move |g| {
                vec![g.to_vec(), g.iter().map(|x| -x).collect()]
            })
        }
        Bcast::ScalarLhs => {
            let s = av[0];
            let vals = bv.iter().map(|y| s - y).collect();
            finish("sub", &[a, b], b.shape.clone(), vals, move |g| {
                vec![vec![g.iter().sum()], g.iter().map(|x| -x).collect()]
            })
        }
        Bcast::ScalarRhs => {
            let s = bv[0];
            let vals = av.iter().map(|x| x - s).collect();
            finish("sub", &[a, b], a.shape.clone(), vals, move |g| {
                vec![g.to_vec(), vec![-g.iter().sum::<f64>()]]
            })
        }
        Bcast::RowRhs => unreachable!(),
    }
}

pub fn mul(a: &DTensor, b: &DTensor) -> Result<DTensor> {
    let pat = bcast("mul", a, b, false)?;
    let (av, bv) = (a.values.clone(), b.values.clone());
    match pat {
        Bcast::Same => {
            let vals = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
            finish("mul", &[a, b], a.shape.clone(), vals, move |g| {
                vec![
                    g.iter().zip(bv.iter()).map(|(gi, y)| gi * y).collect(),
                    g.iter().zip(av.iter()).map(|(gi, x)| gi * x).collect(),
                ]
            })
        }
        Bcast::ScalarLhs => {
            let s = av[0];
            let vals = bv.iter().map(|y| s * y).collect();
            finish("mul", &[a, b], b.shape.clone(), vals, move |g| {
                vec![
                    vec![g.iter().zip(bv.iter()).map(|(gi, y)| gi * y).sum()],
                    g.iter().map(|gi| gi * s).collect(),
                ]
            })
        }
        Bcast::ScalarRhs => {
            let s = bv[0];
            let vals = av.iter().map(|x| x * s).collect();
            finish("mul", &[a, b], a.shape.clone(), vals, move |g| {
                vec![
                    g.iter().map(|gi| gi * s).collect(),
                    vec![g.iter().zip(av.iter()).map(|(gi, x)| gi * x).sum()],
                ]
            })
        }
        Bcast::RowRhs => unreachable!(),
    }
}

pub fn div(a: &DTensor, b: &DTensor) -> Result<DTensor> {
    let pat = bcast("div", a, b, false)?;
    if b.values.iter().any(|y| *y == 0.0) {
        return Err(DiffError::Domain { op: "div", msg: "division by zero".into() });
    }
    let (av, bv) = (a.values.clone(), b.values.clone());
    match pat {
        Bcast::Same => {
            let vals = av.iter().zip(bv.iter()).map(|(x, y)| x / y).collect();
            finish("div", &[a, b], a.shape.clone(), vals, move |g| {
                vec![
                    g.iter().zip(bv.iter()).map(|(gi, y)| gi / y).collect(),
                    g.iter()
                        .zip(av.iter().zip(bv.iter()))
                        .map(|(gi, (x, y))| -gi * x / (y * y))
                        .collect(),
                ]
            })
        }
        Bcast::ScalarLhs => {
            let s = av[0];
            let vals = bv.iter().map(|y| s / y).collect();
            finish("div", &[a, b], b.shape.clone(), vals, move |g| {
                vec![
                    vec![g.iter().zip(bv.iter()).map(|(gi, y)| gi / y).sum()],
                    g.iter()
                        .zip(bv.iter())
                        .map(|(gi, y)| -gi * s / (y * y))
                        .collect(),
                ]
            })
        }
        Bcast::ScalarRhs => {
            let s = bv[0];
            let vals = av.iter().map(|x| x / s).collect();
            finish("div", &[a, b], a.shape.clone(), vals, move |g| {
                vec![
                    g.iter().map(|gi| gi / s).collect(),
                    vec![g
                        .iter()
                        .zip(av.iter())
                        .map(|(gi, x)| -gi * x / (s * s))
                        .sum()],
                ]
            })
        }
        Bcast::RowRhs => unreachable!(),
    }
}

pub fn neg(a: &DTensor) -> Result<DTensor> {
    let vals = a.values.iter().map(|x| -x).collect();
    finish("neg", &[a], a.shape.clone(), vals, |g| {
        vec![g.iter().map(|x| -x).collect()]
    })
}

/// Multiply by a plain constant.
pub fn scale(a: &DTensor, c: f64) -> Result<DTensor> {
    let vals = a.values.iter().map(|x| x * c).collect();
    finish("scale", &[a], a.shape.clone(), vals, move |g| {
        vec![g.iter().map(|x| x * c).collect()]
    })
}

/// Add a plain constant elementwise.
pub fn offset(a: &DTensor, c: f64) -> Result<DTensor> {
    let vals = a.values.iter().map(|x| x + c).collect();
    finish("offset", &[a], a.shape.clone(), vals, |g| vec![g.to_vec()])
}

/// [m,k] x [k,n] -> [m,n], or [m,k] x [k] -> [m].
pub fn matmul(a: &DTensor, b: &DTensor) -> Result<DTensor> {
    let (m, k) = match a.shape[..] {
        [m, k] => (m, k),
        _ => {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })
        }
    };
    let (k2, n, vec_rhs) = match b.shape[..] {
        [k2, n] => (k2, n, false),
        [k2] => (k2, 1, true),
        _ => {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })
        }
    };
    if k != k2 {
        return Err(DiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (av, bv) = (a.values.clone(), b.values.clone());
    let vals = matmul_raw(&av, &bv, m, k, n);
    let out_shape = if vec_rhs { vec![m] } else { vec![m, n] };
    finish("matmul", &[a, b], out_shape, vals, move |g| {
        // dA = g @ B^T ; dB = A^T @ g
        let mut ga = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..n {
                let gij = g[i * n + j];
                if gij == 0.0 {
                    continue;
                }
                for l in 0..k {
                    ga[i * k + l] += gij * bv[l * n + j];
                }
            }
        }
        let mut gb = vec![0.0; k * n];
        for i in 0..m {
            for l in 0..k {
                let ail = av[i * k + l];
                if ail == 0.0 {
                    continue;
                }
                for j in 0..n {
                    gb[l * n + j] += ail * g[i * n + j];
                }
            }
        }
        vec![ga, gb]
    })
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            let row = &b[l * n..(l + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (o, bj) in dst.iter_mut().zip(row) {
                *o += ail * bj;
            }
        }
    }
    out
}

pub fn sum(a: &DTensor) -> Result<DTensor> {
    let s: f64 = a.values.iter().sum();
    let n = a.len();
    finish("sum", &[a], vec![], vec![s], move |g| vec![vec![g[0]; n]])
}

pub fn mean(a: &DTensor) -> Result<DTensor> {
    let n = a.len();
    let s: f64 = a.values.iter().sum::<f64>() / n as f64;
    finish("mean", &[a], vec![], vec![s], move |g| {
        vec![vec![g[0] / n as f64; n]]
    })
}

pub fn transpose(a: &DTensor) -> Result<DTensor> {
    let [m, n] = a.shape[..] else {
        return Err(DiffError::ShapeMismatch {
            op: "transpose",
            lhs: a.shape.clone(),
            rhs: vec![],
        });
    };
    let av = &a.values;
    let mut vals = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            vals[j * m + i] = av[i * n + j];
        }
    }
    finish("transpose", &[a], vec![n, m], vals, move |g| {
        let mut ga = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                ga[i * n + j] = g[j * m + i];
            }
        }
        vec![ga]
    })
}

/// Stack k vectors of shape [d] into [k, d].
pub fn stack_rows(rows: &[&DTensor]) -> Result<DTensor> {
    assert!(!rows.is_empty(), "stack_rows on empty list");
    let d = rows[0].len();
    for r in rows {
        if r.shape != [d] {
            return Err(DiffError::ShapeMismatch {
                op: "stack_rows",
                lhs: rows[0].shape.clone(),
                rhs: r.shape.clone(),
            });
        }
    }
    let k = rows.len();
    let mut vals = Vec::with_capacity(k * d);
    for r in rows {
        vals.extend_from_slice(&r.values);
    }
    finish("stack_rows", rows, vec![k, d], vals, move |g| {
        (0..k).map(|i| g[i * d..(i + 1) * d].to_vec()).collect()
    })
}

/// Concatenate 1-D vectors.
pub fn concat(parts: &[&DTensor]) -> Result<DTensor> {
    assert!(!parts.is_empty(), "concat on empty list");
    for p in parts {
        if p.shape.len() != 1 && !p.is_scalar() {
            return Err(DiffError::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();
    let total = lens.iter().sum();
    let mut vals = Vec::with_capacity(total);
    for p in parts {
        vals.extend_from_slice(&p.values);
    }
    finish("concat", parts, vec![total], vals, move |g| {
        let mut out = Vec::with_capacity(lens.len());
        let mut off = 0;
        for l in &lens {
            out.push(g[off..off + l].to_vec());
            off += l;
        }
        out
    })
}

/// Concatenate 2-D blocks along columns: [k,d1] ++ [k,d2] -> [k,d1+d2].
pub fn concat_cols(parts: &[&DTensor]) -> Result<DTensor> {
    assert!(!parts.is_empty(), "concat_cols on empty list");
    let k = parts[0].shape[0];
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| match p.shape[..] {
            [r, c] if r == k => Ok(c),
            _ => Err(DiffError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            }),
        })
        .collect::<Result<_>>()?;
    let d: usize = widths.iter().sum();
    let mut vals = vec![0.0; k * d];
    let mut off = 0;
    for (p, w) in parts.iter().zip(&widths) {
        for i in 0..k {
            vals[i * d + off..i * d + off + w].copy_from_slice(&p.values[i * w..(i + 1) * w]);
        }
        off += w;
    }
    finish("concat_cols", parts, vec![k, d], vals, move |g| {
        let mut out = Vec::with_capacity(widths.len());
        let mut off = 0;
        for w in &widths {
            let mut gp = vec![0.0; k * w];
            for i in 0..k {
                gp[i * w..(i + 1) * w].copy_from_slice(&g[i * d + off..i * d + off + w]);
            }
            out.push(gp);
            off += w;
        }
        out
    })
}

/// Row slice of a 2-D tensor (or element range of a 1-D tensor).
pub fn slice_rows(a: &DTensor, start: usize, end: usize) -> Result<DTensor> {
    match a.shape[..] {
        [n] => {
            if end > n || start > end {
                return Err(DiffError::Domain {
                    op: "slice",
                    msg: format!("range {start}..{end} out of bounds for length {n}"),
                });
            }
            let vals = a.values[start..end].to_vec();
            finish("slice", &[a], vec![end - start], vals, move |g| {
                let mut ga = vec![0.0; n];
                ga[start..end].copy_from_slice(g);
                vec![ga]
            })
        }
        [r, c] => {
            if end > r || start > end {
                return Err(DiffError::Domain {
                    op: "slice",
                    msg: format!("row range {start}..{end} out of bounds for {r} rows"),
                });
            }
            let vals = a.values[start * c..end * c].to_vec();
            finish("slice", &[a], vec![end - start, c], vals, move |g| {
                let mut ga = vec![0.0; r * c];
                ga[start * c..end * c].copy_from_slice(g);
                vec![ga]
            })
        }
        _ => Err(DiffError::ShapeMismatch {
            op: "slice",
            lhs: a.shape.clone(),
            rhs: vec![],
        }),
    }
}

/// Column slice of a 2-D tensor.
pub fn slice_cols(a: &DTensor, start: usize, end: usize) -> Result<DTensor> {
    let [r, c] = a.shape[..] else {
        return Err(DiffError::ShapeMismatch {
            op: "slice_cols",
            lhs: a.shape.clone(),
            rhs: vec![],
        });
    };
    if end > c || start > end {
        return Err(DiffError::Domain {
            op: "slice_cols",
            msg: format!("col range {start}..{end} out of bounds for {c} cols"),
        });
    }
    let w = end - start;
    let mut vals = vec![0.0; r * w];
    for i in 0..r {
        vals[i * w..(i + 1) * w].copy_from_slice(&a.values[i * c + start..i * c + end]);
    }
    finish("slice_cols", &[a], vec![r, w], vals, move |g| {
        let mut ga = vec![0.0; r * c];
        for i in 0..r {
            ga[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
        }
        vec![ga]
    })
}

pub fn reshape(a: &DTensor, shape: Vec<usize>) -> Result<DTensor> {
    if shape.iter().product::<usize>() != a.len() {
        return Err(DiffError::ShapeMismatch {
            op: "reshape",
            lhs: a.shape.clone(),
            rhs: shape,
        });
    }
    let vals = a.values.as_ref().clone();
    finish("reshape", &[a], shape, vals, |g| vec![g.to_vec()])
}

fn unary(
    op: &'static str,
    a: &DTensor,
    f: impl Fn(f64) -> f64,
    dfdx: impl Fn(f64) -> f64 + 'static,
) -> Result<DTensor> {
    let av = a.values.clone();
    let vals = av.iter().map(|x| f(*x)).collect();
    finish(op, &[a], a.shape.clone(), vals, move |g| {
        vec![g.iter().zip(av.iter()).map(|(gi, x)| gi * dfdx(*x)).collect()]
    })
}

pub fn exp(a: &DTensor) -> Result<DTensor> {
    unary("exp", a, f64::exp, f64::exp)
}

pub fn log(a: &DTensor) -> Result<DTensor> {
    if a.values.iter().any(|x| *x <= 0.0) {
        return Err(DiffError::Domain { op: "log", msg: "log of non-positive value".into() });
    }
    unary("log", a, f64::ln, |x| 1.0 / x)
}

pub fn tanh(a: &DTensor) -> Result<DTensor> {
    unary("tanh", a, f64::tanh, |x| {
        let t = x.tanh();
        1.0 - t * t
    })
}

pub fn sqrt(a: &DTensor) -> Result<DTensor> {
    if a.values.iter().any(|x| *x < 0.0) {
        return Err(DiffError::Domain { op: "sqrt", msg: "sqrt of negative value".into() });
    }
    unary("sqrt", a, f64::sqrt, |x| 0.5 / x.sqrt())
}

pub fn square(a: &DTensor) -> Result<DTensor> {
    unary("square", a, |x| x * x, |x| 2.0 * x)
}

/// x^p with constant exponent.
pub fn powf(a: &DTensor, p: f64) -> Result<DTensor> {
    if p.fract() != 0.0 && a.values.iter().any(|x| *x < 0.0) {
        return Err(DiffError::Domain {
            op: "power",
            msg: "fractional power of negative value".into(),
        });
    }
    unary("power", a, move |x| x.powf(p), move |x| p * x.powf(p - 1.0))
}

/// Gaussian error linear unit (tanh approximation).
pub fn gelu(a: &DTensor) -> Result<DTensor> {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044715;
    unary(
        "gelu",
        a,
        |x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()),
        |x| {
            let inner = C * (x + K * x * x * x);
            let t = inner.tanh();
            let dinner = C * (1.0 + 3.0 * K * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        },
    )
}

/// Softmax over the last dimension of a 1-D or 2-D tensor (fused primitive).
pub fn softmax_last(a: &DTensor) -> Result<DTensor> {
    let (rows, d) = match a.shape[..] {
        [d] => (1, d),
        [r, d] => (r, d),
        _ => {
            return Err(DiffError::ShapeMismatch {
                op: "softmax",
                lhs: a.shape.clone(),
                rhs: vec![],
            })
        }
    };
    let mut vals = vec![0.0; rows * d];
    for i in 0..rows {
        let row = &a.values[i * d..(i + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, x) in vals[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = (x - m).exp();
            z += *o;
        }
        for o in &mut vals[i * d..(i + 1) * d] {
            *o /= z;
        }
    }
    let out = Arc::new(vals.clone());
    finish("softmax", &[a], a.shape.clone(), vals, move |g| {
        // dx = y * (g - sum(g*y)) per row
        let mut ga = vec![0.0; rows * d];
        for i in 0..rows {
            let y = &out[i * d..(i + 1) * d];
            let gr = &g[i * d..(i + 1) * d];
            let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
            for j in 0..d {
                ga[i * d + j] = y[j] * (gr[j] - dot);
            }
        }
        vec![ga]
    })
}

/// Layer normalization over the last dimension with learned gain and bias
/// (fused primitive with a hand-written adjoint).
pub fn layernorm(x: &DTensor, gain: &DTensor, bias: &DTensor) -> Result<DTensor> {
    const EPS: f64 = 1e-5;
    let (rows, d) = match x.shape[..] {
        [d] => (1, d),
        [r, d] => (r, d),
        _ => {
            return Err(DiffError::ShapeMismatch {
                op: "layernorm",
                lhs: x.shape.clone(),
                rhs: vec![],
            })
        }
    };
    if gain.shape != [d] || bias.shape != [d] {
        return Err(DiffError::ShapeMismatch {
            op: "layernorm",
            lhs: gain.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let (gv, bv) = (gain.values.clone(), bias.values.clone());
    let mut vals = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for i in 0..rows {
        let row = &x.values[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let xh = (row[j] - mu) * istd;
            xhat[i * d + j] = xh;
            vals[i * d + j] = xh * gv[j] + bv[j];
        }
    }
    let xhat = Arc::new(xhat);
    let inv_std = Arc::new(inv_std);
    finish("layernorm", &[x, gain, bias], x.shape.clone(), vals, move |g| {
        let mut gx = vec![0.0; rows * d];
        let mut gg = vec![0.0; d];
        let mut gb = vec![0.0; d];
        for i in 0..rows {
            let xh = &xhat[i * d..(i + 1) * d];
            let gr = &g[i * d..(i + 1) * d];
            let istd = inv_std[i];
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            let mut dxh = vec![0.0; d];
            for j in 0..d {
                dxh[j] = gr[j] * gv[j];
                sum_dxh += dxh[j];
                sum_dxh_xh += dxh[j] * xh[j];
                gg[j] += gr[j] * xh[j];
                gb[j] += gr[j];
            }
            let m1 = sum_dxh / d as f64;
            let m2 = sum_dxh_xh / d as f64;
            for j in 0..d {
                gx[i * d + j] = istd * (dxh[j] - m1 - xh[j] * m2);
            }
        }
        vec![gx, gg, gb]
    })
}

// Operator sugar for scalar-heavy code (plant dynamics, PID path). These
// panic on shape mismatch; the named functions return errors instead.
macro_rules! impl_binop {
    ($trait:ident, $method:ident, $func:ident) => {
        impl std::ops::$trait for &DTensor {
            type Output = DTensor;
            fn $method(self, rhs: &DTensor) -> DTensor {
                $func(self, rhs).expect(concat!(stringify!($func), " failed"))
            }
        }
        impl std::ops::$trait<f64> for &DTensor {
            type Output = DTensor;
            fn $method(self, rhs: f64) -> DTensor {
                $func(self, &DTensor::scalar(rhs)).expect(concat!(stringify!($func), " failed"))
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl std::ops::Neg for &DTensor {
    type Output = DTensor;
    fn neg(self) -> DTensor {
        neg(self).expect("neg failed")
    }
}
