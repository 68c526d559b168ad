//! Single-step recurrences and the transition matrix, on plain tensors.

use nalgebra::DMatrix;

use crate::tensor::{Result, Tensor, TensorError};

/// Per-token signals of one head, each of length `head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSignals {
    pub w: Vec<f64>,
    pub kappa: Vec<f64>,
    pub a: Vec<f64>,
    pub v: Vec<f64>,
    pub k: Vec<f64>,
}

fn square_dim(s: &Tensor, op: &'static str) -> Result<usize> {
    match s.shape() {
        [n, m] if n == m => Ok(*n),
        other => Err(TensorError::Invalid(format!(
            "{op} expects a square state, got {other:?}"
        ))),
    }
}

fn check_len(op: &'static str, d: usize, vs: &[&[f64]]) -> Result<()> {
    for v in vs {
        if v.len() != d {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![d],
                rhs: vec![v.len()],
            });
        }
    }
    Ok(())
}

/// `diag(w) − κ̂ᵀ (a ⊙ κ̂)`, i.e. `T[p][j] = w[j]·δ_pj − κ̂[p]·a[j]·κ̂[j]`.
pub fn transition_matrix(w: &[f64], kappa: &[f64], a: &[f64]) -> Result<Tensor> {
    let d = w.len();
    check_len("transition_matrix", d, &[kappa, a])?;
    let mut t = vec![0.0; d * d];
    for p in 0..d {
        for j in 0..d {
            t[p * d + j] = -kappa[p] * a[j] * kappa[j];
        }
        t[p * d + p] += w[p];
    }
    Tensor::new(vec![d, d], t)
}

/// One RWKV-7 step on a value×key state: `S' = S·T + vᵀk̃`.
pub fn rwkv7_step(s: &Tensor, sig: &StepSignals) -> Result<Tensor> {
    let d = square_dim(s, "rwkv7_step")?;
    check_len("rwkv7_step", d, &[&sig.w, &sig.kappa, &sig.a, &sig.v, &sig.k])?;
    let t = transition_matrix(&sig.w, &sig.kappa, &sig.a)?;
    let (sv, tv) = (s.data(), t.data());
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for p in 0..d {
                acc += sv[i * d + p] * tv[p * d + j];
            }
            out[i * d + j] = acc + sig.v[i] * sig.k[j];
        }
    }
    finite_state(out, d, "rwkv7_step")
}

/// One RWKV-6 step on a key×value state: `S' = diag(w)·S + kᵀv`.
pub fn rwkv6_step(s: &Tensor, w: &[f64], k: &[f64], v: &[f64]) -> Result<Tensor> {
    let d = square_dim(s, "rwkv6_step")?;
    check_len("rwkv6_step", d, &[w, k, v])?;
    let sv = s.data();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = w[i] * sv[i * d + j] + k[i] * v[j];
        }
    }
    finite_state(out, d, "rwkv6_step")
}

fn finite_state(out: Vec<f64>, d: usize, op: &'static str) -> Result<Tensor> {
    if let Some(index) = out.iter().position(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite { op, index });
    }
    Tensor::new(vec![d, d], out)
}

/// Eigenvalues of a square matrix as `(re, im)` pairs, sorted by real part.
pub fn eigenvalues(m: &Tensor) -> Result<Vec<(f64, f64)>> {
    let d = square_dim(m, "eigenvalues")?;
    let mat = DMatrix::from_row_slice(d, d, m.data());
    let mut eig: Vec<(f64, f64)> = mat
        .complex_eigenvalues()
        .iter()
        .map(|c| (c.re, c.im))
        .collect();
    eig.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(eig)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &Tensor) -> Result<f64> {
    Ok(eigenvalues(m)?
        .into_iter()
        .map(|(re, im)| re.hypot(im))
        .fold(0.0, f64::max))
}
