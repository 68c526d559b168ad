//! Forward constructors and local gradient rules.

use super::{Graph, Op, SeqLayout, Var};
use crate::tensor::{Result, TensorError};

/// `c[m×n] = a[m×k] · b[k×n]` with explicit row/column strides.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k) and `b`
    // (k×n), and `c` is a fresh row-major m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a flat `rows × cols` buffer, max-subtracted.
pub(crate) fn softmax_buf(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Row-wise log-softmax of a flat buffer.
pub(crate) fn log_softmax_buf(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = src.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

/// Kinds accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Sigmoid,
    Silu,
    Scale(f64),
}

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match self.shape(a) {
            [m, n] => Ok((*m, *n)),
            s => Err(TensorError::Invalid(format!(
                "{op} expects a 2-D tensor, got {s:?}"
            ))),
        }
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Sub, Some(b)) => self.sub(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Exp, None) => self.exp(a),
            (Elementwise::Sigmoid, None) => self.sigmoid(a),
            (Elementwise::Silu, None) => self.silu(a),
            (Elementwise::Scale(c), None) => self.scale(a, c),
            (k, _) => Err(TensorError::Invalid(format!(
                "wrong operand count for {k:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let c = gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
        );
        self.push(vec![m, n], c, Op::MatMul(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2("softmax_rows", a)?;
        let out = softmax_buf(self.value(a).data(), n);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::SoftmaxRows(a))
    }

    /// Scales each row to unit L2 norm; rows shorter than `eps` are divided
    /// by `eps` instead.
    pub fn rows_l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(TensorError::Invalid(format!(
                "rows_l2_normalize needs eps > 0, got {eps}"
            )));
        }
        let (_, n) = self.dims2("rows_l2_normalize", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        let mut norms = Vec::with_capacity(x.len() / n);
        for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
            let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s / denom;
            }
            norms.push(norm);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::L2NormRows { x: a, eps, norms })
    }

    /// `y[t] = x[t] / sqrt(mean(x[t]^2) + eps) * gamma`.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.dims2("rmsnorm", x)?;
        if self.value(gamma).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(xv.len() / n);
        for (src, dst) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let ms = src.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((d, s), g) in dst.iter_mut().zip(src).zip(gv) {
                *d = s * inv * g;
            }
            inv_rms.push(inv);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::RmsNorm { x, gamma, inv_rms })
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.dims2("layer_norm_rows", x)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / n);
        for (src, dst) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::LayerNormRows { x, inv_std })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let len = self.value(a).len();
        if shape.iter().product::<usize>() != len || shape.contains(&0) {
            return Err(TensorError::BadShape { shape, len });
        }
        let data = self.value(a).data().to_vec();
        self.push(shape, data, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose(a))
    }

    /// Repeats a vector (`[n]` or `[1×n]`) as `rows` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let src = self.value(v).data();
        let n = src.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        self.push(vec![rows, n], out, Op::BroadcastRows(v))
    }

    /// Gathers rows of `table` (`[vocab × d]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid(format!(
                "token id {bad} out of range for vocab {vocab}"
            )));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Rotary embedding on `[rows × heads·head_dim]`, interleaved pairs
    /// `(2i, 2i+1)` rotated by `pos · theta^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, head_dim: usize, positions: &[usize], theta: f64) -> Result<Var> {
        if !head_dim.is_multiple_of(2) {
            return Err(TensorError::Invalid(format!(
                "rope needs an even head_dim, got {head_dim}"
            )));
        }
        let (rows, width) = self.dims2("rope", x)?;
        if width % head_dim != 0 || positions.len() != rows {
            return Err(TensorError::Invalid(format!(
                "rope: width {width} / head_dim {head_dim} / {} positions for {rows} rows",
                positions.len()
            )));
        }
        let out = rope_rotate(self.value(x).data(), width, head_dim, positions, theta, 1.0);
        self.push(
            vec![rows, width],
            out,
            Op::Rope {
                x,
                head_dim,
                positions: positions.to_vec(),
                theta,
            },
        )
    }

    /// Row `t` of each sequence becomes row `t-1`; row 0 becomes zero.
    pub fn token_shift(&mut self, x: Var, layout: SeqLayout) -> Result<Var> {
        let (rows, d) = self.dims2("token_shift", x)?;
        if rows != layout.rows() {
            return Err(TensorError::Invalid(format!(
                "token_shift: {rows} rows for layout {layout:?}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * d];
        for b in 0..layout.batch {
            for t in 1..layout.seq {
                let dst = (b * layout.seq + t) * d;
                let from = (b * layout.seq + t - 1) * d;
                out[dst..dst + d].copy_from_slice(&src[from..from + d]);
            }
        }
        self.push(vec![rows, d], out, Op::TokenShift { x, layout })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// L2 norm of every row: `[m×n] -> [m×1]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("row_norms", a)?;
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(vec![m, 1], out, Op::RowNorms(a))
    }

    /// Forward value of `value`, gradient routed to `sink` unchanged.
    ///
    /// Equals `sink + stopgrad(value - sink)` without the rounding a literal
    /// evaluation of that sum would introduce.
    pub fn straight_through(&mut self, value: Var, sink: Var) -> Result<Var> {
        self.same_shape("straight_through", value, sink)?;
        let data = self.value(value).data().to_vec();
        let shape = self.shape(value).to_vec();
        self.push(shape, data, Op::StraightThrough { sink })
    }

    /// Mean cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![m, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(TensorError::Invalid(format!(
                "target {bad} out of range for vocab {v}"
            )));
        }
        let x = self.value(logits).data();
        let logp = log_softmax_buf(x, v);
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                total -= logp[r * v + t];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let probs = logp.iter().map(|l| l.exp()).collect();
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Mean over rows of `KL(softmax(teacher) || softmax(student))`. The
    /// teacher logits are plain data, never differentiated.
    pub fn kl_div_rows(&mut self, teacher_logits: &crate::Tensor, student: Var) -> Result<Var> {
        let (m, v) = self.dims2("kl_div", student)?;
        if teacher_logits.shape() != self.shape(student) {
            return Err(TensorError::ShapeMismatch {
                op: "kl_div",
                lhs: teacher_logits.shape().to_vec(),
                rhs: vec![m, v],
            });
        }
        let lt = log_softmax_buf(teacher_logits.data(), v);
        let ls = log_softmax_buf(self.value(student).data(), v);
        let mut total = 0.0;
        for (a, b) in lt.iter().zip(&ls) {
            let p = a.exp();
            if p > 0.0 {
                total += p * (a - b);
            }
        }
        let teacher_probs = lt.iter().map(|l| l.exp()).collect();
        let student_probs = ls.iter().map(|l| l.exp()).collect();
        self.push(
            vec![1],
            vec![total / m as f64],
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            },
        )
    }

    /// Gradient contributions of node `id` to its inputs.
    pub(super) fn local_grads(&self, id: usize, gout: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.value(v).data();
        let g = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut res = Vec::new();
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    res.push((*a, gemm(m, n, k, gout, (n, 1), val(*b), (1, n))));
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    res.push((*b, gemm(k, m, n, val(*a), (1, k), gout, (n, 1))));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, gout.iter().zip(y).map(|(g, y)| g * y).collect()),
                    (*b, gout.iter().zip(x).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Exp(a) => vec![(*a, gout.iter().zip(out).map(|(g, y)| g * y).collect())],
            Op::Sigmoid(a) => vec![(
                *a,
                gout.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )],
            Op::Silu(a) => vec![(
                *a,
                gout.iter()
                    .zip(val(*a))
                    .map(|(g, x)| {
                        let s = sigmoid(*x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect(),
            )],
            Op::Scale(a, c) => vec![(*a, gout.iter().map(|g| g * c).collect())],
            Op::SoftmaxRows(a) => {
                let n = self.shape(*a)[1];
                let mut dx = vec![0.0; out.len()];
                for ((y, g), d) in out.chunks(n).zip(gout.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for ((d, y), g) in d.iter_mut().zip(y).zip(g) {
                        *d = y * (g - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::L2NormRows { x, eps, norms } => {
                let n = self.shape(*x)[1];
                let mut dx = vec![0.0; out.len()];
                for (r, ((y, g), d)) in out
                    .chunks(n)
                    .zip(gout.chunks(n))
                    .zip(dx.chunks_mut(n))
                    .enumerate()
                {
                    let norm = norms[r];
                    if norm >= *eps {
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for ((d, y), g) in d.iter_mut().zip(y).zip(g) {
                            *d = (g - y * dot) / norm;
                        }
                    } else {
                        for (d, g) in d.iter_mut().zip(g) {
                            *d = g / eps;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let n = self.shape(*x)[1];
                let xv = val(*x);
                let gv = val(*gamma);
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; n];
                for (r, ((src, g), d)) in xv
                    .chunks(n)
                    .zip(gout.chunks(n))
                    .zip(dx.chunks_mut(n))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    let mut dot = 0.0;
                    for j in 0..n {
                        dg[j] += g[j] * src[j] * inv;
                        dot += g[j] * gv[j] * src[j];
                    }
                    let c = inv * inv * inv * dot / n as f64;
                    for j in 0..n {
                        d[j] = inv * g[j] * gv[j] - src[j] * c;
                    }
                }
                vec![(*x, dx), (*gamma, dg)]
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = self.shape(*x)[1];
                let mut dx = vec![0.0; out.len()];
                for (r, ((y, g), d)) in out
                    .chunks(n)
                    .zip(gout.chunks(n))
                    .zip(dx.chunks_mut(n))
                    .enumerate()
                {
                    let mg = g.iter().sum::<f64>() / n as f64;
                    let mgy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[j] = inv_std[r] * (g[j] - mg - y[j] * mgy);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(a) => vec![(*a, gout.to_vec())],
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gout[j * m + i];
                    }
                }
                vec![(*a, dx)]
            }
            Op::BroadcastRows(v) => {
                let n = self.value(*v).len();
                let mut dv = vec![0.0; n];
                for row in gout.chunks(n) {
                    for (d, g) in dv.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                vec![(*v, dv)]
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += gout[r * d + j];
                    }
                }
                vec![(*table, dt)]
            }
            Op::Rope {
                x,
                head_dim,
                positions,
                theta,
            } => {
                let width = self.shape(*x)[1];
                vec![(
                    *x,
                    rope_rotate(gout, width, *head_dim, positions, *theta, -1.0),
                )]
            }
            Op::TokenShift { x, layout } => {
                let d = self.shape(*x)[1];
                let mut dx = vec![0.0; gout.len()];
                for b in 0..layout.batch {
                    for t in 1..layout.seq {
                        let src = (b * layout.seq + t) * d;
                        let dst = (b * layout.seq + t - 1) * d;
                        dx[dst..dst + d].copy_from_slice(&gout[src..src + d]);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum(a) => vec![(*a, vec![gout[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![gout[0] / n as f64; n])]
            }
            Op::RowNorms(a) => {
                let n = self.shape(*a)[1];
                let xv = val(*a);
                let mut dx = vec![0.0; xv.len()];
                for (r, (src, d)) in xv.chunks(n).zip(dx.chunks_mut(n)).enumerate() {
                    let norm = out[r];
                    if norm > 0.0 {
                        for (d, s) in d.iter_mut().zip(src) {
                            *d = gout[r] * s / norm;
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::StraightThrough { sink } => vec![(*sink, gout.to_vec())],
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let mut dx = vec![0.0; probs.len()];
                if *count > 0 {
                    let c = gout[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for j in 0..v {
                                dx[r * v + j] = probs[r * v + j] * c;
                            }
                            dx[r * v + t] -= c;
                        }
                    }
                }
                vec![(*logits, dx)]
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            } => {
                let m = self.shape(*student)[0];
                let c = gout[0] / m as f64;
                vec![(
                    *student,
                    student_probs
                        .iter()
                        .zip(teacher_probs)
                        .map(|(s, t)| (s - t) * c)
                        .collect(),
                )]
            }
            Op::Attention(saved) => saved.backward(self, gout),
            Op::Wkv7(saved) => saved.backward(self, gout)?,
        };
        Ok(g)
    }
}

/// Rotates interleaved pairs; `sign = -1` applies the inverse rotation.
fn rope_rotate(
    x: &[f64],
    width: usize,
    head_dim: usize,
    positions: &[usize],
    theta: f64,
    sign: f64,
) -> Vec<f64> {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| theta.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut out = x.to_vec();
    for (row, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        for (i, f) in freqs.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = (sign * angle).sin_cos();
            for h in 0..width / head_dim {
                let base = row * width + h * head_dim + 2 * i;
                let (a, b) = (x[base], x[base + 1]);
                out[base] = a * c - b * s;
                out[base + 1] = a * s + b * c;
            }
        }
    }
    out
}
