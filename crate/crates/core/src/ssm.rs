//! Linear state-space kernels.
//!
//! Continuous system `h' = A h + B x`, `y = C h` discretized by zero-order
//! hold:
//!
//! ```text
//! Ā = exp(ΔA)
//! B̄ = (ΔA)⁻¹ (exp(ΔA) − I) · ΔB
//! ```
//!
//! and evaluated either recurrently (`h_t = Ā h_{t−1} + B̄ x_t`,
//! `y_t = C h_t`) or as a causal convolution with kernel
//! `K̄ = (CB̄, CĀB̄, CĀ²B̄, …)`.
//!
//! The selective variant makes Δ, B and C per-step functions of the input
//! and uses the Euler input matrix `Δ_t B_t`. It is evaluated either by a
//! sequential loop or by a work-efficient associative scan over
//! `(multiplier, addend)` pairs.

use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Below this `|Δa|` the diagonal input gain uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// Square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = *v;
        }
        m
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.data[i * self.n + j] * v[j]).sum())
            .collect()
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            n: self.n,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].iter().map(|x| x.abs()).sum())
            .fold(0.0, f64::max)
    }

    /// Matrix exponential by scaling and squaring of a truncated Taylor series.
    pub fn expm(&self) -> Matrix {
        let norm = self.norm_inf();
        let mut squarings = 0;
        if norm > 0.5 {
            squarings = (norm / 0.5).log2().ceil() as i32;
        }
        let scaled = self.scaled(0.5f64.powi(squarings));
        let mut result = Matrix::identity(self.n);
        let mut term = Matrix::identity(self.n);
        for k in 1..=20 {
            term = term.mul(&scaled).scaled(1.0 / k as f64);
            for (r, t) in result.data.iter_mut().zip(&term.data) {
                *r += t;
            }
        }
        for _ in 0..squarings {
            result = result.mul(&result);
        }
        result
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateMatrix {
    /// Diagonal entries of A.
    Diagonal(Vec<f64>),
    Dense(Matrix),
}

impl StateMatrix {
    pub fn dim(&self) -> usize {
        match self {
            StateMatrix::Diagonal(d) => d.len(),
            StateMatrix::Dense(m) => m.n,
        }
    }

    /// Stable diagonal parameterization `a = −exp(log_a)`.
    pub fn from_log_decay(log_a: &[f64]) -> Self {
        StateMatrix::Diagonal(log_a.iter().map(|x| -x.exp()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    /// One Δ per time step (selective mode).
    PerStep(Vec<f64>),
}

/// Continuous single-input single-output state-space parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub a: StateMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: StepSize,
}

impl SsmParams {
    pub fn state_dim(&self) -> usize {
        self.a.dim()
    }
}

/// Discrete transition and input matrices: a single pair for a fixed step,
/// one pair per step otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<Matrix>,
    pub b_bar: Vec<Vec<f64>>,
}

impl DiscreteSsm {
    pub fn state_dim(&self) -> usize {
        self.a_bar[0].n
    }

    pub fn is_time_invariant(&self) -> bool {
        self.a_bar.len() == 1
    }

    fn at(&self, t: usize) -> (&Matrix, &[f64]) {
        let i = if self.is_time_invariant() { 0 } else { t };
        (&self.a_bar[i], &self.b_bar[i])
    }
}

fn zoh_diagonal(a: &[f64], b: &[f64], delta: f64) -> (Matrix, Vec<f64>) {
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (&ai, &bi) in a.iter().zip(b) {
        let x = delta * ai;
        a_bar.push(x.exp());
        // (e^x − 1)/x · Δb, with its series near zero
        let gain = if x.abs() < SERIES_THRESHOLD {
            1.0 + x / 2.0
        } else {
            x.exp_m1() / x
        };
        b_bar.push(gain * delta * bi);
    }
    (Matrix::diagonal(&a_bar), b_bar)
}

/// Dense ZOH via the block exponential
/// `exp([[ΔA, ΔB], [0, 0]]) = [[Ā, B̄], [0, 1]]`, which needs no inverse of
/// `ΔA` and so also covers singular `A`.
fn zoh_dense(a: &Matrix, b: &[f64], delta: f64) -> (Matrix, Vec<f64>) {
    let n = a.n;
    let mut block = Matrix::zeros(n + 1);
    for i in 0..n {
        for j in 0..n {
            block.data[i * (n + 1) + j] = delta * a.at(i, j);
        }
        block.data[i * (n + 1) + n] = delta * b[i];
    }
    let e = block.expm();
    let mut a_bar = Matrix::zeros(n);
    let mut b_bar = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            a_bar.data[i * n + j] = e.at(i, j);
        }
        b_bar[i] = e.at(i, n);
    }
    (a_bar, b_bar)
}

pub fn discretize(params: &SsmParams) -> Result<DiscreteSsm> {
    let n = params.state_dim();
    if params.b.len() != n || params.c.len() != n {
        return Err(Error::invalid("B and C must match the state dimension"));
    }
    let steps: Vec<f64> = match &params.delta {
        StepSize::Fixed(d) => vec![*d],
        StepSize::PerStep(ds) => ds.clone(),
    };
    if steps.is_empty() {
        return Err(Error::invalid("no step sizes given"));
    }
    let mut a_bar = Vec::with_capacity(steps.len());
    let mut b_bar = Vec::with_capacity(steps.len());
    for &d in &steps {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::invalid(format!("step size must be positive, got {d}")));
        }
        let (ab, bb) = match &params.a {
            StateMatrix::Diagonal(a) => zoh_diagonal(a, &params.b, d),
            StateMatrix::Dense(a) => zoh_dense(a, &params.b, d),
        };
        if !ab.data.iter().chain(&bb).all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!("discretization overflowed at Δ = {d}")));
        }
        a_bar.push(ab);
        b_bar.push(bb);
    }
    Ok(DiscreteSsm { a_bar, b_bar })
}

/// `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = C h_t`, starting from `h0` (zero by default).
pub fn scan_recurrent(disc: &DiscreteSsm, c: &[f64], x: &[f64], h0: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = disc.state_dim();
    if x.is_empty() {
        return Err(Error::invalid("empty input sequence"));
    }
    if c.len() != n || h0.is_some_and(|h| h.len() != n) {
        return Err(Error::invalid("C / h0 do not match the state dimension"));
    }
    if !disc.is_time_invariant() && disc.a_bar.len() != x.len() {
        return Err(Error::invalid("per-step parameters do not match the sequence length"));
    }
    let mut h = h0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    let mut y = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        let (a, b) = disc.at(t);
        let mut next = a.mul_vec(&h);
        for i in 0..n {
            next[i] += b[i] * xt;
        }
        h = next;
        y.push(c.iter().zip(&h).map(|(ci, hi)| ci * hi).sum());
    }
    Ok(y)
}

/// Convolution kernel `K̄_k = C Ā^k B̄` for `k < len`.
pub fn conv_kernel(disc: &DiscreteSsm, c: &[f64], len: usize) -> Result<Vec<f64>> {
    if !disc.is_time_invariant() {
        return Err(Error::Mode(
            "the convolutional form needs a fixed step size".into(),
        ));
    }
    let mut v = disc.b_bar[0].clone();
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        kernel.push(c.iter().zip(&v).map(|(a, b)| a * b).sum());
        v = disc.a_bar[0].mul_vec(&v);
    }
    Ok(kernel)
}

/// `y = x * K̄`, causally truncated to the input length (zero initial state).
pub fn scan_convolutional(disc: &DiscreteSsm, c: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("empty input sequence"));
    }
    if c.len() != disc.state_dim() {
        return Err(Error::invalid("C does not match the state dimension"));
    }
    let kernel = conv_kernel(disc, c, x.len())?;
    Ok((0..x.len())
        .map(|t| (0..=t).map(|k| kernel[k] * x[t - k]).sum())
        .collect())
}

/// Inputs of a diagonal selective scan over `len` steps, `channels`
/// independent channels and `state` states per channel (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveInputs {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    /// `len × channels`
    pub u: Vec<f64>,
    /// `len × channels`, positive
    pub delta: Vec<f64>,
    /// `channels × state`, negative entries of the diagonal A
    pub a: Vec<f64>,
    /// `len × state`
    pub b: Vec<f64>,
    /// `len × state`
    pub c: Vec<f64>,
}

impl SelectiveInputs {
    fn validate(&self) -> Result<()> {
        let (l, e, n) = (self.len, self.channels, self.state);
        if l == 0 {
            return Err(Error::invalid("empty input sequence"));
        }
        if self.u.len() != l * e
            || self.delta.len() != l * e
            || self.a.len() != e * n
            || self.b.len() != l * n
            || self.c.len() != l * n
        {
            return Err(Error::invalid("selective scan inputs have inconsistent shapes"));
        }
        if let Some(d) = self.delta.iter().find(|d| !d.is_finite()) {
            return Err(Error::Numeric(format!("non-finite step size {d}")));
        }
        Ok(())
    }
}

/// `exp(Δ_t a_k)` for every (channel, time, state), laid out channel-major.
fn decay_table(s: &SelectiveInputs) -> Vec<f64> {
    let (l, e, n) = (s.len, s.channels, s.state);
    let mut out = vec![0.0; e * l * n];
    for ch in 0..e {
        let a = &s.a[ch * n..(ch + 1) * n];
        for t in 0..l {
            let d = s.delta[t * e + ch];
            let row = &mut out[(ch * l + t) * n..(ch * l + t + 1) * n];
            for (m, ak) in row.iter_mut().zip(a) {
                *m = (d * ak).exp();
            }
        }
    }
    out
}

fn sequential_with_decay(s: &SelectiveInputs, decay: &[f64]) -> Vec<f64> {
    let (l, e, n) = (s.len, s.channels, s.state);
    let mut y = vec![0.0; l * e];
    let mut h = vec![0.0; n];
    for ch in 0..e {
        h.iter_mut().for_each(|x| *x = 0.0);
        for t in 0..l {
            let du = s.delta[t * e + ch] * s.u[t * e + ch];
            let m = &decay[(ch * l + t) * n..(ch * l + t + 1) * n];
            let b = &s.b[t * n..(t + 1) * n];
            let c = &s.c[t * n..(t + 1) * n];
            let mut acc = 0.0;
            for k in 0..n {
                h[k] = m[k] * h[k] + du * b[k];
                acc += c[k] * h[k];
            }
            y[t * e + ch] = acc;
        }
    }
    y
}

/// `h_t = exp(Δ_t a) h_{t−1} + Δ_t B_t u_t`, `y_t = C_t h_t`, step by step.
pub fn selective_scan_sequential(s: &SelectiveInputs) -> Result<Vec<f64>> {
    s.validate()?;
    Ok(sequential_with_decay(s, &decay_table(s)))
}

/// Composition of affine maps `h ↦ m·h + a`: applying `first` then
/// `second` gives `(m₁m₂, m₂a₁ + a₂)`.
#[inline]
fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Inclusive scan with the up-sweep / down-sweep (Blelloch) schedule.
/// Every level's inner loop is independent and could run in parallel.
pub fn blelloch_inclusive(items: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let size = n.next_power_of_two();
    let identity = (1.0, 0.0);
    let mut tree = items.to_vec();
    tree.resize(size, identity);
    let mut stride = 1;
    while stride < size {
        let mut i = 2 * stride - 1;
        while i < size {
            tree[i] = combine(tree[i - stride], tree[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    tree[size - 1] = identity;
    stride = size / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < size {
            let left = tree[i - stride];
            tree[i - stride] = tree[i];
            tree[i] = combine(tree[i], left);
            i += 2 * stride;
        }
        stride /= 2;
    }
    // exclusive prefix → inclusive
    (0..n).map(|i| combine(tree[i], items[i])).collect()
}

/// Same recurrence as [`selective_scan_sequential`], computed per
/// (channel, state) lane with [`blelloch_inclusive`]. Lanes run in parallel.
pub fn selective_scan_associative(s: &SelectiveInputs) -> Result<Vec<f64>> {
    s.validate()?;
    let (l, e, n) = (s.len, s.channels, s.state);
    let lanes: Vec<Vec<f64>> = (0..e * n)
        .into_par_iter()
        .map(|lane| {
            let (ch, k) = (lane / n, lane % n);
            let a = s.a[ch * n + k];
            let pairs: Vec<(f64, f64)> = (0..l)
                .map(|t| {
                    let d = s.delta[t * e + ch];
                    ((d * a).exp(), d * s.b[t * n + k] * s.u[t * e + ch])
                })
                .collect();
            blelloch_inclusive(&pairs).into_iter().map(|p| p.1).collect()
        })
        .collect();
    let mut y = vec![0.0; l * e];
    for ch in 0..e {
        for t in 0..l {
            y[t * e + ch] = (0..n).map(|k| s.c[t * n + k] * lanes[ch * n + k][t]).sum();
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    #[default]
    Sequential,
    Associative,
}

impl Graph {
    /// Differentiable diagonal selective scan.
    ///
    /// `u`, `delta`: `len × channels`; `log_a`: `channels × state` with
    /// `a = −exp(log_a)`; `b`, `c`: `len × state`. The backward pass is a
    /// reverse-time scan that recomputes the hidden states per channel.
    pub fn selective_scan(
        &self,
        u: Var,
        delta: Var,
        log_a: Var,
        b: Var,
        c: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let (l, e) = u.shape();
        let n = log_a.cols;
        if delta.shape() != (l, e) || log_a.rows != e || b.shape() != (l, n) || c.shape() != (l, n) {
            return Err(Error::invalid("selective scan operand shapes disagree"));
        }
        let uv = self.value(u);
        let dv = self.value(delta);
        let lav = self.value(log_a);
        let bv = self.value(b);
        let cv = self.value(c);
        let a: Vec<f64> = lav.data.iter().map(|x| -x.exp()).collect();
        let inputs = SelectiveInputs {
            len: l,
            channels: e,
            state: n,
            u: uv.data.clone(),
            delta: dv.data.clone(),
            a: a.clone(),
            b: bv.data.clone(),
            c: cv.data.clone(),
        };
        inputs.validate()?;
        let decay = decay_table(&inputs);
        let y = match mode {
            ScanMode::Sequential => sequential_with_decay(&inputs, &decay),
            ScanMode::Associative => selective_scan_associative(&inputs)?,
        };
        Ok(self.custom(Tensor::new(l, e, y), move |g, sink| {
            let mut gu = vec![0.0; l * e];
            let mut gd = vec![0.0; l * e];
            let mut gla = vec![0.0; e * n];
            let mut gb = vec![0.0; l * n];
            let mut gc = vec![0.0; l * n];
            let mut hs = vec![0.0; l * n];
            let mut gh = vec![0.0; n];
            for ch in 0..e {
                let ach = &a[ch * n..(ch + 1) * n];
                let decay = &decay[ch * l * n..(ch + 1) * l * n];
                for t in 0..l {
                    let du = dv.data[t * e + ch] * uv.data[t * e + ch];
                    for k in 0..n {
                        let prev = if t > 0 { hs[(t - 1) * n + k] } else { 0.0 };
                        hs[t * n + k] = decay[t * n + k] * prev + du * bv.data[t * n + k];
                    }
                }
                gh.iter_mut().for_each(|x| *x = 0.0);
                let mut ga = vec![0.0; n];
                for t in (0..l).rev() {
                    let gy = g[t * e + ch];
                    let d = dv.data[t * e + ch];
                    let ut = uv.data[t * e + ch];
                    let mut g_delta = 0.0;
                    let mut g_u = 0.0;
                    for k in 0..n {
                        let idx = t * n + k;
                        gh[k] += gy * cv.data[idx];
                        gc[idx] += gy * hs[idx];
                        let prev = if t > 0 { hs[idx - n] } else { 0.0 };
                        let m = decay[idx];
                        let g_m = gh[k] * prev;
                        g_delta += g_m * m * ach[k] + gh[k] * bv.data[idx] * ut;
                        ga[k] += g_m * m * d;
                        gb[idx] += gh[k] * d * ut;
                        g_u += gh[k] * d * bv.data[idx];
                        gh[k] *= m;
                    }
                    gd[t * e + ch] += g_delta;
                    gu[t * e + ch] += g_u;
                }
                for k in 0..n {
                    // a = −exp(log_a) ⇒ ∂a/∂log_a = a
                    gla[ch * n + k] = ga[k] * ach[k];
                }
            }
            sink.add(u, &gu);
            sink.add(delta, &gd);
            sink.add(log_a, &gla);
            sink.add(b, &gb);
            sink.add(c, &gc);
        }))
    }
}
