use std::rc::Rc;

use super::{Graph, Tensor, Var};

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g · bᵀ` for `g: m×n`, `b: k×n`.
fn matmul_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` for `a: m×k`, `g: m×n`.
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul shape mismatch");
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let av = self.value(a);
        let bv = self.value(b);
        let out = matmul_raw(&av.data, &bv.data, m, k, n);
        self.custom(Tensor::new(m, n, out), move |g, sink| {
            sink.add(a, &matmul_bt(g, &bv.data, m, k, n));
            sink.add(b, &matmul_at(&av.data, g, m, k, n));
        })
    }

    /// `x · w (+ b)` with `w: in × out` and `b: 1 × out`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        self.custom(Tensor::new(a.rows, a.cols, out), move |g, sink| {
            sink.add(a, g);
            sink.add(b, g);
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        self.custom(Tensor::new(a.rows, a.cols, out), move |g, sink| {
            sink.add(a, g);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            sink.add(b, &neg);
        })
    }

    /// Broadcasts the `1 × cols` row `b` over every row of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        assert_eq!(b.rows, 1);
        assert_eq!(a.cols, b.cols, "add_row width mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let c = a.cols;
        let out = av
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data[i % c])
            .collect();
        self.custom(Tensor::new(a.rows, c, out), move |g, sink| {
            sink.add(a, g);
            let slot = sink.slot(b);
            for row in g.chunks_exact(c) {
                for (s, x) in slot.iter_mut().zip(row) {
                    *s += x;
                }
            }
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        self.custom(Tensor::new(a.rows, a.cols, out), move |g, sink| {
            let ga: Vec<f64> = g.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
            sink.add(a, &ga);
            let gb: Vec<f64> = g.iter().zip(&av.data).map(|(x, y)| x * y).collect();
            sink.add(b, &gb);
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = av.data.iter().map(|x| x * s).collect();
        self.custom(Tensor::new(a.rows, a.cols, out), move |g, sink| {
            let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
            sink.add(a, &ga);
        })
    }

    /// Elementwise map with derivative `df(x, f(x))`.
    pub fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.data.iter().map(|&x| f(x)).collect();
        let outv = Rc::new(out.clone());
        self.custom(Tensor::new(a.rows, a.cols, out), move |g, sink| {
            let ga: Vec<f64> = g
                .iter()
                .zip(av.data.iter().zip(outv.iter()))
                .map(|(gv, (&x, &y))| gv * df(x, y))
                .collect();
            sink.add(a, &ga);
        })
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, silu, |x, _| silu_grad(x))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, f64::sin, |x, _| x.cos())
    }

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data.iter().sum();
        let n = a.len();
        self.custom(Tensor::scalar(s), move |g, sink| {
            sink.add(a, &vec![g[0]; n]);
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = a.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1 × cols`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let c = x.cols;
        assert_eq!(gamma.shape(), (1, c));
        assert_eq!(beta.shape(), (1, c));
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; x.rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..x.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let rows = x.rows;
        self.custom(Tensor::new(rows, c, out), move |g, sink| {
            let mut gx = vec![0.0; rows * c];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut sum_d = 0.0;
                let mut sum_dh = 0.0;
                for j in 0..c {
                    ggamma[j] += gr[j] * hr[j];
                    gbeta[j] += gr[j];
                    let d = gr[j] * gv.data[j];
                    sum_d += d;
                    sum_dh += d * hr[j];
                }
                let n = c as f64;
                for j in 0..c {
                    let d = gr[j] * gv.data[j];
                    gx[r * c + j] = inv_std[r] * (d - sum_d / n - hr[j] * sum_dh / n);
                }
            }
            sink.add(x, &gx);
            sink.add(gamma, &ggamma);
            sink.add(beta, &gbeta);
        })
    }

    /// Causal depth-wise 1D convolution along rows (time) with per-channel
    /// kernels `w: cols × width` and bias `1 × cols`:
    /// `y[t,c] = b[c] + Σ_k w[c,k] · x[t − (width−1) + k, c]`, zero-padded.
    pub fn dwconv_causal(&self, x: Var, w: Var, b: Var) -> Var {
        let (len, ch) = x.shape();
        let width = w.cols;
        assert_eq!(w.rows, ch, "conv kernel channel mismatch");
        assert_eq!(b.shape(), (1, ch));
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; len * ch];
        for t in 0..len {
            for c in 0..ch {
                let mut acc = bv.data[c];
                for k in 0..width {
                    let src = t as isize - (width as isize - 1) + k as isize;
                    if src >= 0 {
                        acc += wv.data[c * width + k] * xv.data[src as usize * ch + c];
                    }
                }
                out[t * ch + c] = acc;
            }
        }
        self.custom(Tensor::new(len, ch, out), move |g, sink| {
            let mut gx = vec![0.0; len * ch];
            let mut gw = vec![0.0; ch * width];
            let mut gb = vec![0.0; ch];
            for t in 0..len {
                for c in 0..ch {
                    let go = g[t * ch + c];
                    gb[c] += go;
                    for k in 0..width {
                        let src = t as isize - (width as isize - 1) + k as isize;
                        if src >= 0 {
                            let s = src as usize;
                            gw[c * width + k] += go * xv.data[s * ch + c];
                            gx[s * ch + c] += go * wv.data[c * width + k];
                        }
                    }
                }
            }
            sink.add(x, &gx);
            sink.add(w, &gw);
            sink.add(b, &gb);
        })
    }

    /// Row `i` of the result is row `index[i]` of `x`.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Var {
        let c = x.cols;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(xv.row(i));
        }
        let index = index.to_vec();
        self.custom(Tensor::new(index.len(), c, out), move |g, sink| {
            let slot = sink.slot(x);
            for (r, &i) in index.iter().enumerate() {
                for j in 0..c {
                    slot[i * c + j] += g[r * c + j];
                }
            }
        })
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Var {
        assert!(start <= end && end <= x.cols);
        let w = end - start;
        let c = x.cols;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(x.rows * w);
        for r in 0..x.rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let rows = x.rows;
        self.custom(Tensor::new(rows, w, out), move |g, sink| {
            let slot = sink.slot(x);
            for r in 0..rows {
                for j in 0..w {
                    slot[r * c + start + j] += g[r * w + j];
                }
            }
        })
    }

    /// Stacks equally wide tensors vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let c = parts[0].cols;
        assert!(parts.iter().all(|p| p.cols == c));
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&self.value(*p).data);
        }
        let parts = parts.to_vec();
        let rows = parts.iter().map(|p| p.rows).sum();
        self.custom(Tensor::new(rows, c, out), move |g, sink| {
            let mut at = 0;
            for p in &parts {
                sink.add(*p, &g[at..at + p.len()]);
                at += p.len();
            }
        })
    }
}
