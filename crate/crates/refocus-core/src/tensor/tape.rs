//! Reverse-mode tape: a flat record of executed ops, walked backward once
//! from a scalar root. Shapes are validated at build time; every op checks
//! its output for NaN/Inf and fails fast naming itself.
//!
//! Non-obvious ops: the real-FFT pair uses the exact adjoint transforms from
//! [`crate::fft`] as backward rules; `pick_bins` is the discrete gather at the
//! heart of key-frequency selection (gradients flow only through the selected
//! complex entries — the choice itself is data, not a differentiable input);
//! the instance-norm pair differentiates through its own statistics, so
//! gradients reach both the normalized path and the raw reference window.

use num_complex::Complex64;

use super::Tensor;
use crate::error::{Error, Result};
use crate::fft;

pub type TensorId = usize;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Axis selector for 2-D ops. `Rows` operates along the row index (down each
/// column); `Cols` operates along the column index (across each row).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Activation choice surfaced in configs; the tape exposes both as ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceOp {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Gelu(TensorId),
    Matmul(TensorId, TensorId),
    VecMat(TensorId, TensorId),
    Softmax(TensorId, Option<Axis>),
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId },
    Reduce { x: TensorId, op: ReduceOp, axis: Option<Axis> },
    Row { x: TensorId, r: usize },
    StackRows(Vec<TensorId>),
    Conv1dSame { x: TensorId, w: TensorId },
    Rfft(TensorId),
    Irfft { s: TensorId, n: usize },
    PickBins { spectra: Vec<TensorId>, choice: Vec<usize> },
    RevinNorm { x: TensorId, eps: f64 },
    RevinDenorm { y: TensorId, xref: TensorId, eps: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert list. One tape per forward-backward computation; build, call
/// [`Tape::backward`] once from a scalar root, then read gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last backward root w.r.t. node `id`, if any flowed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { op: Op::Leaf, value: t, requires_grad });
        self.nodes.len() - 1
    }

    /// Non-differentiable value injected mid-graph.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, false)
    }

    fn push(
        &mut self,
        opname: &'static str,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { op, value, requires_grad });
        Ok(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    fn same_shape(&self, opname: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                opname,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", Op::Add(a, b), shape, data, rg)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", Op::Sub(a, b), shape, data, rg)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", Op::Mul(a, b), shape, data, rg)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push("scale", Op::Scale(a, c), shape, data, rg)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push("relu", Op::Relu(a), shape, data, rg)
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_val(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push("gelu", Op::Gelu(a), shape, data, rg)
    }

    pub fn activation(&mut self, a: TensorId, act: Activation) -> Result<TensorId> {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Gelu => self.gelu(a),
        }
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Op::Matmul(a, b), vec![m, n], out, rg)
    }

    /// 1-D row vector times matrix: `[k] · [k,n] → [n]`.
    pub fn vecmat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("vecmat", format!("{sa:?} · {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n];
        for p in 0..k {
            let av = da[p];
            let brow = &db[p * n..(p + 1) * n];
            for j in 0..n {
                out[j] += av * brow[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("vecmat", Op::VecMat(a, b), vec![n], out, rg)
    }

    // ---- normalization / softmax ----------------------------------------

    /// Softmax along `axis`. 1-D inputs take `axis = None` (whole vector);
    /// 2-D inputs require an explicit axis.
    pub fn softmax(&mut self, x: TensorId, axis: Option<Axis>) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        match (shape.len(), axis) {
            (1, None) | (2, Some(_)) => {}
            _ => {
                return Err(Error::contract(
                    "softmax",
                    format!("axis {axis:?} invalid for shape {shape:?}"),
                ))
            }
        }
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for_each_slice(&shape, axis, |idx| {
            softmax_slice(data, &mut out, idx);
        });
        let rg = self.rg(x);
        self.push("softmax", Op::Softmax(x, axis), shape, out, rg)
    }

    /// Per-row `(x − mean)/√(var + 1e-5) · gain + bias` over the last axis.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias must be [{d}] for input {shape:?}"),
            ));
        }
        let rows = self.value(x).numel() / d;
        let (dx, dg, db) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; dx.len()];
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let (mean, inv) = ln_stats(row);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * dg[j] + db[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push("layer_norm", Op::LayerNorm { x, gain, bias }, shape, out, rg)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: TensorId, axis: Option<Axis>) -> Result<TensorId> {
        self.reduce(x, ReduceOp::Sum, axis)
    }

    pub fn mean(&mut self, x: TensorId, axis: Option<Axis>) -> Result<TensorId> {
        self.reduce(x, ReduceOp::Mean, axis)
    }

    fn reduce(&mut self, x: TensorId, op: ReduceOp, axis: Option<Axis>) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data();
        let rg = self.rg(x);
        match axis {
            None => {
                let s: f64 = data.iter().sum();
                let v = match op {
                    ReduceOp::Sum => s,
                    ReduceOp::Mean => s / data.len() as f64,
                };
                self.push("reduce", Op::Reduce { x, op, axis }, vec![1], vec![v], rg)
            }
            Some(ax) => {
                if shape.len() != 2 {
                    return Err(Error::contract("reduce", "axis reduction needs a 2-D input"));
                }
                let (m, n) = (shape[0], shape[1]);
                let (out_len, denom) = match ax {
                    Axis::Rows => (n, m as f64),
                    Axis::Cols => (m, n as f64),
                };
                let mut out = vec![0.0; out_len];
                for i in 0..m {
                    for j in 0..n {
                        let slot = if ax == Axis::Rows { j } else { i };
                        out[slot] += data[i * n + j];
                    }
                }
                if op == ReduceOp::Mean {
                    for v in &mut out {
                        *v /= denom;
                    }
                }
                self.push("reduce", Op::Reduce { x, op, axis }, vec![out_len], out, rg)
            }
        }
    }

    // ---- structural ------------------------------------------------------

    /// Extract row `r` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, x: TensorId, r: usize) -> Result<TensorId> {
        let shape = self.value(x).shape();
        if shape.len() != 2 || r >= shape[0] {
            return Err(Error::shape("row", format!("row {r} of {shape:?}")));
        }
        let n = shape[1];
        let data = self.value(x).row(r).to_vec();
        let rg = self.rg(x);
        self.push("row", Op::Row { x, r }, vec![n], data, rg)
    }

    /// Stack equal-length 1-D tensors into a 2-D tensor. Repeating one id is
    /// the broadcast idiom: its gradient accumulates across the copies.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows", "no rows"));
        }
        let n = match self.value(rows[0]).shape() {
            [n] => *n,
            s => return Err(Error::shape("stack_rows", format!("row 0 has shape {s:?}"))),
        };
        let mut data = Vec::with_capacity(rows.len() * n);
        let mut rg = false;
        for &r in rows {
            if self.value(r).shape() != [n] {
                return Err(Error::shape("stack_rows", "row length mismatch"));
            }
            data.extend_from_slice(self.value(r).data());
            rg |= self.rg(r);
        }
        self.push("stack_rows", Op::StackRows(rows.to_vec()), vec![rows.len(), n], data, rg)
    }

    /// Stride-1 zero-padded "same" cross-correlation of a 1-D signal with a
    /// 1-D kernel: `y_t = Σ_k w_k·x_{t+k−⌊K/2⌋}`, length preserved.
    pub fn conv1d_same(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        let (t_len, k_len) = match (sx, sw) {
            ([t], [k]) => (*t, *k),
            _ => return Err(Error::shape("conv1d_same", format!("{sx:?} conv {sw:?}"))),
        };
        if t_len < k_len {
            return Err(Error::contract(
                "conv1d_same",
                format!("signal length {t_len} shorter than kernel {k_len}"),
            ));
        }
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let pad = k_len / 2;
        let mut out = vec![0.0; t_len];
        for (t, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &wk) in dw.iter().enumerate() {
                let idx = t + k;
                if idx >= pad && idx - pad < t_len {
                    acc += wk * dx[idx - pad];
                }
            }
            *o = acc;
        }
        let rg = self.rg(x) || self.rg(w);
        self.push("conv1d_same", Op::Conv1dSame { x, w }, vec![t_len], out, rg)
    }

    // ---- spectral --------------------------------------------------------

    /// Real FFT of a 1-D signal to a `[2, ⌊n/2⌋+1]` tensor (row 0 real,
    /// row 1 imaginary), unnormalized forward.
    pub fn rfft(&mut self, x: TensorId) -> Result<TensorId> {
        let n = match self.value(x).shape() {
            [n] => *n,
            s => return Err(Error::shape("rfft", format!("need 1-D, got {s:?}"))),
        };
        let bins = fft::rfft(self.value(x).data());
        let nb = bins.len();
        let mut data = Vec::with_capacity(2 * nb);
        data.extend(bins.iter().map(|z| z.re));
        data.extend(bins.iter().map(|z| z.im));
        let rg = self.rg(x);
        let _ = n;
        self.push("rfft", Op::Rfft(x), vec![2, nb], data, rg)
    }

    /// Inverse real FFT of a `[2, bins]` tensor back to `n` samples (1/n
    /// normalized). DC/Nyquist imaginary entries are dead coordinates.
    pub fn irfft(&mut self, s: TensorId, n: usize) -> Result<TensorId> {
        let shape = self.value(s).shape();
        let nb = fft::rfft_bins(n);
        if shape != [2, nb] {
            return Err(Error::shape(
                "irfft",
                format!("need [2, {nb}] for length {n}, got {shape:?}"),
            ));
        }
        let d = self.value(s).data();
        let bins: Vec<Complex64> = (0..nb).map(|j| Complex64::new(d[j], d[nb + j])).collect();
        let out = fft::irfft(&bins, n);
        let rg = self.rg(s);
        self.push("irfft", Op::Irfft { s, n }, vec![n], out, rg)
    }

    /// Per-bin gather across channel spectra: `out[:, j] = spectra[choice[j]][:, j]`.
    /// Selected entries are bitwise copies; gradient scatters to the chosen
    /// channel only. `choice` is plain data — no gradient flows to it.
    pub fn pick_bins(&mut self, spectra: &[TensorId], choice: &[usize]) -> Result<TensorId> {
        if spectra.is_empty() {
            return Err(Error::contract("pick_bins", "no spectra"));
        }
        let shape = self.value(spectra[0]).shape().to_vec();
        let nb = match shape.as_slice() {
            [2, nb] => *nb,
            s => return Err(Error::shape("pick_bins", format!("spectrum shape {s:?}"))),
        };
        for &s in spectra {
            if self.value(s).shape() != shape.as_slice() {
                return Err(Error::shape("pick_bins", "spectra shape mismatch"));
            }
        }
        if choice.len() != nb {
            return Err(Error::shape("pick_bins", "choice length != bins"));
        }
        if let Some(&bad) = choice.iter().find(|&&c| c >= spectra.len()) {
            return Err(Error::contract("pick_bins", format!("channel {bad} out of range")));
        }
        let mut data = vec![0.0; 2 * nb];
        for (j, &c) in choice.iter().enumerate() {
            let src = self.value(spectra[c]).data();
            data[j] = src[j];
            data[nb + j] = src[nb + j];
        }
        let rg = spectra.iter().any(|&s| self.rg(s));
        self.push(
            "pick_bins",
            Op::PickBins { spectra: spectra.to_vec(), choice: choice.to_vec() },
            shape,
            data,
            rg,
        )
    }

    // ---- instance normalization -----------------------------------------

    /// Per-signal standardization `(x − μ)/(σ + eps)` with population σ.
    /// Differentiates through μ and σ.
    pub fn revin_norm(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let t_len = match self.value(x).shape() {
            [t] if *t >= 2 => *t,
            s => return Err(Error::shape("revin_norm", format!("need 1-D length ≥ 2, got {s:?}"))),
        };
        let d = self.value(x).data();
        let (mu, sigma) = mean_std(d);
        let s = sigma + eps;
        if s <= 0.0 {
            return Err(Error::contract("revin_norm", "σ + eps must be positive"));
        }
        let out: Vec<f64> = d.iter().map(|v| (v - mu) / s).collect();
        let rg = self.rg(x);
        self.push("revin_norm", Op::RevinNorm { x, eps }, vec![t_len], out, rg)
    }

    /// Reverse of [`Tape::revin_norm`] using statistics recomputed from the
    /// raw reference signal: `y·(σ(xref)+eps) + μ(xref)`. Gradients flow to
    /// both `y` and `xref`.
    pub fn revin_denorm(&mut self, y: TensorId, xref: TensorId, eps: f64) -> Result<TensorId> {
        let f_len = match self.value(y).shape() {
            [f] => *f,
            s => return Err(Error::shape("revin_denorm", format!("need 1-D y, got {s:?}"))),
        };
        match self.value(xref).shape() {
            [t] if *t >= 2 => {}
            s => return Err(Error::shape("revin_denorm", format!("need 1-D xref length ≥ 2, got {s:?}"))),
        }
        let (mu, sigma) = mean_std(self.value(xref).data());
        let s = sigma + eps;
        let out: Vec<f64> = self.value(y).data().iter().map(|v| v * s + mu).collect();
        let rg = self.rg(y) || self.rg(xref);
        self.push("revin_denorm", Op::RevinDenorm { y, xref, eps }, vec![f_len], out, rg)
    }

    // ---- backward --------------------------------------------------------

    /// Walk the tape backward from a scalar root, populating gradients on
    /// every `requires_grad` ancestor.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if root >= self.nodes.len() {
            return Err(Error::contract("backward", "root id out of range"));
        }
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::contract("backward", "root must be scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, &g, 1.0);
                    self.accum(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, &g, 1.0);
                    self.accum(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let contrib: Vec<f64> =
                            g.iter().zip(self.value(*b).data()).map(|(gv, bv)| gv * bv).collect();
                        self.accum(&mut grads, *a, &contrib, 1.0);
                    }
                    if self.rg(*b) {
                        let contrib: Vec<f64> =
                            g.iter().zip(self.value(*a).data()).map(|(gv, av)| gv * av).collect();
                        self.accum(&mut grads, *b, &contrib, 1.0);
                    }
                }
                Op::Scale(a, c) => {
                    self.accum(&mut grads, *a, &g, *c);
                }
                Op::Relu(a) => {
                    if self.rg(*a) {
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                            .collect();
                        self.accum(&mut grads, *a, &contrib, 1.0);
                    }
                }
                Op::Gelu(a) => {
                    if self.rg(*a) {
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(gv, &xv)| gv * gelu_grad(xv))
                            .collect();
                        self.accum(&mut grads, *a, &contrib, 1.0);
                    }
                }
                Op::Matmul(a, b) => {
                    let sa = self.value(*a).shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = self.value(*b).shape()[1];
                    if self.rg(*a) {
                        // dA = g · Bᵀ
                        let db = self.value(*b).data();
                        let mut contrib = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g[i * n + j];
                                for p in 0..k {
                                    contrib[i * k + p] += gv * db[p * n + j];
                                }
                            }
                        }
                        self.accum(&mut grads, *a, &contrib, 1.0);
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · g
                        let da = self.value(*a).data();
                        let mut contrib = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = da[i * k + p];
                                for j in 0..n {
                                    contrib[p * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                        self.accum(&mut grads, *b, &contrib, 1.0);
                    }
                }
                Op::VecMat(a, b) => {
                    let (k, n) = {
                        let sb = self.value(*b).shape();
                        (sb[0], sb[1])
                    };
                    if self.rg(*a) {
                        let db = self.value(*b).data();
                        let mut contrib = vec![0.0; k];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            contrib[p] = brow.iter().zip(&g).map(|(bv, gv)| bv * gv).sum();
                        }
                        self.accum(&mut grads, *a, &contrib, 1.0);
                    }
                    if self.rg(*b) {
                        let da = self.value(*a).data();
                        let mut contrib = vec![0.0; k * n];
                        for p in 0..k {
                            let av = da[p];
                            for j in 0..n {
                                contrib[p * n + j] = av * g[j];
                            }
                        }
                        self.accum(&mut grads, *b, &contrib, 1.0);
                    }
                }
                Op::Softmax(x, axis) => {
                    if self.rg(*x) {
                        let shape = self.value(id).shape().to_vec();
                        let s = self.value(id).data();
                        let mut contrib = vec![0.0; s.len()];
                        for_each_slice(&shape, *axis, |idx| {
                            let dot: f64 = idx.iter().map(|&i| g[i] * s[i]).sum();
                            for &i in idx {
                                contrib[i] = s[i] * (g[i] - dot);
                            }
                        });
                        self.accum(&mut grads, *x, &contrib, 1.0);
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let d = *self.value(*x).shape().last().unwrap();
                    let rows = self.value(*x).numel() / d;
                    let dx = self.value(*x).data();
                    let dgain = self.value(*gain).data();
                    let mut cx = vec![0.0; dx.len()];
                    let mut cg = vec![0.0; d];
                    let mut cb = vec![0.0; d];
                    for r in 0..rows {
                        let row = &dx[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let (mean, inv) = ln_stats(row);
                        let xh: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dxh: Vec<f64> =
                            grow.iter().zip(dgain).map(|(gv, gn)| gv * gn).collect();
                        let m1: f64 = dxh.iter().sum::<f64>() / d as f64;
                        let m2: f64 =
                            dxh.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            cx[r * d + j] = inv * (dxh[j] - m1 - xh[j] * m2);
                            cg[j] += grow[j] * xh[j];
                            cb[j] += grow[j];
                        }
                    }
                    self.accum(&mut grads, *x, &cx, 1.0);
                    self.accum(&mut grads, *gain, &cg, 1.0);
                    self.accum(&mut grads, *bias, &cb, 1.0);
                }
                Op::Reduce { x, op, axis } => {
                    if self.rg(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        let numel: usize = shape.iter().product();
                        let mut contrib = vec![0.0; numel];
                        match axis {
                            None => {
                                let f = match op {
                                    ReduceOp::Sum => g[0],
                                    ReduceOp::Mean => g[0] / numel as f64,
                                };
                                contrib.iter_mut().for_each(|v| *v = f);
                            }
                            Some(ax) => {
                                let (m, n) = (shape[0], shape[1]);
                                let denom = match (op, ax) {
                                    (ReduceOp::Sum, _) => 1.0,
                                    (ReduceOp::Mean, Axis::Rows) => m as f64,
                                    (ReduceOp::Mean, Axis::Cols) => n as f64,
                                };
                                for i in 0..m {
                                    for j in 0..n {
                                        let slot = if *ax == Axis::Rows { j } else { i };
                                        contrib[i * n + j] = g[slot] / denom;
                                    }
                                }
                            }
                        }
                        self.accum(&mut grads, *x, &contrib, 1.0);
                    }
                }
                Op::Row { x, r } => {
                    if self.rg(*x) {
                        let shape = self.value(*x).shape();
                        let (rows, n) = (shape[0], shape[1]);
                        let mut contrib = vec![0.0; rows * n];
                        contrib[r * n..(r + 1) * n].copy_from_slice(&g);
                        self.accum(&mut grads, *x, &contrib, 1.0);
                    }
                }
                Op::StackRows(rows) => {
                    let n = self.value(id).shape()[1];
                    // Clone: rows borrows the node we're iterating from.
                    let rows = rows.clone();
                    for (i, &src) in rows.iter().enumerate() {
                        self.accum(&mut grads, src, &g[i * n..(i + 1) * n], 1.0);
                    }
                }
                Op::Conv1dSame { x, w } => {
                    let t_len = self.value(*x).numel();
                    let k_len = self.value(*w).numel();
                    let pad = k_len / 2;
                    if self.rg(*x) {
                        let dw = self.value(*w).data();
                        let mut contrib = vec![0.0; t_len];
                        for (t, &gv) in g.iter().enumerate() {
                            for (k, &wk) in dw.iter().enumerate() {
                                let idx = t + k;
                                if idx >= pad && idx - pad < t_len {
                                    contrib[idx - pad] += wk * gv;
                                }
                            }
                        }
                        self.accum(&mut grads, *x, &contrib, 1.0);
                    }
                    if self.rg(*w) {
                        let dx = self.value(*x).data();
                        let mut contrib = vec![0.0; k_len];
                        for (t, &gv) in g.iter().enumerate() {
                            for (k, c) in contrib.iter_mut().enumerate() {
                                let idx = t + k;
                                if idx >= pad && idx - pad < t_len {
                                    *c += dx[idx - pad] * gv;
                                }
                            }
                        }
                        self.accum(&mut grads, *w, &contrib, 1.0);
                    }
                }
                Op::Rfft(x) => {
                    if self.rg(*x) {
                        let n = self.value(*x).numel();
                        let nb = fft::rfft_bins(n);
                        let gc: Vec<Complex64> =
                            (0..nb).map(|j| Complex64::new(g[j], g[nb + j])).collect();
                        let contrib = fft::rfft_adjoint(&gc, n);
                        self.accum(&mut grads, *x, &contrib, 1.0);
                    }
                }
                Op::Irfft { s, n } => {
                    if self.rg(*s) {
                        let nb = fft::rfft_bins(*n);
                        let adj = fft::irfft_adjoint(&g);
                        let mut contrib = vec![0.0; 2 * nb];
                        for (j, z) in adj.iter().enumerate() {
                            contrib[j] = z.re;
                            contrib[nb + j] = z.im;
                        }
                        self.accum(&mut grads, *s, &contrib, 1.0);
                    }
                }
                Op::PickBins { spectra, choice } => {
                    let nb = choice.len();
                    let (spectra, choice) = (spectra.clone(), choice.clone());
                    // Group scatter per source spectrum to accumulate once each.
                    for (ci, &src) in spectra.iter().enumerate() {
                        if !self.rg(src) {
                            continue;
                        }
                        let mut contrib = vec![0.0; 2 * nb];
                        let mut any = false;
                        for (j, &c) in choice.iter().enumerate() {
                            if c == ci {
                                contrib[j] = g[j];
                                contrib[nb + j] = g[nb + j];
                                any = true;
                            }
                        }
                        if any {
                            self.accum(&mut grads, src, &contrib, 1.0);
                        }
                    }
                }
                Op::RevinNorm { x, eps } => {
                    if self.rg(*x) {
                        let d = self.value(*x).data();
                        let t = d.len() as f64;
                        let (mu, sigma) = mean_std(d);
                        let s = sigma + eps;
                        let gbar: f64 = g.iter().sum::<f64>() / t;
                        // Σ g_t (x_t − μ) drives the σ path.
                        let gdot: f64 = g.iter().zip(d).map(|(gv, xv)| gv * (xv - mu)).sum();
                        let contrib: Vec<f64> = d
                            .iter()
                            .zip(&g)
                            .map(|(&xv, &gv)| {
                                let base = (gv - gbar) / s;
                                if sigma > 0.0 {
                                    base - gdot * (xv - mu) / (t * sigma * s * s)
                                } else {
                                    base
                                }
                            })
                            .collect();
                        self.accum(&mut grads, *x, &contrib, 1.0);
                    }
                }
                Op::RevinDenorm { y, xref, eps } => {
                    let (mu, sigma) = mean_std(self.value(*xref).data());
                    let s = sigma + eps;
                    if self.rg(*y) {
                        let contrib: Vec<f64> = g.iter().map(|gv| gv * s).collect();
                        self.accum(&mut grads, *y, &contrib, 1.0);
                    }
                    if self.rg(*xref) {
                        let dy = self.value(*y).data();
                        let dref = self.value(*xref).data();
                        let t = dref.len() as f64;
                        let gsum: f64 = g.iter().sum();
                        let gy: f64 = g.iter().zip(dy).map(|(gv, yv)| gv * yv).sum();
                        let contrib: Vec<f64> = dref
                            .iter()
                            .map(|&xv| {
                                let mu_term = gsum / t;
                                if sigma > 0.0 {
                                    mu_term + gy * (xv - mu) / (t * sigma)
                                } else {
                                    mu_term
                                }
                            })
                            .collect();
                        self.accum(&mut grads, *xref, &contrib, 1.0);
                    }
                }
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, contrib: &[f64], factor: f64) {
        if !self.rg(id) {
            return;
        }
        let numel = self.value(id).numel();
        debug_assert_eq!(numel, contrib.len());
        let slot = grads[id].get_or_insert_with(|| vec![0.0; numel]);
        for (a, b) in slot.iter_mut().zip(contrib) {
            *a += factor * b;
        }
    }
}

fn gelu_val(x: f64) -> f64 {
    let c0 = (2.0 / std::f64::consts::PI).sqrt();
    let u = c0 * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c0 = (2.0 / std::f64::consts::PI).sqrt();
    let u = c0 * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c0 * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn ln_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(x: &[f64]) -> (f64, f64) {
    let t = x.len() as f64;
    let mu = x.iter().sum::<f64>() / t;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t;
    (mu, var.sqrt())
}

/// Visit index sets of softmax slices: the whole vector (1-D), each row
/// (2-D, Cols), or each column (2-D, Rows).
fn for_each_slice(shape: &[usize], axis: Option<Axis>, mut f: impl FnMut(&[usize])) {
    match (shape, axis) {
        ([n], None) => {
            let idx: Vec<usize> = (0..*n).collect();
            f(&idx);
        }
        ([m, n], Some(Axis::Cols)) => {
            for r in 0..*m {
                let idx: Vec<usize> = (r * n..(r + 1) * n).collect();
                f(&idx);
            }
        }
        ([m, n], Some(Axis::Rows)) => {
            for c in 0..*n {
                let idx: Vec<usize> = (0..*m).map(|r| r * n + c).collect();
                f(&idx);
            }
        }
        _ => unreachable!("slice iteration on validated shapes only"),
    }
}

fn softmax_slice(input: &[f64], out: &mut [f64], idx: &[usize]) {
    let max = idx.iter().map(|&i| input[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &i in idx {
        let e = (input[i] - max).exp();
        out[i] = e;
        denom += e;
    }
    for &i in idx {
        out[i] /= denom;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], tag: u64) -> Tensor {
        let mut rng = derive_rng(21, &[tag]);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let a = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let prod = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(prod).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
        let c = tape.constant(Tensor::matrix(&[vec![3.0], vec![4.0]]).unwrap());
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(rand_tensor(&[2, 3], 0));
        let b = tape.constant(rand_tensor(&[2, 2], 1));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = rand_tensor(&[3, 4], 2);
        let b = rand_tensor(&[4, 2], 3);
        // d(sum(a·b))/da
        let err = grad_check(
            |tape, x| {
                let bc = tape.constant(b.clone());
                let p = tape.matmul(x, bc)?;
                tape.sum(p, None)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
        // and w.r.t. b through a nonlinearity so the gradient is non-constant
        let err = grad_check(
            |tape, x| {
                let ac = tape.constant(a.clone());
                let p = tape.matmul(ac, x)?;
                let q = tape.gelu(p)?;
                tape.mean(q, None)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[5], 4));
        let z = tape.constant(Tensor::vector(&[0.0; 5]).unwrap());
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(x).data());

        let r = tape.constant(Tensor::vector(&[-1.0, 2.0]).unwrap());
        let rr = tape.relu(r).unwrap();
        assert_eq!(tape.value(rr).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mul_gradient_matches_finite_differences() {
        let a = rand_tensor(&[2, 3], 5);
        let b = rand_tensor(&[2, 3], 6);
        let err = grad_check(
            |tape, x| {
                let bc = tape.constant(b.clone());
                let p = tape.mul(x, bc)?;
                let q = tape.mul(p, p)?; // quadratic so da is input-dependent
                tape.sum(q, None)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::vector(&[0.7, 0.7, 0.7]).unwrap());
        let s = tape.softmax(u, None).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(Tensor::vector(&[0.0, 3.0f64.ln()]).unwrap());
        let s = tape.softmax(x, None).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_slices_sum_to_one_both_axes() {
        let x = rand_tensor(&[3, 4], 7);
        let mut tape = Tape::new();
        let id = tape.constant(x);
        let rows = tape.softmax(id, Some(Axis::Rows)).unwrap();
        let v = tape.value(rows);
        for c in 0..4 {
            let s: f64 = (0..3).map(|r| v.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let cols = tape.softmax(id, Some(Axis::Cols)).unwrap();
        let v = tape.value(cols);
        for r in 0..3 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = rand_tensor(&[4], 8);
        let w = rand_tensor(&[4], 9);
        let err = grad_check(
            |tape, id| {
                let s = tape.softmax(id, None)?;
                let wc = tape.constant(w.clone());
                let p = tape.mul(s, wc)?;
                tape.sum(p, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[4.2; 6]).unwrap());
        let gain = tape.constant(Tensor::vector(&[1.0; 6]).unwrap());
        let bias = tape.constant(Tensor::vector(&[0.0; 6]).unwrap());
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for v in tape.value(y).data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[1.0, 3.0]).unwrap());
        let gain = tape.constant(Tensor::vector(&[1.0, 1.0]).unwrap());
        let bias = tape.constant(Tensor::vector(&[0.0, 0.0]).unwrap());
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let d = tape.value(y).data();
        // variance 1 with the 1e-5 floor → slight shrinkage below ±1
        assert!(d[0] > -1.0 && d[0] < -0.99999);
        assert!(d[1] < 1.0 && d[1] > 0.99999);
        assert!((d[0] + d[1]).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = rand_tensor(&[2, 4], 10);
        let gain = rand_tensor(&[4], 11);
        let bias = rand_tensor(&[4], 12);
        for (which, t) in [(0, &x), (1, &gain), (2, &bias)] {
            let (x, gain, bias) = (x.clone(), gain.clone(), bias.clone());
            let err = grad_check(
                move |tape, id| {
                    let xs = [&x, &gain, &bias];
                    let mut ids = [0; 3];
                    for (i, v) in xs.iter().enumerate() {
                        ids[i] = if i == which { id } else { tape.constant((*v).clone()) };
                    }
                    let y = tape.layer_norm(ids[0], ids[1], ids[2])?;
                    let sq = tape.mul(y, y)?;
                    tape.mean(sq, None)
                },
                t,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "input {which}: err = {err}");
        }
    }

    #[test]
    fn reductions_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[2.0, 4.0]).unwrap());
        let m = tape.mean(x, None).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
        let z = tape.constant(Tensor::vector(&[0.0; 9]).unwrap());
        let s = tape.sum(z, None).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0]);

        let a = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let rows = tape.sum(a, Some(Axis::Rows)).unwrap();
        assert_eq!(tape.value(rows).data(), &[4.0, 6.0]);
        let cols = tape.mean(a, Some(Axis::Cols)).unwrap();
        assert_eq!(tape.value(cols).data(), &[1.5, 3.5]);
    }

    #[test]
    fn mean_backward_distributes_uniformly() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[6], 13), true);
        let m = tape.mean(x, None).unwrap();
        tape.backward(m).unwrap();
        for v in tape.grad(x).unwrap() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[3], 14), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fused_equals_staged_composition() {
        // z = mean((gelu(x·W))²) fused, vs staging the chain rule by hand
        // through the intermediate y = gelu(x·W).
        let x = rand_tensor(&[2, 3], 15);
        let w = rand_tensor(&[3, 3], 16);

        let mut fused = Tape::new();
        let xid = fused.leaf(x.clone(), true);
        let wid = fused.constant(w.clone());
        let y = {
            let p = fused.matmul(xid, wid).unwrap();
            fused.gelu(p).unwrap()
        };
        let sq = fused.mul(y, y).unwrap();
        let z = fused.mean(sq, None).unwrap();
        fused.backward(z).unwrap();
        let dx_fused = fused.grad(xid).unwrap().to_vec();
        let y_val = fused.value(y).clone();

        // Stage 2: dz/dy with y as a leaf.
        let mut t2 = Tape::new();
        let yid = t2.leaf(y_val, true);
        let sq = t2.mul(yid, yid).unwrap();
        let z2 = t2.mean(sq, None).unwrap();
        t2.backward(z2).unwrap();
        let gy = t2.grad(yid).unwrap().to_vec();

        // Stage 1: VJP of stage one with cotangent gy, via d(sum(y ⊙ gy))/dx.
        let mut t1 = Tape::new();
        let xid = t1.leaf(x, true);
        let wid = t1.constant(w);
        let p = t1.matmul(xid, wid).unwrap();
        let y1 = t1.gelu(p).unwrap();
        let gyc = t1.constant(Tensor::new(vec![2, 3], gy).unwrap());
        let pair = t1.mul(y1, gyc).unwrap();
        let s = t1.sum(pair, None).unwrap();
        t1.backward(s).unwrap();
        let dx_staged = t1.grad(xid).unwrap();

        for (a, b) in dx_fused.iter().zip(dx_staged) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_and_stack_roundtrip_with_broadcast_grad() {
        let x = rand_tensor(&[3, 4], 17);
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone(), true);
        let rows: Vec<TensorId> = (0..3).map(|r| tape.row(id, r).unwrap()).collect();
        let back = tape.stack_rows(&rows).unwrap();
        assert_eq!(tape.value(back).data(), x.data());

        // Broadcast: stack one row three times; its grad is the column sum.
        let single = tape.row(id, 1).unwrap();
        let rep = tape.stack_rows(&[single, single, single]).unwrap();
        let s = tape.sum(rep, None).unwrap();
        tape.backward(s).unwrap();
        let gx = tape.grad(id).unwrap();
        for (j, v) in gx.iter().enumerate() {
            let expect = if (4..8).contains(&j) { 3.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-15, "coord {j}");
        }
    }

    #[test]
    fn conv1d_same_gradients() {
        let x = rand_tensor(&[9], 18);
        let w = rand_tensor(&[3], 19);
        let err = grad_check(
            |tape, id| {
                let wc = tape.constant(w.clone());
                let y = tape.conv1d_same(id, wc)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "x path err = {err}");
        let err = grad_check(
            |tape, id| {
                let xc = tape.constant(x.clone());
                let y = tape.conv1d_same(xc, id)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq, None)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "w path err = {err}");
    }

    #[test]
    fn conv1d_rejects_short_signal() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[2], 20));
        let w = tape.constant(rand_tensor(&[3], 21));
        assert!(tape.conv1d_same(x, w).is_err());
    }

    #[test]
    fn rfft_irfft_on_tape_roundtrip_and_grads() {
        let x = rand_tensor(&[12], 22);
        let mut tape = Tape::new();
        let id = tape.constant(x.clone());
        let s = tape.rfft(id).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 7]);
        let back = tape.irfft(s, 12).unwrap();
        for (a, b) in tape.value(back).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }

        let w = rand_tensor(&[2, 7], 23);
        let err = grad_check(
            |tape, id| {
                let s = tape.rfft(id)?;
                let wc = tape.constant(w.clone());
                let p = tape.mul(s, wc)?;
                let q = tape.mul(p, p)?;
                tape.sum(q, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rfft err = {err}");

        let spec = rand_tensor(&[2, 7], 24);
        let err = grad_check(
            |tape, id| {
                let y = tape.irfft(id, 12)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq, None)
            },
            &spec,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "irfft err = {err}");
    }

    #[test]
    fn pick_bins_copies_bitwise_and_scatters_grad() {
        let a = rand_tensor(&[2, 5], 25);
        let b = rand_tensor(&[2, 5], 26);
        let choice = vec![0, 1, 1, 0, 1];
        let mut tape = Tape::new();
        let ia = tape.leaf(a.clone(), true);
        let ib = tape.leaf(b.clone(), true);
        let picked = tape.pick_bins(&[ia, ib], &choice).unwrap();
        for (j, &pick) in choice.iter().enumerate() {
            let src = if pick == 0 { &a } else { &b };
            assert_eq!(tape.value(picked).at2(0, j).to_bits(), src.at2(0, j).to_bits());
            assert_eq!(tape.value(picked).at2(1, j).to_bits(), src.at2(1, j).to_bits());
        }
        let s = tape.sum(picked, None).unwrap();
        tape.backward(s).unwrap();
        let ga = tape.grad(ia).unwrap();
        let gb = tape.grad(ib).unwrap();
        for j in 0..5 {
            let (ea, eb) = if choice[j] == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
            assert_eq!(ga[j], ea);
            assert_eq!(gb[j], eb);
            assert_eq!(ga[5 + j], ea);
            assert_eq!(gb[5 + j], eb);
        }
    }

    #[test]
    fn revin_ops_gradients() {
        let x = rand_tensor(&[8], 27);
        let err = grad_check(
            |tape, id| {
                let y = tape.revin_norm(id, 1e-8)?;
                let sq = tape.mul(y, y)?;
                let w = Tensor::vector(&[0.3, -1.0, 0.7, 2.0, -0.2, 0.5, 1.1, -0.8]).unwrap();
                let wc = tape.constant(w);
                let p = tape.mul(sq, wc)?;
                tape.sum(p, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "revin_norm err = {err}");

        // Denorm: gradient w.r.t. both the prediction and the reference window.
        let y = rand_tensor(&[4], 28);
        let xref = rand_tensor(&[8], 29);
        let err = grad_check(
            |tape, id| {
                let xc = tape.constant(xref.clone());
                let out = tape.revin_denorm(id, xc, 1e-8)?;
                let sq = tape.mul(out, out)?;
                tape.sum(sq, None)
            },
            &y,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "denorm y err = {err}");
        let err = grad_check(
            |tape, id| {
                let yc = tape.constant(y.clone());
                let out = tape.revin_denorm(yc, id, 1e-8)?;
                let sq = tape.mul(out, out)?;
                tape.sum(sq, None)
            },
            &xref,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "denorm xref err = {err}");
    }

    #[test]
    fn nan_input_fails_fast_naming_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1e308, 1e308]).unwrap());
        let e = tape.add(a, a);
        match e {
            Err(Error::NonFinite { op }) => assert_eq!(op, "add"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&[4, 4], 30), true);
            let w = tape.constant(rand_tensor(&[4, 4], 31));
            let p = tape.matmul(x, w).unwrap();
            let g = tape.gelu(p).unwrap();
            let r0 = tape.row(g, 0).unwrap();
            let s = tape.rfft(r0).unwrap();
            let y = tape.irfft(s, 4).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let m = tape.mean(sq, None).unwrap();
            tape.backward(m).unwrap();
            (
                tape.value(m).data().to_vec(),
                tape.grad(x).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
