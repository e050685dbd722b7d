//! Cross-channel key-frequency picking block.
//!
//! Each block lifts per-channel embeddings through a shared two-layer map,
//! takes per-channel spectra, scores every frequency bin's energy across
//! channels with a per-bin softmax, picks ONE channel per bin to act as the
//! shared key spectrum, and fuses the projected key back into every channel
//! through two residual Add&Norm stages. The choice itself is discrete and
//! non-differentiable; gradients flow through the selected complex values
//! only.

use num_complex::Complex64;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::{Tape, Tensor, TensorId};

/// How the per-bin channel choice is made from cross-channel energies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PickStrategy {
    /// Sample the channel from the softmax probabilities (seeded rng).
    Softmax,
    /// Take the highest-energy channel; ties go to the lowest index.
    Max,
    /// Take the lowest-energy channel; ties go to the lowest index.
    Min,
}

/// Affine map `x·W + b` with `W: in×out`, weights U(±1/√in), zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, rng: &mut dyn RngCore) -> Self {
        Linear { w: uniform_matrix(d_in, d_out, rng), b: zeros(d_out) }
    }

    /// Square identity map (tests and degenerate configurations).
    pub fn identity(d: usize) -> Self {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Linear { w: Tensor::new(vec![d, d], w).unwrap(), b: zeros(d) }
    }

    /// All-zero map of the given shape.
    pub fn zero(d_in: usize, d_out: usize) -> Self {
        Linear { w: Tensor::new(vec![d_in, d_out], vec![0.0; d_in * d_out]).unwrap(), b: zeros(d_out) }
    }
}

/// Two affine maps with a GELU between: `gelu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct TwoLayer {
    pub first: Linear,
    pub second: Linear,
}

impl TwoLayer {
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut dyn RngCore) -> Self {
        TwoLayer { first: Linear::init(d_in, d_hidden, rng), second: Linear::init(d_hidden, d_out, rng) }
    }

    pub fn zero(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        TwoLayer { first: Linear::zero(d_in, d_hidden), second: Linear::zero(d_hidden, d_out) }
    }
}

/// Learnable layer-norm affine, initialized to the identity (gain 1, bias 0).
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    pub fn init(d: usize) -> Self {
        NormParams { gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(), bias: zeros(d) }
    }
}

fn zeros(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![0.0; n]).unwrap()
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// One key-frequency picking block: entry map D→D→Q, per-bin channel
/// selection over the Q/2+1 half-spectrum, key projection Q→D, skip
/// projection D→D, and two residual Add&Norm stages (fuse, then intra).
#[derive(Clone, Debug)]
pub struct EkpbBlock {
    pub d: usize,
    pub q: usize,
    pub strategy: PickStrategy,
    pub entry: TwoLayer,
    pub skip_proj: Linear,
    pub key_proj: Linear,
    pub fuse: TwoLayer,
    pub fuse_norm: NormParams,
    pub intra: TwoLayer,
    pub intra_norm: NormParams,
}

impl EkpbBlock {
    pub fn init(d: usize, q: usize, strategy: PickStrategy, rng: &mut dyn RngCore) -> Result<Self> {
        if d == 0 || q == 0 {
            return Err(Error::contract("ekpb_init", "D and Q must be positive"));
        }
        if !q.is_multiple_of(2) {
            return Err(Error::contract(
                "ekpb_init",
                format!("Q must be even for a Q/2+1 half-spectrum, got {q}"),
            ));
        }
        Ok(EkpbBlock {
            d,
            q,
            strategy,
            entry: TwoLayer::init(d, d, q, rng),
            skip_proj: Linear::init(d, d, rng),
            key_proj: Linear::init(q, d, rng),
            fuse: TwoLayer::init(d, d, d, rng),
            fuse_norm: NormParams::init(d),
            intra: TwoLayer::init(d, d, d, rng),
            intra_norm: NormParams::init(d),
        })
    }

    /// Every learnable tensor with a stable dotted name, in the canonical
    /// order shared by [`EkpbBlock::bind`] and [`EkpbBind::param_ids`].
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("entry.first.w".into(), &self.entry.first.w),
            ("entry.first.b".into(), &self.entry.first.b),
            ("entry.second.w".into(), &self.entry.second.w),
            ("entry.second.b".into(), &self.entry.second.b),
            ("skip.w".into(), &self.skip_proj.w),
            ("skip.b".into(), &self.skip_proj.b),
            ("key.w".into(), &self.key_proj.w),
            ("key.b".into(), &self.key_proj.b),
            ("fuse.first.w".into(), &self.fuse.first.w),
            ("fuse.first.b".into(), &self.fuse.first.b),
            ("fuse.second.w".into(), &self.fuse.second.w),
            ("fuse.second.b".into(), &self.fuse.second.b),
            ("fuse_norm.gain".into(), &self.fuse_norm.gain),
            ("fuse_norm.bias".into(), &self.fuse_norm.bias),
            ("intra.first.w".into(), &self.intra.first.w),
            ("intra.first.b".into(), &self.intra.first.b),
            ("intra.second.w".into(), &self.intra.second.w),
            ("intra.second.b".into(), &self.intra.second.b),
            ("intra_norm.gain".into(), &self.intra_norm.gain),
            ("intra_norm.bias".into(), &self.intra_norm.bias),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("entry.first.w".into(), &mut self.entry.first.w),
            ("entry.first.b".into(), &mut self.entry.first.b),
            ("entry.second.w".into(), &mut self.entry.second.w),
            ("entry.second.b".into(), &mut self.entry.second.b),
            ("skip.w".into(), &mut self.skip_proj.w),
            ("skip.b".into(), &mut self.skip_proj.b),
            ("key.w".into(), &mut self.key_proj.w),
            ("key.b".into(), &mut self.key_proj.b),
            ("fuse.first.w".into(), &mut self.fuse.first.w),
            ("fuse.first.b".into(), &mut self.fuse.first.b),
            ("fuse.second.w".into(), &mut self.fuse.second.w),
            ("fuse.second.b".into(), &mut self.fuse.second.b),
            ("fuse_norm.gain".into(), &mut self.fuse_norm.gain),
            ("fuse_norm.bias".into(), &mut self.fuse_norm.bias),
            ("intra.first.w".into(), &mut self.intra.first.w),
            ("intra.first.b".into(), &mut self.intra.first.b),
            ("intra.second.w".into(), &mut self.intra.second.w),
            ("intra.second.b".into(), &mut self.intra.second.b),
            ("intra_norm.gain".into(), &mut self.intra_norm.gain),
            ("intra_norm.bias".into(), &mut self.intra_norm.bias),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Put every parameter on the tape as a leaf (trainable or frozen) and
    /// return the id bundle the forward pass consumes.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EkpbBind {
        let ids: Vec<TensorId> =
            self.named_params().into_iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect();
        EkpbBind::from_ids(self.d, self.q, self.strategy, &ids)
    }
}

/// Tape ids for one block's parameters, in [`EkpbBlock::named_params`] order.
#[derive(Clone, Debug)]
pub struct EkpbBind {
    pub d: usize,
    pub q: usize,
    pub strategy: PickStrategy,
    pub entry_w1: TensorId,
    pub entry_b1: TensorId,
    pub entry_w2: TensorId,
    pub entry_b2: TensorId,
    pub skip_w: TensorId,
    pub skip_b: TensorId,
    pub key_w: TensorId,
    pub key_b: TensorId,
    pub fuse_w1: TensorId,
    pub fuse_b1: TensorId,
    pub fuse_w2: TensorId,
    pub fuse_b2: TensorId,
    pub fuse_gain: TensorId,
    pub fuse_bias: TensorId,
    pub intra_w1: TensorId,
    pub intra_b1: TensorId,
    pub intra_w2: TensorId,
    pub intra_b2: TensorId,
    pub intra_gain: TensorId,
    pub intra_bias: TensorId,
}

impl EkpbBind {
    fn from_ids(d: usize, q: usize, strategy: PickStrategy, ids: &[TensorId]) -> Self {
        assert_eq!(ids.len(), 20, "EKPB block has 20 parameter tensors");
        EkpbBind {
            d,
            q,
            strategy,
            entry_w1: ids[0],
            entry_b1: ids[1],
            entry_w2: ids[2],
            entry_b2: ids[3],
            skip_w: ids[4],
            skip_b: ids[5],
            key_w: ids[6],
            key_b: ids[7],
            fuse_w1: ids[8],
            fuse_b1: ids[9],
            fuse_w2: ids[10],
            fuse_b2: ids[11],
            fuse_gain: ids[12],
            fuse_bias: ids[13],
            intra_w1: ids[14],
            intra_b1: ids[15],
            intra_w2: ids[16],
            intra_b2: ids[17],
            intra_gain: ids[18],
            intra_bias: ids[19],
        }
    }

    /// Ids in the same order as [`EkpbBlock::named_params`].
    pub fn param_ids(&self) -> Vec<TensorId> {
        vec![
            self.entry_w1,
            self.entry_b1,
            self.entry_w2,
            self.entry_b2,
            self.skip_w,
            self.skip_b,
            self.key_w,
            self.key_b,
            self.fuse_w1,
            self.fuse_b1,
            self.fuse_w2,
            self.fuse_b2,
            self.fuse_gain,
            self.fuse_bias,
            self.intra_w1,
            self.intra_b1,
            self.intra_w2,
            self.intra_b2,
            self.intra_gain,
            self.intra_bias,
        ]
    }
}

/// Per-bin selection record: the full softmax table and the channel chosen
/// at every frequency bin. Serializable for diagnostics output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PickTrace {
    /// C rows × (Q/2+1) columns; every column sums to 1.
    pub probabilities: Vec<Vec<f64>>,
    /// One channel index per bin, each in [0, C).
    pub chosen_channel: Vec<usize>,
}

impl PickTrace {
    /// Check the structural invariants: rectangular table, columns summing
    /// to 1 within 1e-12, chosen channels in range.
    pub fn validate(&self) -> Result<()> {
        let c = self.probabilities.len();
        if c == 0 {
            return Err(Error::contract("pick_trace", "no channels"));
        }
        let b = self.probabilities[0].len();
        if self.probabilities.iter().any(|row| row.len() != b) {
            return Err(Error::contract("pick_trace", "ragged probability table"));
        }
        if self.chosen_channel.len() != b {
            return Err(Error::contract("pick_trace", "chosen_channel length != bins"));
        }
        for j in 0..b {
            let s: f64 = self.probabilities.iter().map(|row| row[j]).sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::contract("pick_trace", format!("column {j} sums to {s}")));
            }
        }
        if let Some(&bad) = self.chosen_channel.iter().find(|&&ch| ch >= c) {
            return Err(Error::contract("pick_trace", format!("channel {bad} out of range")));
        }
        Ok(())
    }
}

/// Softmax over the channel axis, independently per frequency column.
/// Energies must be finite and non-negative.
pub fn cross_channel_softmax(energies: &Tensor) -> Result<Tensor> {
    let shape = energies.shape();
    if shape.len() != 2 {
        return Err(Error::shape("cross_channel_softmax", format!("need C×B, got {shape:?}")));
    }
    let (c, b) = (shape[0], shape[1]);
    if energies.data().iter().any(|&v| v < 0.0) {
        return Err(Error::contract("cross_channel_softmax", "energies must be non-negative"));
    }
    let e = energies.data();
    let mut out = vec![0.0; c * b];
    for j in 0..b {
        let m = (0..c).map(|ch| e[ch * b + j]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for ch in 0..c {
            let v = (e[ch * b + j] - m).exp();
            out[ch * b + j] = v;
            z += v;
        }
        for ch in 0..c {
            out[ch * b + j] /= z;
        }
    }
    Tensor::new(vec![c, b], out)
}

/// Choose one channel per frequency bin and copy its complex value into the
/// key spectrum. `hf` holds per-channel half-spectra; `probs` is the
/// cross-channel softmax table (each column must sum to 1 within 1e-9).
/// Softmax strategy samples Categorical(probs[:, j]) and requires `rng`;
/// max/min take the extreme energy with ties going to the lowest index.
/// Selected entries are bitwise copies of `hf` entries.
pub fn pick_key_frequency(
    hf: &[Vec<Complex64>],
    probs: &Tensor,
    strategy: PickStrategy,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Vec<Complex64>, PickTrace)> {
    let c = hf.len();
    if c == 0 {
        return Err(Error::contract("pick_key_frequency", "no channels"));
    }
    let b = hf[0].len();
    if hf.iter().any(|row| row.len() != b) {
        return Err(Error::shape("pick_key_frequency", "ragged channel spectra"));
    }
    if probs.shape() != [c, b] {
        return Err(Error::shape(
            "pick_key_frequency",
            format!("probs {:?} does not match {c} channels × {b} bins", probs.shape()),
        ));
    }
    for j in 0..b {
        let s: f64 = (0..c).map(|ch| probs.at2(ch, j)).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(
                "pick_key_frequency",
                format!("probability column {j} sums to {s}"),
            ));
        }
    }

    let mut chosen = Vec::with_capacity(b);
    // Column sweep across the parallel (channel, bin) structures; the explicit
    // index keeps the per-bin rng draw order visible.
    #[allow(clippy::needless_range_loop)]
    for j in 0..b {
        let ch = match strategy {
            PickStrategy::Max => extreme_by(c, |ch| hf[ch][j].norm_sqr(), true),
            PickStrategy::Min => extreme_by(c, |ch| hf[ch][j].norm_sqr(), false),
            PickStrategy::Softmax => {
                let r = rng.as_mut().ok_or_else(|| {
                    Error::contract("pick_key_frequency", "softmax strategy needs an rng")
                })?;
                let weights: Vec<f64> = (0..c).map(|ch| probs.at2(ch, j)).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| {
                    Error::contract("pick_key_frequency", format!("bad probability column {j}: {e}"))
                })?;
                dist.sample(&mut **r)
            }
        };
        chosen.push(ch);
    }

    let kf: Vec<Complex64> = chosen.iter().enumerate().map(|(j, &ch)| hf[ch][j]).collect();
    let trace = PickTrace {
        probabilities: (0..c).map(|ch| probs.row(ch).to_vec()).collect(),
        chosen_channel: chosen,
    };
    Ok((kf, trace))
}

fn extreme_by(c: usize, f: impl Fn(usize) -> f64, want_max: bool) -> usize {
    let mut best = 0usize;
    let mut best_v = f(0);
    for ch in 1..c {
        let v = f(ch);
        let better = if want_max { v > best_v } else { v < best_v };
        if better {
            best = ch;
            best_v = v;
        }
    }
    best
}

/// How [`ekpb_forward`] resolves the per-bin channel choice.
pub enum PickMode<'a> {
    /// Follow the block's configured strategy; the rng feeds softmax
    /// sampling (max/min ignore it).
    Configured(&'a mut dyn RngCore),
    /// Ignore the configured strategy and take the max-energy channel —
    /// deterministic evaluation for a softmax-strategy block.
    Greedy,
    /// Externally fixed per-bin choices (finite-difference checks).
    Forced(&'a [usize]),
}

/// One block forward on the tape: C×D in, C×D out, plus the selection trace.
///
/// Pipeline: `Hk = entry(H)`; per-row rfft; cross-channel softmax of bin
/// energies; one channel picked per bin (detached from the tape); the picked
/// complex entries gathered differentiably; `Kt = irfft(Kf)`;
/// `K̂ = repeat_C(key_proj(Kt))`; `HK = skip_proj(H) + K̂`;
/// `S1 = norm(HK + fuse(HK))`; `out = norm(S1 + intra(S1))`.
pub fn ekpb_forward(
    tape: &mut Tape,
    bind: &EkpbBind,
    h: TensorId,
    mode: PickMode<'_>,
) -> Result<(TensorId, PickTrace)> {
    let shape = tape.value(h).shape().to_vec();
    let c = match shape.as_slice() {
        [c, d] if *d == bind.d => *c,
        s => {
            return Err(Error::shape(
                "ekpb_forward",
                format!("need C×{} input, got {s:?}", bind.d),
            ))
        }
    };
    let nb = fft::rfft_bins(bind.q);

    // Entry map to C×Q, then one spectrum per channel.
    let hk = two_layer_rows(tape, h, bind.entry_w1, bind.entry_b1, bind.entry_w2, bind.entry_b2, c)?;
    let mut spectra = Vec::with_capacity(c);
    for ch in 0..c {
        let row = tape.row(hk, ch)?;
        spectra.push(tape.rfft(row)?);
    }

    // Selection works on detached values: energies → softmax → choice.
    let hf: Vec<Vec<Complex64>> = spectra.iter().map(|&s| unpack_spectrum(tape.value(s))).collect();
    let mut energies = Vec::with_capacity(c * nb);
    for row in &hf {
        energies.extend(row.iter().map(|z| z.norm_sqr()));
    }
    let probs = cross_channel_softmax(&Tensor::new(vec![c, nb], energies)?)?;
    let trace = match mode {
        PickMode::Configured(rng) => {
            pick_key_frequency(&hf, &probs, bind.strategy, Some(rng))?.1
        }
        PickMode::Greedy => pick_key_frequency(&hf, &probs, PickStrategy::Max, None)?.1,
        PickMode::Forced(choice) => {
            if choice.len() != nb {
                return Err(Error::shape(
                    "ekpb_forward",
                    format!("forced choice has {} entries for {nb} bins", choice.len()),
                ));
            }
            if let Some(&bad) = choice.iter().find(|&&ch| ch >= c) {
                return Err(Error::contract(
                    "ekpb_forward",
                    format!("forced channel {bad} out of range"),
                ));
            }
            PickTrace {
                probabilities: (0..c).map(|ch| probs.row(ch).to_vec()).collect(),
                chosen_channel: choice.to_vec(),
            }
        }
    };

    // Differentiable gather of the chosen entries, back to time, project,
    // broadcast to every channel.
    let kf = tape.pick_bins(&spectra, &trace.chosen_channel)?;
    let kt = tape.irfft(kf, bind.q)?;
    let key = tape.vecmat(kt, bind.key_w)?;
    let key = tape.add(key, bind.key_b)?;
    let khat = tape.stack_rows(&vec![key; c])?;

    let hhat = affine_rows(tape, h, bind.skip_w, bind.skip_b, c)?;
    let hk2 = tape.add(hhat, khat)?;

    let s1 = add_norm(
        tape, hk2, bind.fuse_w1, bind.fuse_b1, bind.fuse_w2, bind.fuse_b2, bind.fuse_gain,
        bind.fuse_bias, c,
    )?;
    let out = add_norm(
        tape, s1, bind.intra_w1, bind.intra_b1, bind.intra_w2, bind.intra_b2, bind.intra_gain,
        bind.intra_bias, c,
    )?;
    Ok((out, trace))
}

fn unpack_spectrum(t: &Tensor) -> Vec<Complex64> {
    let nb = t.shape()[1];
    let d = t.data();
    (0..nb).map(|j| Complex64::new(d[j], d[nb + j])).collect()
}

/// `x·W + b` for a C×In matrix with the bias broadcast to every row.
fn affine_rows(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    b: TensorId,
    c: usize,
) -> Result<TensorId> {
    let y = tape.matmul(x, w)?;
    let bb = tape.stack_rows(&vec![b; c])?;
    tape.add(y, bb)
}

fn two_layer_rows(
    tape: &mut Tape,
    x: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    c: usize,
) -> Result<TensorId> {
    let h = affine_rows(tape, x, w1, b1, c)?;
    let g = tape.gelu(h)?;
    affine_rows(tape, g, w2, b2, c)
}

#[allow(clippy::too_many_arguments)]
fn add_norm(
    tape: &mut Tape,
    x: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    gain: TensorId,
    bias: TensorId,
    c: usize,
) -> Result<TensorId> {
    let f = two_layer_rows(tape, x, w1, b1, w2, b2, c)?;
    let s = tape.add(x, f)?;
    tape.layer_norm(s, gain, bias)
}
