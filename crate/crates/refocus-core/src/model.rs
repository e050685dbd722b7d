//! End-to-end forecaster assembly: per-channel instance normalization, the
//! mid-frequency rebalancing filter, a frequency-domain variate embedding
//! T→D, N key-frequency picking blocks, a D→F head, and denormalization.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::ameo::ameo_forward_tape;
use crate::ekpb::{self, EkpbBind, EkpbBlock, PickMode, PickStrategy, PickTrace};
use crate::error::{Error, Result};
use crate::fft;
use crate::rng::derive_rng;
use crate::tensor::{grad_check_inputs, Tape, Tensor, TensorId};

/// Which head projects block output D to the horizon F.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Frequency-domain projection, same construction as the embedding.
    #[default]
    FreqDomain,
    /// Plain affine map (ablation option).
    PlainLinear,
}

/// How a softmax-strategy model resolves bin choices at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPick {
    /// Sample with the seeded rng — the default; determinism comes from the seed.
    #[default]
    Sample,
    /// Take the max-energy channel instead of sampling (sensitivity studies).
    Greedy,
}

fn default_eps() -> f64 {
    1e-8
}

/// Full model hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReFocusConfig {
    /// Channels.
    pub c: usize,
    /// Input window length.
    pub t: usize,
    /// Forecast horizon.
    pub f: usize,
    /// Embedding width.
    pub d: usize,
    /// Block spectral width.
    pub q: usize,
    /// Number of picking blocks.
    pub n: usize,
    /// Rebalancing-filter kernel size.
    pub k: usize,
    /// Rebalancing-filter strength, fixed in [0, 1].
    pub beta: f64,
    pub strategy: PickStrategy,
    /// Instance-normalization epsilon.
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub seed: u64,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub eval_pick: EvalPick,
}

impl ReFocusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::contract("config", msg));
        if self.c == 0 {
            return fail("C must be positive".into());
        }
        if self.t < 2 {
            return fail("T must be at least 2".into());
        }
        if self.t < self.k {
            return fail(format!("T = {} must be ≥ K = {}", self.t, self.k));
        }
        if self.k == 0 {
            return fail("K must be positive".into());
        }
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return fail(format!("D must be positive and even, got {}", self.d));
        }
        if self.q == 0 || !self.q.is_multiple_of(2) {
            return fail(format!("Q must be positive and even, got {}", self.q));
        }
        if self.n < 1 {
            return fail("N must be at least 1".into());
        }
        if self.f < 1 {
            return fail("F must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.eps < 0.0 {
            return fail("eps must be non-negative".into());
        }
        Ok(())
    }
}

/// Complex projection between half-spectra: maps a length-D1 real signal to a
/// length-D2 real signal through `irfft(W·rfft(x) + b)`. The complex weight
/// matrix is (⌊D1/2⌋+1)×(⌊D2/2⌋+1), stored as separate real/imag tensors.
#[derive(Clone, Debug)]
pub struct FreqProjection {
    pub d1: usize,
    pub d2: usize,
    pub w_re: Tensor,
    pub w_im: Tensor,
    pub b_re: Tensor,
    pub b_im: Tensor,
}

impl FreqProjection {
    pub fn init(d1: usize, d2: usize, rng: &mut dyn RngCore) -> Self {
        let (b1, b2) = (fft::rfft_bins(d1), fft::rfft_bins(d2));
        let bound = 1.0 / (b1 as f64).sqrt();
        let mut mat = || {
            let data: Vec<f64> = (0..b1 * b2).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(vec![b1, b2], data).unwrap()
        };
        let w_re = mat();
        let w_im = mat();
        FreqProjection {
            d1,
            d2,
            w_re,
            w_im,
            b_re: Tensor::new(vec![b2], vec![0.0; b2]).unwrap(),
            b_im: Tensor::new(vec![b2], vec![0.0; b2]).unwrap(),
        }
    }

    /// Identity map in the frequency domain (requires D1 = D2).
    pub fn identity(d: usize) -> Self {
        let b = fft::rfft_bins(d);
        let mut eye = vec![0.0; b * b];
        for i in 0..b {
            eye[i * b + i] = 1.0;
        }
        FreqProjection {
            d1: d,
            d2: d,
            w_re: Tensor::new(vec![b, b], eye).unwrap(),
            w_im: Tensor::new(vec![b, b], vec![0.0; b * b]).unwrap(),
            b_re: Tensor::new(vec![b], vec![0.0; b]).unwrap(),
            b_im: Tensor::new(vec![b], vec![0.0; b]).unwrap(),
        }
    }

    /// All-zero map.
    pub fn zero(d1: usize, d2: usize) -> Self {
        let (b1, b2) = (fft::rfft_bins(d1), fft::rfft_bins(d2));
        FreqProjection {
            d1,
            d2,
            w_re: Tensor::new(vec![b1, b2], vec![0.0; b1 * b2]).unwrap(),
            w_im: Tensor::new(vec![b1, b2], vec![0.0; b1 * b2]).unwrap(),
            b_re: Tensor::new(vec![b2], vec![0.0; b2]).unwrap(),
            b_im: Tensor::new(vec![b2], vec![0.0; b2]).unwrap(),
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.w_re"), &self.w_re),
            (format!("{prefix}.w_im"), &self.w_im),
            (format!("{prefix}.b_re"), &self.b_re),
            (format!("{prefix}.b_im"), &self.b_im),
        ]
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.w_re"), &mut self.w_re),
            (format!("{prefix}.w_im"), &mut self.w_im),
            (format!("{prefix}.b_re"), &mut self.b_re),
            (format!("{prefix}.b_im"), &mut self.b_im),
        ]
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> FreqBind {
        FreqBind {
            d1: self.d1,
            d2: self.d2,
            w_re: tape.leaf(self.w_re.clone(), trainable),
            w_im: tape.leaf(self.w_im.clone(), trainable),
            b_re: tape.leaf(self.b_re.clone(), trainable),
            b_im: tape.leaf(self.b_im.clone(), trainable),
        }
    }
}

/// Tape ids for one frequency projection.
#[derive(Clone, Copy, Debug)]
pub struct FreqBind {
    pub d1: usize,
    pub d2: usize,
    pub w_re: TensorId,
    pub w_im: TensorId,
    pub b_re: TensorId,
    pub b_im: TensorId,
}

impl FreqBind {
    fn param_ids(&self) -> Vec<TensorId> {
        vec![self.w_re, self.w_im, self.b_re, self.b_im]
    }
}

/// `irfft(W·rfft(x) + b, D2)` with the complex matvec expanded into four
/// real vector-matrix products.
pub fn freq_project(tape: &mut Tape, x: TensorId, p: &FreqBind) -> Result<TensorId> {
    let shape = tape.value(x).shape();
    if shape != [p.d1] {
        return Err(Error::contract(
            "freq_project",
            format!("input length {shape:?} does not match D1 = {}", p.d1),
        ));
    }
    let spec = tape.rfft(x)?;
    let s_re = tape.row(spec, 0)?;
    let s_im = tape.row(spec, 1)?;
    let rr = tape.vecmat(s_re, p.w_re)?;
    let ii = tape.vecmat(s_im, p.w_im)?;
    let ri = tape.vecmat(s_re, p.w_im)?;
    let ir = tape.vecmat(s_im, p.w_re)?;
    let re = tape.sub(rr, ii)?;
    let re = tape.add(re, p.b_re)?;
    let im = tape.add(ri, ir)?;
    let im = tape.add(im, p.b_im)?;
    let packed = tape.stack_rows(&[re, im])?;
    tape.irfft(packed, p.d2)
}

/// Head parameters: frequency-domain or plain affine D→F.
#[derive(Clone, Debug)]
pub enum HeadParams {
    Freq(FreqProjection),
    Linear(ekpb::Linear),
}

/// All learnable state plus the configuration that shaped it.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ReFocusConfig,
    /// Rebalancing-filter kernel, length K, initialized to 1/K.
    pub ameo_kernel: Tensor,
    pub embed: FreqProjection,
    pub blocks: Vec<EkpbBlock>,
    pub head: HeadParams,
}

impl ModelParams {
    /// Initialize every component from the config's seed. Distinct rng
    /// streams per component keep the draw order stable under refactors.
    pub fn init(config: &ReFocusConfig) -> Result<Self> {
        config.validate()?;
        let kernel =
            Tensor::new(vec![config.k], vec![1.0 / config.k as f64; config.k])?;
        let embed = FreqProjection::init(config.t, config.d, &mut derive_rng(config.seed, &[10]));
        let mut blocks = Vec::with_capacity(config.n);
        for i in 0..config.n {
            blocks.push(EkpbBlock::init(
                config.d,
                config.q,
                config.strategy,
                &mut derive_rng(config.seed, &[11, i as u64]),
            )?);
        }
        let head = match config.head {
            HeadKind::FreqDomain => HeadParams::Freq(FreqProjection::init(
                config.d,
                config.f,
                &mut derive_rng(config.seed, &[12]),
            )),
            HeadKind::PlainLinear => HeadParams::Linear(ekpb::Linear::init(
                config.d,
                config.f,
                &mut derive_rng(config.seed, &[12]),
            )),
        };
        Ok(ModelParams { config: config.clone(), ameo_kernel: kernel, embed, blocks, head })
    }

    /// Every learnable tensor with a stable dotted name, in the canonical
    /// order shared with [`ModelBind::param_ids`].
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("ameo.kernel".into(), &self.ameo_kernel)];
        out.extend(self.embed.named("embed"));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.named_params().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)),
            );
        }
        match &self.head {
            HeadParams::Freq(p) => out.extend(p.named("head")),
            HeadParams::Linear(l) => {
                out.push(("head.w".into(), &l.w));
                out.push(("head.b".into(), &l.b));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("ameo.kernel".into(), &mut self.ameo_kernel)];
        out.extend(self.embed.named_mut("embed"));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.named_params_mut().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)),
            );
        }
        match &mut self.head {
            HeadParams::Freq(p) => out.extend(p.named_mut("head")),
            HeadParams::Linear(l) => {
                out.push(("head.w".into(), &mut l.w));
                out.push(("head.b".into(), &mut l.b));
            }
        }
        out
    }

    /// Exact count of learnable scalars (a complex weight counts as 2).
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelBind {
        let kernel = tape.leaf(self.ameo_kernel.clone(), trainable);
        let embed = self.embed.bind(tape, trainable);
        let blocks: Vec<EkpbBind> =
            self.blocks.iter().map(|b| b.bind(tape, trainable)).collect();
        let head = match &self.head {
            HeadParams::Freq(p) => HeadBind::Freq(p.bind(tape, trainable)),
            HeadParams::Linear(l) => HeadBind::Linear {
                w: tape.leaf(l.w.clone(), trainable),
                b: tape.leaf(l.b.clone(), trainable),
            },
        };
        ModelBind {
            c: self.config.c,
            t: self.config.t,
            f: self.config.f,
            beta: self.config.beta,
            eps: self.config.eps,
            ameo_kernel: kernel,
            embed,
            blocks,
            head,
        }
    }
}

/// Head ids on the tape.
#[derive(Clone, Debug)]
pub enum HeadBind {
    Freq(FreqBind),
    Linear { w: TensorId, b: TensorId },
}

/// Tape ids for the whole model, in [`ModelParams::named_params`] order.
#[derive(Clone, Debug)]
pub struct ModelBind {
    pub c: usize,
    pub t: usize,
    pub f: usize,
    pub beta: f64,
    pub eps: f64,
    pub ameo_kernel: TensorId,
    pub embed: FreqBind,
    pub blocks: Vec<EkpbBind>,
    pub head: HeadBind,
}

impl ModelBind {
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.ameo_kernel];
        out.extend(self.embed.param_ids());
        for b in &self.blocks {
            out.extend(b.param_ids());
        }
        match &self.head {
            HeadBind::Freq(p) => out.extend(p.param_ids()),
            HeadBind::Linear { w, b } => {
                out.push(*w);
                out.push(*b);
            }
        }
        out
    }
}

/// How the forward pass resolves every block's per-bin channel choice.
pub enum ModelPickMode<'a> {
    /// Per-block strategy; one rng threaded through the blocks in order.
    Configured(&'a mut dyn RngCore),
    /// Max-energy everywhere (deterministic evaluation).
    Greedy,
    /// Frozen per-block choices (finite-difference checks).
    Forced(&'a [Vec<usize>]),
}

/// Full forward pass on the tape: C×T in, C×F out, one selection trace per
/// block. `x` must already live on the tape (leaf or constant).
pub fn model_forward(
    tape: &mut Tape,
    bind: &ModelBind,
    x: TensorId,
    mode: ModelPickMode<'_>,
) -> Result<(TensorId, Vec<PickTrace>)> {
    let shape = tape.value(x).shape();
    if shape != [bind.c, bind.t] {
        return Err(Error::shape(
            "model_forward",
            format!("need {}×{} input, got {shape:?}", bind.c, bind.t),
        ));
    }
    if let ModelPickMode::Forced(choices) = &mode {
        if choices.len() != bind.blocks.len() {
            return Err(Error::contract(
                "model_forward",
                format!("{} forced choices for {} blocks", choices.len(), bind.blocks.len()),
            ));
        }
    }

    // Per-channel: raw row (kept for denormalization), normalize, rebalance,
    // embed T→D.
    let mut raw_rows = Vec::with_capacity(bind.c);
    let mut embedded = Vec::with_capacity(bind.c);
    for ch in 0..bind.c {
        let raw = tape.row(x, ch)?;
        let xhat = tape.revin_norm(raw, bind.eps)?;
        let xam = ameo_forward_tape(tape, xhat, bind.ameo_kernel, bind.beta)?;
        embedded.push(freq_project(tape, xam, &bind.embed)?);
        raw_rows.push(raw);
    }
    let mut h = tape.stack_rows(&embedded)?;

    // N picking blocks.
    let mut traces = Vec::with_capacity(bind.blocks.len());
    let mut mode = mode;
    for (i, block) in bind.blocks.iter().enumerate() {
        let pick = match &mut mode {
            ModelPickMode::Configured(rng) => PickMode::Configured(&mut **rng),
            ModelPickMode::Greedy => PickMode::Greedy,
            ModelPickMode::Forced(choices) => PickMode::Forced(&choices[i]),
        };
        let (next, trace) = ekpb::ekpb_forward(tape, block, h, pick)?;
        h = next;
        traces.push(trace);
    }

    // Head D→F per channel, then denormalize against the raw row.
    let mut out_rows = Vec::with_capacity(bind.c);
    for (ch, &raw) in raw_rows.iter().enumerate() {
        let hrow = tape.row(h, ch)?;
        let y_norm = match &bind.head {
            HeadBind::Freq(p) => freq_project(tape, hrow, p)?,
            HeadBind::Linear { w, b } => {
                let y = tape.vecmat(hrow, *w)?;
                tape.add(y, *b)?
            }
        };
        out_rows.push(tape.revin_denorm(y_norm, raw, bind.eps)?);
    }
    let yhat = tape.stack_rows(&out_rows)?;
    Ok((yhat, traces))
}

// ---- checkpoints ---------------------------------------------------------

const CKPT_MAGIC: &str = "REFOCUS-CKPT-1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    config: ReFocusConfig,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Write config + named parameter arrays as versioned JSON.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        magic: CKPT_MAGIC.to_string(),
        config: params.config.clone(),
        params: params
            .named_params()
            .into_iter()
            .map(|(name, t)| CheckpointParam {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Read a checkpoint back: verify the magic, rebuild the skeleton from the
/// stored config, then overwrite every parameter by name.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.magic != CKPT_MAGIC {
        return Err(Error::contract(
            "load_checkpoint",
            format!("unrecognized format tag {:?}", file.magic),
        ));
    }
    let mut params = ModelParams::init(&file.config)?;
    let mut stored: std::collections::HashMap<String, CheckpointParam> =
        file.params.into_iter().map(|p| (p.name.clone(), p)).collect();
    for (name, tensor) in params.named_params_mut() {
        let saved = stored.remove(&name).ok_or_else(|| {
            Error::contract("load_checkpoint", format!("parameter {name} missing"))
        })?;
        if saved.shape != tensor.shape() {
            return Err(Error::contract(
                "load_checkpoint",
                format!("parameter {name}: shape {:?} vs {:?}", saved.shape, tensor.shape()),
            ));
        }
        tensor.set_data(saved.data)?;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::contract(
            "load_checkpoint",
            format!("unknown parameter {extra}"),
        ));
    }
    Ok(params)
}

// ---- whole-model gradient check ------------------------------------------

/// Finite-difference check of the full forward pass plus MSE loss against
/// the tape gradients. Every block's per-bin channel choice is frozen to the
/// greedy selection first, so both routes differentiate the same function.
/// Probes the input and every parameter; returns the maximum relative error.
pub fn full_model_gradcheck(config: &ReFocusConfig, probe_seed: u64, h: f64) -> Result<f64> {
    config.validate()?;
    let params = ModelParams::init(config)?;
    let mut rng = derive_rng(probe_seed, &[50]);
    let mut rand_mat = |r: usize, c: usize| -> Result<Tensor> {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    };
    let x = rand_mat(config.c, config.t)?;
    let target = rand_mat(config.c, config.f)?;

    let choices: Vec<Vec<usize>> = {
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, false);
        let xid = tape.constant(x.clone());
        let (_, traces) = model_forward(&mut tape, &bind, xid, ModelPickMode::Greedy)?;
        traces.into_iter().map(|t| t.chosen_channel).collect()
    };

    let mut inputs: Vec<Tensor> = vec![x];
    inputs.extend(params.named_params().into_iter().map(|(_, t)| t.clone()));
    grad_check_inputs(
        |tape, ids| {
            let bind = bind_from_ids(config, &ids[1..]);
            let (y, _) = model_forward(tape, &bind, ids[0], ModelPickMode::Forced(&choices))?;
            let tid = tape.constant(target.clone());
            let diff = tape.sub(y, tid)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq, None)
        },
        &inputs,
        h,
    )
}

/// Reassemble a [`ModelBind`] from tape ids laid out in
/// [`ModelParams::named_params`] order.
fn bind_from_ids(config: &ReFocusConfig, ids: &[TensorId]) -> ModelBind {
    let mut k = 0usize;
    let mut take = |n: usize| {
        let s = ids[k..k + n].to_vec();
        k += n;
        s
    };
    let kernel = take(1)[0];
    let em = take(4);
    let embed = FreqBind {
        d1: config.t,
        d2: config.d,
        w_re: em[0],
        w_im: em[1],
        b_re: em[2],
        b_im: em[3],
    };
    let blocks: Vec<EkpbBind> = (0..config.n)
        .map(|_| {
            let b = take(20);
            EkpbBind {
                d: config.d,
                q: config.q,
                strategy: config.strategy,
                entry_w1: b[0],
                entry_b1: b[1],
                entry_w2: b[2],
                entry_b2: b[3],
                skip_w: b[4],
                skip_b: b[5],
                key_w: b[6],
                key_b: b[7],
                fuse_w1: b[8],
                fuse_b1: b[9],
                fuse_w2: b[10],
                fuse_b2: b[11],
                fuse_gain: b[12],
                fuse_bias: b[13],
                intra_w1: b[14],
                intra_b1: b[15],
                intra_w2: b[16],
                intra_b2: b[17],
                intra_gain: b[18],
                intra_bias: b[19],
            }
        })
        .collect();
    let head = match config.head {
        HeadKind::FreqDomain => {
            let hd = take(4);
            HeadBind::Freq(FreqBind {
                d1: config.d,
                d2: config.f,
                w_re: hd[0],
                w_im: hd[1],
                b_re: hd[2],
                b_im: hd[3],
            })
        }
        HeadKind::PlainLinear => {
            let hd = take(2);
            HeadBind::Linear { w: hd[0], b: hd[1] }
        }
    };
    ModelBind {
        c: config.c,
        t: config.t,
        f: config.f,
        beta: config.beta,
        eps: config.eps,
        ameo_kernel: kernel,
        embed,
        blocks,
        head,
    }
}
