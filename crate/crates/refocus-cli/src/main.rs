//! Command-line surface: training runs, evaluation, verifier suites,
//! spectrum diagnostics, synthetic data generation, and gradient checks.
//!
//! Exit codes: 0 success, 1 assertion/metric failure, 2 configuration error,
//! 3 IO error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use refocus_core::baselines;
use refocus_core::data::{self, Dataset, WindowPair};
use refocus_core::ekpb::PickStrategy;
use refocus_core::error::Error as CoreError;
use refocus_core::model::{
    full_model_gradcheck, load_checkpoint, save_checkpoint, EvalPick, HeadKind, ModelParams,
    ReFocusConfig,
};
use refocus_core::revin;
use refocus_core::rng::derive_rng;
use refocus_core::spectral::{self, FilterKind};
use refocus_core::training::{
    evaluate, history_to_csv, ket_mix, train, verify_ket_equivalence, KetConfig, TrainConfig,
};
use refocus_core::{ameo, Tensor};

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "refocus",
    version,
    about = "Spectral multivariate forecasting: train, evaluate, verify, inspect"
)]
struct Cli {
    /// Experiment config JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override; beats both the config value and REFOCUS_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for generated files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Format for tabular reports.
    #[arg(long, global = true, value_enum)]
    format: Option<ReportFormat>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from the experiment config; writes checkpoint.json,
    /// history.csv, and metrics.json into the output directory.
    Train,
    /// Evaluate a checkpoint on one split of the config's dataset.
    Eval(EvalArgs),
    /// Run the numerical verifier suites and print a pass/fail table.
    Verify(VerifyArgs),
    /// Emit per-channel spectra before/after a transform, plus mid-band
    /// energy shares.
    Spectrum(SpectrumArgs),
    /// Generate a synthetic dataset CSV.
    Synth(SynthArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to score.
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which verifier suite to run.
    #[arg(value_enum, default_value_t = VerifyScope::All)]
    scope: VerifyScope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum VerifyScope {
    Revin,
    Ameo,
    Ket,
    Grad,
    All,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Input CSV (ETT convention: timestamp column + numeric channels).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = TransformKind::None)]
    transform: TransformKind,
    /// Rebalancing kernel size (transform=ameo).
    #[arg(long, default_value_t = 25)]
    k: usize,
    /// Rebalancing strength (transform=ameo).
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// High-pass passband start (default: upper mid-band edge).
    #[arg(long)]
    f_lo: Option<usize>,
    /// Low-pass passband end (default: one below the lower mid-band edge).
    #[arg(long)]
    f_hi: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TransformKind {
    None,
    Revin,
    Ameo,
    Lowpass,
    Highpass,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    /// Channels (shared-key, forecast).
    #[arg(long, default_value_t = 4)]
    channels: usize,
    /// Series length.
    #[arg(long, default_value_t = 360)]
    len: usize,
    /// Key bin (shared-key).
    #[arg(long, default_value_t = 9)]
    key_bin: usize,
    /// Carrier channel indices, comma separated (shared-key).
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2])]
    carriers: Vec<usize>,
    /// Shared key bins, comma separated (forecast).
    #[arg(long, value_delimiter = ',', default_values_t = [6usize, 14])]
    key_bins: Vec<usize>,
    /// Linear signal-to-noise ratio.
    #[arg(long, default_value_t = 10.0)]
    snr: f64,
    /// Low-frequency bin count (mid-gap).
    #[arg(long, default_value_t = 4)]
    low_bins: usize,
    /// Mid-band amplitude (mid-gap).
    #[arg(long, default_value_t = 0.05)]
    mid_leak: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    SharedKey,
    MidGap,
    Forecast,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    c: usize,
    #[arg(long, default_value_t = 8)]
    t: usize,
    #[arg(long, default_value_t = 4)]
    f: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    q: usize,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Maximum relative error accepted.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

// ---------------------------------------------------------------------------
// Failure plumbing
// ---------------------------------------------------------------------------

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

/// Exit-code classification for errors raised while computing: IO-like → 3,
/// configuration-like → 2, everything else (metric/assertion/numeric) → 1.
fn classify(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) | CoreError::Serde(_) => 2,
        CoreError::Io(_) | CoreError::Ingest { .. } => 3,
        _ => 1,
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::new(classify(&e), e.to_string())
    }
}

/// Errors raised while loading/validating configuration are configuration
/// errors (exit 2) regardless of variant — except genuine IO (exit 3).
fn config_phase(e: CoreError) -> Failure {
    let code = match &e {
        CoreError::Io(_) | CoreError::Ingest { .. } => 3,
        _ => 2,
    };
    Failure::new(code, e.to_string())
}

fn io_failure(e: std::io::Error, what: &str) -> Failure {
    Failure::new(3, format!("{what}: {e}"))
}

/// Write to stdout; a closed pipe (e.g. `refocus ... | head`) ends the
/// program quietly with success, mirroring default SIGPIPE semantics.
fn emit(text: &str) -> Result<(), Failure> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(e) => Err(io_failure(e, "stdout")),
    }
}

/// Best-effort diagnostics on stderr; never aborts the run.
fn emit_stderr(text: &str) {
    use std::io::Write;
    let _ = std::io::stderr().lock().write_all(text.as_bytes());
}

// ---------------------------------------------------------------------------
// Experiment configuration (JSON, strict keys)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    dataset: DatasetSpec,
    /// Chronological train/val/test ratios; must sum to 1.
    #[serde(default = "default_ratios")]
    ratios: [f64; 3],
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "F")]
    f: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "Q")]
    q: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    beta: f64,
    #[serde(default = "default_strategy")]
    strategy: PickStrategy,
    #[serde(default)]
    head: HeadKind,
    #[serde(default)]
    eval_pick: EvalPick,
    #[serde(default = "default_eps")]
    eps: f64,
    lr: f64,
    batch_size: usize,
    #[serde(default = "default_max_epochs")]
    max_epochs: usize,
    #[serde(default = "default_patience")]
    patience: usize,
    seed: u64,
    #[serde(default)]
    ket: KetConfig,
    /// Output directory; the --out flag wins.
    #[serde(default)]
    out: Option<String>,
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_strategy() -> PickStrategy {
    PickStrategy::Softmax
}

fn default_eps() -> f64 {
    1e-8
}

fn default_max_epochs() -> usize {
    20
}

fn default_patience() -> usize {
    3
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum DatasetSpec {
    /// `{"csv": {"path": "..."}}`
    Csv { path: String },
    /// `{"synth": {"kind": "...", ...}}`
    Synth(SynthSpec),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields, tag = "kind")]
enum SynthSpec {
    SharedKey {
        c: usize,
        l: usize,
        key_bin: usize,
        carriers: Vec<usize>,
        snr: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    MidGap {
        l: usize,
        low_bins: usize,
        mid_leak: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Forecast {
        c: usize,
        l: usize,
        key_bins: Vec<usize>,
        snr: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl ExperimentConfig {
    fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| io_failure(e, &format!("cannot read config {}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::new(2, format!("config {}: {e}", path.display())))
    }

    fn model_config(&self, c: usize, seed: u64) -> ReFocusConfig {
        ReFocusConfig {
            c,
            t: self.t,
            f: self.f,
            d: self.d,
            q: self.q,
            n: self.n,
            k: self.k,
            beta: self.beta,
            strategy: self.strategy,
            eps: self.eps,
            seed,
            head: self.head,
            eval_pick: self.eval_pick,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            ket: self.ket,
        }
    }
}

/// Seed precedence: --seed flag, then REFOCUS_SEED, then the config value.
fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("REFOCUS_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::new(2, format!("REFOCUS_SEED is not a valid seed: {v:?}"))),
        Err(_) => Ok(config_seed),
    }
}

fn build_dataset(spec: &DatasetSpec, fallback_seed: u64) -> Result<Dataset, CoreError> {
    match spec {
        DatasetSpec::Csv { path } => data::load_csv(Path::new(path)),
        DatasetSpec::Synth(s) => match s {
            SynthSpec::SharedKey {
                c,
                l,
                key_bin,
                carriers,
                snr,
                seed,
            } => {
                let mut rng = derive_rng(seed.unwrap_or(fallback_seed), &[1]);
                Ok(data::synth_shared_key(*c, *l, *key_bin, carriers, *snr, &mut rng)?.0)
            }
            SynthSpec::MidGap {
                l,
                low_bins,
                mid_leak,
                seed,
            } => {
                let mut rng = derive_rng(seed.unwrap_or(fallback_seed), &[1]);
                let signal = data::synth_mid_gap(*l, *low_bins, *mid_leak, &mut rng)?;
                Ok(Dataset {
                    name: "synth_mid_gap".into(),
                    channel_names: vec!["ch0".into()],
                    values: vec![signal],
                })
            }
            SynthSpec::Forecast {
                c,
                l,
                key_bins,
                snr,
                seed,
            } => {
                let mut rng = derive_rng(seed.unwrap_or(fallback_seed), &[1]);
                data::synth_forecast_task(*c, *l, key_bins, *snr, &mut rng)
            }
        },
    }
}

struct PreparedSplits {
    train: Vec<WindowPair>,
    val: Vec<WindowPair>,
    test: Vec<WindowPair>,
}

fn prepare_splits(exp: &ExperimentConfig, ds: &Dataset) -> Result<(Dataset, PreparedSplits), CoreError> {
    let (r1, r2, r3) = (exp.ratios[0], exp.ratios[1], exp.ratios[2]);
    let split = data::chronological_split(ds, (r1, r2, r3), exp.t)?;
    let (scaled, _) = data::standardize(ds, &split)?;
    let train = data::windows(&scaled, split.train, exp.t, exp.f)?;
    let val = data::windows(&scaled, split.val, exp.t, exp.f)?;
    let test = data::windows(&scaled, split.test, exp.t, exp.f)?;
    Ok((scaled, PreparedSplits { train, val, test }))
}

fn resolve_out(cli: &Cli, exp: Option<&ExperimentConfig>) -> Option<PathBuf> {
    cli.out
        .clone()
        .or_else(|| exp.and_then(|e| e.out.as_ref().map(PathBuf::from)))
}

fn require_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::new(2, "this command needs --config PATH"))?;
    ExperimentConfig::load(path)
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainMetrics {
    best_epoch: usize,
    epochs_run: usize,
    best_val_mse: f64,
    best_val_mae: f64,
    test_mse: f64,
    test_mae: f64,
    persistence_test_mse: f64,
    persistence_test_mae: f64,
}

fn cmd_train(cli: &Cli) -> Result<(), Failure> {
    let exp = require_config(cli)?;
    let seed = resolve_seed(cli.seed, exp.seed)?;
    let ds = build_dataset(&exp.dataset, seed).map_err(config_phase)?;
    let (_scaled, splits) = prepare_splits(&exp, &ds).map_err(config_phase)?;
    let mconfig = exp.model_config(ds.channels(), seed);
    mconfig.validate().map_err(config_phase)?;
    let tcfg = exp.train_config(seed);
    tcfg.validate().map_err(config_phase)?;
    let params = ModelParams::init(&mconfig).map_err(config_phase)?;

    let outcome = train(params, &splits.train, &splits.val, &tcfg)?;
    let test = evaluate(&outcome.best, &splits.test)?;
    let persist = baselines::persistence_metrics(&splits.test)?;
    let best_val_mae = outcome.history[outcome.best_epoch].val_mae;
    let metrics = TrainMetrics {
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        best_val_mse: outcome.best_val_mse,
        best_val_mae,
        test_mse: test.mse,
        test_mae: test.mae,
        persistence_test_mse: persist.mse,
        persistence_test_mae: persist.mae,
    };
    let metrics_json =
        serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";

    let outdir = resolve_out(cli, Some(&exp)).unwrap_or_else(|| PathBuf::from("refocus-out"));
    std::fs::create_dir_all(&outdir)
        .map_err(|e| io_failure(e, &format!("cannot create {}", outdir.display())))?;
    save_checkpoint(&outcome.best, &outdir.join("checkpoint.json"))?;
    std::fs::write(outdir.join("history.csv"), history_to_csv(&outcome.history))
        .map_err(|e| io_failure(e, "cannot write history.csv"))?;
    std::fs::write(outdir.join("metrics.json"), &metrics_json)
        .map_err(|e| io_failure(e, "cannot write metrics.json"))?;
    emit(&metrics_json)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalMetrics {
    split: String,
    windows: usize,
    mse: f64,
    mae: f64,
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<(), Failure> {
    let exp = require_config(cli)?;
    let mut params = load_checkpoint(&args.checkpoint)?;
    if let Some(flag) = cli.seed {
        params.config.seed = flag;
    }
    let ds = build_dataset(&exp.dataset, exp.seed).map_err(config_phase)?;
    let (_scaled, splits) = prepare_splits(&exp, &ds).map_err(config_phase)?;
    if params.config.c != ds.channels() || params.config.t != exp.t || params.config.f != exp.f {
        return Err(Failure::new(
            2,
            format!(
                "checkpoint is C={}, T={}, F={} but the config prepares C={}, T={}, F={}",
                params.config.c,
                params.config.t,
                params.config.f,
                ds.channels(),
                exp.t,
                exp.f
            ),
        ));
    }
    let windows = match args.split {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    };
    let m = evaluate(&params, windows)?;
    let payload = EvalMetrics {
        split: format!("{:?}", args.split).to_lowercase(),
        windows: windows.len(),
        mse: m.mse,
        mae: m.mae,
    };
    let json = serde_json::to_string_pretty(&payload).expect("metrics serialize") + "\n";
    if let Some(dir) = resolve_out(cli, Some(&exp)) {
        std::fs::create_dir_all(&dir)
            .map_err(|e| io_failure(e, &format!("cannot create {}", dir.display())))?;
        std::fs::write(dir.join("eval_metrics.json"), &json)
            .map_err(|e| io_failure(e, "cannot write eval_metrics.json"))?;
    }
    emit(&json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct VerifyRow {
    suite: &'static str,
    case: String,
    residual: f64,
    tolerance: f64,
    passed: bool,
}

fn verify_revin_rows() -> Result<Vec<VerifyRow>, CoreError> {
    let mut rows = Vec::new();
    for &len in &[8usize, 31, 96] {
        let mut max_dc_rel = 0.0f64;
        let mut max_ratio = 0.0f64;
        for i in 0..100u64 {
            let mut rng = derive_rng(417, &[len as u64, i]);
            let x: Vec<f64> = (0..len)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect();
            let rep = revin::verify_revin_theorem(&x, 1e-15, 1e-9)?;
            max_dc_rel = max_dc_rel.max(rep.dc_residual / rep.energy_scale);
            max_ratio = max_ratio.max(rep.ratio_residual);
        }
        rows.push(VerifyRow {
            suite: "revin",
            case: format!("dc_energy_rel_len{len}"),
            residual: max_dc_rel,
            tolerance: 1e-15,
            passed: max_dc_rel < 1e-15,
        });
        rows.push(VerifyRow {
            suite: "revin",
            case: format!("sigma_ratio_len{len}"),
            residual: max_ratio,
            tolerance: 1e-9,
            passed: max_ratio < 1e-9,
        });
    }
    Ok(rows)
}

fn verify_ameo_rows() -> Result<Vec<VerifyRow>, CoreError> {
    let mut rows = Vec::new();
    for &k in &[2usize, 8, 24] {
        for &t in &[16usize, 96] {
            for &beta in &[0.1f64, 0.5, 1.0] {
                let mut worst = 0.0f64;
                for i in 0..20u64 {
                    let mut rng = derive_rng(418, &[k as u64, t as u64, i]);
                    let x: Vec<f64> = (0..t)
                        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                        .collect();
                    let rep = ameo::verify_ameo_theorem(&x, k, beta, 1e-9)?;
                    worst = worst.max(rep.max_rel);
                }
                rows.push(VerifyRow {
                    suite: "ameo",
                    case: format!("k{k}_t{t}_beta{beta}"),
                    residual: worst,
                    tolerance: 1e-9,
                    passed: worst < 1e-9,
                });
            }
        }
    }
    Ok(rows)
}

fn verify_ket_rows() -> Result<Vec<VerifyRow>, CoreError> {
    let mut rows = Vec::new();
    for &(b, c, t) in &[(2usize, 3usize, 96usize), (4, 7, 48)] {
        let f = t / 2;
        let mut rng = derive_rng(419, &[b as u64]);
        let rand_t = |shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..n)
                    .map(|_| rand::Rng::gen_range(rng, -1.0..1.0))
                    .collect(),
            )
            .expect("finite uniform tensor")
        };
        let x = rand_t(vec![b, c, t], &mut rng);
        let y = rand_t(vec![b, c, f], &mut rng);
        let (_, _, alpha, perm) = ket_mix(&x, &y, 1.0, &mut rng)?;
        let rep = verify_ket_equivalence(&x, &y, &alpha, &perm, 1e-10)?;
        let residual = rep.max_diff_x.max(rep.max_diff_y);
        rows.push(VerifyRow {
            suite: "ket",
            case: format!("b{b}_c{c}_t{t}"),
            residual,
            tolerance: 1e-10,
            passed: rep.passed,
        });
    }
    Ok(rows)
}

fn verify_grad_rows() -> Result<Vec<VerifyRow>, CoreError> {
    let config = ReFocusConfig {
        c: 2,
        t: 8,
        f: 4,
        d: 8,
        q: 8,
        n: 1,
        k: 3,
        beta: 0.5,
        strategy: PickStrategy::Max,
        eps: 1e-8,
        seed: 2024,
        head: HeadKind::FreqDomain,
        eval_pick: EvalPick::Greedy,
    };
    let err = full_model_gradcheck(&config, 7, 1e-5)?;
    Ok(vec![VerifyRow {
        suite: "grad",
        case: "full_model_c2_t8_d8_q8_n1_k3".into(),
        residual: err,
        tolerance: 1e-4,
        passed: err < 1e-4,
    }])
}

fn cmd_verify(cli: &Cli, args: &VerifyArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    if matches!(args.scope, VerifyScope::Revin | VerifyScope::All) {
        rows.extend(verify_revin_rows()?);
    }
    if matches!(args.scope, VerifyScope::Ameo | VerifyScope::All) {
        rows.extend(verify_ameo_rows()?);
    }
    if matches!(args.scope, VerifyScope::Ket | VerifyScope::All) {
        rows.extend(verify_ket_rows()?);
    }
    if matches!(args.scope, VerifyScope::Grad | VerifyScope::All) {
        rows.extend(verify_grad_rows()?);
    }
    let report = match cli.format.unwrap_or(ReportFormat::Csv) {
        ReportFormat::Csv => {
            let mut s = String::from("suite,case,residual,tolerance,status\n");
            for r in &rows {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.suite,
                    r.case,
                    r.residual,
                    r.tolerance,
                    if r.passed { "PASS" } else { "FAIL" }
                ));
            }
            s
        }
        ReportFormat::Json => {
            serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"
        }
    };
    emit(&report)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::new(
            1,
            format!("{failed} of {} verification cases failed", rows.len()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MidGapRow {
    channel: String,
    mid_gap_before: f64,
    mid_gap_after: f64,
}

fn cmd_spectrum(cli: &Cli, args: &SpectrumArgs) -> Result<(), Failure> {
    let ds = data::load_csv(&args.input).map_err(config_phase)?;
    let l = ds.len();
    if l < 16 {
        return Err(Failure::new(2, format!("series too short for band analysis: L = {l}")));
    }
    let (mid_lo, mid_hi) = spectral::mid_band(l);
    let nyq = l / 2;
    let f_hi = args.f_hi.unwrap_or(mid_lo.saturating_sub(1));
    let f_lo = args.f_lo.unwrap_or(mid_hi);
    let transform_row = |row: &[f64]| -> Result<Vec<f64>, CoreError> {
        match args.transform {
            TransformKind::None => Ok(row.to_vec()),
            TransformKind::Revin => {
                let t = Tensor::matrix(&[row.to_vec()])?;
                let (norm, _) = revin::revin_normalize(&t, 1e-8)?;
                Ok(norm.row(0).to_vec())
            }
            TransformKind::Ameo => {
                let layer = ameo::AmeoLayer::new(args.k, args.beta)?;
                let t = Tensor::matrix(&[row.to_vec()])?;
                Ok(ameo::ameo_apply(&t, &layer)?.row(0).to_vec())
            }
            TransformKind::Lowpass => spectral::ideal_filter(row, 0, f_hi, FilterKind::Low),
            TransformKind::Highpass => spectral::ideal_filter(row, f_lo, nyq, FilterKind::High),
        }
    };

    let mut csv = String::from("channel,f,energy_before,energy_after\n");
    let mut midgap = Vec::new();
    for (ci, row) in ds.values.iter().enumerate() {
        let name = &ds.channel_names[ci];
        let before = spectral::rfft_spectrum(row).energy();
        let transformed = transform_row(row)?;
        let after = spectral::rfft_spectrum(&transformed).energy();
        for f in 0..before.len() {
            csv.push_str(&format!("{name},{f},{},{}\n", before[f], after[f]));
        }
        midgap.push(MidGapRow {
            channel: name.clone(),
            mid_gap_before: spectral::mid_gap_metric(row)?,
            mid_gap_after: spectral::mid_gap_metric(&transformed)?,
        });
    }
    let midgap_json =
        serde_json::to_string_pretty(&midgap).expect("midgap serialize") + "\n";
    if let Some(dir) = resolve_out(cli, None) {
        std::fs::create_dir_all(&dir)
            .map_err(|e| io_failure(e, &format!("cannot create {}", dir.display())))?;
        std::fs::write(dir.join("spectrum.csv"), &csv)
            .map_err(|e| io_failure(e, "cannot write spectrum.csv"))?;
        std::fs::write(dir.join("midgap.json"), &midgap_json)
            .map_err(|e| io_failure(e, "cannot write midgap.json"))?;
    } else {
        emit(&csv)?;
        emit_stderr(&midgap_json);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth / gradcheck
// ---------------------------------------------------------------------------

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<(), Failure> {
    let seed = resolve_seed(cli.seed, 2024)?;
    let mut rng = derive_rng(seed, &[1]);
    let ds = match args.kind {
        SynthKind::SharedKey => {
            data::synth_shared_key(args.channels, args.len, args.key_bin, &args.carriers, args.snr, &mut rng)
                .map_err(config_phase)?
                .0
        }
        SynthKind::MidGap => {
            let signal =
                data::synth_mid_gap(args.len, args.low_bins, args.mid_leak, &mut rng)
                    .map_err(config_phase)?;
            Dataset {
                name: "synth_mid_gap".into(),
                channel_names: vec!["ch0".into()],
                values: vec![signal],
            }
        }
        SynthKind::Forecast => {
            data::synth_forecast_task(args.channels, args.len, &args.key_bins, args.snr, &mut rng)
                .map_err(config_phase)?
        }
    };
    let csv = data::csv_string(&ds);
    if let Some(dir) = resolve_out(cli, None) {
        std::fs::create_dir_all(&dir)
            .map_err(|e| io_failure(e, &format!("cannot create {}", dir.display())))?;
        std::fs::write(dir.join("synth.csv"), &csv)
            .map_err(|e| io_failure(e, "cannot write synth.csv"))?;
    } else {
        emit(&csv)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckReport {
    max_rel_err: f64,
    tol: f64,
    passed: bool,
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<(), Failure> {
    let config = ReFocusConfig {
        c: args.c,
        t: args.t,
        f: args.f,
        d: args.d,
        q: args.q,
        n: args.n,
        k: args.k,
        beta: args.beta,
        strategy: PickStrategy::Max,
        eps: 1e-8,
        seed: 2024,
        head: HeadKind::FreqDomain,
        eval_pick: EvalPick::Greedy,
    };
    config.validate().map_err(config_phase)?;
    let probe_seed = resolve_seed(cli.seed, 7)?;
    let err = full_model_gradcheck(&config, probe_seed, 1e-5)?;
    let report = GradcheckReport {
        max_rel_err: err,
        tol: args.tol,
        passed: err < args.tol,
    };
    emit(&(serde_json::to_string_pretty(&report).expect("report serialize") + "\n"))?;
    if !report.passed {
        return Err(Failure::new(
            1,
            format!("gradient check failed: {err} ≥ {}", args.tol),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Verify(args) => cmd_verify(&cli, args),
        Command::Spectrum(args) => cmd_spectrum(&cli, args),
        Command::Synth(args) => cmd_synth(&cli, args),
        Command::Gradcheck(args) => cmd_gradcheck(&cli, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
