//! Dataset ingestion, chronological splitting, train-statistics
//! standardization, sliding-window generation, and the seeded synthetic
//! generators the property tests and ablations run on.

use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A multichannel series, channel-major: `values[c][t]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub channel_names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.values.len()
    }

    /// Timesteps per channel.
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Load an ETT-format CSV: header row, first column a timestamp (parsed for
/// ordering sanity only), every remaining column one numeric channel.
/// Row numbers in errors are 1-based file lines (the header is row 1).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let ingest = |row: usize, column: &str, detail: String| Error::Ingest {
        path: path.display().to_string(),
        row,
        column: column.to_string(),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => {
                Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
            }
            other => ingest(0, "", format!("cannot open: {other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| ingest(1, "", format!("malformed header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(ingest(1, "", "need a timestamp column plus at least one channel".into()));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let c = channel_names.len();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); c];
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // header is line 1
        let record = record.map_err(|e| ingest(row, "", format!("unreadable record: {e}")))?;
        if record.len() != c + 1 {
            return Err(ingest(
                row,
                "",
                format!("expected {} fields, found {}", c + 1, record.len()),
            ));
        }
        for (ch, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                ingest(row, &channel_names[ch], format!("non-numeric value {cell:?}"))
            })?;
            if !v.is_finite() {
                return Err(ingest(row, &channel_names[ch], format!("non-finite value {cell:?}")));
            }
            values[ch].push(v);
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset { name, channel_names, values })
}

/// Render a dataset in the same CSV convention; the timestamp column is the
/// row index. Deterministic byte-for-byte given identical values.
pub fn csv_string(ds: &Dataset) -> String {
    let mut out = String::new();
    out.push_str("date");
    for name in &ds.channel_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..ds.len() {
        out.push_str(&t.to_string());
        for ch in &ds.values {
            out.push(',');
            out.push_str(&format!("{}", ch[t]));
        }
        out.push('\n');
    }
    out
}

/// Write [`csv_string`] to a file.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(ds))?;
    Ok(())
}

/// Chronological split boundaries with the backward lookback extension.
///
/// Train owns `[0, train_end)`; val windows draw context from
/// `[train_end − T, val_end)` but their targets all lie in
/// `[train_end, val_end)`; likewise for test. No index is ever a target in
/// two splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
    /// The lookback extension T applied to val/test starts.
    pub lookback: usize,
}

/// Split by ratios (must sum to 1) in chronological order, extending val and
/// test backward by `t_len` steps of context.
pub fn chronological_split(
    ds: &Dataset,
    ratios: (f64, f64, f64),
    t_len: usize,
) -> Result<SplitSpec> {
    let (r1, r2, r3) = ratios;
    if r1 < 0.0 || r2 < 0.0 || r3 < 0.0 || (r1 + r2 + r3 - 1.0).abs() > 1e-9 {
        return Err(Error::contract(
            "chronological_split",
            format!("ratios {ratios:?} must be non-negative and sum to 1"),
        ));
    }
    let l = ds.len();
    // Nudge before flooring so exact rational boundaries (0.6·17420 = 10452)
    // are not lost to the binary representation of the ratio.
    let cut = |r: f64| ((r * l as f64) + 1e-9).floor() as usize;
    let train_end = cut(r1).min(l);
    let val_end = cut(r1 + r2).min(l);
    if val_end < train_end {
        return Err(Error::contract("chronological_split", "boundaries must be non-decreasing"));
    }
    Ok(SplitSpec {
        train: (0, train_end),
        val: (train_end.saturating_sub(t_len), val_end),
        test: (val_end.saturating_sub(t_len), l),
        lookback: t_len,
    })
}

/// Per-channel affine scaler fitted on the train segment only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at 1e-8.
    pub std: Vec<f64>,
}

impl Scaler {
    /// Undo the scaling on one channel's values.
    pub fn invert_channel(&self, channel: usize, values: &[f64]) -> Vec<f64> {
        let (m, s) = (self.mean[channel], self.std[channel]);
        values.iter().map(|v| v * s + m).collect()
    }
}

/// Standardize every channel by its train-segment mean/std (floor 1e-8),
/// applied across the whole series. Only `split.train` informs the scaler.
pub fn standardize(ds: &Dataset, split: &SplitSpec) -> Result<(Dataset, Scaler)> {
    let (lo, hi) = split.train;
    if hi <= lo || hi > ds.len() {
        return Err(Error::contract(
            "standardize",
            format!("train segment [{lo}, {hi}) is empty or out of range"),
        ));
    }
    let n = (hi - lo) as f64;
    let mut mean = Vec::with_capacity(ds.channels());
    let mut std = Vec::with_capacity(ds.channels());
    let mut values = Vec::with_capacity(ds.channels());
    for ch in &ds.values {
        let seg = &ch[lo..hi];
        let m = seg.iter().sum::<f64>() / n;
        let var = seg.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt().max(1e-8);
        values.push(ch.iter().map(|v| (v - m) / s).collect::<Vec<f64>>());
        mean.push(m);
        std.push(s);
    }
    let scaled = Dataset {
        name: ds.name.clone(),
        channel_names: ds.channel_names.clone(),
        values,
    };
    Ok((scaled, Scaler { mean, std }))
}

/// One forecasting example: X covers `[origin, origin+T)`, Y covers
/// `[origin+T, origin+T+F)`, both C-channel.
#[derive(Clone, Debug)]
pub struct WindowPair {
    pub x: Tensor,
    pub y: Tensor,
    pub origin: usize,
}

/// Stride-1 windows over `[segment.0, segment.1)`: exactly
/// `len − T − F + 1` pairs in chronological order. Errors when the segment
/// cannot hold a single window.
pub fn windows(
    ds: &Dataset,
    segment: (usize, usize),
    t_len: usize,
    f_len: usize,
) -> Result<Vec<WindowPair>> {
    let (lo, hi) = segment;
    if hi > ds.len() || lo > hi {
        return Err(Error::contract("windows", format!("segment {segment:?} out of range")));
    }
    let span = hi - lo;
    if span < t_len + f_len {
        return Err(Error::contract(
            "windows",
            format!("segment length {span} cannot hold T+F = {}", t_len + f_len),
        ));
    }
    let c = ds.channels();
    let count = span - t_len - f_len + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let origin = lo + w;
        let mut x = Vec::with_capacity(c * t_len);
        let mut y = Vec::with_capacity(c * f_len);
        for ch in &ds.values {
            x.extend_from_slice(&ch[origin..origin + t_len]);
            y.extend_from_slice(&ch[origin + t_len..origin + t_len + f_len]);
        }
        out.push(WindowPair {
            x: Tensor::new(vec![c, t_len], x)?,
            y: Tensor::new(vec![c, f_len], y)?,
            origin,
        });
    }
    Ok(out)
}

/// Like [`windows`] but a too-short segment yields an empty list
/// (evaluation convenience) instead of an error.
pub fn windows_lenient(
    ds: &Dataset,
    segment: (usize, usize),
    t_len: usize,
    f_len: usize,
) -> Vec<WindowPair> {
    windows(ds, segment, t_len, f_len).unwrap_or_default()
}

/// Carrier channels share a sinusoid at `key_bin` (per-channel phase
/// jitter) plus Gaussian noise at the given linear SNR; other channels are
/// noise only. Returns the dataset and the per-channel carrier flags.
pub fn synth_shared_key(
    c: usize,
    l: usize,
    key_bin: usize,
    carrier_channels: &[usize],
    snr: f64,
    rng: &mut dyn RngCore,
) -> Result<(Dataset, Vec<bool>)> {
    if c == 0 || l < 4 {
        return Err(Error::contract("synth_shared_key", "need C ≥ 1 and L ≥ 4"));
    }
    if key_bin < 1 || key_bin >= l / 2 {
        return Err(Error::contract(
            "synth_shared_key",
            format!("key_bin {key_bin} outside [1, {})", l / 2),
        ));
    }
    if let Some(&bad) = carrier_channels.iter().find(|&&ch| ch >= c) {
        return Err(Error::contract("synth_shared_key", format!("carrier {bad} out of range")));
    }
    if snr <= 0.0 {
        return Err(Error::contract("synth_shared_key", "snr must be positive"));
    }
    // Unit-amplitude sine has power 1/2; snr = (1/2)/σ².
    let sigma = if snr.is_infinite() { 0.0 } else { (0.5 / snr).sqrt() };
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut carriers = vec![false; c];
    for &ch in carrier_channels {
        carriers[ch] = true;
    }
    let mut values = Vec::with_capacity(c);
    for &is_carrier in &carriers {
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let row: Vec<f64> = (0..l)
            .map(|t| {
                let mut v = sigma * noise.sample(&mut *rng);
                if is_carrier {
                    v += (std::f64::consts::TAU * key_bin as f64 * t as f64 / l as f64 + phase)
                        .sin();
                }
                v
            })
            .collect();
        values.push(row);
    }
    let ds = Dataset {
        name: "synth_shared_key".into(),
        channel_names: (0..c).map(|i| format!("ch{i}")).collect(),
        values,
    };
    Ok((ds, carriers))
}

/// One signal whose non-DC energy sits in low bins `1..=low_bins`
/// (unit amplitude) with only a faint mid-band presence: two mid-band
/// sinusoids of amplitude `mid_leak/√2` each, so the mid-band energy share
/// stays below `2·mid_leak²`. `low_bins = 0` gives the complementary
/// mid-only construction.
pub fn synth_mid_gap(
    l: usize,
    low_bins: usize,
    mid_leak: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if l < 16 {
        return Err(Error::contract("synth_mid_gap", "need L ≥ 16"));
    }
    if low_bins >= l / 8 {
        return Err(Error::contract(
            "synth_mid_gap",
            format!("low_bins {low_bins} must stay below L/8 = {}", l / 8),
        ));
    }
    if mid_leak < 0.0 {
        return Err(Error::contract("synth_mid_gap", "mid_leak must be non-negative"));
    }
    let (mid_lo, mid_hi) = crate::spectral::mid_band(l);
    let span = mid_hi - mid_lo;
    let mid_bins = [mid_lo + span / 3, mid_lo + 2 * span / 3];
    let mid_amp = mid_leak / 2f64.sqrt();
    let tau = std::f64::consts::TAU;
    let mut out = vec![0.0; l];
    for f in 1..=low_bins {
        let phase: f64 = rng.gen_range(0.0..tau);
        for (t, v) in out.iter_mut().enumerate() {
            *v += (tau * f as f64 * t as f64 / l as f64 + phase).sin();
        }
    }
    for &f in &mid_bins {
        let phase: f64 = rng.gen_range(0.0..tau);
        for (t, v) in out.iter_mut().enumerate() {
            *v += mid_amp * (tau * f as f64 * t as f64 / l as f64 + phase).sin();
        }
    }
    Ok(out)
}

/// Multichannel forecasting task with planted shared frequencies: every
/// channel carries the same key bins with channel-specific amplitude and a
/// small phase offset, plus one channel-private low bin and Gaussian noise
/// at the given linear SNR. Deterministic composite of sinusoids, so the
/// future is genuinely predictable from the past.
pub fn synth_forecast_task(
    c: usize,
    l: usize,
    key_bins: &[usize],
    snr: f64,
    rng: &mut dyn RngCore,
) -> Result<Dataset> {
    if c == 0 || l < 16 {
        return Err(Error::contract("synth_forecast_task", "need C ≥ 1 and L ≥ 16"));
    }
    if key_bins.is_empty() {
        return Err(Error::contract("synth_forecast_task", "need at least one key bin"));
    }
    if let Some(&bad) = key_bins.iter().find(|&&f| f < 1 || f >= l / 2) {
        return Err(Error::contract(
            "synth_forecast_task",
            format!("key bin {bad} outside [1, {})", l / 2),
        ));
    }
    if snr <= 0.0 {
        return Err(Error::contract("synth_forecast_task", "snr must be positive"));
    }
    let tau = std::f64::consts::TAU;
    // Shared phases anchor the cross-channel pattern.
    let shared_phases: Vec<f64> = key_bins.iter().map(|_| rng.gen_range(0.0..tau)).collect();
    let signal_power: f64 = key_bins.len() as f64 * 0.75f64.powi(2) / 2.0 + 0.5 * 0.5;
    let sigma = if snr.is_infinite() { 0.0 } else { (signal_power / snr).sqrt() };
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Vec::with_capacity(c);
    for _ in 0..c {
        let amps: Vec<f64> = key_bins.iter().map(|_| rng.gen_range(0.5..1.0)).collect();
        let offsets: Vec<f64> = key_bins.iter().map(|_| rng.gen_range(-0.3..0.3)).collect();
        let private_bin = rng.gen_range(1..4usize);
        let private_phase: f64 = rng.gen_range(0.0..tau);
        let row: Vec<f64> = (0..l)
            .map(|t| {
                let mut v = sigma * noise.sample(&mut *rng);
                for (i, &f) in key_bins.iter().enumerate() {
                    v += amps[i]
                        * (tau * f as f64 * t as f64 / l as f64 + shared_phases[i] + offsets[i])
                            .sin();
                }
                v += 0.5
                    * (tau * private_bin as f64 * t as f64 / l as f64 + private_phase).sin();
                v
            })
            .collect();
        values.push(row);
    }
    Ok(Dataset {
        name: "synth_forecast_task".into(),
        channel_names: (0..c).map(|i| format!("ch{i}")).collect(),
        values,
    })
}

/// Low-frequency series bins that dominate [`synth_ablation_task`] channels.
pub const ABLATION_LOW_BINS: [usize; 3] = [2, 5, 9];

/// Ablation task with a steep spectrum: heavy channel-private energy on
/// series bins [`ABLATION_LOW_BINS`] (amplitude `low_amp` each, independent
/// per-channel phases) over shared mid carriers at `key_bins` (one shared
/// phase per bin; per-channel amplitude U(0.8, 1.2) and phase offset
/// U(-0.2, 0.2)), plus white Gaussian noise at linear `snr` against total
/// nominal signal power.
///
/// Bin positions are series-relative: a lookback window of length T sees
/// series bin f at window bin f·T/l. Choose `key_bins` near (l/T)·window-mid
/// so the shared structure lands in the window's own mid band while the
/// private energy stays in the window's low band — the regime where
/// low-frequency suppression and cross-channel picking have work to do.
pub fn synth_ablation_task(
    c: usize,
    l: usize,
    key_bins: &[usize],
    low_amp: f64,
    snr: f64,
    rng: &mut dyn RngCore,
) -> Result<Dataset> {
    if c < 2 || l < 32 {
        return Err(Error::contract("synth_ablation_task", "need C ≥ 2 and L ≥ 32"));
    }
    if key_bins.is_empty() {
        return Err(Error::contract("synth_ablation_task", "need at least one key bin"));
    }
    if let Some(&bad) = key_bins.iter().find(|&&f| f < 1 || f >= l / 2) {
        return Err(Error::contract(
            "synth_ablation_task",
            format!("key bin {bad} outside [1, {})", l / 2),
        ));
    }
    if low_amp < 0.0 || !low_amp.is_finite() {
        return Err(Error::contract("synth_ablation_task", "low_amp must be finite and ≥ 0"));
    }
    if snr <= 0.0 {
        return Err(Error::contract("synth_ablation_task", "snr must be positive"));
    }
    let tau = std::f64::consts::TAU;
    let shared_phases: Vec<f64> = key_bins.iter().map(|_| rng.gen_range(0.0..tau)).collect();
    let signal_power = ABLATION_LOW_BINS.len() as f64 * low_amp * low_amp / 2.0
        + key_bins.len() as f64 * 0.5;
    let sigma = if snr.is_infinite() { 0.0 } else { (signal_power / snr).sqrt() };
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Vec::with_capacity(c);
    for _ in 0..c {
        let amps: Vec<f64> = key_bins.iter().map(|_| rng.gen_range(0.8..1.2)).collect();
        let offsets: Vec<f64> = key_bins.iter().map(|_| rng.gen_range(-0.2..0.2)).collect();
        let low_phases: Vec<f64> =
            ABLATION_LOW_BINS.iter().map(|_| rng.gen_range(0.0..tau)).collect();
        let row: Vec<f64> = (0..l)
            .map(|t| {
                let mut v = sigma * noise.sample(&mut *rng);
                for (i, &f) in key_bins.iter().enumerate() {
                    v += amps[i]
                        * (tau * f as f64 * t as f64 / l as f64 + shared_phases[i] + offsets[i])
                            .sin();
                }
                for (i, &f) in ABLATION_LOW_BINS.iter().enumerate() {
                    v += low_amp
                        * (tau * f as f64 * t as f64 / l as f64 + low_phases[i]).sin();
                }
                v
            })
            .collect();
        values.push(row);
    }
    Ok(Dataset {
        name: "synth_ablation_task".into(),
        channel_names: (0..c).map(|i| format!("ch{i}")).collect(),
        values,
    })
}
