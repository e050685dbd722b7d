//! Reference forecasters the main model is compared against: last-value
//! persistence and a single linear map from lookback to horizon.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::par::map_range;
use crate::rng::derive_rng;
use crate::tensor::{Tape, Tensor};
use crate::training::{adam_step, AdamState, EpochRecord, Metrics, TrainConfig};

/// Repeat each channel's last observed value across the horizon.
pub fn persistence_forecast(x: &Tensor, f_len: usize) -> Result<Tensor> {
    if x.ndim() != 2 || x.shape()[1] == 0 {
        return Err(Error::shape("persistence_forecast", "need a non-empty C×T input"));
    }
    let c = x.shape()[0];
    let mut out = Vec::with_capacity(c * f_len);
    for ci in 0..c {
        let last = *x.row(ci).last().expect("non-empty row");
        out.extend(std::iter::repeat_n(last, f_len));
    }
    Tensor::new(vec![c, f_len], out)
}

/// Persistence error over a window set, standardized scale.
pub fn persistence_metrics(windows: &[WindowPair]) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::contract("persistence_metrics", "empty window set"));
    }
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut n = 0usize;
    for w in windows {
        let pred = persistence_forecast(&w.x, w.y.shape()[1])?;
        for (a, b) in pred.data().iter().zip(w.y.data()) {
            let r = a - b;
            sq += r * r;
            ab += r.abs();
        }
        n += w.y.numel();
    }
    Ok(Metrics {
        mse: sq / n as f64,
        mae: ab / n as f64,
    })
}

/// One linear map `T → F` shared by every channel (weights `T×F`, bias `F`),
/// applied to raw standardized inputs — deliberately no per-window
/// renormalization, so the comparison isolates that mechanism.
#[derive(Clone, Debug)]
pub struct PlainLinear {
    pub t_len: usize,
    pub f_len: usize,
    pub w: Tensor,
    pub b: Tensor,
}

impl PlainLinear {
    pub fn init(t_len: usize, f_len: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if t_len == 0 || f_len == 0 {
            return Err(Error::contract("PlainLinear::init", "T and F must be positive"));
        }
        let bound = 1.0 / (t_len as f64).sqrt();
        let w = Tensor::new(
            vec![t_len, f_len],
            (0..t_len * f_len).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?;
        Ok(PlainLinear {
            t_len,
            f_len,
            w,
            b: Tensor::zeros(vec![f_len]),
        })
    }

    /// Forecast all channels of one window: `X·W + b` row-wise.
    pub fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.shape()[1] != self.t_len {
            return Err(Error::shape(
                "PlainLinear::forecast",
                format!("input {:?}, want [C, {}]", x.shape(), self.t_len),
            ));
        }
        let c = x.shape()[0];
        let mut out = vec![0.0; c * self.f_len];
        for ci in 0..c {
            let row = x.row(ci);
            let orow = &mut out[ci * self.f_len..(ci + 1) * self.f_len];
            orow.copy_from_slice(self.b.data());
            for (t, &xv) in row.iter().enumerate() {
                let wrow = self.w.row(t);
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        Tensor::new(vec![c, self.f_len], out)
    }
}

/// Error of a linear model over a window set.
pub fn plain_linear_metrics(model: &PlainLinear, windows: &[WindowPair]) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::contract("plain_linear_metrics", "empty window set"));
    }
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut n = 0usize;
    for w in windows {
        let pred = model.forecast(&w.x)?;
        for (a, b) in pred.data().iter().zip(w.y.data()) {
            let r = a - b;
            sq += r * r;
            ab += r.abs();
        }
        n += w.y.numel();
    }
    Ok(Metrics {
        mse: sq / n as f64,
        mae: ab / n as f64,
    })
}

/// Per-sample training result: loss plus gradients for the weight and bias.
type LossAndGrads = (f64, Vec<f64>, Vec<f64>);

/// Train the linear baseline with the same recipe as the main loop — seeded
/// shuffling, Adam, MSE, per-epoch validation, patience stopping — but no
/// augmentation (`cfg.ket` is ignored). Returns the best checkpoint and the
/// history.
pub fn train_plain_linear(
    train_windows: &[WindowPair],
    val_windows: &[WindowPair],
    cfg: &TrainConfig,
) -> Result<(PlainLinear, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::contract("train_plain_linear", "empty train or validation split"));
    }
    let t_len = train_windows[0].x.shape()[1];
    let f_len = train_windows[0].y.shape()[1];
    let mut model = PlainLinear::init(t_len, f_len, &mut derive_rng(cfg.seed, &[40]))?;
    let mut adam = AdamState::new(cfg.lr, &[model.w.numel(), model.b.numel()]);
    let mut history = Vec::new();
    let mut best: Option<(f64, PlainLinear)> = None;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[41, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut n_samples = 0usize;
        for idxs in order.chunks(cfg.batch_size) {
            let per: Vec<Result<LossAndGrads>> =
                map_range(true, idxs.len(), |s| {
                    let w = &train_windows[idxs[s]];
                    let mut tape = Tape::new();
                    let wid = tape.leaf(model.w.clone(), true);
                    let bid = tape.leaf(model.b.clone(), true);
                    let xid = tape.constant(w.x.clone());
                    let yid = tape.constant(w.y.clone());
                    let prod = tape.matmul(xid, wid)?;
                    let c = w.x.shape()[0];
                    let brow = tape.stack_rows(&vec![bid; c])?;
                    let yhat = tape.add(prod, brow)?;
                    let diff = tape.sub(yhat, yid)?;
                    let sq = tape.mul(diff, diff)?;
                    let loss = tape.mean(sq, None)?;
                    let lv = tape.value(loss).data()[0];
                    tape.backward(loss)?;
                    let gw = tape.grad(wid).expect("w is trainable").to_vec();
                    let gb = tape.grad(bid).expect("b is trainable").to_vec();
                    Ok((lv, gw, gb))
                });
            let b = idxs.len() as f64;
            let mut loss = 0.0;
            let mut gw = vec![0.0; model.w.numel()];
            let mut gb = vec![0.0; model.b.numel()];
            for r in per {
                let (l, w_g, b_g) = r?;
                loss += l;
                for (a, v) in gw.iter_mut().zip(&w_g) {
                    *a += v;
                }
                for (a, v) in gb.iter_mut().zip(&b_g) {
                    *a += v;
                }
            }
            for v in gw.iter_mut().chain(gb.iter_mut()) {
                *v /= b;
            }
            let mut params = vec![
                ("w".to_string(), &mut model.w),
                ("b".to_string(), &mut model.b),
            ];
            adam_step(&mut params, &[gw, gb], &mut adam)?;
            loss_sum += loss;
            n_samples += idxs.len();
        }
        let val = plain_linear_metrics(&model, val_windows)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_samples as f64,
            val_mse: val.mse,
            val_mae: val.mae,
        });
        let improved = best.as_ref().is_none_or(|(bv, _)| val.mse < *bv);
        if improved {
            best = Some((val.mse, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}
