//! Complex FFT engine: iterative radix-2 with a Bluestein fallback for
//! arbitrary lengths, plus the real-signal half-spectrum pair `rfft`/`irfft`
//! and their exact adjoints (the backward rules used by the tape).
//!
//! Convention: unnormalized forward `X_k = Σ_t x_t e^{-2πikt/n}`; the inverse
//! carries the `1/n`. Twiddle/chirp tables are cached per length in a
//! thread-local plan map, so repeated transforms of the model's fixed sizes
//! cost no trig after the first call.

use num_complex::Complex64;
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

/// Precomputed radix-2 stage twiddles for a power-of-two length.
struct Radix2 {
    n: usize,
    /// stages[s] holds e^{-2πik/len} for len = 2^{s+1}, k = 0..len/2.
    stages: Vec<Vec<Complex64>>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        assert!(n.is_power_of_two());
        let mut stages = Vec::new();
        let mut len = 2usize;
        while len <= n {
            let tw: Vec<Complex64> = (0..len / 2)
                .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
                .collect();
            stages.push(tw);
            len <<= 1;
        }
        Radix2 { n, stages }
    }

    /// In-place transform; `inverse` conjugates the twiddles (still unnormalized).
    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        if n <= 1 {
            return;
        }
        // Bit-reversal permutation.
        let mut j = 0usize;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                buf.swap(i, j);
            }
        }
        for (s, tw) in self.stages.iter().enumerate() {
            let len = 2usize << s;
            let half = len / 2;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = if inverse { tw[k].conj() } else { tw[k] };
                    let u = buf[start + k];
                    let v = buf[start + k + half] * w;
                    buf[start + k] = u + v;
                    buf[start + k + half] = u - v;
                }
            }
        }
    }
}

/// Bluestein chirp-z setup for an arbitrary length n: linear convolution with
/// the chirp through power-of-two FFTs of length m ≥ 2n−1.
struct Bluestein {
    n: usize,
    m: usize,
    /// w_j = e^{-iπ j²/n}, j = 0..n (exponent reduced mod 2n before the trig call).
    chirp: Vec<Complex64>,
    /// FFT of the symmetric extension of conj(chirp), length m.
    bfft: Vec<Complex64>,
    inner: Rc<Radix2>,
}

impl Bluestein {
    fn new(n: usize, inner: Rc<Radix2>) -> Self {
        let m = inner.n;
        debug_assert!(m >= 2 * n - 1);
        let chirp: Vec<Complex64> = (0..n)
            .map(|j| {
                let p = (j * j) % (2 * n); // e^{-iπ j²/n} has period 2n in j²
                Complex64::from_polar(1.0, -PI * p as f64 / n as f64)
            })
            .collect();
        let mut b = vec![Complex64::new(0.0, 0.0); m];
        for j in 0..n {
            b[j] = chirp[j].conj();
            if j > 0 {
                b[m - j] = chirp[j].conj();
            }
        }
        inner.run(&mut b, false);
        Bluestein { n, m, chirp, bfft: b, inner }
    }

    fn run(&self, x: &[Complex64], inverse: bool) -> Vec<Complex64> {
        // Inverse via conj(forward(conj(x))): keeps one chirp table.
        let conj_in = |z: &Complex64| if inverse { z.conj() } else { *z };
        let mut a = vec![Complex64::new(0.0, 0.0); self.m];
        for j in 0..self.n {
            a[j] = conj_in(&x[j]) * self.chirp[j];
        }
        self.inner.run(&mut a, false);
        for (av, bv) in a.iter_mut().zip(&self.bfft) {
            *av *= bv;
        }
        self.inner.run(&mut a, true);
        let scale = 1.0 / self.m as f64;
        (0..self.n)
            .map(|k| {
                let y = self.chirp[k] * a[k] * scale;
                if inverse {
                    y.conj()
                } else {
                    y
                }
            })
            .collect()
    }
}

enum Plan {
    Pow2(Rc<Radix2>),
    Chirp(Bluestein),
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn plan_for(n: usize) -> Rc<Plan> {
    PLANS.with(|cell| {
        let mut map = cell.borrow_mut();
        if let Some(p) = map.get(&n) {
            return Rc::clone(p);
        }
        let plan = if n.is_power_of_two() {
            Plan::Pow2(Rc::new(Radix2::new(n)))
        } else {
            let m = (2 * n - 1).next_power_of_two();
            let inner = match map.get(&m) {
                Some(p) => match p.as_ref() {
                    Plan::Pow2(r) => Rc::clone(r),
                    Plan::Chirp(_) => unreachable!("power-of-two length planned as chirp"),
                },
                None => {
                    let r = Rc::new(Radix2::new(m));
                    map.insert(m, Rc::new(Plan::Pow2(Rc::clone(&r))));
                    r
                }
            };
            Plan::Chirp(Bluestein::new(n, inner))
        };
        let plan = Rc::new(plan);
        map.insert(n, Rc::clone(&plan));
        plan
    })
}

fn transform(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    match plan_for(n).as_ref() {
        Plan::Pow2(r) => {
            let mut buf = x.to_vec();
            r.run(&mut buf, inverse);
            buf
        }
        Plan::Chirp(b) => b.run(x, inverse),
    }
}

/// Unnormalized forward DFT: `X_k = Σ_t x_t e^{-2πikt/n}`.
pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    transform(x, false)
}

/// Unnormalized inverse-direction transform: `Σ_k X_k e^{+2πikt/n}` (no 1/n).
pub fn ifft_unnorm(x: &[Complex64]) -> Vec<Complex64> {
    transform(x, true)
}

/// Normalized inverse DFT, carrying the 1/n.
pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    let scale = 1.0 / n as f64;
    ifft_unnorm(x).into_iter().map(|z| z * scale).collect()
}

/// Number of half-spectrum bins for a length-n real signal: ⌊n/2⌋+1.
pub fn rfft_bins(n: usize) -> usize {
    n / 2 + 1
}

/// Real-input forward transform, returning bins 0..⌊n/2⌋ (unnormalized).
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut full = fft(&buf);
    full.truncate(rfft_bins(x.len()));
    full
}

/// Inverse of [`rfft`] back to a length-n real signal (carries the 1/n).
///
/// Bin 0's and, for even n, the Nyquist bin's imaginary parts have no
/// influence on the output: a real signal has none, and complex-valued
/// parameters feeding this op (frequency-domain biases) simply leave those
/// two coordinates dead.
pub fn irfft(s: &[Complex64], n: usize) -> Vec<f64> {
    assert_eq!(s.len(), rfft_bins(n), "irfft: spectrum/length mismatch");
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[0] = Complex64::new(s[0].re, 0.0);
    for j in 1..s.len() {
        if 2 * j == n {
            full[j] = Complex64::new(s[j].re, 0.0);
        } else {
            full[j] = s[j];
            full[n - j] = s[j].conj();
        }
    }
    ifft(&full).into_iter().map(|z| z.re).collect()
}

/// Adjoint of [`rfft`] as a map R^n → R^{2·bins}: given the cotangent g on
/// the (re, im) output coordinates, returns the input cotangent
/// `dx_t = Re[Σ_j g_j e^{+2πijt/n}]` (half-spectrum sum, no doubling, no 1/n).
pub fn rfft_adjoint(g: &[Complex64], n: usize) -> Vec<f64> {
    assert_eq!(g.len(), rfft_bins(n), "rfft_adjoint: spectrum/length mismatch");
    let mut padded = vec![Complex64::new(0.0, 0.0); n];
    padded[..g.len()].copy_from_slice(g);
    ifft_unnorm(&padded).into_iter().map(|z| z.re).collect()
}

/// Adjoint of [`irfft`] as a map R^{2·bins} → R^n: given the cotangent h on
/// the time-domain output, returns per-bin cotangents. Interior bins carry
/// the factor 2/n from the Hermitian doubling; DC and Nyquist carry 1/n and
/// have zero imaginary cotangent (those coordinates are dead in the forward).
pub fn irfft_adjoint(h: &[f64]) -> Vec<Complex64> {
    let n = h.len();
    let spec = rfft(h);
    let nb = spec.len();
    let inv_n = 1.0 / n as f64;
    (0..nb)
        .map(|j| {
            let edge = j == 0 || 2 * j == n;
            if edge {
                Complex64::new(spec[j].re * inv_n, 0.0)
            } else {
                Complex64::new(spec[j].re * 2.0 * inv_n, spec[j].im * 2.0 * inv_n)
            }
        })
        .collect()
}
