//! Baseband test signals and the conditioning utilities shared by the rest of
//! the crate.
//!
//! [`ComplexSignal`] carries every sequence that flows through the testbed:
//! the original data, the predistorted PA input, the PA output and the error.

mod filter;
mod generators;
pub mod io;

pub use filter::{design_lowpass, fir_filter_centered, lowpass_filter};
pub use generators::{
    gen_ofdm, gen_ofdm_surrogate, gen_pulsed_noise, OfdmConfig, PowerLevel, PulsedNoiseConfig,
    DEFAULT_SAMPLE_RATE_HZ,
};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{DpdError, Result};

/// A finite sequence of complex baseband samples at a fixed sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSignal {
    samples: Vec<Complex64>,
    sample_rate_hz: f64,
}

impl ComplexSignal {
    /// Builds a signal, rejecting non-finite samples and non-positive rates.
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(DpdError::InvalidSignal(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if let Some(i) = samples
            .iter()
            .position(|s| !(s.re.is_finite() && s.im.is_finite()))
        {
            return Err(DpdError::InvalidSignal(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: f64) -> Result<Self> {
        Self::new(vec![Complex64::new(0.0, 0.0); len], sample_rate_hz)
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Mean of `|x[n]|^2`; zero for an empty signal.
    pub fn mean_power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.mean_power().sqrt()
    }

    /// Peak-to-average power ratio in dB.
    pub fn papr_db(&self) -> f64 {
        let peak = self
            .samples
            .iter()
            .map(|s| s.norm_sqr())
            .fold(0.0, f64::max);
        10.0 * (peak / self.mean_power()).log10()
    }

    /// Copy of `[start, end)` with the same sample rate.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.samples.len() {
            return Err(DpdError::InvalidSignal(format!(
                "slice [{start}, {end}) out of bounds for length {}",
                self.samples.len()
            )));
        }
        Ok(Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        })
    }

    /// Concatenation of `self` followed by `other`; the rates must agree.
    pub fn concat(&self, other: &ComplexSignal) -> Result<Self> {
        if self.sample_rate_hz != other.sample_rate_hz {
            return Err(DpdError::InvalidSignal(format!(
                "sample rates differ: {} vs {}",
                self.sample_rate_hz, other.sample_rate_hz
            )));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Ok(Self {
            samples,
            sample_rate_hz: self.sample_rate_hz,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * factor).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Delays the signal by `lag` samples (advances it when negative),
    /// zero-filling and keeping the length.
    pub fn shifted(&self, lag: isize) -> Self {
        Self {
            samples: shift_samples(&self.samples, lag),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

pub fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

pub(crate) fn shift_samples(samples: &[Complex64], lag: isize) -> Vec<Complex64> {
    let n = samples.len() as isize;
    (0..n)
        .map(|i| {
            let j = i - lag;
            if (0..n).contains(&j) {
                samples[j as usize]
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Scales `signal` so its RMS equals `target_rms`. Sample phases are untouched.
pub fn normalize_rms(signal: &ComplexSignal, target_rms: f64) -> Result<ComplexSignal> {
    if !(target_rms.is_finite() && target_rms > 0.0) {
        return Err(DpdError::InvalidConfig(format!(
            "target rms must be positive, got {target_rms}"
        )));
    }
    let rms = signal.rms();
    if signal.is_empty() || rms == 0.0 {
        return Err(DpdError::ZeroSignal);
    }
    Ok(signal.scaled(target_rms / rms))
}

/// Integer lag that best aligns `measured` to `reference`.
///
/// A positive result means `measured` lags `reference`: `measured[n]` lines up
/// with `reference[n - lag]`. The search spans every lag leaving at least two
/// overlapping samples and picks the peak of `|cross-correlation|`; ties go to
/// the smallest `|lag|`.
pub fn time_align(reference: &ComplexSignal, measured: &ComplexSignal) -> Result<isize> {
    let (r, m) = (reference.samples(), measured.samples());
    if r.len() < 2 || m.len() < 2 {
        return Err(DpdError::Degenerate(
            "alignment needs at least two samples in each signal".into(),
        ));
    }
    if r.iter().all(|s| s.norm_sqr() == 0.0) || m.iter().all(|s| s.norm_sqr() == 0.0) {
        return Err(DpdError::Degenerate("all-zero input to time_align".into()));
    }

    // c[lag] = sum_n m[n] * conj(r[n - lag]), evaluated for all lags by FFT.
    let size = (r.len() + m.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a = vec![Complex64::new(0.0, 0.0); size];
    let mut b = vec![Complex64::new(0.0, 0.0); size];
    a[..m.len()].copy_from_slice(m);
    b[..r.len()].copy_from_slice(r);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y.conj();
    }
    inv.process(&mut a);

    let max_pos = m.len() as isize - 2;
    let max_neg = r.len() as isize - 2;
    let mut best = (0isize, f64::NEG_INFINITY);
    for lag in -max_neg..=max_pos {
        let idx = lag.rem_euclid(size as isize) as usize;
        let mag = a[idx].norm();
        let better = mag > best.1 * (1.0 + 1e-12)
            || ((mag - best.1).abs() <= best.1 * 1e-12 && lag.abs() < best.0.abs());
        if better {
            best = (lag, mag);
        }
    }
    Ok(best.0)
}
