use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::ComplexSignal;
use crate::error::{DpdError, Result};

/// Minimum length of the windowed-sinc designs.
pub const MIN_TAPS: usize = 127;

/// Direct convolution is used up to this many taps, FFT convolution above.
const DIRECT_CONV_MAX_TAPS: usize = 256;

/// Hamming-windowed sinc low-pass with `taps` coefficients (forced odd) and
/// unit DC gain.
pub fn design_lowpass(cutoff_hz: f64, sample_rate_hz: f64, taps: usize) -> Result<Vec<f64>> {
    if !(cutoff_hz > 0.0 && cutoff_hz < sample_rate_hz / 2.0) {
        return Err(DpdError::InvalidCutoff {
            cutoff_hz,
            sample_rate_hz,
        });
    }
    let taps = taps.max(1) | 1;
    let fc = cutoff_hz / sample_rate_hz;
    let mid = (taps / 2) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|k| {
            let t = k as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            let w = if taps == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * PI * k as f64 / (taps - 1) as f64).cos()
            };
            sinc * w
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|c| *c /= dc);
    Ok(h)
}

/// Tap count giving a transition band no wider than the cutoff itself, so a
/// tone at twice the cutoff sits in the stopband.
fn taps_for_cutoff(cutoff_hz: f64, sample_rate_hz: f64) -> usize {
    let needed = (4.0 * sample_rate_hz / cutoff_hz).ceil() as usize;
    needed.max(MIN_TAPS) | 1
}

/// Linear-phase low-pass filter. The `(taps - 1) / 2` group delay is removed,
/// so the output has the input's length and timing; samples outside the
/// signal are taken as zero.
pub fn lowpass_filter(signal: &ComplexSignal, cutoff_hz: f64) -> Result<ComplexSignal> {
    let fs = signal.sample_rate_hz();
    let taps = design_lowpass(cutoff_hz, fs, taps_for_cutoff(cutoff_hz, fs))?;
    ComplexSignal::new(fir_filter_centered(signal.samples(), &taps), fs)
}

/// Convolves with an odd-length symmetric FIR and trims the group delay.
pub fn fir_filter_centered(x: &[Complex64], taps: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let half = taps.len() / 2;
    if taps.len() <= DIRECT_CONV_MAX_TAPS {
        return (0..n)
            .map(|i| {
                let mut acc = Complex64::new(0.0, 0.0);
                // y[i] = sum_k h[k] x[i + half - k]
                let lo = (i + half + 1).saturating_sub(n);
                let hi = (i + half).min(taps.len() - 1);
                for (k, h) in taps.iter().enumerate().take(hi + 1).skip(lo) {
                    acc += x[i + half - k] * h;
                }
                acc
            })
            .collect();
    }

    let size = (n + taps.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a = vec![Complex64::new(0.0, 0.0); size];
    let mut b = vec![Complex64::new(0.0, 0.0); size];
    a[..n].copy_from_slice(x);
    for (dst, &h) in b.iter_mut().zip(taps) {
        *dst = Complex64::new(h, 0.0);
    }
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a[half..half + n].iter().map(|v| v * scale).collect()
}
