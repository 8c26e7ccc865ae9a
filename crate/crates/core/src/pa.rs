//! Behavioral power-amplifier (PA) simulator used as the device under test.
//!
//! Per input sample `x[n]`:
//!
//! 1. the thermal level follows the (amplitude-limited) input power through a
//!    one-pole filter, `T <- (1 - alpha) T + alpha |x[n]|^2`;
//! 2. the amplitude `r = |x[n]|` goes through an odd polynomial
//!    `a0 r + (a1 - kc T) r^3 + a2 r^5`, saturating at the first point where
//!    that polynomial stops increasing (or at `max_input_amplitude`);
//! 3. the phase is rotated by `am_pm_strength * r^2`;
//! 4. the result is scaled by `G exp(kg T)` and passed through the memory FIR;
//! 5. optional complex Gaussian noise is added at `output_noise_floor_dbc`
//!    below the mean output power of the call.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DpdError, Result};
use crate::signal::{mean_power, ComplexSignal, DEFAULT_SAMPLE_RATE_HZ};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Thermal time constant of the reference PA.
pub const REFERENCE_THERMAL_TAU_S: f64 = 0.5e-3;

/// Input RMS at which the reference thermal sensitivities were set: the high
/// level of a pulsed signal at this drive moves the gain by about 0.5 dB
/// relative to a level 10 dB lower.
pub const REFERENCE_DRIVE_RMS: f64 = 0.17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PaConfig {
    pub small_signal_gain: Complex64,
    /// Coefficients of `r, r^3, r^5` (up to fifth order).
    pub am_am_poly: Vec<f64>,
    /// Phase rotation in radians per unit `|x|^2`.
    pub am_pm_strength: f64,
    pub memory_taps: Vec<Complex64>,
    pub thermal_alpha: f64,
    pub thermal_gain_sensitivity: Complex64,
    pub thermal_compression_sensitivity: f64,
    /// `None` disables the noise floor.
    pub output_noise_floor_dbc: Option<f64>,
    /// Hard input-amplitude limit of the nonlinearity.
    pub max_input_amplitude: f64,
}

impl Default for PaConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl PaConfig {
    /// The reference amplifier: gain 10, about 3 dB compression and 10 degrees
    /// of AM/PM at `|x| = 1`, a three-tap memory filter and a 0.5 ms thermal
    /// state at 30.72 MS/s.
    pub fn reference() -> Self {
        Self {
            small_signal_gain: Complex64::new(10.0, 0.0),
            am_am_poly: vec![1.0, -0.35, 0.057],
            am_pm_strength: 10f64.to_radians(),
            memory_taps: vec![
                Complex64::new(1.0, 0.0),
                Complex64::from_polar(0.1, 30f64.to_radians()),
                Complex64::from_polar(0.02, -45f64.to_radians()),
            ],
            thermal_alpha: alpha_for_time_constant(REFERENCE_THERMAL_TAU_S, DEFAULT_SAMPLE_RATE_HZ),
            thermal_gain_sensitivity: Complex64::new(-2.2, 0.5),
            thermal_compression_sensitivity: 4.0,
            output_noise_floor_dbc: Some(-70.0),
            max_input_amplitude: 1.5,
        }
    }

    /// Reference amplifier with the thermal couplings removed.
    pub fn time_invariant() -> Self {
        Self {
            thermal_gain_sensitivity: ZERO,
            thermal_compression_sensitivity: 0.0,
            ..Self::reference()
        }
    }

    pub fn without_noise(mut self) -> Self {
        self.output_noise_floor_dbc = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DpdError::InvalidConfig(m));
        if !(self.thermal_alpha > 0.0 && self.thermal_alpha < 1.0) {
            return bad(format!(
                "thermal_alpha must lie in (0, 1), got {}",
                self.thermal_alpha
            ));
        }
        if self.memory_taps.is_empty() {
            return bad("memory_taps must not be empty".into());
        }
        if self.am_am_poly.is_empty() || self.am_am_poly.len() > 3 {
            return bad("am_am_poly needs 1 to 3 coefficients (orders 1, 3, 5)".into());
        }
        if self.am_am_poly[0] <= 0.0 {
            return bad("linear AM/AM coefficient must be positive".into());
        }
        if self.small_signal_gain.norm() == 0.0 {
            return bad("small_signal_gain must be nonzero".into());
        }
        if !(self.max_input_amplitude > 0.0 && self.max_input_amplitude.is_finite()) {
            return bad("max_input_amplitude must be positive".into());
        }
        let finite = self.am_am_poly.iter().all(|v| v.is_finite())
            && self.am_pm_strength.is_finite()
            && self.thermal_compression_sensitivity.is_finite()
            && self.thermal_gain_sensitivity.re.is_finite()
            && self.thermal_gain_sensitivity.im.is_finite()
            && self
                .memory_taps
                .iter()
                .all(|t| t.re.is_finite() && t.im.is_finite());
        if !finite {
            return bad("PA coefficients must be finite".into());
        }
        if let Some(db) = self.output_noise_floor_dbc {
            if !db.is_finite() {
                return bad(format!("output_noise_floor_dbc must be finite, got {db}"));
            }
        }
        Ok(())
    }

    /// True when neither gain nor compression depends on the thermal state.
    pub fn is_time_invariant(&self) -> bool {
        self.thermal_gain_sensitivity == ZERO && self.thermal_compression_sensitivity == 0.0
    }

    /// One settling time in samples: the thermal time constant when it
    /// couples into the output, plus the memory filter span.
    pub fn settling_samples(&self) -> usize {
        let thermal = if self.is_time_invariant() {
            0
        } else {
            self.thermal_time_constant_samples().ceil() as usize
        };
        thermal + self.memory_taps.len() - 1
    }

    /// Linear gain seen by a vanishing input with a cold PA, excluding memory.
    pub fn linear_gain(&self) -> Complex64 {
        self.small_signal_gain * self.am_am_poly[0]
    }

    /// Multiplicative gain drift at thermal level `t`; `1 + kg t` to first order.
    pub fn thermal_gain(&self, t: f64) -> Complex64 {
        (self.thermal_gain_sensitivity * t).exp()
    }

    /// Samples over which the thermal state relaxes by `1/e`.
    pub fn thermal_time_constant_samples(&self) -> f64 {
        -1.0 / (1.0 - self.thermal_alpha).ln()
    }

    fn coeff(&self, k: usize) -> f64 {
        self.am_am_poly.get(k).copied().unwrap_or(0.0)
    }

    /// Amplitude at which the AM/AM curve saturates for thermal level `t`.
    fn saturation_amplitude(&self, t: f64) -> f64 {
        // d/dr of the polynomial, written in u = r^2: 5 a2 u^2 + 3 a1' u + a0.
        let a = 5.0 * self.coeff(2);
        let b = 3.0 * (self.coeff(1) - self.thermal_compression_sensitivity * t);
        let c = self.coeff(0);
        let rmax2 = self.max_input_amplitude * self.max_input_amplitude;
        let u = if a == 0.0 {
            if b < 0.0 {
                -c / b
            } else {
                f64::INFINITY
            }
        } else {
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                f64::INFINITY
            } else {
                let s = disc.sqrt();
                [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)]
                    .into_iter()
                    .filter(|u| *u > 0.0)
                    .fold(f64::INFINITY, f64::min)
            }
        };
        u.min(rmax2).sqrt()
    }

    /// Static AM/AM and AM/PM at thermal level `t`, before gain and memory.
    pub fn static_nonlinearity(&self, x: Complex64, t: f64) -> Complex64 {
        let r = x.norm();
        if r == 0.0 {
            return ZERO;
        }
        let rc = r.min(self.saturation_amplitude(t));
        let r2 = rc * rc;
        let a1 = self.coeff(1) - self.thermal_compression_sensitivity * t;
        let amp = rc * (self.coeff(0) + r2 * (a1 + r2 * self.coeff(2)));
        let phase = x.arg() + self.am_pm_strength * r2;
        Complex64::from_polar(amp, phase)
    }
}

/// One-pole coefficient for a time constant of `tau_s` at `fs`.
pub fn alpha_for_time_constant(tau_s: f64, sample_rate_hz: f64) -> f64 {
    1.0 - (-1.0 / (tau_s * sample_rate_hz)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaState {
    pub thermal_level: f64,
    /// Most recent first: `filter_memory[0]` is the previous FIR input.
    pub filter_memory: Vec<Complex64>,
}

impl PaState {
    pub fn validate(&self, cfg: &PaConfig) -> Result<()> {
        if !(self.thermal_level >= 0.0 && self.thermal_level.is_finite()) {
            return Err(DpdError::InvalidConfig(format!(
                "thermal_level must be finite and nonnegative, got {}",
                self.thermal_level
            )));
        }
        if self.filter_memory.len() + 1 != cfg.memory_taps.len() {
            return Err(DpdError::StructureMismatch(format!(
                "PA state holds {} delay samples, config needs {}",
                self.filter_memory.len(),
                cfg.memory_taps.len() - 1
            )));
        }
        Ok(())
    }
}

/// Cold PA: zero thermal level and an empty delay line.
pub fn pa_initial_state(cfg: &PaConfig) -> PaState {
    PaState {
        thermal_level: 0.0,
        filter_memory: vec![ZERO; cfg.memory_taps.len().saturating_sub(1)],
    }
}

/// Runs the PA over `x` starting from `state`, returning the output and the
/// state after the last sample. `noise_seed` drives the output noise when the
/// noise floor is enabled.
pub fn pa_process(
    x: &ComplexSignal,
    cfg: &PaConfig,
    state: &PaState,
    noise_seed: u64,
) -> Result<(ComplexSignal, PaState)> {
    cfg.validate()?;
    state.validate(cfg)?;
    let alpha = cfg.thermal_alpha;
    let taps = &cfg.memory_taps;
    let rmax2 = cfg.max_input_amplitude * cfg.max_input_amplitude;
    let mut t = state.thermal_level;
    let mut line = state.filter_memory.clone();
    let mut y = Vec::with_capacity(x.len());
    for &xn in x.samples() {
        t = (1.0 - alpha) * t + alpha * xn.norm_sqr().min(rmax2);
        let gain = cfg.small_signal_gain * cfg.thermal_gain(t);
        let v = gain * cfg.static_nonlinearity(xn, t);
        let mut acc = taps[0] * v;
        for (h, z) in taps[1..].iter().zip(&line) {
            acc += h * z;
        }
        if !line.is_empty() {
            line.rotate_right(1);
            line[0] = v;
        }
        y.push(acc);
    }
    if let Some(dbc) = cfg.output_noise_floor_dbc {
        let p = mean_power(&y);
        if p > 0.0 {
            let sigma = (p * 10f64.powf(dbc / 10.0) / 2.0).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            for v in &mut y {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *v += Complex64::new(re, im) * sigma;
            }
        }
    }
    let out = ComplexSignal::new(y, x.sample_rate_hz())?;
    Ok((
        out,
        PaState {
            thermal_level: t,
            filter_memory: line,
        },
    ))
}
