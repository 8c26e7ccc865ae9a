use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::filter::{design_lowpass, fir_filter_centered, MIN_TAPS};
use super::{mean_power, ComplexSignal};
use crate::error::{DpdError, Result};

/// 4096 samples span 0.133 ms at this rate, which is the time base the
/// adaptation experiments are quoted in.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 30.72e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerLevel {
    Low,
    High,
}

/// Bursty test signal: band-limited Gaussian noise whose power toggles between
/// two levels on subframe boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PulsedNoiseConfig {
    pub sample_rate_hz: f64,
    pub noise_bandwidth_hz: f64,
    pub subframe_duration_s: f64,
    pub num_subframes: usize,
    pub power_step_db: f64,
    pub pattern: Vec<PowerLevel>,
    /// RMS of the `high` subframes; `low` subframes sit `power_step_db` below.
    pub high_level_rms: f64,
    pub seed: u64,
}

impl Default for PulsedNoiseConfig {
    fn default() -> Self {
        use PowerLevel::*;
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            noise_bandwidth_hz: 4.0e6,
            subframe_duration_s: 2.0e-3,
            num_subframes: 4,
            power_step_db: 10.0,
            pattern: vec![Low, High, Low, High],
            high_level_rms: 1.0,
            seed: 0,
        }
    }
}

impl PulsedNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DpdError::InvalidConfig(m));
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!(
                "sample_rate_hz must be positive, got {}",
                self.sample_rate_hz
            ));
        }
        if !(self.noise_bandwidth_hz > 0.0 && self.noise_bandwidth_hz <= self.sample_rate_hz / 2.0)
        {
            return bad(format!(
                "noise_bandwidth_hz {} must lie in (0, sample_rate_hz/2]",
                self.noise_bandwidth_hz
            ));
        }
        if !(self.subframe_duration_s.is_finite() && self.subframe_duration_s > 0.0) {
            return bad("subframe_duration_s must be positive".into());
        }
        if self.num_subframes == 0 || self.pattern.is_empty() {
            return bad("pattern must contain at least one subframe".into());
        }
        if self.pattern.len() != self.num_subframes {
            return bad(format!(
                "pattern has {} entries but num_subframes is {}",
                self.pattern.len(),
                self.num_subframes
            ));
        }
        if !self.power_step_db.is_finite() {
            return bad("power_step_db must be finite".into());
        }
        if !(self.high_level_rms.is_finite() && self.high_level_rms > 0.0) {
            return bad("high_level_rms must be positive".into());
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        (self.num_subframes as f64 * self.subframe_duration_s * self.sample_rate_hz).round()
            as usize
    }

    /// Sample index where subframe `k` starts (`k == num_subframes` gives the end).
    pub fn subframe_start(&self, k: usize) -> usize {
        if k >= self.num_subframes {
            return self.total_samples();
        }
        (k as f64 * self.subframe_duration_s * self.sample_rate_hz).round() as usize
    }

    /// Start times in seconds of the subframes that step from low to high power.
    pub fn rising_edges_s(&self) -> Vec<f64> {
        self.pattern
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] == PowerLevel::Low && w[1] == PowerLevel::High)
            .map(|(k, _)| self.subframe_start(k + 1) as f64 / self.sample_rate_hz)
            .collect()
    }
}

fn gaussian_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im)
        })
        .collect()
}

/// Generates the pulsed-noise signal described by `cfg`.
///
/// The whole record is drawn as complex white Gaussian noise, band-limited by
/// a Hamming-windowed sinc (127 taps unless the band is too narrow for that),
/// and then every subframe is rescaled to its exact target RMS.
pub fn gen_pulsed_noise(cfg: &PulsedNoiseConfig) -> Result<ComplexSignal> {
    cfg.validate()?;
    let fs = cfg.sample_rate_hz;
    let len = cfg.total_samples();
    if len == 0 {
        return Err(DpdError::InvalidConfig(
            "pulsed signal has zero samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = gaussian_noise(&mut rng, len);

    // Pull the -6 dB point inside the band by half the Hamming transition
    // width so the skirt stays within +-noise_bandwidth_hz.
    let bw = cfg.noise_bandwidth_hz;
    let taps = ((3.3 * fs / (bw / 2.0)).ceil() as usize).max(MIN_TAPS) | 1;
    let design_cutoff = bw - 1.65 * fs / taps as f64;
    let h = design_lowpass(design_cutoff, fs, taps)?;
    let mut samples = fir_filter_centered(&noise, &h);

    let low_rms = cfg.high_level_rms * 10f64.powf(-cfg.power_step_db / 20.0);
    for (k, level) in cfg.pattern.iter().enumerate() {
        let (a, b) = (cfg.subframe_start(k), cfg.subframe_start(k + 1));
        if a >= b {
            continue;
        }
        let target = match level {
            PowerLevel::High => cfg.high_level_rms,
            PowerLevel::Low => low_rms,
        };
        let rms = mean_power(&samples[a..b]).sqrt();
        if rms > 0.0 {
            let g = target / rms;
            samples[a..b].iter_mut().for_each(|s| *s *= g);
        }
    }
    ComplexSignal::new(samples, fs)
}

/// Multicarrier stand-in for an LTE downlink test signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfdmConfig {
    pub sample_rate_hz: f64,
    pub occupied_bandwidth_hz: f64,
    pub num_symbols: usize,
    pub seed: u64,
    /// Clip-and-filter crest factor limit applied per symbol; `None` disables it.
    pub papr_limit_db: Option<f64>,
    pub cfr_iterations: usize,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            occupied_bandwidth_hz: 18.0e6,
            num_symbols: 140,
            seed: 0,
            papr_limit_db: Some(9.0),
            cfr_iterations: 4,
        }
    }
}

impl OfdmConfig {
    /// FFT length giving roughly 15 kHz subcarrier spacing (2048 at 30.72 MS/s).
    pub fn fft_size(&self) -> usize {
        ((self.sample_rate_hz / 15.0e3).round() as usize)
            .next_power_of_two()
            .max(64)
    }

    /// Normal cyclic prefix, 144 samples for a 2048-point FFT.
    pub fn cyclic_prefix(&self) -> usize {
        self.fft_size() * 9 / 128
    }

    pub fn symbol_len(&self) -> usize {
        self.fft_size() + self.cyclic_prefix()
    }

    /// Number of loaded subcarriers on each side of DC.
    fn half_carriers(&self) -> usize {
        let spacing = self.sample_rate_hz / self.fft_size() as f64;
        (self.occupied_bandwidth_hz / 2.0 / spacing).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DpdError::InvalidConfig(m));
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive".into());
        }
        // Two-sided occupied band, +-occupied/2 around DC, must stay below Nyquist.
        if !(self.occupied_bandwidth_hz > 0.0 && self.occupied_bandwidth_hz < self.sample_rate_hz) {
            return bad(format!(
                "occupied_bandwidth_hz {} must lie in (0, sample_rate_hz)",
                self.occupied_bandwidth_hz
            ));
        }
        if self.num_symbols == 0 {
            return bad("num_symbols must be at least 1".into());
        }
        if self.half_carriers() == 0 {
            return bad("occupied bandwidth narrower than one subcarrier".into());
        }
        if let Some(p) = self.papr_limit_db {
            if !(p.is_finite() && p > 0.0) {
                return bad("papr_limit_db must be positive".into());
            }
        }
        Ok(())
    }
}

/// OFDM surrogate with QPSK on every subcarrier within the occupied band
/// (DC left empty), a normal cyclic prefix and a 9 dB clip-and-filter crest
/// factor limit. The output has unit RMS.
pub fn gen_ofdm_surrogate(
    sample_rate_hz: f64,
    occupied_bandwidth_hz: f64,
    num_symbols: usize,
    seed: u64,
) -> Result<ComplexSignal> {
    gen_ofdm(&OfdmConfig {
        sample_rate_hz,
        occupied_bandwidth_hz,
        num_symbols,
        seed,
        ..OfdmConfig::default()
    })
}

pub fn gen_ofdm(cfg: &OfdmConfig) -> Result<ComplexSignal> {
    cfg.validate()?;
    let nfft = cfg.fft_size();
    let cp = cfg.cyclic_prefix();
    let half = cfg.half_carriers() as isize;
    let bins: Vec<usize> = (-half..=half)
        .filter(|&k| k != 0)
        .map(|k| k.rem_euclid(nfft as isize) as usize)
        .collect();
    let mut in_band = vec![false; nfft];
    bins.iter().for_each(|&b| in_band[b] = true);

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let amp = std::f64::consts::FRAC_1_SQRT_2;

    let mut out = Vec::with_capacity(cfg.num_symbols * (nfft + cp));
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for _ in 0..cfg.num_symbols {
        buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for &b in &bins {
            let re = if rng.gen::<bool>() { amp } else { -amp };
            let im = if rng.gen::<bool>() { amp } else { -amp };
            buf[b] = Complex64::new(re, im);
        }
        inv.process(&mut buf);

        if let Some(limit_db) = cfg.papr_limit_db {
            for _ in 0..cfg.cfr_iterations {
                let level = mean_power(&buf).sqrt() * 10f64.powf(limit_db / 20.0);
                for v in buf.iter_mut() {
                    let a = v.norm();
                    if a > level {
                        *v *= level / a;
                    }
                }
                fwd.process(&mut buf);
                for (v, &keep) in buf.iter_mut().zip(&in_band) {
                    if keep {
                        *v /= nfft as f64;
                    } else {
                        *v = Complex64::new(0.0, 0.0);
                    }
                }
                inv.process(&mut buf);
            }
        }
        out.extend_from_slice(&buf[nfft - cp..]);
        out.extend_from_slice(&buf);
    }
    let rms = mean_power(&out).sqrt();
    out.iter_mut().for_each(|v| *v /= rms);
    ComplexSignal::new(out, cfg.sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subframe_power(sig: &ComplexSignal, cfg: &PulsedNoiseConfig, k: usize) -> f64 {
        mean_power(&sig.samples()[cfg.subframe_start(k)..cfg.subframe_start(k + 1)])
    }

    #[test]
    fn rising_edges() {
        let cfg = PulsedNoiseConfig::default();
        let e = cfg.rising_edges_s();
        assert_eq!(e.len(), 2);
        assert!((e[0] - 2.0e-3).abs() < 1e-12 && (e[1] - 6.0e-3).abs() < 1e-12);
        let flat = PulsedNoiseConfig {
            pattern: vec![PowerLevel::High; 4],
            ..cfg
        };
        assert!(flat.rising_edges_s().is_empty());
    }

    #[test]
    fn pulsed_default_length_and_step() {
        let cfg = PulsedNoiseConfig::default();
        let s = gen_pulsed_noise(&cfg).unwrap();
        assert_eq!(s.len(), 245_760);
        let p: Vec<f64> = (0..4).map(|k| subframe_power(&s, &cfg, k)).collect();
        for (lo, hi) in [(0, 1), (2, 3), (2, 1), (0, 3)] {
            let step = 10.0 * (p[hi] / p[lo]).log10();
            assert!((step - 10.0).abs() <= 0.3, "{step}");
        }
    }

    #[test]
    fn pulsed_zero_step_is_flat() {
        let cfg = PulsedNoiseConfig {
            power_step_db: 0.0,
            ..Default::default()
        };
        let s = gen_pulsed_noise(&cfg).unwrap();
        let p: Vec<f64> = (0..4).map(|k| subframe_power(&s, &cfg, k)).collect();
        for v in &p {
            assert!((10.0 * (v / p[0]).log10()).abs() <= 0.3);
        }
    }

    #[test]
    fn pulsed_is_deterministic() {
        let cfg = PulsedNoiseConfig {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(
            gen_pulsed_noise(&cfg).unwrap(),
            gen_pulsed_noise(&cfg).unwrap()
        );
        let other = PulsedNoiseConfig {
            seed: 43,
            ..cfg.clone()
        };
        assert_ne!(
            gen_pulsed_noise(&other).unwrap(),
            gen_pulsed_noise(&cfg).unwrap()
        );
    }

    #[test]
    fn pulsed_rejects_bad_configs() {
        let over_nyquist = PulsedNoiseConfig {
            noise_bandwidth_hz: 20e6,
            ..Default::default()
        };
        assert!(gen_pulsed_noise(&over_nyquist).is_err());
        let empty = PulsedNoiseConfig {
            pattern: vec![],
            num_subframes: 0,
            ..Default::default()
        };
        assert!(gen_pulsed_noise(&empty).is_err());
        let mismatch = PulsedNoiseConfig {
            num_subframes: 3,
            ..Default::default()
        };
        assert!(gen_pulsed_noise(&mismatch).is_err());
    }

    #[test]
    fn pulsed_power_stays_in_band() {
        let cfg = PulsedNoiseConfig::default();
        let s = gen_pulsed_noise(&cfg).unwrap();
        let n = s.len().next_power_of_two();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..s.len()].copy_from_slice(s.samples());
        FftPlanner::<f64>::new()
            .plan_fft_forward(n)
            .process(&mut buf);
        let total: f64 = buf.iter().map(|v| v.norm_sqr()).sum();
        let inside: f64 = buf
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let f = if *k < n / 2 {
                    *k as f64
                } else {
                    *k as f64 - n as f64
                };
                (f * cfg.sample_rate_hz / n as f64).abs() <= cfg.noise_bandwidth_hz
            })
            .map(|(_, v)| v.norm_sqr())
            .sum();
        assert!(inside / total >= 0.99, "{}", inside / total);
    }

    #[test]
    fn ofdm_papr_and_length() {
        let s = gen_ofdm_surrogate(30.72e6, 18e6, 140, 5).unwrap();
        assert_eq!(s.len(), 140 * (2048 + 144));
        let papr = s.papr_db();
        assert!((8.0..=12.0).contains(&papr), "{papr}");
        assert!((s.rms() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ofdm_single_symbol_length() {
        let s = gen_ofdm_surrogate(30.72e6, 18e6, 1, 5).unwrap();
        assert_eq!(s.len(), 2048 + 144);
    }

    #[test]
    fn ofdm_deterministic_and_validated() {
        let a = gen_ofdm_surrogate(30.72e6, 18e6, 3, 9).unwrap();
        assert_eq!(a, gen_ofdm_surrogate(30.72e6, 18e6, 3, 9).unwrap());
        assert!(gen_ofdm_surrogate(30.72e6, 18e6, 0, 9).is_err());
        assert!(gen_ofdm_surrogate(30.72e6, 31e6, 1, 9).is_err());
    }
}
