//! Open-loop emulation of closed-loop DPD adaptation.
//!
//! The data record `u` is preceded by `init_len` known samples and cut into
//! analysis blocks of `S` samples. For every block a window of `W` samples
//! ending at the block is "uploaded": the PA runs from a cold state over the
//! whole window, the leading `W - S` samples warm it up, and only the final
//! block is measured and used for the parameter update. Samples that were
//! predistorted at earlier steps are replayed unchanged.

use std::io::Write;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DpdError, Result};
use crate::estimation::{
    fit_proactive, fit_static, ila_update, robust_update, UpdateAlgorithm, UpdateConfig,
};
use crate::models::{
    compute_state, model_output_range, proactive_output_range, regressor_rows, ModelStructure,
    ParameterSet, StateConfig,
};
use crate::pa::{pa_initial_state, pa_process, PaConfig};
use crate::signal::{mean_power, ComplexSignal};

/// NMSE reported for an exact match.
pub const NMSE_FLOOR_DB: f64 = -300.0;

/// Full-signal ILA passes used by the pretrained initialization.
pub const PRETRAIN_PASSES: usize = 3;

/// Quantizer full scale in standard deviations of each rail.
pub const QUANTIZER_LOADING_SIGMA: f64 = 4.0;

/// Overlap, in PA settling times, that makes a cold-started window behave
/// like the continuous stream.
pub const WARMUP_SETTLING_MULTIPLE: usize = 5;

/// Default window overlap for `pa`.
pub fn default_overlap(pa: &PaConfig) -> usize {
    WARMUP_SETTLING_MULTIPLE * pa.settling_samples()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub window_len: usize,
    pub step_len: usize,
    pub init_len: usize,
}

impl Schedule {
    /// Window of `step_len + overlap` with exactly enough initialization data
    /// to cover the first window.
    pub fn with_overlap(step_len: usize, overlap: usize) -> Self {
        Self {
            window_len: step_len + overlap,
            step_len,
            init_len: overlap,
        }
    }

    pub fn overlap(&self) -> usize {
        self.window_len - self.step_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.step_len == 0 {
            return Err(DpdError::Schedule(
                "window_len and step_len must be positive".into(),
            ));
        }
        if self.step_len > self.window_len {
            return Err(DpdError::Schedule(format!(
                "step_len {} exceeds window_len {}",
                self.step_len, self.window_len
            )));
        }
        if self.init_len < self.window_len - self.step_len {
            return Err(DpdError::Schedule(format!(
                "init_len {} cannot cover the first window overlap of {}",
                self.init_len,
                self.window_len - self.step_len
            )));
        }
        Ok(())
    }
}

/// One upload: `[window_start, window_end)` with the analysis block at its end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub window_start: usize,
    pub window_end: usize,
    pub analysis_start: usize,
    pub analysis_end: usize,
}

impl WindowPlan {
    pub fn analysis_len(&self) -> usize {
        self.analysis_end - self.analysis_start
    }
}

/// Tiles `[init_len, total_len)` with analysis blocks of `step_len`. When the
/// data is not a whole number of blocks the last block is shorter; its window
/// still has the full length.
pub fn plan_windows(total_len: usize, schedule: &Schedule) -> Result<Vec<WindowPlan>> {
    schedule.validate()?;
    if total_len < schedule.window_len {
        return Err(DpdError::SignalTooShort {
            len: total_len,
            required: schedule.window_len,
        });
    }
    if total_len <= schedule.init_len {
        return Err(DpdError::Schedule(format!(
            "no data after the {}-sample initialization block",
            schedule.init_len
        )));
    }
    let mut out = Vec::new();
    let mut start = schedule.init_len;
    while start < total_len {
        let end = (start + schedule.step_len).min(total_len);
        out.push(WindowPlan {
            window_start: end - schedule.window_len,
            window_end: end,
            analysis_start: start,
            analysis_end: end,
        });
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImpairmentKind {
    None,
    /// Complex white Gaussian noise at the given SNR; `+inf` means no noise.
    AwgnSnr {
        target_snr_db: f64,
    },
    /// Uniform mid-rise quantizer on I and Q.
    Quantizer {
        bits: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackImpairment {
    #[serde(flatten)]
    pub kind: ImpairmentKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FeedbackImpairment {
    fn default() -> Self {
        Self::none()
    }
}

impl FeedbackImpairment {
    pub fn none() -> Self {
        Self {
            kind: ImpairmentKind::None,
            seed: 0,
        }
    }

    pub fn awgn(target_snr_db: f64, seed: u64) -> Self {
        Self {
            kind: ImpairmentKind::AwgnSnr { target_snr_db },
            seed,
        }
    }

    pub fn quantizer(bits: u32, seed: u64) -> Self {
        Self {
            kind: ImpairmentKind::Quantizer { bits },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ImpairmentKind::AwgnSnr { target_snr_db }
                if target_snr_db.is_nan() || target_snr_db == f64::NEG_INFINITY =>
            {
                Err(DpdError::InvalidConfig(format!(
                    "target_snr_db must be finite or +inf, got {target_snr_db}"
                )))
            }
            ImpairmentKind::Quantizer { bits } if !(1..=48).contains(&bits) => Err(
                DpdError::InvalidConfig(format!("quantizer bits must lie in 1..=48, got {bits}")),
            ),
            _ => Ok(()),
        }
    }

    /// The same impairment with its noise seed advanced by `k`.
    pub fn with_seed_offset(&self, k: u64) -> Self {
        Self {
            kind: self.kind,
            seed: self.seed.wrapping_add(k),
        }
    }

    pub fn is_none(&self) -> bool {
        match self.kind {
            ImpairmentKind::None => true,
            ImpairmentKind::AwgnSnr { target_snr_db } => target_snr_db == f64::INFINITY,
            ImpairmentKind::Quantizer { .. } => false,
        }
    }
}

/// The idealized quantizer SNR, `6.02 n` dB.
pub fn bits_to_snr_db(n: u32) -> f64 {
    // Integer arithmetic first so the result is the correctly rounded decimal.
    (602 * n as u64) as f64 / 100.0
}

fn impair_samples(y: &[Complex64], imp: &FeedbackImpairment) -> Vec<Complex64> {
    if imp.is_none() {
        return y.to_vec();
    }
    let p = mean_power(y);
    if p == 0.0 {
        return y.to_vec();
    }
    match imp.kind {
        ImpairmentKind::None => y.to_vec(),
        ImpairmentKind::AwgnSnr { target_snr_db } => {
            let mut rng = ChaCha8Rng::seed_from_u64(imp.seed);
            let noise: Vec<Complex64> = (0..y.len())
                .map(|_| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    Complex64::new(re, im)
                })
                .collect();
            // Rescale the realization itself so the SNR is exact.
            let k = (p / 10f64.powf(target_snr_db / 10.0) / mean_power(&noise)).sqrt();
            y.iter().zip(&noise).map(|(s, n)| s + n * k).collect()
        }
        ImpairmentKind::Quantizer { bits } => {
            let sigma = (p / 2.0).sqrt();
            let full = QUANTIZER_LOADING_SIGMA * sigma;
            let levels = 2f64.powi(bits as i32);
            let step = 2.0 * full / levels;
            let top = full - step / 2.0;
            let q = |v: f64| (step * ((v / step).floor() + 0.5)).clamp(-top, top);
            y.iter().map(|s| Complex64::new(q(s.re), q(s.im))).collect()
        }
    }
}

/// Adds the configured feedback-path impairment. Deterministic per seed.
pub fn apply_feedback_impairment(
    y: &ComplexSignal,
    imp: &FeedbackImpairment,
) -> Result<ComplexSignal> {
    imp.validate()?;
    if y.is_empty() {
        return Err(DpdError::InvalidSignal(
            "impairment of an empty signal".into(),
        ));
    }
    ComplexSignal::new(impair_samples(y.samples(), imp), y.sample_rate_hz())
}

fn nmse_raw(reference: &[Complex64], estimate: &[Complex64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(DpdError::LengthMismatch {
            expected: reference.len(),
            actual: estimate.len(),
        });
    }
    let pr: f64 = reference.iter().map(|v| v.norm_sqr()).sum();
    if pr == 0.0 {
        return Err(DpdError::ZeroSignal);
    }
    let pe: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (e - r).norm_sqr())
        .sum();
    Ok(if pe == 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * (pe / pr).log10()).max(NMSE_FLOOR_DB)
    })
}

/// `10 log10(sum |e - r|^2 / sum |r|^2)`, floored at [`NMSE_FLOOR_DB`].
pub fn nmse_db(reference: &ComplexSignal, estimate: &ComplexSignal) -> Result<f64> {
    nmse_raw(reference.samples(), estimate.samples())
}

/// NMSE after scaling `estimate` by the complex least-squares gain onto
/// `reference`.
pub fn gain_normalized_nmse_db(reference: &[Complex64], estimate: &[Complex64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(DpdError::LengthMismatch {
            expected: reference.len(),
            actual: estimate.len(),
        });
    }
    let num: Complex64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| e.conj() * r)
        .sum();
    let den: f64 = estimate.iter().map(|e| e.norm_sqr()).sum();
    let g = if den > 0.0 {
        num / den
    } else {
        Complex64::new(0.0, 0.0)
    };
    let scaled: Vec<Complex64> = estimate.iter().map(|e| e * g).collect();
    nmse_raw(reference, &scaled)
}

fn snr_db(clean: &[Complex64], noisy: &[Complex64]) -> f64 {
    let pe: f64 = clean
        .iter()
        .zip(noisy)
        .map(|(c, n)| (n - c).norm_sqr())
        .sum();
    if pe == 0.0 {
        return f64::INFINITY;
    }
    let ps: f64 = clean.iter().map(|c| c.norm_sqr()).sum();
    10.0 * (ps / pe).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptationMode {
    /// Parameters updated from every analysis block.
    Reactive,
    /// Fixed state-dependent parameters `theta + s[n] theta_dyn`.
    Proactive,
    /// Fixed static parameters.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSetup {
    pub update: UpdateConfig,
    pub pa: PaConfig,
    pub schedule: Schedule,
    pub impairment: FeedbackImpairment,
    pub mode: AdaptationMode,
    pub state: StateConfig,
    /// Seed of the PA output noise; step `k` uses `pa_noise_seed + k`.
    pub pa_noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step_index: usize,
    pub time_s: f64,
    pub theta: ParameterSet,
    pub nmse_db: f64,
    pub feedback_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptationTrace {
    pub steps: Vec<TraceRecord>,
}

impl AdaptationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn nmse(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.nmse_db).collect()
    }

    /// CSV with columns `step,time_s,nmse_db,feedback_snr_db,theta_file`.
    /// `theta_file(k)` names the snapshot file of step `k`, or `None` to
    /// leave the column empty.
    pub fn write_csv<W: Write>(
        &self,
        mut w: W,
        theta_file: impl Fn(usize) -> Option<String>,
    ) -> Result<()> {
        writeln!(w, "step,time_s,nmse_db,feedback_snr_db,theta_file")?;
        for r in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.step_index,
                r.time_s,
                r.nmse_db,
                r.feedback_snr_db,
                theta_file(r.step_index).unwrap_or_default()
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The last `init_len` samples of `u`, wrapping around when `u` is shorter:
/// the record as if it had been playing cyclically before the start.
pub fn cyclic_init_data(u: &ComplexSignal, init_len: usize) -> Result<ComplexSignal> {
    if u.is_empty() {
        return Err(DpdError::InvalidSignal("empty data record".into()));
    }
    let n = u.len();
    let s = u.samples();
    let v = (0..init_len)
        .map(|i| s[(n - init_len % n + i) % n])
        .collect();
    ComplexSignal::new(v, u.sample_rate_hz())
}

fn assemble(
    u: &ComplexSignal,
    init_data: &ComplexSignal,
    init_len: usize,
) -> Result<ComplexSignal> {
    if init_data.len() < init_len {
        return Err(DpdError::SignalTooShort {
            len: init_data.len(),
            required: init_len,
        });
    }
    init_data
        .slice(init_data.len() - init_len, init_data.len())?
        .concat(u)
}

/// Predistorter output over `range` of `full`, with earlier samples as history.
fn predistort(
    full: &[Complex64],
    state: Option<&[f64]>,
    range: std::ops::Range<usize>,
    params: &ParameterSet,
) -> Result<Vec<Complex64>> {
    match (state, params.is_proactive()) {
        (Some(s), true) => proactive_output_range(full, s, range, params),
        (None, false) => model_output_range(full, range, params),
        _ => Err(DpdError::StructureMismatch(
            "proactive parameters need a state signal and vice versa".into(),
        )),
    }
}

/// Runs the windowed adaptation loop and returns one trace record per block.
pub fn run_adaptation(
    u: &ComplexSignal,
    init_data: &ComplexSignal,
    initial: &ParameterSet,
    setup: &AdaptationSetup,
) -> Result<AdaptationTrace> {
    setup.update.validate()?;
    setup.pa.validate()?;
    setup.impairment.validate()?;
    initial.validate()?;
    let sched = setup.schedule;
    let full = assemble(u, init_data, sched.init_len)?;
    let plans = plan_windows(full.len(), &sched)?;
    let fs = full.sample_rate_hz();
    let x = full.samples();

    let proactive = setup.mode == AdaptationMode::Proactive;
    if proactive != initial.is_proactive() {
        return Err(DpdError::StructureMismatch(format!(
            "{:?} mode does not match the initial parameter set",
            setup.mode
        )));
    }
    if setup.mode == AdaptationMode::Reactive
        && setup.update.algorithm == UpdateAlgorithm::ProactiveStatic
    {
        return Err(DpdError::InvalidConfig(
            "reactive mode needs the ila or robust update".into(),
        ));
    }
    let state = if proactive {
        Some(compute_state(&full, &setup.state)?)
    } else {
        None
    };
    let state = state.as_deref();

    let structure = initial.structure.clone();
    let ctx_len = structure.memory_depth;
    let g_norm = setup.pa.linear_gain();
    let mut params = initial.clone();

    // Predistorted signal as transmitted so far.
    let mut pd = vec![Complex64::new(0.0, 0.0); x.len()];
    pd[..sched.init_len].copy_from_slice(&predistort(x, state, 0..sched.init_len, &params)?);

    let mut trace = AdaptationTrace::default();
    for (k, plan) in plans.iter().enumerate() {
        let (a, b) = (plan.analysis_start, plan.analysis_end);
        pd[a..b].copy_from_slice(&predistort(x, state, a..b, &params)?);

        let window = ComplexSignal::new(pd[plan.window_start..b].to_vec(), fs)?;
        let pa_cfg = &setup.pa;
        let (y_win, _) = pa_process(
            &window,
            pa_cfg,
            &pa_initial_state(pa_cfg),
            setup.pa_noise_seed.wrapping_add(k as u64),
        )?;
        let yw = y_win.samples();
        let off = a - plan.window_start;
        let y = &yw[off..];
        let nmse = gain_normalized_nmse_db(&x[a..b], y)?;

        // Feedback path: the analysis block plus model-memory context.
        let ctx = ctx_len.min(off);
        let fb: Vec<Complex64> = yw[off - ctx..].iter().map(|v| v / g_norm).collect();
        let imp = setup.impairment.with_seed_offset(k as u64);
        let fb_noisy = impair_samples(&fb, &imp);
        let fb_snr = snr_db(&fb[ctx..], &fb_noisy[ctx..]);

        let rows = b - a;
        if setup.mode == AdaptationMode::Reactive && rows >= structure.n_coeff() {
            let h_y = regressor_rows(&fb_noisy, ctx, &structure);
            let target = &pd[a..b];
            params.theta = match setup.update.algorithm {
                UpdateAlgorithm::Ila => ila_update(&params.theta, &h_y, target, &setup.update)?,
                UpdateAlgorithm::Robust => {
                    let h_x = regressor_rows(&pd[a - ctx..b], ctx, &structure);
                    robust_update(&params.theta, &h_y, &h_x, target, &setup.update)?
                }
                UpdateAlgorithm::ProactiveStatic => unreachable!("rejected above"),
            };
        }

        trace.steps.push(TraceRecord {
            step_index: k,
            time_s: (a - sched.init_len) as f64 / fs,
            theta: params.clone(),
            nmse_db: nmse,
            feedback_snr_db: fb_snr,
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Fitted on full-signal passes through the PA before adaptation starts.
    Pretrained,
    /// Unit linear tap, everything else zero.
    Cold,
}

/// Initial parameters for `structure`. Pretraining runs [`PRETRAIN_PASSES`]
/// full-signal ILA iterations (predistort, PA, postdistorter fit with a full
/// step); with `proactive` set the fit is the joint state-dependent one, the
/// predistorter using the state of `u` and the postdistorter that of the
/// normalized PA output.
pub fn initial_parameters(
    kind: InitKind,
    u: &ComplexSignal,
    structure: &ModelStructure,
    proactive: Option<&StateConfig>,
    pa: &PaConfig,
    regularization: f64,
    noise_seed: u64,
) -> Result<ParameterSet> {
    let cold = ParameterSet::unit_linear(structure.clone());
    let cold = if proactive.is_some() {
        cold.with_zero_dyn()
    } else {
        cold
    };
    if kind == InitKind::Cold {
        return Ok(cold);
    }
    let s_u = proactive.map(|c| compute_state(u, c)).transpose()?;
    let g = pa.linear_gain();
    let mut params = cold;
    for pass in 0..PRETRAIN_PASSES {
        let x = ComplexSignal::new(
            predistort(u.samples(), s_u.as_deref(), 0..u.len(), &params)?,
            u.sample_rate_hz(),
        )?;
        let (y, _) = pa_process(
            &x,
            pa,
            &pa_initial_state(pa),
            noise_seed.wrapping_add(pass as u64),
        )?;
        let yn = ComplexSignal::new(
            y.samples().iter().map(|v| v / g).collect(),
            y.sample_rate_hz(),
        )?;
        params = match proactive {
            Some(c) => {
                let s_y = compute_state(&yn, c)?;
                fit_proactive(&yn, &x, &s_y, structure, regularization)?
            }
            None => fit_static(&yn, &x, structure, regularization)?,
        };
    }
    Ok(params)
}

/// Per-block NMSE between windowed cold-start PA runs and one continuous
/// pass, with the DPD frozen at `params` and the PA noise disabled.
pub fn warmup_equivalence(
    u: &ComplexSignal,
    init_data: &ComplexSignal,
    params: &ParameterSet,
    pa: &PaConfig,
    schedule: &Schedule,
    state_cfg: &StateConfig,
) -> Result<Vec<f64>> {
    let pa = pa.clone().without_noise();
    let full = assemble(u, init_data, schedule.init_len)?;
    let plans = plan_windows(full.len(), schedule)?;
    let state = if params.is_proactive() {
        Some(compute_state(&full, state_cfg)?)
    } else {
        None
    };
    let pd = ComplexSignal::new(
        predistort(full.samples(), state.as_deref(), 0..full.len(), params)?,
        full.sample_rate_hz(),
    )?;
    let (stream, _) = pa_process(&pd, &pa, &pa_initial_state(&pa), 0)?;
    plans
        .iter()
        .map(|p| {
            let win = pd.slice(p.window_start, p.window_end)?;
            let (y, _) = pa_process(&win, &pa, &pa_initial_state(&pa), 0)?;
            let off = p.analysis_start - p.window_start;
            nmse_raw(
                &stream.samples()[p.analysis_start..p.analysis_end],
                &y.samples()[off..],
            )
        })
        .collect()
}

/// Number of trailing steps treated as steady state: the last 10 %, at least one.
fn steady_count(n: usize) -> usize {
    n.div_ceil(10).max(1)
}

/// Mean NMSE over the last 10 % of the trace.
pub fn steady_state_nmse_db(trace: &AdaptationTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(DpdError::InvalidSignal("empty trace".into()));
    }
    let n = steady_count(trace.len());
    let tail = &trace.steps[trace.len() - n..];
    Ok(tail.iter().map(|r| r.nmse_db).sum::<f64>() / n as f64)
}

/// Earliest `time_s` after which every NMSE stays within `tolerance_db` of
/// the steady state; `None` if even the last step is outside.
pub fn convergence_time(trace: &AdaptationTrace, tolerance_db: f64) -> Result<Option<f64>> {
    let steady = steady_state_nmse_db(trace)?;
    let mut first = None;
    for (i, r) in trace.steps.iter().enumerate().rev() {
        if (r.nmse_db - steady).abs() <= tolerance_db {
            first = Some(i);
        } else {
            break;
        }
    }
    Ok(first.map(|i| trace.steps[i].time_s))
}

/// Steady-state NMSE of `noisy` minus that of `clean`.
pub fn degradation_db(noisy: &AdaptationTrace, clean: &AdaptationTrace) -> Result<f64> {
    let same = noisy.len() == clean.len()
        && noisy
            .steps
            .iter()
            .zip(&clean.steps)
            .all(|(a, b)| a.time_s == b.time_s);
    if !same {
        return Err(DpdError::Schedule(
            "traces come from different schedules".into(),
        ));
    }
    Ok(steady_state_nmse_db(noisy)? - steady_state_nmse_db(clean)?)
}

/// Blocks averaged before a power step to get the reference level.
pub const PRE_STEP_BLOCKS: usize = 3;

/// NMSE excursion after each time in `step_times_s`: the peak over blocks
/// overlapping `[t, t + window_s)` minus the mean of the
/// [`PRE_STEP_BLOCKS`] blocks that end at or before `t`. Each block spans
/// `block_s` seconds from its `time_s`. Steps without enough history or any
/// following block are skipped.
pub fn step_excursions_db(
    trace: &AdaptationTrace,
    step_times_s: &[f64],
    block_s: f64,
    window_s: f64,
) -> Result<Vec<f64>> {
    if !(block_s > 0.0 && window_s > 0.0) {
        return Err(DpdError::InvalidConfig(
            "block and excursion window durations must be positive".into(),
        ));
    }
    // Half a sample of slack keeps exactly aligned boundaries on the right side.
    let eps = 1e-9 * block_s;
    let mut out = Vec::new();
    for &t in step_times_s {
        let before: Vec<f64> = trace
            .steps
            .iter()
            .filter(|r| r.time_s + block_s <= t + eps)
            .map(|r| r.nmse_db)
            .collect();
        let peak = trace
            .steps
            .iter()
            .filter(|r| r.time_s + block_s > t + eps && r.time_s < t + window_s - eps)
            .map(|r| r.nmse_db)
            .fold(f64::NEG_INFINITY, f64::max);
        if before.len() < PRE_STEP_BLOCKS || peak == f64::NEG_INFINITY {
            continue;
        }
        let tail = &before[before.len() - PRE_STEP_BLOCKS..];
        let reference = tail.iter().sum::<f64>() / PRE_STEP_BLOCKS as f64;
        out.push(peak - reference);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelStructure;
    use crate::signal::{gen_ofdm_surrogate, normalize_rms};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn noise(len: usize, seed: u64) -> ComplexSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..len)
            .map(|_| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                c(re, im) / 2f64.sqrt()
            })
            .collect();
        ComplexSignal::new(v, 30.72e6).unwrap()
    }

    #[test]
    fn plan_small_example() {
        let s = Schedule {
            window_len: 4,
            step_len: 2,
            init_len: 2,
        };
        let p = plan_windows(12, &s).unwrap();
        let blocks: Vec<_> = p
            .iter()
            .map(|w| (w.analysis_start, w.analysis_end))
            .collect();
        let wins: Vec<_> = p.iter().map(|w| (w.window_start, w.window_end)).collect();
        assert_eq!(blocks, vec![(2, 4), (4, 6), (6, 8), (8, 10), (10, 12)]);
        assert_eq!(wins, vec![(0, 4), (2, 6), (4, 8), (6, 10), (8, 12)]);
    }

    #[test]
    fn plan_disjoint_windows_when_step_equals_window() {
        let s = Schedule {
            window_len: 5,
            step_len: 5,
            init_len: 0,
        };
        let p = plan_windows(20, &s).unwrap();
        assert_eq!(p.len(), 4);
        for (k, w) in p.iter().enumerate() {
            assert_eq!((w.window_start, w.window_end), (5 * k, 5 * k + 5));
            assert_eq!(
                (w.analysis_start, w.analysis_end),
                (w.window_start, w.window_end)
            );
        }
    }

    #[test]
    fn plan_long_measurement_step_count() {
        let s = Schedule {
            window_len: 120_000,
            step_len: 1024,
            init_len: 120_000 - 1024,
        };
        let p = plan_windows(1_200_000, &s).unwrap();
        let full = p.iter().filter(|w| w.analysis_len() == 1024).count();
        assert_eq!(full, 1055);
        assert_eq!(p.len(), 1056);
    }

    #[test]
    fn plan_errors() {
        let s = Schedule {
            window_len: 10,
            step_len: 4,
            init_len: 6,
        };
        assert!(matches!(
            plan_windows(9, &s),
            Err(DpdError::SignalTooShort { .. })
        ));
        let bad = Schedule {
            window_len: 4,
            step_len: 5,
            init_len: 0,
        };
        assert!(plan_windows(100, &bad).is_err());
        let short_init = Schedule {
            window_len: 10,
            step_len: 4,
            init_len: 5,
        };
        assert!(plan_windows(100, &short_init).is_err());
        let all_init = Schedule {
            window_len: 10,
            step_len: 10,
            init_len: 10,
        };
        assert!(plan_windows(10, &all_init).is_err());
    }

    proptest! {
        #[test]
        fn plan_tiles_exactly(total in 1usize..5000, w in 1usize..400, s_frac in 0.0f64..=1.0, extra in 0usize..50) {
            let s = ((w as f64 * s_frac).ceil() as usize).clamp(1, w);
            let sched = Schedule { window_len: w, step_len: s, init_len: w - s + extra };
            match plan_windows(total, &sched) {
                Ok(p) => {
                    prop_assert_eq!(p[0].analysis_start, sched.init_len);
                    prop_assert_eq!(p.last().unwrap().analysis_end, total);
                    for pair in p.windows(2) {
                        prop_assert_eq!(pair[0].analysis_end, pair[1].analysis_start);
                    }
                    for (i, b) in p.iter().enumerate() {
                        prop_assert_eq!(b.window_end - b.window_start, w);
                        prop_assert_eq!(b.window_end, b.analysis_end);
                        if i + 1 < p.len() {
                            prop_assert_eq!(b.analysis_len(), s);
                        } else {
                            prop_assert!(b.analysis_len() >= 1 && b.analysis_len() <= s);
                        }
                    }
                }
                Err(_) => prop_assert!(total < w || total <= sched.init_len),
            }
        }
    }

    #[test]
    fn impairment_none_and_infinite_snr_are_identity() {
        let y = noise(1000, 1);
        assert_eq!(
            apply_feedback_impairment(&y, &FeedbackImpairment::none()).unwrap(),
            y
        );
        assert_eq!(
            apply_feedback_impairment(&y, &FeedbackImpairment::awgn(f64::INFINITY, 3)).unwrap(),
            y
        );
    }

    #[test]
    fn awgn_hits_target_snr() {
        let y = noise(50_000, 2);
        for snr in [30.0, 12.0, 0.0] {
            let z = apply_feedback_impairment(&y, &FeedbackImpairment::awgn(snr, 7)).unwrap();
            let measured = snr_db(y.samples(), z.samples());
            assert!((measured - snr).abs() < 0.2, "{measured}");
        }
        let a = apply_feedback_impairment(&y, &FeedbackImpairment::awgn(20.0, 1)).unwrap();
        assert_eq!(
            a,
            apply_feedback_impairment(&y, &FeedbackImpairment::awgn(20.0, 1)).unwrap()
        );
        assert_ne!(
            a,
            apply_feedback_impairment(&y, &FeedbackImpairment::awgn(20.0, 2)).unwrap()
        );
    }

    #[test]
    fn quantizer_levels_and_snr_trend() {
        let y = noise(100_000, 3);
        let z = apply_feedback_impairment(&y, &FeedbackImpairment::quantizer(3, 0)).unwrap();
        let mut re: Vec<f64> = z.samples().iter().map(|v| v.re).collect();
        re.sort_by(f64::total_cmp);
        re.dedup();
        assert_eq!(re.len(), 8);
        // Mid-rise: no level at zero, symmetric around it.
        assert!(re.iter().all(|v| *v != 0.0));
        assert!((re[0] + re[7]).abs() < 1e-12);
        let snrs: Vec<f64> = [4, 6, 8, 10]
            .iter()
            .map(|b| {
                let z =
                    apply_feedback_impairment(&y, &FeedbackImpairment::quantizer(*b, 0)).unwrap();
                snr_db(y.samples(), z.samples())
            })
            .collect();
        // Granular noise improves ~12 dB per two bits until clipping at the
        // loading limit starts to dominate.
        for w in snrs.windows(2) {
            assert!(w[1] > w[0] + 5.0, "{snrs:?}");
        }
    }

    #[test]
    fn impairment_validation() {
        assert!(FeedbackImpairment::quantizer(0, 0).validate().is_err());
        assert!(FeedbackImpairment::awgn(f64::NAN, 0).validate().is_err());
        let y = ComplexSignal::new(vec![], 1.0).unwrap();
        assert!(apply_feedback_impairment(&y, &FeedbackImpairment::none()).is_err());
    }

    #[test]
    fn bits_to_snr_examples() {
        assert_eq!(bits_to_snr_db(0), 0.0);
        assert_eq!(bits_to_snr_db(1), 6.02);
        assert_eq!(bits_to_snr_db(5), 30.1);
        assert_eq!(bits_to_snr_db(10), 60.2);
    }

    #[test]
    fn nmse_examples() {
        let r = noise(4096, 4);
        assert_eq!(nmse_db(&r, &r).unwrap(), NMSE_FLOOR_DB);
        assert!(nmse_db(&r, &r.scaled(2.0)).unwrap().abs() < 1e-12);
        // Noise orthogonal to the reference at -40 dB relative power.
        let n = noise(4096, 5);
        let rv = r.samples();
        let proj: Complex64 = n
            .samples()
            .iter()
            .zip(rv)
            .map(|(a, b)| b.conj() * a)
            .sum::<Complex64>()
            / rv.iter().map(|v| v.norm_sqr()).sum::<f64>();
        let orth: Vec<Complex64> = n
            .samples()
            .iter()
            .zip(rv)
            .map(|(a, b)| a - b * proj)
            .collect();
        let k = (1e-4 * r.mean_power() / mean_power(&orth)).sqrt();
        let est: Vec<Complex64> = rv.iter().zip(&orth).map(|(a, b)| a + b * k).collect();
        let v = nmse_raw(rv, &est).unwrap();
        assert!((v + 40.0).abs() < 0.1, "{v}");
        let z = ComplexSignal::zeros(10, 1.0).unwrap();
        assert!(nmse_db(&z, &z).is_err());
    }

    #[test]
    fn gain_normalized_nmse_ignores_complex_gain() {
        let r = noise(1000, 6);
        let est: Vec<Complex64> = r.samples().iter().map(|v| v * c(3.0, -4.0)).collect();
        assert!(gain_normalized_nmse_db(r.samples(), &est).unwrap() < -250.0);
    }

    fn trace_from(nmse: &[f64], dt: f64) -> AdaptationTrace {
        let p = ParameterSet::unit_linear(ModelStructure::mp(1, 0));
        AdaptationTrace {
            steps: nmse
                .iter()
                .enumerate()
                .map(|(k, v)| TraceRecord {
                    step_index: k,
                    time_s: k as f64 * dt,
                    theta: p.clone(),
                    nmse_db: *v,
                    feedback_snr_db: f64::INFINITY,
                })
                .collect(),
        }
    }

    #[test]
    fn excursion_examples() {
        // Blocks of 1 s; a step at t = 5 lifts blocks 5 and 6.
        let mut v = vec![
            -50.0, -50.0, -40.0, -42.0, -44.0, -10.0, -20.0, -44.0, -44.0,
        ];
        let t = trace_from(&v, 1.0);
        let e = step_excursions_db(&t, &[5.0], 1.0, 2.0).unwrap();
        assert_eq!(e, vec![-10.0 + 42.0]);
        // A window shorter than a block still sees the block starting at t.
        assert_eq!(
            step_excursions_db(&t, &[5.0], 1.0, 0.5).unwrap(),
            vec![32.0]
        );
        // Too little history, or nothing after the step.
        assert!(step_excursions_db(&t, &[2.0, 20.0], 1.0, 1.0)
            .unwrap()
            .is_empty());
        // A step inside a block counts that block as after the step.
        v[4] = 0.0;
        let t = trace_from(&v, 1.0);
        assert_eq!(
            step_excursions_db(&t, &[4.5], 1.0, 0.4).unwrap(),
            vec![0.0 - (-50.0 - 40.0 - 42.0) / 3.0]
        );
        assert!(step_excursions_db(&t, &[4.5], 0.0, 1.0).is_err());
    }

    #[test]
    fn convergence_examples() {
        assert_eq!(
            convergence_time(&trace_from(&[-40.0; 20], 1e-4), 1.0).unwrap(),
            Some(0.0)
        );
        let mut v = vec![-10.0, -20.0, -30.0, -39.5];
        v.extend([-40.0; 16]);
        assert_eq!(
            convergence_time(&trace_from(&v, 1e-4), 1.0).unwrap(),
            Some(3.0 * 1e-4)
        );
        let mut last_off = vec![-40.0; 19];
        last_off.push(-10.0);
        // Steady mean of the last 2 steps is -25: nothing is within 1 dB.
        assert_eq!(
            convergence_time(&trace_from(&last_off, 1.0), 1.0).unwrap(),
            None
        );
        assert!(convergence_time(&AdaptationTrace::default(), 1.0).is_err());
    }

    #[test]
    fn degradation_examples() {
        let a = trace_from(&[-45.0; 10], 1.0);
        assert_eq!(degradation_db(&a, &a).unwrap(), 0.0);
        let b = trace_from(&[-30.0; 10], 1.0);
        assert_eq!(degradation_db(&b, &a).unwrap(), 15.0);
        let short = trace_from(&[-30.0; 9], 1.0);
        assert!(degradation_db(&short, &a).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let t = trace_from(&[-1.5, -2.25], 0.5);
        let mut buf = Vec::new();
        t.write_csv(&mut buf, |k| Some(format!("theta_{k:05}.csv")))
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,time_s,nmse_db,feedback_snr_db,theta_file\n0,0,-1.5,inf,theta_00000.csv\n1,0.5,-2.25,inf,theta_00001.csv\n"
        );
    }

    #[test]
    fn cyclic_init_wraps() {
        let u = ComplexSignal::new((0..5).map(|k| c(k as f64, 0.0)).collect(), 1.0).unwrap();
        let i = cyclic_init_data(&u, 3).unwrap();
        assert_eq!(i.samples(), &[c(2.0, 0.0), c(3.0, 0.0), c(4.0, 0.0)]);
        let i = cyclic_init_data(&u, 7).unwrap();
        let re: Vec<f64> = i.samples().iter().map(|v| v.re).collect();
        assert_eq!(re, vec![3.0, 4.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    fn small_ofdm(rms: f64) -> ComplexSignal {
        let u = gen_ofdm_surrogate(30.72e6, 18e6, 12, 3).unwrap();
        normalize_rms(&u, rms).unwrap()
    }

    fn setup(mode: AdaptationMode, mu: f64, pa: PaConfig) -> AdaptationSetup {
        AdaptationSetup {
            update: UpdateConfig {
                mu,
                ..Default::default()
            },
            pa,
            schedule: Schedule::with_overlap(2048, 64),
            impairment: FeedbackImpairment::none(),
            mode,
            state: StateConfig::default(),
            pa_noise_seed: 1,
        }
    }

    #[test]
    fn frozen_exact_inverse_of_linear_pa() {
        // A memoryless linear PA with gain 10 is inverted exactly by the unit tap.
        let pa = PaConfig {
            am_am_poly: vec![1.0],
            am_pm_strength: 0.0,
            memory_taps: vec![c(1.0, 0.0)],
            ..PaConfig::time_invariant().without_noise()
        };
        let u = small_ofdm(0.2);
        let st = setup(AdaptationMode::Frozen, 0.8, pa);
        let init = cyclic_init_data(&u, st.schedule.init_len).unwrap();
        let p = ParameterSet::unit_linear(ModelStructure::mp(3, 1));
        let t = run_adaptation(&u, &init, &p, &st).unwrap();
        let expected = plan_windows(u.len() + st.schedule.init_len, &st.schedule)
            .unwrap()
            .len();
        assert_eq!(t.len(), expected);
        assert!(t.steps.iter().all(|r| r.nmse_db < -50.0));
        for w in t.steps.windows(2) {
            assert!(w[1].time_s > w[0].time_s);
        }
    }

    #[test]
    fn reactive_mu_zero_keeps_theta() {
        let u = small_ofdm(0.15);
        let st = setup(
            AdaptationMode::Reactive,
            0.0,
            PaConfig::time_invariant().without_noise(),
        );
        let init = cyclic_init_data(&u, st.schedule.init_len).unwrap();
        let p = ParameterSet::unit_linear(ModelStructure::mp(5, 2));
        let t = run_adaptation(&u, &init, &p, &st).unwrap();
        assert!(t.steps.iter().all(|r| r.theta == p));
    }

    #[test]
    fn reactive_ila_converges_on_time_invariant_pa() {
        let u = small_ofdm(0.12);
        let st = setup(
            AdaptationMode::Reactive,
            0.8,
            PaConfig::time_invariant().without_noise(),
        );
        let init = cyclic_init_data(&u, st.schedule.init_len).unwrap();
        let p = ParameterSet::unit_linear(ModelStructure::mp(5, 2));
        let t = run_adaptation(&u, &init, &p, &st).unwrap();
        let nm = t.nmse();
        assert!(nm[0] > -35.0, "{nm:?}");
        assert!(steady_state_nmse_db(&t).unwrap() < -45.0, "{nm:?}");
    }

    #[test]
    fn first_step_update_is_affine_in_mu() {
        let u = small_ofdm(0.15);
        let init_p = ParameterSet::unit_linear(ModelStructure::mp(3, 1));
        let run = |mu: f64| {
            let st = setup(
                AdaptationMode::Reactive,
                mu,
                PaConfig::time_invariant().without_noise(),
            );
            let init = cyclic_init_data(&u, st.schedule.init_len).unwrap();
            run_adaptation(&u, &init, &init_p, &st).unwrap().steps[0]
                .theta
                .theta
                .clone()
        };
        let full = run(1.0);
        for mu in [0.25, 0.6] {
            let got = run(mu);
            for ((g, f), o) in got.iter().zip(&full).zip(&init_p.theta) {
                let want = o + (f - o) * mu;
                assert!((g - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn impairment_does_not_touch_frozen_nmse() {
        let u = small_ofdm(0.15);
        let mut st = setup(AdaptationMode::Frozen, 0.8, PaConfig::reference());
        let init = cyclic_init_data(&u, st.schedule.init_len).unwrap();
        let p = ParameterSet::unit_linear(ModelStructure::mp(3, 1));
        let clean = run_adaptation(&u, &init, &p, &st).unwrap();
        st.impairment = FeedbackImpairment::awgn(15.0, 9);
        let noisy = run_adaptation(&u, &init, &p, &st).unwrap();
        assert_eq!(clean.nmse(), noisy.nmse());
        assert!(noisy
            .steps
            .iter()
            .all(|r| (r.feedback_snr_db - 15.0).abs() < 0.2));
        assert!(clean
            .steps
            .iter()
            .all(|r| r.feedback_snr_db == f64::INFINITY));
    }

    #[test]
    fn mode_parameter_mismatch_rejected() {
        let u = small_ofdm(0.15);
        let st = setup(AdaptationMode::Proactive, 0.8, PaConfig::reference());
        let init = cyclic_init_data(&u, st.schedule.init_len).unwrap();
        let p = ParameterSet::unit_linear(ModelStructure::mp(3, 1));
        assert!(run_adaptation(&u, &init, &p, &st).is_err());
        let mut st = setup(AdaptationMode::Reactive, 0.8, PaConfig::reference());
        st.update.algorithm = UpdateAlgorithm::ProactiveStatic;
        assert!(run_adaptation(&u, &init, &p, &st).is_err());
    }

    #[test]
    fn pretraining_beats_cold_start() {
        let u = small_ofdm(0.15);
        let pa = PaConfig::time_invariant().without_noise();
        let st = ModelStructure::mp(5, 2);
        let cold = initial_parameters(InitKind::Cold, &u, &st, None, &pa, 1e-10, 0).unwrap();
        assert_eq!(cold, ParameterSet::unit_linear(st.clone()));
        let warm = initial_parameters(InitKind::Pretrained, &u, &st, None, &pa, 1e-10, 0).unwrap();
        let s = setup(AdaptationMode::Frozen, 0.0, pa);
        let init = cyclic_init_data(&u, s.schedule.init_len).unwrap();
        let tc = run_adaptation(&u, &init, &cold, &s).unwrap();
        let tw = run_adaptation(&u, &init, &warm, &s).unwrap();
        assert!(steady_state_nmse_db(&tw).unwrap() < steady_state_nmse_db(&tc).unwrap() - 15.0);
        let pro = initial_parameters(
            InitKind::Pretrained,
            &u,
            &st,
            Some(&StateConfig::default()),
            &PaConfig::reference(),
            1e-10,
            0,
        )
        .unwrap();
        assert!(pro.is_proactive());
    }

    #[test]
    fn warmup_depends_on_overlap() {
        let u = small_ofdm(0.2);
        let pa = PaConfig::reference();
        let p = ParameterSet::unit_linear(ModelStructure::mp(1, 0));
        let tau = pa.thermal_time_constant_samples().ceil() as usize;
        let long = Schedule::with_overlap(4096, 5 * (tau + 2));
        let init = cyclic_init_data(&u, long.init_len).unwrap();
        let good = warmup_equivalence(&u, &init, &p, &pa, &long, &StateConfig::default()).unwrap();
        assert!(good.iter().all(|v| *v <= -60.0), "{good:?}");
        let none = Schedule::with_overlap(4096, 0);
        let bad = warmup_equivalence(&u, &init, &p, &pa, &none, &StateConfig::default()).unwrap();
        assert!(
            bad.iter().copied().fold(f64::MIN, f64::max) >= -30.0,
            "{bad:?}"
        );
    }
}
