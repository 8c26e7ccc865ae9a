use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dpdlab_core::signal::{gen_ofdm, gen_pulsed_noise, io as sigio};
use dpdlab_core::testbed::{
    convergence_time, cyclic_init_data, initial_parameters, run_adaptation, steady_state_nmse_db,
    step_excursions_db, warmup_equivalence,
};
use dpdlab_core::{
    normalize_rms, AdaptationMode, AdaptationSetup, AdaptationTrace, ComplexSignal, DpdError,
    FeedbackImpairment, ImpairmentKind, ParameterSet, Schedule, UpdateAlgorithm,
};
use rayon::prelude::*;

use crate::config::{validate_config, ExperimentConfig, ExperimentKind, SignalConfig, Variant};
use crate::output::{timestamp_line, Cell, SummaryTable};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<crate::config::Diagnostic>),
    #[error("signal: {0}")]
    Signal(DpdError),
    #[error("run {label}: {source}")]
    Run { label: String, source: DpdError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 0 uses one per core.
    pub jobs: usize,
    /// Prefix every output file with a generation-time comment line.
    pub timestamp: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            timestamp: true,
        }
    }
}

/// One point of the experiment: a variant at one sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub index: usize,
    pub label: String,
    pub variant: Variant,
    pub sweep_value: Option<f64>,
    pub step_len: usize,
    pub mu: f64,
    pub impairment: FeedbackImpairment,
    /// Window overlap of a warm-up check.
    pub overlap: Option<usize>,
}

impl RunSpec {
    pub fn dir_name(&self) -> String {
        format!("run_{:03}_{}", self.index, self.label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Trace(AdaptationTrace),
    /// Per-block NMSE between windowed and continuous PA runs.
    Warmup(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub spec: RunSpec,
    pub outcome: RunOutcome,
}

impl RunResult {
    pub fn trace(&self) -> Option<&AdaptationTrace> {
        match &self.outcome {
            RunOutcome::Trace(t) => Some(t),
            RunOutcome::Warmup(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub runs: Vec<RunResult>,
    pub summary: SummaryTable,
}

impl ExperimentReport {
    pub fn run(&self, variant: Variant, sweep_value: Option<f64>) -> Option<&RunResult> {
        self.runs
            .iter()
            .find(|r| r.spec.variant == variant && r.spec.sweep_value == sweep_value)
    }
}

/// The data record fed to the testbed, and the low-to-high power steps in it.
pub fn build_signal(cfg: &ExperimentConfig) -> Result<(ComplexSignal, Vec<f64>), DpdError> {
    let (u, edges) = match &cfg.signal {
        SignalConfig::Ofdm { ofdm, drive_rms } => {
            let mut c = ofdm.clone();
            c.seed = c.seed.wrapping_add(cfg.seed);
            (normalize_rms(&gen_ofdm(&c)?, *drive_rms)?, Vec::new())
        }
        SignalConfig::PulsedNoise(p) => {
            let mut c = p.clone();
            c.seed = c.seed.wrapping_add(cfg.seed);
            (gen_pulsed_noise(&c)?, c.rising_edges_s())
        }
        SignalConfig::File {
            path,
            sample_rate_hz,
            drive_rms,
        } => {
            let u = read_signal(path, *sample_rate_hz)?;
            let u = match drive_rms {
                Some(r) => normalize_rms(&u, *r)?,
                None => u,
            };
            (u, Vec::new())
        }
    };
    if !cfg.schedule.whole_blocks {
        return Ok((u, edges));
    }
    let block = cfg.step_lengths().into_iter().max().unwrap_or(1).max(1);
    let keep = u.len() / block * block;
    if keep == 0 {
        return Err(DpdError::SignalTooShort {
            len: u.len(),
            required: block,
        });
    }
    Ok((u.slice(0, keep)?, edges))
}

fn read_signal(path: &Path, sample_rate_hz: Option<f64>) -> Result<ComplexSignal, DpdError> {
    let f = BufReader::new(File::open(path)?);
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        let fs = sample_rate_hz.unwrap_or(dpdlab_core::signal::DEFAULT_SAMPLE_RATE_HZ);
        sigio::read_csv(f, fs)
    } else {
        sigio::read_binary(f)
    }
}

/// Every run of the experiment, in output order.
pub fn plan_runs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let variants = cfg.effective_variants();
    let mut specs = Vec::new();
    let base = RunSpec {
        index: 0,
        label: String::new(),
        variant: Variant::Ila,
        sweep_value: None,
        step_len: cfg.schedule.step_len,
        mu: cfg.update.mu,
        impairment: cfg.impairment,
        overlap: None,
    };
    let mut push = |mut spec: RunSpec, suffix: String| {
        spec.index = specs.len();
        spec.label = format!("{}{}", spec.variant.name(), suffix);
        specs.push(spec);
    };
    let quantizer = matches!(cfg.impairment.kind, ImpairmentKind::Quantizer { .. });
    if cfg.experiment == ExperimentKind::DegradationCurve {
        for &variant in &variants {
            let impairment = FeedbackImpairment::none();
            push(
                RunSpec {
                    variant,
                    impairment,
                    ..base.clone()
                },
                "_clean".into(),
            );
        }
    }
    if cfg.experiment == ExperimentKind::NmseVsTime {
        for &variant in &variants {
            push(
                RunSpec {
                    variant,
                    ..base.clone()
                },
                String::new(),
            );
        }
        return specs;
    }
    for &v in &cfg.sweep_values {
        for &variant in &variants {
            let spec = RunSpec {
                variant,
                sweep_value: Some(v),
                ..base.clone()
            };
            let seed = cfg.impairment.seed;
            let (spec, suffix) = match cfg.experiment {
                ExperimentKind::MuSweep => (RunSpec { mu: v, ..spec }, format!("_mu{v}")),
                ExperimentKind::BlocklenSweep => (
                    RunSpec {
                        step_len: v as usize,
                        ..spec
                    },
                    format!("_S{v}"),
                ),
                ExperimentKind::SnrSweep if quantizer => (
                    RunSpec {
                        impairment: FeedbackImpairment::quantizer(v as u32, seed),
                        ..spec
                    },
                    format!("_bits{v}"),
                ),
                ExperimentKind::SnrSweep | ExperimentKind::DegradationCurve => (
                    RunSpec {
                        impairment: FeedbackImpairment::awgn(v, seed),
                        ..spec
                    },
                    format!("_snr{v}"),
                ),
                ExperimentKind::WarmupCheck => (
                    RunSpec {
                        overlap: Some(v as usize),
                        ..spec
                    },
                    format!("_overlap{v}"),
                ),
                ExperimentKind::NmseVsTime => unreachable!(),
            };
            push(spec, suffix);
        }
    }
    specs
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    pa: dpdlab_core::PaConfig,
    u: ComplexSignal,
    static_init: Option<ParameterSet>,
    proactive_init: Option<ParameterSet>,
}

fn run_one(ctx: &Context, spec: &RunSpec) -> Result<RunOutcome, DpdError> {
    let cfg = ctx.cfg;
    let params = if spec.variant == Variant::Proactive {
        ctx.proactive_init.as_ref()
    } else {
        ctx.static_init.as_ref()
    }
    .expect("initial parameters prepared for every variant in the plan");
    let state = cfg.proactive.state();

    let schedule = match spec.overlap {
        Some(ov) => Schedule::with_overlap(spec.step_len, ov),
        None => cfg.schedule.resolve(spec.step_len, &ctx.pa),
    };
    let init_data = cyclic_init_data(&ctx.u, schedule.init_len)?;
    if spec.overlap.is_some() {
        let w = warmup_equivalence(&ctx.u, &init_data, params, &ctx.pa, &schedule, &state)?;
        return Ok(RunOutcome::Warmup(w));
    }
    let (mode, algorithm) = match spec.variant {
        Variant::Ila => (AdaptationMode::Reactive, UpdateAlgorithm::Ila),
        Variant::Robust => (AdaptationMode::Reactive, UpdateAlgorithm::Robust),
        Variant::Proactive => (AdaptationMode::Proactive, UpdateAlgorithm::ProactiveStatic),
        Variant::Frozen => (AdaptationMode::Frozen, cfg.update.algorithm),
    };
    let mut update = cfg.update;
    update.mu = spec.mu;
    update.algorithm = algorithm;
    let setup = AdaptationSetup {
        update,
        pa: ctx.pa.clone(),
        schedule,
        impairment: spec
            .impairment
            .with_seed_offset(cfg.seed.wrapping_add(spec.index as u64)),
        mode,
        state,
        pa_noise_seed: cfg.seed,
    };
    Ok(RunOutcome::Trace(run_adaptation(
        &ctx.u, &init_data, params, &setup,
    )?))
}

/// Validates `cfg`, runs every point of the experiment and writes the
/// artifacts under `cfg.output_dir`: `config.toml`, `summary.csv` and one
/// directory per run holding `trace.csv` (or `warmup.csv`).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<ExperimentReport, RunError> {
    let diags = validate_config(cfg);
    if !diags.is_empty() {
        return Err(RunError::Invalid(diags));
    }
    let pa = cfg.pa.resolve().map_err(|d| RunError::Invalid(vec![d]))?;
    let (u, edges) = build_signal(cfg).map_err(RunError::Signal)?;
    let specs = plan_runs(cfg);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;

    let needs_static = specs.iter().any(|s| s.variant != Variant::Proactive);
    let needs_proactive = specs.iter().any(|s| s.variant == Variant::Proactive);
    let reg = cfg.update.regularization;
    let init_err = |source| RunError::Run {
        label: "initialization".into(),
        source,
    };
    let (static_init, proactive_init) = pool.install(|| {
        rayon::join(
            || {
                needs_static
                    .then(|| initial_parameters(cfg.init, &u, &cfg.model, None, &pa, reg, cfg.seed))
                    .transpose()
            },
            || {
                needs_proactive
                    .then(|| {
                        let p = &cfg.proactive;
                        initial_parameters(
                            p.init,
                            &u,
                            &p.structure,
                            Some(&p.state()),
                            &pa,
                            reg,
                            cfg.seed,
                        )
                    })
                    .transpose()
            },
        )
    });
    let ctx = Context {
        cfg,
        pa,
        u,
        static_init: static_init.map_err(init_err)?,
        proactive_init: proactive_init.map_err(init_err)?,
    };

    let out = &cfg.output_dir;
    create_dir(out)?;
    let stamp = opts.timestamp.then(timestamp_line);
    let echo = toml::to_string(cfg).expect("configuration serializes");
    write_file(&out.join("config.toml"), stamp.as_deref(), |w| {
        w.write_all(echo.as_bytes())
    })?;

    let results: Vec<Result<RunResult, RunError>> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let outcome = run_one(&ctx, spec).map_err(|source| RunError::Run {
                    label: spec.label.clone(),
                    source,
                })?;
                let result = RunResult {
                    spec: spec.clone(),
                    outcome,
                };
                write_run(out, &result, cfg.write_theta, stamp.as_deref())?;
                Ok(result)
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let summary = summarize(cfg, &runs, &edges).map_err(|source| RunError::Run {
        label: "summary".into(),
        source,
    })?;
    write_file(&out.join("summary.csv"), stamp.as_deref(), |w| {
        summary.write_csv(w)
    })?;
    Ok(ExperimentReport {
        output_dir: out.clone(),
        runs,
        summary,
    })
}

fn create_dir(path: &Path) -> Result<(), RunError> {
    fs::create_dir_all(path).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(
    path: &Path,
    stamp: Option<&str>,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), RunError> {
    let io = |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    if let Some(s) = stamp {
        writeln!(w, "{s}").map_err(io)?;
    }
    body(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

fn to_io(e: DpdError) -> std::io::Error {
    std::io::Error::other(e.to_string())
}

fn write_run(
    out: &Path,
    run: &RunResult,
    write_theta: bool,
    stamp: Option<&str>,
) -> Result<(), RunError> {
    let dir = out.join(run.spec.dir_name());
    create_dir(&dir)?;
    match &run.outcome {
        RunOutcome::Trace(trace) => {
            if write_theta {
                create_dir(&dir.join("theta"))?;
                for r in &trace.steps {
                    let path = dir.join("theta").join(theta_name(r.step_index));
                    write_file(&path, stamp, |w| r.theta.write_csv(w).map_err(to_io))?;
                }
            }
            let name = |k: usize| write_theta.then(|| format!("theta/{}", theta_name(k)));
            write_file(&dir.join("trace.csv"), stamp, |w| {
                trace.write_csv(w, name).map_err(to_io)
            })
        }
        RunOutcome::Warmup(nmse) => write_file(&dir.join("warmup.csv"), stamp, |w| {
            writeln!(w, "block,nmse_db")?;
            for (k, v) in nmse.iter().enumerate() {
                writeln!(w, "{k},{v}")?;
            }
            Ok(())
        }),
    }
}

fn theta_name(step: usize) -> String {
    format!("step_{step:05}.csv")
}

fn conv(trace: &AdaptationTrace, tol: f64) -> Result<Cell, DpdError> {
    Ok(Cell::Num(convergence_time(trace, tol)?.unwrap_or(f64::NAN)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(
    cfg: &ExperimentConfig,
    runs: &[RunResult],
    edges: &[f64],
) -> Result<SummaryTable, DpdError> {
    let tol = cfg.tolerance_db;
    let fs = cfg.sample_rate_hz();
    let traced = || runs.iter().filter_map(|r| r.trace().map(|t| (&r.spec, t)));
    let value = |s: &RunSpec| Cell::Num(s.sweep_value.unwrap_or(f64::NAN));
    let variant = |s: &RunSpec| Cell::Text(s.variant.name().into());
    let mut table;
    match cfg.experiment {
        ExperimentKind::NmseVsTime => {
            table = SummaryTable::new(&[
                "run",
                "variant",
                "steady_nmse_db",
                "convergence_time_s",
                "max_step_excursion_db",
            ]);
            for (s, t) in traced() {
                let block_s = s.step_len as f64 / fs;
                let exc = step_excursions_db(t, edges, block_s, cfg.excursion_window_s)?;
                let worst = exc.iter().copied().fold(f64::NAN, f64::max);
                table.push(vec![
                    Cell::Text(s.dir_name()),
                    variant(s),
                    Cell::Num(steady_state_nmse_db(t)?),
                    conv(t, tol)?,
                    Cell::Num(worst),
                ]);
            }
        }
        ExperimentKind::MuSweep => {
            table = SummaryTable::new(&["mu", "variant", "convergence_time_s", "steady_nmse_db"]);
            for (s, t) in traced() {
                table.push(vec![
                    value(s),
                    variant(s),
                    conv(t, tol)?,
                    Cell::Num(steady_state_nmse_db(t)?),
                ]);
            }
        }
        ExperimentKind::BlocklenSweep => {
            table = SummaryTable::new(&[
                "block_len",
                "variant",
                "convergence_time_s",
                "steady_nmse_db",
                "mean_nmse_db",
            ]);
            for (s, t) in traced() {
                table.push(vec![
                    Cell::Int(s.step_len as u64),
                    variant(s),
                    conv(t, tol)?,
                    Cell::Num(steady_state_nmse_db(t)?),
                    Cell::Num(mean(&t.nmse())),
                ]);
            }
        }
        ExperimentKind::SnrSweep => {
            let key = if matches!(cfg.impairment.kind, ImpairmentKind::Quantizer { .. }) {
                "bits"
            } else {
                "snr_db"
            };
            table = SummaryTable::new(&[
                key,
                "variant",
                "feedback_snr_db",
                "steady_nmse_db",
                "convergence_time_s",
            ]);
            for (s, t) in traced() {
                let fb: Vec<f64> = t.steps.iter().map(|r| r.feedback_snr_db).collect();
                table.push(vec![
                    value(s),
                    variant(s),
                    Cell::Num(mean(&fb)),
                    Cell::Num(steady_state_nmse_db(t)?),
                    conv(t, tol)?,
                ]);
            }
        }
        ExperimentKind::DegradationCurve => {
            table = SummaryTable::new(&[
                "snr_db",
                "variant",
                "degradation_db",
                "steady_nmse_db",
                "clean_nmse_db",
            ]);
            let clean: HashMap<Variant, &AdaptationTrace> = traced()
                .filter(|(s, _)| s.sweep_value.is_none())
                .map(|(s, t)| (s.variant, t))
                .collect();
            for (s, t) in traced().filter(|(s, _)| s.sweep_value.is_some()) {
                let c = clean[&s.variant];
                table.push(vec![
                    value(s),
                    variant(s),
                    Cell::Num(dpdlab_core::testbed::degradation_db(t, c)?),
                    Cell::Num(steady_state_nmse_db(t)?),
                    Cell::Num(steady_state_nmse_db(c)?),
                ]);
            }
        }
        ExperimentKind::WarmupCheck => {
            table = SummaryTable::new(&["overlap", "variant", "max_nmse_db", "mean_nmse_db"]);
            for r in runs {
                if let RunOutcome::Warmup(w) = &r.outcome {
                    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    table.push(vec![
                        Cell::Int(r.spec.overlap.unwrap_or(0) as u64),
                        variant(&r.spec),
                        Cell::Num(max),
                        Cell::Num(mean(w)),
                    ]);
                }
            }
        }
    }
    Ok(table)
}
