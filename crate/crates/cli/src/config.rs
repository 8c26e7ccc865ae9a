//! Experiment configuration: a TOML document with a few top-level keys and
//! one section per component.

use std::fmt;
use std::path::{Path, PathBuf};

use dpdlab_core::estimation::UpdateAlgorithm;
use dpdlab_core::signal::DEFAULT_SAMPLE_RATE_HZ;
use dpdlab_core::testbed::default_overlap;
use dpdlab_core::{
    FeedbackImpairment, ImpairmentKind, InitKind, ModelStructure, OfdmConfig, PaConfig,
    PulsedNoiseConfig, Schedule, StateConfig, UpdateConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    NmseVsTime,
    MuSweep,
    BlocklenSweep,
    SnrSweep,
    DegradationCurve,
    WarmupCheck,
}

impl ExperimentKind {
    pub fn is_sweep(self) -> bool {
        self != ExperimentKind::NmseVsTime
    }
}

/// Which predistorter runs, and how it is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Reactive, indirect learning update.
    Ila,
    /// Reactive, error-driven update.
    Robust,
    /// Fixed state-dependent parameters from the `[proactive]` section.
    Proactive,
    /// Fixed static parameters.
    Frozen,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ila => "ila",
            Variant::Robust => "robust",
            Variant::Proactive => "proactive",
            Variant::Frozen => "frozen",
        }
    }

    pub fn is_reactive(self) -> bool {
        matches!(self, Variant::Ila | Variant::Robust)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalConfig {
    Ofdm {
        #[serde(flatten)]
        ofdm: OfdmConfig,
        /// Output RMS after normalization.
        #[serde(default = "default_drive_rms")]
        drive_rms: f64,
    },
    /// `high_level_rms` sets the drive.
    PulsedNoise(PulsedNoiseConfig),
    /// A recorded signal: `.csv` (re,im per line) or the binary format.
    File {
        path: PathBuf,
        #[serde(default)]
        sample_rate_hz: Option<f64>,
        #[serde(default)]
        drive_rms: Option<f64>,
    },
}

fn default_drive_rms() -> f64 {
    0.12
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig::Ofdm {
            ofdm: OfdmConfig {
                papr_limit_db: Some(7.0),
                ..OfdmConfig::default()
            },
            drive_rms: default_drive_rms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProactiveSection {
    #[serde(flatten)]
    pub structure: ModelStructure,
    pub state_cutoff_hz: f64,
    pub init: InitKind,
}

impl Default for ProactiveSection {
    fn default() -> Self {
        Self {
            structure: ModelStructure::mp(7, 2),
            state_cutoff_hz: StateConfig::default().cutoff_hz,
            init: InitKind::Pretrained,
        }
    }
}

impl ProactiveSection {
    pub fn state(&self) -> StateConfig {
        StateConfig {
            cutoff_hz: self.state_cutoff_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaPreset {
    #[default]
    Reference,
    TimeInvariant,
}

/// A preset amplifier with individual `PaConfig` fields overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaSection {
    #[serde(default)]
    pub preset: PaPreset,
    /// `false` removes the output noise floor.
    #[serde(default = "yes")]
    pub noise: bool,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

fn yes() -> bool {
    true
}

impl Default for PaSection {
    fn default() -> Self {
        Self {
            preset: PaPreset::Reference,
            noise: true,
            overrides: toml::Table::new(),
        }
    }
}

impl PaSection {
    pub fn resolve(&self) -> Result<PaConfig, Diagnostic> {
        let base = match self.preset {
            PaPreset::Reference => PaConfig::reference(),
            PaPreset::TimeInvariant => PaConfig::time_invariant(),
        };
        let mut table =
            toml::Table::try_from(&base).map_err(|e| Diagnostic::new("pa", e.to_string()))?;
        const OPTIONAL: &[&str] = &["output_noise_floor_dbc"];
        for (k, v) in &self.overrides {
            if !table.contains_key(k) && !OPTIONAL.contains(&k.as_str()) {
                return Err(Diagnostic::new(format!("pa.{k}"), "unknown field"));
            }
            table.insert(k.clone(), v.clone());
        }
        let cfg: PaConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Diagnostic::new("pa", e.message().to_string()))?;
        Ok(if self.noise { cfg } else { cfg.without_noise() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub step_len: usize,
    /// Defaults to `step_len` plus five PA settling times.
    pub window_len: Option<usize>,
    /// Defaults to `window_len - step_len`.
    pub init_len: Option<usize>,
    /// Drop the tail of the signal that does not fill a whole block of the
    /// longest step in the experiment.
    pub whole_blocks: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            step_len: 4096,
            window_len: None,
            init_len: None,
            whole_blocks: true,
        }
    }
}

impl ScheduleSection {
    /// The schedule for step length `step_len` (which overrides the section's
    /// own in block-length sweeps).
    pub fn resolve(&self, step_len: usize, pa: &PaConfig) -> Schedule {
        let window_len = self.window_len.unwrap_or(step_len + default_overlap(pa));
        Schedule {
            window_len,
            step_len,
            init_len: self.init_len.unwrap_or(window_len.saturating_sub(step_len)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep_values: Vec<f64>,
    /// Empty picks a default per experiment kind.
    #[serde(default)]
    pub variants: Vec<Variant>,
    /// Starting point of the static predistorter.
    #[serde(default = "default_init")]
    pub init: InitKind,
    /// Convergence band around the steady state.
    #[serde(default = "default_tolerance")]
    pub tolerance_db: f64,
    /// Span after a low-to-high power step searched for the NMSE peak.
    #[serde(default = "default_excursion_window")]
    pub excursion_window_s: f64,
    /// Write the parameters of every step next to the trace.
    #[serde(default)]
    pub write_theta: bool,
    #[serde(default)]
    pub signal: SignalConfig,
    #[serde(default)]
    pub model: ModelStructure,
    #[serde(default)]
    pub proactive: ProactiveSection,
    #[serde(default)]
    pub update: UpdateConfig,
    #[serde(default)]
    pub pa: PaSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub impairment: FeedbackImpairment,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("dpdlab-out")
}

fn default_init() -> InitKind {
    InitKind::Cold
}

fn default_tolerance() -> f64 {
    1.0
}

fn default_excursion_window() -> f64 {
    0.5e-3
}

impl ExperimentConfig {
    /// A minimal valid configuration of the given kind.
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            seed: 0,
            output_dir: default_output_dir(),
            sweep_values: Vec::new(),
            variants: Vec::new(),
            init: default_init(),
            tolerance_db: default_tolerance(),
            excursion_window_s: default_excursion_window(),
            write_theta: false,
            signal: SignalConfig::default(),
            model: ModelStructure::default(),
            proactive: ProactiveSection::default(),
            update: UpdateConfig::default(),
            pa: PaSection::default(),
            schedule: ScheduleSection::default(),
            impairment: FeedbackImpairment::none(),
        }
    }

    /// The variants actually run: the configured list, or a per-kind default.
    pub fn effective_variants(&self) -> Vec<Variant> {
        if !self.variants.is_empty() {
            return self.variants.clone();
        }
        let from_update = match self.update.algorithm {
            UpdateAlgorithm::Ila => Variant::Ila,
            UpdateAlgorithm::Robust => Variant::Robust,
            UpdateAlgorithm::ProactiveStatic => Variant::Proactive,
        };
        match self.experiment {
            ExperimentKind::NmseVsTime | ExperimentKind::MuSweep | ExperimentKind::SnrSweep => {
                vec![from_update]
            }
            ExperimentKind::BlocklenSweep => vec![Variant::Ila, Variant::Proactive],
            ExperimentKind::DegradationCurve => vec![Variant::Ila, Variant::Robust],
            ExperimentKind::WarmupCheck => vec![Variant::Frozen],
        }
    }

    /// Step lengths used by the experiment.
    pub fn step_lengths(&self) -> Vec<usize> {
        if self.experiment == ExperimentKind::BlocklenSweep {
            self.sweep_values.iter().map(|v| *v as usize).collect()
        } else {
            vec![self.schedule.step_len]
        }
    }

    pub fn sample_rate_hz(&self) -> f64 {
        match &self.signal {
            SignalConfig::Ofdm { ofdm, .. } => ofdm.sample_rate_hz,
            SignalConfig::PulsedNoise(p) => p.sample_rate_hz,
            SignalConfig::File { sample_rate_hz, .. } => {
                sample_rate_hz.unwrap_or(DEFAULT_SAMPLE_RATE_HZ)
            }
        }
    }
}

/// One violated rule, naming the offending field by its dotted path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(String),
    #[error("{}", join_diagnostics(.0))]
    UnknownFields(Vec<Diagnostic>),
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter()
        .map(|d| format!("{d}: unknown field"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses a configuration document. Syntax and type errors carry the line
/// and column; keys that no section recognizes are reported by path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let raw: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let echoed = toml::Table::try_from(&cfg).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let mut unknown = Vec::new();
    unknown_keys(&raw, &echoed, "", &mut unknown);
    if unknown.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::UnknownFields(unknown))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

// Every key the user wrote survives a parse/serialize round trip unless serde
// dropped it. The `[pa]` section keeps its extra keys for `PaSection::resolve`.
fn unknown_keys(raw: &toml::Table, echoed: &toml::Table, prefix: &str, out: &mut Vec<Diagnostic>) {
    for (k, v) in raw {
        let path = format!("{prefix}{k}");
        match echoed.get(k) {
            None => out.push(Diagnostic::new(path, "")),
            Some(toml::Value::Table(e)) => {
                if let toml::Value::Table(r) = v {
                    unknown_keys(r, e, &format!("{path}."), out);
                }
            }
            Some(_) => {}
        }
    }
}

/// Every rule the configuration violates; empty means it can run.
pub fn validate_config(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut d = Vec::new();
    let mut push = |field: &str, msg: String| d.push(Diagnostic::new(field, msg));

    if !(cfg.tolerance_db.is_finite() && cfg.tolerance_db > 0.0) {
        push(
            "tolerance_db",
            format!("must be positive, got {}", cfg.tolerance_db),
        );
    }
    if !(cfg.excursion_window_s.is_finite() && cfg.excursion_window_s > 0.0) {
        push(
            "excursion_window_s",
            format!("must be positive, got {}", cfg.excursion_window_s),
        );
    }

    let variants = cfg.effective_variants();
    let kind = cfg.experiment;
    if kind.is_sweep() && cfg.sweep_values.is_empty() {
        push(
            "sweep_values",
            format!("{kind:?} needs at least one sweep value"),
        );
    }
    for (i, &v) in cfg.sweep_values.iter().enumerate() {
        let field = format!("sweep_values[{i}]");
        let whole = v.is_finite() && v.fract() == 0.0;
        match kind {
            ExperimentKind::MuSweep if !(0.0..=1.0).contains(&v) => {
                push(&field, format!("step size must lie in [0, 1], got {v}"))
            }
            ExperimentKind::BlocklenSweep if !(whole && v >= 1.0) => push(
                &field,
                format!("block length must be a positive integer, got {v}"),
            ),
            ExperimentKind::WarmupCheck if !(whole && v >= 0.0) => push(
                &field,
                format!("overlap must be a nonnegative integer, got {v}"),
            ),
            ExperimentKind::SnrSweep
                if quantizer_sweep(cfg) && !(whole && (1.0..=48.0).contains(&v)) =>
            {
                push(
                    &field,
                    format!("quantizer bits must be an integer in 1..=48, got {v}"),
                )
            }
            ExperimentKind::SnrSweep | ExperimentKind::DegradationCurve if v.is_nan() => {
                push(&field, "SNR must be a number".into())
            }
            _ => {}
        }
    }
    match kind {
        ExperimentKind::MuSweep | ExperimentKind::DegradationCurve | ExperimentKind::SnrSweep => {
            if let Some(v) = variants.iter().find(|v| !v.is_reactive()) {
                push(
                    "variants",
                    format!("{kind:?} needs reactive variants, got {}", v.name()),
                );
            }
        }
        ExperimentKind::WarmupCheck => {
            if let Some(v) = variants.iter().find(|v| v.is_reactive()) {
                push(
                    "variants",
                    format!("warmup_check runs fixed predistorters, got {}", v.name()),
                );
            }
        }
        _ => {}
    }

    let fs = cfg.sample_rate_hz();
    let est_len = match &cfg.signal {
        SignalConfig::Ofdm { ofdm, drive_rms } => {
            if let Err(e) = ofdm.validate() {
                push("signal", e.to_string());
            }
            if !(drive_rms.is_finite() && *drive_rms > 0.0) {
                push(
                    "signal.drive_rms",
                    format!("must be positive, got {drive_rms}"),
                );
            }
            Some(ofdm.num_symbols * ofdm.symbol_len())
        }
        SignalConfig::PulsedNoise(p) => {
            if let Err(e) = p.validate() {
                push("signal", e.to_string());
            }
            Some(p.total_samples())
        }
        SignalConfig::File {
            sample_rate_hz,
            drive_rms,
            path,
        } => {
            if let Some(r) = drive_rms {
                if !(r.is_finite() && *r > 0.0) {
                    push("signal.drive_rms", format!("must be positive, got {r}"));
                }
            }
            if let Some(f) = sample_rate_hz {
                if !(f.is_finite() && *f > 0.0) {
                    push(
                        "signal.sample_rate_hz",
                        format!("must be positive, got {f}"),
                    );
                }
            }
            if !path.exists() {
                push("signal.path", format!("{} does not exist", path.display()));
            }
            None
        }
    };

    if let Err(e) = cfg.model.validate() {
        push("model", e.to_string());
    }
    if variants.contains(&Variant::Proactive) {
        if let Err(e) = cfg.proactive.structure.validate() {
            push("proactive", e.to_string());
        }
        let c = cfg.proactive.state_cutoff_hz;
        if !(c > 0.0 && c < fs / 2.0) {
            push(
                "proactive.state_cutoff_hz",
                format!("must lie in (0, {}), got {c}", fs / 2.0),
            );
        }
    }
    if !(0.0..=1.0).contains(&cfg.update.mu) {
        push(
            "update.mu",
            format!("must lie in [0, 1], got {}", cfg.update.mu),
        );
    }
    let reg = cfg.update.regularization;
    if !(reg.is_finite() && reg >= 0.0) {
        push(
            "update.regularization",
            format!("must be finite and nonnegative, got {reg}"),
        );
    }

    let pa = match cfg.pa.resolve() {
        Ok(pa) => {
            if let Err(e) = pa.validate() {
                push("pa", e.to_string());
            }
            Some(pa)
        }
        Err(diag) => {
            push(&diag.field, diag.message);
            None
        }
    };

    match cfg.impairment.kind {
        ImpairmentKind::Quantizer { bits } if !(1..=48).contains(&bits) => {
            push("impairment.bits", format!("must lie in 1..=48, got {bits}"))
        }
        ImpairmentKind::AwgnSnr { target_snr_db } if target_snr_db.is_nan() => {
            push("impairment.target_snr_db", "must be a number".into())
        }
        _ => {}
    }

    let s = &cfg.schedule;
    if s.step_len == 0 && kind != ExperimentKind::BlocklenSweep {
        push("schedule.step_len", "must be positive".into());
    }
    if let Some(w) = s.window_len {
        for step in cfg.step_lengths() {
            if step > w {
                push(
                    "schedule.step_len",
                    format!("step length {step} exceeds window_len {w}"),
                );
                break;
            }
        }
    }
    if let (Some(pa), Some(init)) = (&pa, s.init_len) {
        for step in cfg.step_lengths() {
            let need = s.resolve(step, pa).window_len.saturating_sub(step);
            if init < need {
                push(
                    "schedule.init_len",
                    format!("must be at least window_len - step_len = {need}, got {init}"),
                );
                break;
            }
        }
    }
    if let Some(len) = est_len {
        let longest = cfg.step_lengths().into_iter().max().unwrap_or(0);
        if longest > len {
            push(
                "signal",
                format!("signal of {len} samples is shorter than one block of {longest}"),
            );
        }
    }
    d
}

fn quantizer_sweep(cfg: &ExperimentConfig) -> bool {
    matches!(cfg.impairment.kind, ImpairmentKind::Quantizer { .. })
}
