//! Core algorithms for digital predistortion (DPD) adaptation experiments:
//! test signals, behavioral models, least-squares identification, a
//! thermally drifting power-amplifier (PA) model and the closed-loop testbed.
//!
//! ```
//! use dpdlab_core::signal::gen_ofdm;
//! use dpdlab_core::testbed::{cyclic_init_data, default_overlap, run_adaptation, steady_state_nmse_db};
//! use dpdlab_core::*;
//!
//! # fn main() -> dpdlab_core::Result<()> {
//! let pa = PaConfig::reference();
//! let u = normalize_rms(&gen_ofdm(&OfdmConfig { num_symbols: 20, ..OfdmConfig::default() })?, 0.12)?;
//! let schedule = Schedule::with_overlap(4096, default_overlap(&pa));
//! let init = cyclic_init_data(&u, schedule.init_len)?;
//! let setup = AdaptationSetup {
//!     update: UpdateConfig::default(),
//!     pa,
//!     schedule,
//!     impairment: FeedbackImpairment::awgn(30.0, 0),
//!     mode: AdaptationMode::Reactive,
//!     state: StateConfig::default(),
//!     pa_noise_seed: 0,
//! };
//! let cold = ParameterSet::unit_linear(ModelStructure::mp(7, 2));
//! let trace = run_adaptation(&u, &init, &cold, &setup)?;
//! assert!(steady_state_nmse_db(&trace)? < -30.0);
//! # Ok(())
//! # }
//! ```

pub mod error;
pub mod estimation;
pub mod models;
pub mod pa;
pub mod signal;
pub mod testbed;

pub use error::{DpdError, Result};
pub use estimation::{UpdateAlgorithm, UpdateConfig};
pub use models::{CMatrix, GmpTerm, ModelKind, ModelStructure, ParameterSet, StateConfig};
pub use pa::{PaConfig, PaState};
pub use signal::{
    normalize_rms, time_align, ComplexSignal, OfdmConfig, PowerLevel, PulsedNoiseConfig,
};
pub use testbed::{
    AdaptationMode, AdaptationSetup, AdaptationTrace, FeedbackImpairment, ImpairmentKind, InitKind,
    Schedule, TraceRecord,
};
