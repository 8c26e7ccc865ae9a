//! Fixtures shared by the kernel benchmarks.

use dpdlab_core::signal::gen_ofdm;
use dpdlab_core::{normalize_rms, ComplexSignal, OfdmConfig};

/// OFDM record of at least `len` samples at the usual drive level, cut to `len`.
pub fn ofdm_fixture(len: usize) -> ComplexSignal {
    let cfg = OfdmConfig {
        num_symbols: 1,
        papr_limit_db: Some(7.0),
        ..OfdmConfig::default()
    };
    let symbols = len.div_ceil(cfg.symbol_len()).max(1);
    let u = gen_ofdm(&OfdmConfig {
        num_symbols: symbols,
        ..cfg
    })
    .expect("valid OFDM config");
    normalize_rms(&u, 0.12)
        .expect("nonzero signal")
        .slice(0, len)
        .expect("long enough")
}
