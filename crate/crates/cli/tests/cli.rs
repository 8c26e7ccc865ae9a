use std::path::{Path, PathBuf};
use std::process::Command;

use dpdlab_cli::{
    load_config, parse_config, plan_runs, run_experiment, validate_config, Cell, ConfigError,
    ExperimentConfig, ExperimentKind, RunOptions, Variant,
};
use dpdlab_core::{FeedbackImpairment, OfdmConfig, ParameterSet};
use proptest::prelude::*;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small(kind: ExperimentKind, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(kind);
    cfg.output_dir = dir.to_path_buf();
    if let dpdlab_cli::SignalConfig::Ofdm { ofdm, .. } = &mut cfg.signal {
        *ofdm = OfdmConfig {
            num_symbols: 12,
            papr_limit_db: Some(7.0),
            ..OfdmConfig::default()
        };
    }
    cfg.model = dpdlab_core::ModelStructure::mp(5, 1);
    cfg
}

fn fields(cfg: &ExperimentConfig) -> Vec<String> {
    validate_config(cfg).into_iter().map(|d| d.field).collect()
}

#[test]
fn default_config_is_valid() {
    let cfg = ExperimentConfig::new(ExperimentKind::NmseVsTime);
    assert_eq!(validate_config(&cfg), vec![]);
    let parsed = parse_config("experiment = \"nmse_vs_time\"\n").unwrap();
    assert_eq!(parsed, cfg);
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(validate_config(&cfg), vec![], "{}", path.display());
        n += 1;
    }
    assert!(n >= 8);
}

#[test]
fn step_longer_than_window() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::NmseVsTime);
    cfg.schedule.window_len = Some(2048);
    assert_eq!(fields(&cfg), vec!["schedule.step_len"]);
}

#[test]
fn zero_bits() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::NmseVsTime);
    cfg.impairment = FeedbackImpairment::quantizer(0, 0);
    assert_eq!(fields(&cfg), vec!["impairment.bits"]);
}

#[test]
fn sweep_rules() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::MuSweep);
    assert_eq!(fields(&cfg), vec!["sweep_values"]);
    cfg.sweep_values = vec![0.5, 1.5];
    assert_eq!(fields(&cfg), vec!["sweep_values[1]"]);
    cfg.sweep_values = vec![0.5];
    cfg.variants = vec![Variant::Proactive];
    assert_eq!(fields(&cfg), vec!["variants"]);

    let mut cfg = ExperimentConfig::new(ExperimentKind::BlocklenSweep);
    cfg.sweep_values = vec![1024.0, 100.5, 0.0];
    assert_eq!(fields(&cfg), vec!["sweep_values[1]", "sweep_values[2]"]);

    let mut cfg = ExperimentConfig::new(ExperimentKind::WarmupCheck);
    cfg.sweep_values = vec![-1.0];
    cfg.variants = vec![Variant::Ila];
    assert_eq!(fields(&cfg), vec!["sweep_values[0]", "variants"]);

    let mut cfg = ExperimentConfig::new(ExperimentKind::SnrSweep);
    cfg.impairment = FeedbackImpairment::quantizer(8, 0);
    cfg.sweep_values = vec![8.0, 0.0, 49.0];
    assert_eq!(fields(&cfg), vec!["sweep_values[1]", "sweep_values[2]"]);
}

#[test]
fn nested_rules_name_their_field() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::NmseVsTime);
    cfg.update.mu = 1.2;
    cfg.update.regularization = -1.0;
    cfg.model.nonlinear_order = 0;
    cfg.tolerance_db = 0.0;
    cfg.schedule.init_len = Some(5);
    assert_eq!(
        fields(&cfg),
        vec![
            "tolerance_db",
            "model",
            "update.mu",
            "update.regularization",
            "schedule.init_len"
        ]
    );
    let text = "experiment = \"nmse_vs_time\"\n[pa]\nthermal_alpha = 2.0\n";
    assert_eq!(fields(&parse_config(text).unwrap()), vec!["pa"]);
    let text = "experiment = \"nmse_vs_time\"\n[pa]\nthermal_alfa = 0.5\n";
    assert_eq!(
        fields(&parse_config(text).unwrap()),
        vec!["pa.thermal_alfa"]
    );
    let text = "experiment = \"nmse_vs_time\"\n[signal]\nkind = \"ofdm\"\nnum_symbols = 1\n";
    assert_eq!(fields(&parse_config(text).unwrap()), vec!["signal"]);
}

#[test]
fn parse_errors_carry_location_and_path() {
    let err = parse_config("experiment = \"nmse_vs_time\"\n[update]\nmu = \"fast\"\n").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, ConfigError::Syntax(_)));
    assert!(msg.contains("line 3"), "{msg}");
    let err =
        parse_config("experiment = \"nmse_vs_time\"\nsed = 3\n[update]\nmuu = 0.1\n").unwrap_err();
    let ConfigError::UnknownFields(d) = err else {
        panic!("{err}")
    };
    let names: Vec<_> = d.iter().map(|d| d.field.as_str()).collect();
    assert_eq!(names, ["sed", "update.muu"]);
    assert!(parse_config(
        "experiment = \"nmse_vs_time\"\n[pa]\nnoise = false\nthermal_alpha = 0.001\n"
    )
    .is_ok());
}

#[test]
fn pa_overrides_apply_on_top_of_preset() {
    let cfg = parse_config(
        "experiment = \"nmse_vs_time\"\n[pa]\npreset = \"time_invariant\"\nnoise = false\nsmall_signal_gain = [5.0, 1.0]\n",
    )
    .unwrap();
    let pa = cfg.pa.resolve().unwrap();
    assert_eq!(pa.small_signal_gain, num_complex::Complex64::new(5.0, 1.0));
    assert!(pa.is_time_invariant());
    assert_eq!(pa.output_noise_floor_dbc, None);
}

#[test]
fn config_echo_reparses_identically() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let cfg = load_config(&entry.unwrap().path()).unwrap();
        let echo = toml::to_string(&cfg).unwrap();
        assert_eq!(parse_config(&echo).unwrap(), cfg);
    }
}

#[test]
fn run_plan_order_and_labels() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::DegradationCurve);
    cfg.sweep_values = vec![20.0, 30.0];
    let labels: Vec<String> = plan_runs(&cfg).into_iter().map(|s| s.dir_name()).collect();
    assert_eq!(
        labels,
        [
            "run_000_ila_clean",
            "run_001_robust_clean",
            "run_002_ila_snr20",
            "run_003_robust_snr20",
            "run_004_ila_snr30",
            "run_005_robust_snr30"
        ]
    );
    let mut cfg = ExperimentConfig::new(ExperimentKind::BlocklenSweep);
    cfg.sweep_values = vec![1024.0];
    let plan = plan_runs(&cfg);
    assert_eq!(plan.len(), 2);
    assert!(plan.iter().all(|s| s.step_len == 1024));
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn outputs_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(ExperimentKind::SnrSweep, tmp.path());
    cfg.sweep_values = vec![25.0, f64::INFINITY];
    cfg.write_theta = true;
    let report = run_experiment(&cfg, &RunOptions::default()).unwrap();

    for run in &report.runs {
        let dir = tmp.path().join(run.spec.dir_name());
        let trace = run.trace().unwrap();
        let (header, rows) = read_rows(&dir.join("trace.csv"));
        assert_eq!(
            header,
            ["step", "time_s", "nmse_db", "feedback_snr_db", "theta_file"]
        );
        assert_eq!(rows.len(), trace.len());
        for (row, rec) in rows.iter().zip(&trace.steps) {
            assert_eq!(row[0].parse::<usize>().unwrap(), rec.step_index);
            assert_eq!(row[1].parse::<f64>().unwrap(), rec.time_s);
            assert_eq!(row[2].parse::<f64>().unwrap(), rec.nmse_db);
            assert_eq!(row[3].parse::<f64>().unwrap(), rec.feedback_snr_db);
            let f = std::fs::File::open(dir.join(&row[4])).unwrap();
            let mut text = String::new();
            std::io::Read::read_to_string(&mut std::io::BufReader::new(f), &mut text).unwrap();
            let body: String = text
                .lines()
                .filter(|l| !l.starts_with('#'))
                .map(|l| format!("{l}\n"))
                .collect();
            let theta =
                ParameterSet::read_csv(body.as_bytes(), rec.theta.structure.clone()).unwrap();
            assert_eq!(theta, rec.theta);
        }
    }
    let (header, rows) = read_rows(&tmp.path().join("summary.csv"));
    assert_eq!(header, report.summary.columns);
    for (row, cells) in rows.iter().zip(&report.summary.rows) {
        for (text, cell) in row.iter().zip(cells) {
            match cell {
                Cell::Num(v) if v.is_nan() => assert_eq!(text, "NaN"),
                Cell::Num(v) => assert_eq!(text.parse::<f64>().unwrap(), *v),
                Cell::Int(v) => assert_eq!(text.parse::<u64>().unwrap(), *v),
                Cell::Text(s) => assert_eq!(text, s),
            }
        }
    }
    let echo = std::fs::read_to_string(tmp.path().join("config.toml")).unwrap();
    assert!(echo.starts_with("# dpdlab"));
    assert_eq!(parse_config(&echo).unwrap(), cfg);
    // The unimpaired point sees a clean feedback path.
    let fb = report.summary.values("ila", "feedback_snr_db");
    assert!(
        (fb[0] - 25.0).abs() < 0.01 && fb[1] == f64::INFINITY,
        "{fb:?}"
    );
}

#[test]
fn parallel_runs_match_sequential() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(ExperimentKind::MuSweep, &tmp.path().join("seq"));
    cfg.sweep_values = vec![0.3, 0.9];
    cfg.impairment = FeedbackImpairment::awgn(35.0, 4);
    let opts = RunOptions {
        jobs: 1,
        timestamp: false,
    };
    let a = run_experiment(&cfg, &opts).unwrap();
    cfg.output_dir = tmp.path().join("par");
    let b = run_experiment(&cfg, &RunOptions { jobs: 2, ..opts }).unwrap();
    assert_eq!(a.runs, b.runs);
    for name in [
        "summary.csv",
        "run_000_ila_mu0.3/trace.csv",
        "run_001_ila_mu0.9/trace.csv",
    ] {
        let fa = std::fs::read(tmp.path().join("seq").join(name)).unwrap();
        let fb = std::fs::read(tmp.path().join("par").join(name)).unwrap();
        assert_eq!(fa, fb, "{name}");
    }
}

#[test]
fn seed_changes_noisy_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(ExperimentKind::NmseVsTime, tmp.path());
    cfg.impairment = FeedbackImpairment::awgn(30.0, 0);
    let opts = RunOptions {
        jobs: 1,
        timestamp: false,
    };
    let a = run_experiment(&cfg, &opts).unwrap();
    cfg.seed = 99;
    let b = run_experiment(&cfg, &opts).unwrap();
    assert_ne!(
        a.runs[0].trace().unwrap().nmse(),
        b.runs[0].trace().unwrap().nmse()
    );
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(ExperimentKind::NmseVsTime, &tmp.path().join("never"));
    cfg.update.mu = -0.1;
    let err = run_experiment(&cfg, &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("update.mu"), "{err}");
    assert!(!tmp.path().join("never").exists());
}

#[test]
fn robust_degrades_less_at_every_snr() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = load_config(&configs().join("degradation.toml")).unwrap();
    cfg.output_dir = tmp.path().to_path_buf();
    cfg.sweep_values = vec![12.0, 18.0, 24.0, 30.0, 36.0, 42.0];
    let report = run_experiment(
        &cfg,
        &RunOptions {
            jobs: 1,
            timestamp: false,
        },
    )
    .unwrap();
    let ila = report.summary.values("ila", "degradation_db");
    let rob = report.summary.values("robust", "degradation_db");
    assert_eq!(ila.len(), 6);
    for (i, r) in ila.iter().zip(&rob) {
        assert!(r < i, "ila {ila:?} robust {rob:?}");
    }
    // Degradation shrinks as the feedback gets cleaner.
    assert!(ila.windows(2).all(|w| w[1] < w[0]), "{ila:?}");
}

#[test]
fn binary_validate_and_run() {
    let exe = env!("CARGO_BIN_EXE_dpdlab");
    let tmp = tempfile::tempdir().unwrap();
    let ok = Command::new(exe)
        .args(["validate"])
        .arg(configs().join("quick.toml"))
        .output()
        .unwrap();
    assert!(ok.status.success());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(
        &bad,
        "experiment = \"mu_sweep\"\n[impairment]\nkind = \"quantizer\"\nbits = 0\n",
    )
    .unwrap();
    let out = Command::new(exe)
        .arg("validate")
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("sweep_values") && err.contains("impairment.bits"),
        "{err}"
    );

    let out_dir = tmp.path().join("out");
    let run = Command::new(exe)
        .arg("run")
        .arg(configs().join("quick.toml"))
        .arg("--output-dir")
        .arg(&out_dir)
        .args(["--seed", "3", "--jobs", "1", "--no-timestamp"])
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let echo = load_config(&out_dir.join("config.toml")).unwrap();
    assert_eq!(echo.seed, 3);
    assert_eq!(echo.output_dir, out_dir);
    let trace = std::fs::read_to_string(out_dir.join("run_000_ila/trace.csv")).unwrap();
    assert!(trace.starts_with("step,time_s,nmse_db,feedback_snr_db,theta_file\n"));

    let failing = Command::new(exe).arg("run").arg(&bad).output().unwrap();
    assert!(!failing.status.success());
}

proptest! {
    #[test]
    fn numeric_cells_round_trip(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        let text = Cell::Num(v).to_string();
        let back: f64 = text.parse().unwrap();
        prop_assert!(back.to_bits() == v.to_bits() || (v.is_nan() && back.is_nan()));
    }

    #[test]
    fn mu_diagnostic_iff_out_of_range(mu in -2.0f64..3.0) {
        let mut cfg = ExperimentConfig::new(ExperimentKind::NmseVsTime);
        cfg.update.mu = mu;
        let flagged = fields(&cfg).contains(&"update.mu".to_string());
        prop_assert_eq!(flagged, !(0.0..=1.0).contains(&mu));
    }
}
