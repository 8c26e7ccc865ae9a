//! Memory-polynomial (MP), generalized memory-polynomial (GMP) and proactive
//! state-dependent behavioral models.
//!
//! Every model here is linear in its parameters: the output is a regressor
//! matrix `H` (one row per sample, one column per basis function) times a
//! coefficient vector. Column order is fixed:
//!
//! 1. the MP block, order-major: `(p=1,m=0), (p=1,m=1), .., (p=1,m=M), (p=2,m=0), ..`
//!    with basis `x[n-m] * |x[n-m]|^(p-1)`;
//! 2. GMP lagging-envelope terms `x[n-m] * |x[n-m-g]|^(p-1)` in the order given;
//! 3. GMP leading-envelope terms `x[n-m] * |x[n-m+g]|^(p-1)` in the order given.
//!
//! Samples before the start of the signal are taken as zero.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DpdError, Result};
use crate::signal::{lowpass_filter, ComplexSignal};

pub type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mp,
    Gmp,
}

/// One GMP cross term: nonlinear `order`, signal delay `memory` and envelope
/// offset `shift` relative to the signal sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GmpTerm {
    pub order: usize,
    pub memory: usize,
    pub shift: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelStructure {
    pub kind: ModelKind,
    pub nonlinear_order: usize,
    pub memory_depth: usize,
    pub gmp_lag: Vec<GmpTerm>,
    pub gmp_lead: Vec<GmpTerm>,
}

impl Default for ModelStructure {
    fn default() -> Self {
        Self::mp(7, 2)
    }
}

impl ModelStructure {
    /// `MP(P, M)`: orders `1..=P` on taps `0..=M`.
    pub fn mp(nonlinear_order: usize, memory_depth: usize) -> Self {
        Self {
            kind: ModelKind::Mp,
            nonlinear_order,
            memory_depth,
            gmp_lag: Vec::new(),
            gmp_lead: Vec::new(),
        }
    }

    pub fn gmp(
        nonlinear_order: usize,
        memory_depth: usize,
        gmp_lag: Vec<GmpTerm>,
        gmp_lead: Vec<GmpTerm>,
    ) -> Self {
        Self {
            kind: ModelKind::Gmp,
            nonlinear_order,
            memory_depth,
            gmp_lag,
            gmp_lead,
        }
    }

    /// Checks the structural invariants. Cross terms must stay inside the
    /// `x[n-M..=n]` history: lag terms need `memory + shift <= M`, lead terms
    /// need `shift <= memory <= M`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DpdError::InvalidConfig(m));
        if self.nonlinear_order == 0 {
            return bad("nonlinear_order must be at least 1".into());
        }
        if self.kind == ModelKind::Mp && !(self.gmp_lag.is_empty() && self.gmp_lead.is_empty()) {
            return bad("MP structure cannot carry GMP cross terms".into());
        }
        let m = self.memory_depth;
        for t in &self.gmp_lag {
            if t.order < 2 || t.shift == 0 || t.memory + t.shift > m {
                return bad(format!(
                    "lag term {t:?} needs order >= 2, shift >= 1 and memory + shift <= {m}"
                ));
            }
        }
        for t in &self.gmp_lead {
            if t.order < 2 || t.shift == 0 || t.shift > t.memory || t.memory > m {
                return bad(format!(
                    "lead term {t:?} needs order >= 2 and 1 <= shift <= memory <= {m}"
                ));
            }
        }
        Ok(())
    }

    pub fn mp_columns(&self) -> usize {
        self.nonlinear_order * (self.memory_depth + 1)
    }

    pub fn n_coeff(&self) -> usize {
        self.mp_columns() + self.gmp_lag.len() + self.gmp_lead.len()
    }

    /// Column index of the linear, undelayed term.
    pub fn linear_column(&self) -> usize {
        0
    }

    /// Fills `out` (length `n_coeff`) with the basis terms for sample `n`.
    #[inline]
    pub(crate) fn row_into(&self, x: &[Complex64], n: usize, out: &mut [Complex64]) {
        let at = |k: isize| -> Complex64 {
            if k >= 0 && (k as usize) < x.len() {
                x[k as usize]
            } else {
                ZERO
            }
        };
        let n = n as isize;
        let taps = self.memory_depth + 1;
        for m in 0..taps {
            let v = at(n - m as isize);
            let a = v.norm();
            let mut env = 1.0;
            for p in 0..self.nonlinear_order {
                out[p * taps + m] = v * env;
                env *= a;
            }
        }
        let mut col = self.mp_columns();
        for t in &self.gmp_lag {
            let v = at(n - t.memory as isize);
            let a = at(n - (t.memory + t.shift) as isize).norm();
            out[col] = v * a.powi(t.order as i32 - 1);
            col += 1;
        }
        for t in &self.gmp_lead {
            let v = at(n - t.memory as isize);
            let a = at(n - t.memory as isize + t.shift as isize).norm();
            out[col] = v * a.powi(t.order as i32 - 1);
            col += 1;
        }
    }
}

/// Complex coefficients bound to a structure. `theta_dyn` is present only for
/// proactive models, where the effective parameters at sample `n` are
/// `theta + s[n] * theta_dyn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub structure: ModelStructure,
    pub theta: Vec<Complex64>,
    pub theta_dyn: Option<Vec<Complex64>>,
}

impl ParameterSet {
    pub fn new(structure: ModelStructure, theta: Vec<Complex64>) -> Result<Self> {
        let p = Self {
            structure,
            theta,
            theta_dyn: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn proactive(
        structure: ModelStructure,
        theta: Vec<Complex64>,
        theta_dyn: Vec<Complex64>,
    ) -> Result<Self> {
        let p = Self {
            structure,
            theta,
            theta_dyn: Some(theta_dyn),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(structure: ModelStructure) -> Self {
        let n = structure.n_coeff();
        Self {
            structure,
            theta: vec![ZERO; n],
            theta_dyn: None,
        }
    }

    /// All coefficients zero except a unit linear tap: the identity model.
    pub fn unit_linear(structure: ModelStructure) -> Self {
        let mut p = Self::zeros(structure);
        let c = p.structure.linear_column();
        p.theta[c] = Complex64::new(1.0, 0.0);
        p
    }

    /// Adds a zero dynamic block, turning a static set into a proactive one.
    pub fn with_zero_dyn(mut self) -> Self {
        self.theta_dyn = Some(vec![ZERO; self.theta.len()]);
        self
    }

    pub fn is_proactive(&self) -> bool {
        self.theta_dyn.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        self.structure.validate()?;
        let n = self.structure.n_coeff();
        if self.theta.len() != n {
            return Err(DpdError::StructureMismatch(format!(
                "theta has {} entries, structure needs {n}",
                self.theta.len()
            )));
        }
        if let Some(d) = &self.theta_dyn {
            if d.len() != n {
                return Err(DpdError::StructureMismatch(format!(
                    "theta_dyn has {} entries, structure needs {n}",
                    d.len()
                )));
            }
        }
        Ok(())
    }

    /// CSV with columns `index,re,im,block`, block being `static` or `dynamic`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,re,im,block")?;
        for (i, c) in self.theta.iter().enumerate() {
            writeln!(w, "{i},{},{},static", c.re, c.im)?;
        }
        if let Some(d) = &self.theta_dyn {
            for (i, c) in d.iter().enumerate() {
                writeln!(w, "{i},{},{},dynamic", c.re, c.im)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, structure: ModelStructure) -> Result<Self> {
        let n = structure.n_coeff();
        let mut theta = vec![None; n];
        let mut dynamic: Option<Vec<Option<Complex64>>> = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let err = |m: &str| DpdError::Format(format!("line {}: {m}", lineno + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(err("expected 4 fields"));
            }
            let idx: usize = f[0].parse().map_err(|_| err("bad index"))?;
            let re: f64 = f[1].parse().map_err(|_| err("bad re"))?;
            let im: f64 = f[2].parse().map_err(|_| err("bad im"))?;
            if idx >= n {
                return Err(err("index out of range for structure"));
            }
            let slot = match f[3] {
                "static" => &mut theta[idx],
                "dynamic" => &mut dynamic.get_or_insert_with(|| vec![None; n])[idx],
                other => return Err(err(&format!("unknown block {other:?}"))),
            };
            *slot = Some(Complex64::new(re, im));
        }
        let complete = |v: Vec<Option<Complex64>>, name: &str| -> Result<Vec<Complex64>> {
            v.into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| DpdError::Format(format!("{name} block is incomplete")))
        };
        let theta = complete(theta, "static")?;
        let theta_dyn = dynamic.map(|d| complete(d, "dynamic")).transpose()?;
        let p = Self {
            structure,
            theta,
            theta_dyn,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Low-pass corner for the proactive state signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateConfig {
    pub cutoff_hz: f64,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self { cutoff_hz: 50.0e3 }
    }
}

/// Regressor rows for samples `first_row..x.len()`, using the samples before
/// `first_row` only as history.
pub fn regressor_rows(x: &[Complex64], first_row: usize, structure: &ModelStructure) -> CMatrix {
    let rows = x.len().saturating_sub(first_row);
    let cols = structure.n_coeff();
    let mut h = CMatrix::zeros(rows, cols);
    let mut row = vec![ZERO; cols];
    for r in 0..rows {
        structure.row_into(x, first_row + r, &mut row);
        for (j, v) in row.iter().enumerate() {
            h[(r, j)] = *v;
        }
    }
    h
}

/// Full regressor matrix, `len(x)` rows by `n_coeff` columns.
pub fn build_regressor(x: &ComplexSignal, structure: &ModelStructure) -> Result<CMatrix> {
    structure.validate()?;
    if x.len() <= structure.memory_depth {
        return Err(DpdError::SignalTooShort {
            len: x.len(),
            required: structure.memory_depth,
        });
    }
    Ok(regressor_rows(x.samples(), 0, structure))
}

/// `H * theta`, accumulated column by column in index order.
pub fn matvec(h: &CMatrix, theta: &[Complex64]) -> Vec<Complex64> {
    assert_eq!(h.ncols(), theta.len(), "matvec dimension mismatch");
    let mut y = vec![ZERO; h.nrows()];
    for (j, t) in theta.iter().enumerate() {
        for (yi, hij) in y.iter_mut().zip(h.column(j).iter()) {
            *yi += hij * t;
        }
    }
    y
}

fn check_static(params: &ParameterSet) -> Result<()> {
    params.validate()?;
    if params.theta_dyn.is_some() {
        return Err(DpdError::StructureMismatch(
            "static evaluation requested for a proactive parameter set".into(),
        ));
    }
    Ok(())
}

/// Static model output over `range`, with earlier samples of `x` as history.
pub fn model_output_range(
    x: &[Complex64],
    range: std::ops::Range<usize>,
    params: &ParameterSet,
) -> Result<Vec<Complex64>> {
    check_static(params)?;
    let s = &params.structure;
    let mut row = vec![ZERO; s.n_coeff()];
    Ok(range
        .map(|n| {
            s.row_into(x, n, &mut row);
            row.iter()
                .zip(&params.theta)
                .fold(ZERO, |acc, (h, t)| acc + h * t)
        })
        .collect())
}

/// Static model output `H_x * theta`; also the predistorter when `params` holds
/// an inverse model.
pub fn model_output(x: &ComplexSignal, params: &ParameterSet) -> Result<ComplexSignal> {
    let y = model_output_range(x.samples(), 0..x.len(), params)?;
    ComplexSignal::new(y, x.sample_rate_hz())
}

/// State signal: `|x[n]|^2` through the shared low-pass filter.
pub fn compute_state(x: &ComplexSignal, cfg: &StateConfig) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(DpdError::InvalidSignal("state of an empty signal".into()));
    }
    let power: Vec<Complex64> = x
        .samples()
        .iter()
        .map(|v| Complex64::new(v.norm_sqr(), 0.0))
        .collect();
    let p = ComplexSignal::new(power, x.sample_rate_hz())?;
    Ok(lowpass_filter(&p, cfg.cutoff_hz)?
        .samples()
        .iter()
        .map(|v| v.re)
        .collect())
}

fn check_proactive(params: &ParameterSet) -> Result<&[Complex64]> {
    params.validate()?;
    params
        .theta_dyn
        .as_deref()
        .ok_or_else(|| DpdError::StructureMismatch("proactive evaluation needs theta_dyn".into()))
}

/// Proactive output over `range`: row `n` of `H_x` times `theta + s[n] theta_dyn`.
pub fn proactive_output_range(
    x: &[Complex64],
    s: &[f64],
    range: std::ops::Range<usize>,
    params: &ParameterSet,
) -> Result<Vec<Complex64>> {
    let dyn_theta = check_proactive(params)?;
    if s.len() != x.len() {
        return Err(DpdError::LengthMismatch {
            expected: x.len(),
            actual: s.len(),
        });
    }
    let st = &params.structure;
    let mut row = vec![ZERO; st.n_coeff()];
    Ok(range
        .map(|n| {
            st.row_into(x, n, &mut row);
            let sn = s[n];
            row.iter()
                .zip(params.theta.iter().zip(dyn_theta))
                .fold(ZERO, |acc, (h, (t0, t1))| acc + h * (t0 + t1 * sn))
        })
        .collect())
}

pub fn proactive_output(
    x: &ComplexSignal,
    params: &ParameterSet,
    s: &[f64],
) -> Result<ComplexSignal> {
    let y = proactive_output_range(x.samples(), s, 0..x.len(), params)?;
    ComplexSignal::new(y, x.sample_rate_hz())
}

/// `[H | diag(s) H]` for rows `first_row..`, the joint basis used to identify
/// `(theta, theta_dyn)` in one least-squares solve.
pub fn proactive_regressor_rows(
    x: &[Complex64],
    s: &[f64],
    first_row: usize,
    structure: &ModelStructure,
) -> Result<CMatrix> {
    if s.len() != x.len() {
        return Err(DpdError::LengthMismatch {
            expected: x.len(),
            actual: s.len(),
        });
    }
    let base = regressor_rows(x, first_row, structure);
    let (rows, cols) = base.shape();
    let mut h = CMatrix::zeros(rows, 2 * cols);
    h.columns_mut(0, cols).copy_from(&base);
    for j in 0..cols {
        for r in 0..rows {
            h[(r, cols + j)] = base[(r, j)] * s[first_row + r];
        }
    }
    Ok(h)
}

pub fn build_proactive_regressor(
    x: &ComplexSignal,
    s: &[f64],
    structure: &ModelStructure,
) -> Result<CMatrix> {
    structure.validate()?;
    proactive_regressor_rows(x.samples(), s, 0, structure)
}
