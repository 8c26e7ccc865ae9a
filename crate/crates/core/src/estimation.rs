//! Complex least squares and the parameter-update rules.
//!
//! All solves go through a Householder QR of the column-scaled regressor.
//! Large systems are absorbed a chunk of rows at a time: the running upper
//! triangle `R` is stacked on top of the next chunk and re-factored, which
//! yields the same solution as one factorization of the full matrix while
//! only holding `chunk x cols` entries in memory.

use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DpdError, Result};
use crate::models::{
    matvec, proactive_regressor_rows, regressor_rows, CMatrix, ModelStructure, ParameterSet,
};
use crate::signal::ComplexSignal;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Default ridge weight, relative to the trace of the scaled normal matrix.
pub const DEFAULT_REGULARIZATION: f64 = 1e-10;

/// Row chunk used by the streaming fits.
const CHUNK_ROWS: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateAlgorithm {
    Ila,
    Robust,
    ProactiveStatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub mu: f64,
    pub regularization: f64,
    pub algorithm: UpdateAlgorithm,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            mu: 0.8,
            regularization: DEFAULT_REGULARIZATION,
            algorithm: UpdateAlgorithm::Ila,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(DpdError::InvalidConfig(format!(
                "mu must lie in [0, 1], got {}",
                self.mu
            )));
        }
        check_regularization(self.regularization)
    }
}

fn check_regularization(reg: f64) -> Result<()> {
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(DpdError::InvalidConfig(format!(
            "regularization must be finite and nonnegative, got {reg}"
        )));
    }
    Ok(())
}

/// In-place Householder QR of the column-major `m x n` matrix `a`, applying
/// the same reflections to `b`. On return the upper triangle of `a` holds `R`.
fn householder(a: &mut [Complex64], m: usize, n: usize, b: &mut [Complex64]) {
    let mut v = vec![ZERO; m];
    for k in 0..n.min(m) {
        let len = m - k;
        let col = &a[k * m + k..(k + 1) * m];
        let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = col[0];
        let phase = if x0 == ZERO {
            Complex64::new(1.0, 0.0)
        } else {
            x0 / x0.norm()
        };
        let alpha = -phase * norm;
        let v = &mut v[..len];
        v.copy_from_slice(col);
        v[0] -= alpha;
        let vnorm2 = 2.0 * norm * (norm + x0.norm());

        let reflect = |target: &mut [Complex64]| {
            let s = v
                .iter()
                .zip(target.iter())
                .fold(ZERO, |acc, (vi, ti)| acc + vi.conj() * ti);
            let f = s * (2.0 / vnorm2);
            if f != ZERO {
                for (ti, vi) in target.iter_mut().zip(v.iter()) {
                    *ti -= f * vi;
                }
            }
        };
        for j in k + 1..n {
            reflect(&mut a[j * m + k..(j + 1) * m]);
        }
        reflect(&mut b[k..m]);
        a[k * m + k] = alpha;
        for z in &mut a[k * m + k + 1..(k + 1) * m] {
            *z = ZERO;
        }
    }
}

/// Running triangular factor of a least-squares problem in scaled coordinates.
struct TriangularLs {
    n: usize,
    /// Column-major `n x n`; only the upper triangle is meaningful.
    r: Vec<Complex64>,
    qb: Vec<Complex64>,
    scale: Vec<f64>,
    rows: usize,
}

impl TriangularLs {
    /// Starts from the ridge rows `sqrt(lambda) I` with zero right-hand side.
    fn new(scale: Vec<f64>, lambda: f64) -> Self {
        let n = scale.len();
        let mut r = vec![ZERO; n * n];
        let d = lambda.sqrt();
        for j in 0..n {
            r[j * n + j] = Complex64::new(d, 0.0);
        }
        Self {
            n,
            r,
            qb: vec![ZERO; n],
            scale,
            rows: 0,
        }
    }

    fn absorb(&mut self, h: &CMatrix, target: &[Complex64]) {
        let n = self.n;
        let c = h.nrows();
        if c == 0 {
            return;
        }
        let m = n + c;
        let mut a = vec![ZERO; m * n];
        for j in 0..n {
            let dst = &mut a[j * m..(j + 1) * m];
            dst[..n].copy_from_slice(&self.r[j * n..(j + 1) * n]);
            let inv = 1.0 / self.scale[j];
            for (d, s) in dst[n..].iter_mut().zip(h.column(j).iter()) {
                *d = s * inv;
            }
        }
        let mut b = Vec::with_capacity(m);
        b.extend_from_slice(&self.qb);
        b.extend_from_slice(target);
        householder(&mut a, m, n, &mut b);
        for j in 0..n {
            for i in 0..n {
                self.r[j * n + i] = if i <= j { a[j * m + i] } else { ZERO };
            }
        }
        self.qb.copy_from_slice(&b[..n]);
        self.rows += c;
    }

    fn solve(&self) -> Result<Vec<Complex64>> {
        let n = self.n;
        let diag: Vec<f64> = (0..n).map(|k| self.r[k * n + k].norm()).collect();
        let max = diag.iter().copied().fold(0.0, f64::max);
        let tol = (self.rows + n) as f64 * f64::EPSILON * max;
        let deficient = diag.iter().filter(|d| **d <= tol).count();
        if deficient > 0 {
            return Err(DpdError::SingularSystem {
                deficient,
                columns: n,
            });
        }
        let mut x = vec![ZERO; n];
        for k in (0..n).rev() {
            let mut acc = self.qb[k];
            for (j, xj) in x.iter().enumerate().skip(k + 1) {
                acc -= self.r[j * n + k] * xj;
            }
            x[k] = acc / self.r[k * n + k];
        }
        for (xi, d) in x.iter_mut().zip(&self.scale) {
            *xi /= d;
        }
        Ok(x)
    }
}

/// Unit-RMS column scales from per-column sums of `|h|^2`; zero columns keep
/// scale one so they surface as rank deficiency rather than division by zero.
fn scales_from_sums(sums: &[f64], rows: usize) -> Vec<f64> {
    sums.iter()
        .map(|s| {
            let d = (s / rows as f64).sqrt();
            if d > 0.0 && d.is_finite() {
                d
            } else {
                1.0
            }
        })
        .collect()
}

fn accumulate_column_power(h: &CMatrix, sums: &mut [f64]) {
    for (j, s) in sums.iter_mut().enumerate() {
        *s += h.column(j).iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
}

/// `argmin |H theta - target|^2 + lambda |D theta|^2` where `D` holds the
/// column RMS values and `lambda = regularization * rows(H)`, i.e. the ridge
/// is applied to the unit-RMS scaled problem and normalized by its trace.
pub fn ls_solve(h: &CMatrix, target: &[Complex64], regularization: f64) -> Result<Vec<Complex64>> {
    check_regularization(regularization)?;
    let (rows, cols) = h.shape();
    if rows != target.len() {
        return Err(DpdError::LengthMismatch {
            expected: rows,
            actual: target.len(),
        });
    }
    if rows < cols || cols == 0 {
        return Err(DpdError::Underdetermined {
            rows,
            columns: cols,
        });
    }
    let mut sums = vec![0.0; cols];
    accumulate_column_power(h, &mut sums);
    let mut acc = TriangularLs::new(scales_from_sums(&sums, rows), regularization * rows as f64);
    acc.absorb(h, target);
    acc.solve()
}

/// Same solution as [`ls_solve`] on the vertical stack of the chunks produced
/// by `chunk`, which is called twice per range (scaling pass, then solve).
pub fn ls_solve_chunked<F>(
    rows: usize,
    cols: usize,
    regularization: f64,
    mut chunk: F,
) -> Result<Vec<Complex64>>
where
    F: FnMut(Range<usize>) -> Result<(CMatrix, Vec<Complex64>)>,
{
    check_regularization(regularization)?;
    if rows < cols || cols == 0 {
        return Err(DpdError::Underdetermined {
            rows,
            columns: cols,
        });
    }
    let ranges: Vec<Range<usize>> = (0..rows)
        .step_by(CHUNK_ROWS)
        .map(|a| a..(a + CHUNK_ROWS).min(rows))
        .collect();
    let mut sums = vec![0.0; cols];
    for r in &ranges {
        let (h, _) = chunk(r.clone())?;
        accumulate_column_power(&h, &mut sums);
    }
    let mut acc = TriangularLs::new(scales_from_sums(&sums, rows), regularization * rows as f64);
    for r in ranges {
        let len = r.len();
        let (h, t) = chunk(r)?;
        if h.shape() != (len, cols) || t.len() != len {
            return Err(DpdError::LengthMismatch {
                expected: len,
                actual: t.len(),
            });
        }
        acc.absorb(&h, &t);
    }
    acc.solve()
}

/// Indirect-learning update: `theta_hat = LS(H_y, x)` blended with the old
/// parameters by the forgetting factor, `theta_old + mu (theta_hat - theta_old)`.
pub fn ila_update(
    theta_old: &[Complex64],
    h_y: &CMatrix,
    x_target: &[Complex64],
    cfg: &UpdateConfig,
) -> Result<Vec<Complex64>> {
    cfg.validate()?;
    if theta_old.len() != h_y.ncols() {
        return Err(DpdError::LengthMismatch {
            expected: h_y.ncols(),
            actual: theta_old.len(),
        });
    }
    let theta_hat = ls_solve(h_y, x_target, cfg.regularization)?;
    Ok(blend(theta_old, &theta_hat, cfg.mu))
}

/// `old + mu (new - old)`, returning the endpoints untouched at `mu` 0 and 1.
fn blend(old: &[Complex64], new: &[Complex64], mu: f64) -> Vec<Complex64> {
    if mu == 0.0 {
        old.to_vec()
    } else if mu == 1.0 {
        new.to_vec()
    } else {
        old.iter().zip(new).map(|(o, n)| o + (n - o) * mu).collect()
    }
}

/// Noise-robust update. The postdistorter's estimate of the PA input,
/// `H_y theta_old`, is compared with the known input; the error is mapped back
/// through the noise-free regressor `H_x`:
/// `theta_new = theta_old + mu LS(H_x, x - H_y theta_old)`.
pub fn robust_update(
    theta_old: &[Complex64],
    h_y: &CMatrix,
    h_x: &CMatrix,
    x_target: &[Complex64],
    cfg: &UpdateConfig,
) -> Result<Vec<Complex64>> {
    cfg.validate()?;
    if h_y.shape() != h_x.shape() {
        return Err(DpdError::StructureMismatch(format!(
            "H_y is {:?} but H_x is {:?}",
            h_y.shape(),
            h_x.shape()
        )));
    }
    if theta_old.len() != h_y.ncols() {
        return Err(DpdError::LengthMismatch {
            expected: h_y.ncols(),
            actual: theta_old.len(),
        });
    }
    if x_target.len() != h_y.nrows() {
        return Err(DpdError::LengthMismatch {
            expected: h_y.nrows(),
            actual: x_target.len(),
        });
    }
    let x_post = matvec(h_y, theta_old);
    let e: Vec<Complex64> = x_target.iter().zip(&x_post).map(|(x, p)| x - p).collect();
    let delta = ls_solve(h_x, &e, cfg.regularization)?;
    if cfg.mu == 0.0 || e.iter().all(|v| *v == ZERO) {
        return Ok(theta_old.to_vec());
    }
    Ok(theta_old
        .iter()
        .zip(&delta)
        .map(|(t, d)| t + d * cfg.mu)
        .collect())
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(DpdError::LengthMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

/// Static fit of `output ~ H_input theta` over the whole record, streamed in
/// row chunks.
pub fn fit_static(
    input: &ComplexSignal,
    output: &ComplexSignal,
    structure: &ModelStructure,
    regularization: f64,
) -> Result<ParameterSet> {
    structure.validate()?;
    check_lengths(input.len(), output.len())?;
    let (x, y) = (input.samples(), output.samples());
    let theta = ls_solve_chunked(x.len(), structure.n_coeff(), regularization, |r| {
        Ok((
            regressor_rows(&x[..r.end], r.start, structure),
            y[r].to_vec(),
        ))
    })?;
    ParameterSet::new(structure.clone(), theta)
}

/// Joint fit of `(theta, theta_dyn)` so that `y ~ H_x (theta + s theta_dyn)`,
/// one least-squares solve over `[H | diag(s) H]`.
pub fn fit_proactive(
    x: &ComplexSignal,
    y: &ComplexSignal,
    s: &[f64],
    structure: &ModelStructure,
    regularization: f64,
) -> Result<ParameterSet> {
    structure.validate()?;
    check_lengths(x.len(), y.len())?;
    check_lengths(x.len(), s.len())?;
    let (xs, ys) = (x.samples(), y.samples());
    let n = structure.n_coeff();
    let both = ls_solve_chunked(xs.len(), 2 * n, regularization, |r| {
        let h = proactive_regressor_rows(&xs[..r.end], &s[..r.end], r.start, structure)?;
        Ok((h, ys[r].to_vec()))
    })?;
    ParameterSet::proactive(structure.clone(), both[..n].to_vec(), both[n..].to_vec())
}
