//! SHORE basis: Gaussian–Laguerre radial functions times even real SH.
//!
//! Basis functions are indexed by `(n, l, m)` with `n` even up to the radial
//! order, `l` even up to `n` and `|m| ≤ l`. The radial part is
//!
//! ```text
//! G_nl(q, ζ) = κ_nl(ζ) (q²/ζ)^{l/2} exp(−q²/2ζ) L_{(n−l)/2}^{(l+1/2)}(q²/ζ)
//! κ_nl(ζ)    = [2·((n−l)/2)! / (ζ^{3/2} Γ((n+l)/2 + 3/2))]^{1/2}
//! ```
//!
//! which makes `∫₀^∞ G_nl G_n'l q² dq = δ_nn'`. The radial coordinate is
//! `q = √b`; ζ absorbs every physical constant.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{compensated_sum, LinearFit};
use crate::sh::{fit_sh, real_sh_row, sample_sh, sh_coeff_count, sh_index, ShSeries};
use crate::sphere::DirectionSet;

/// b-value (s/mm²) assigned to every FOD sample when an FOD is expressed in SHORE.
pub const FOD_BVALUE: f64 = 2000.0;

/// b-values closer than this are treated as one shell.
pub const SHELL_TOLERANCE: f64 = 50.0;

/// Paired (b-value, direction) acquisition scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct QSpaceSamples {
    bvalues: Vec<f64>,
    directions: DirectionSet,
    q: Vec<f64>,
}

impl QSpaceSamples {
    pub fn new(bvalues: Vec<f64>, directions: DirectionSet) -> Result<Self> {
        check_len(directions.len(), bvalues.len())?;
        if let Some(b) = bvalues.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
            return Err(invalid(format!("b-values must be finite and >= 0, got {b}")));
        }
        let q = bvalues.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            bvalues,
            directions,
            q,
        })
    }

    /// Every direction sampled at the same b-value.
    pub fn single_shell(directions: DirectionSet, b: f64) -> Result<Self> {
        Self::new(vec![b; directions.len()], directions)
    }

    pub fn len(&self) -> usize {
        self.bvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvalues.is_empty()
    }

    pub fn bvalues(&self) -> &[f64] {
        &self.bvalues
    }

    pub fn directions(&self) -> &DirectionSet {
        &self.directions
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Distinct non-zero shells in ascending order (representative b-values).
    pub fn shells(&self) -> Vec<f64> {
        let mut shells: Vec<f64> = Vec::new();
        let mut sorted: Vec<f64> = self
            .bvalues
            .iter()
            .copied()
            .filter(|&b| b >= SHELL_TOLERANCE)
            .collect();
        sorted.sort_by(f64::total_cmp);
        for b in sorted {
            match shells.last() {
                Some(&s) if (b - s).abs() < SHELL_TOLERANCE => {}
                _ => shells.push(b),
            }
        }
        shells
    }

    /// Indices of samples that are b=0 or lie on one of `shells`.
    pub fn shell_mask_indices(&self, shells: &[f64]) -> Vec<usize> {
        self.bvalues
            .iter()
            .enumerate()
            .filter(|(_, &b)| {
                b < SHELL_TOLERANCE || shells.iter().any(|s| (b - s).abs() < SHELL_TOLERANCE)
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid("sample subset is empty"));
        }
        let b = indices.iter().map(|&i| self.bvalues[i]).collect();
        let d = indices
            .iter()
            .map(|&i| self.directions.as_slice()[i])
            .collect();
        Self::new(b, DirectionSet::new(d)?)
    }

    /// Median of all b-values divided by 8: the default starting scale.
    pub fn default_zeta0(&self) -> f64 {
        let mut b = self.bvalues.clone();
        b.sort_by(f64::total_cmp);
        let n = b.len();
        let median = if n % 2 == 1 {
            b[n / 2]
        } else {
            0.5 * (b[n / 2 - 1] + b[n / 2])
        };
        (median / 8.0).max(f64::MIN_POSITIVE)
    }
}

/// Index set of a SHORE expansion, enumerated in coefficient order.
pub fn shore_indices(radial_order: usize) -> Result<Vec<(usize, usize, i64)>> {
    if radial_order % 2 != 0 {
        return Err(invalid(format!(
            "SHORE radial order must be even, got {radial_order}"
        )));
    }
    let mut out = Vec::new();
    for n in (0..=radial_order).step_by(2) {
        for l in (0..=n).step_by(2) {
            for m in -(l as i64)..=(l as i64) {
                out.push((n, l, m));
            }
        }
    }
    Ok(out)
}

/// Coefficient count by enumeration; equals (N+2)(N+4)(2N+3)/24.
pub fn shore_coeff_count(radial_order: usize) -> Result<usize> {
    Ok(shore_indices(radial_order)?.len())
}

/// Associated Laguerre polynomial L_k^{(α)}(x) by the three-term recurrence.
pub fn laguerre(k: usize, alpha: f64, x: f64) -> f64 {
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = 1.0 + alpha - x;
    for j in 1..k {
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0 + alpha - x) * cur - (jf + alpha) * prev) / (jf + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Γ(x) for positive integers and half-integers, exactly up to rounding.
fn gamma_half_integer(twice_x: usize) -> f64 {
    debug_assert!(twice_x >= 1);
    let (mut value, mut x) = if twice_x % 2 == 0 {
        (1.0, 1.0)
    } else {
        (std::f64::consts::PI.sqrt(), 0.5)
    };
    let target = twice_x as f64 / 2.0;
    while x < target {
        value *= x;
        x += 1.0;
    }
    value
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

fn check_radial_index(n: usize, l: usize) -> Result<()> {
    if n % 2 != 0 || l % 2 != 0 || l > n {
        return Err(invalid(format!("invalid SHORE radial index (n={n}, l={l})")));
    }
    Ok(())
}

fn check_zeta(zeta: f64) -> Result<()> {
    if !(zeta > 0.0) || !zeta.is_finite() {
        return Err(invalid(format!("zeta must be positive and finite, got {zeta}")));
    }
    Ok(())
}

/// Radial normalization κ_nl(ζ).
pub fn radial_norm(n: usize, l: usize, zeta: f64) -> Result<f64> {
    check_radial_index(n, l)?;
    check_zeta(zeta)?;
    let k = (n - l) / 2;
    // Γ((n+l)/2 + 3/2) has doubled argument n + l + 3
    let gamma = gamma_half_integer(n + l + 3);
    Ok((2.0 * factorial(k) / (zeta.powf(1.5) * gamma)).sqrt())
}

fn radial_unchecked(n: usize, l: usize, q: f64, zeta: f64, kappa: f64) -> f64 {
    let x = q * q / zeta;
    let k = (n - l) / 2;
    kappa * x.powi(l as i32 / 2) * (-0.5 * x).exp() * laguerre(k, l as f64 + 0.5, x)
}

/// G_nl(q, ζ).
pub fn radial_basis_g(n: usize, l: usize, q: f64, zeta: f64) -> Result<f64> {
    let kappa = radial_norm(n, l, zeta)?;
    if !(q >= 0.0) {
        return Err(invalid(format!("q must be non-negative, got {q}")));
    }
    Ok(radial_unchecked(n, l, q, zeta, kappa))
}

/// Rows = samples, columns = SHORE index set; entries G_nl(q,ζ)·Y_l^m(u).
pub fn shore_design_matrix(samples: &QSpaceSamples, radial_order: usize, zeta: f64) -> Result<DMatrix<f64>> {
    let indices = shore_indices(radial_order)?;
    check_zeta(zeta)?;
    let kappas: Vec<f64> = indices
        .iter()
        .map(|&(n, l, _)| radial_norm(n, l, zeta))
        .collect::<Result<_>>()?;
    let nsh = sh_coeff_count(radial_order)?;
    let mut sh = vec![0.0; nsh];
    let mut m = DMatrix::zeros(samples.len(), indices.len());
    for (i, (d, &q)) in samples.directions.iter().zip(&samples.q).enumerate() {
        real_sh_row(d, radial_order, &mut sh);
        for (j, (&(n, l, mm), &kappa)) in indices.iter().zip(&kappas).enumerate() {
            m[(i, j)] = radial_unchecked(n, l, q, zeta, kappa) * sh[sh_index(l, mm)];
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShoreFitConfig {
    pub radial_order: usize,
    pub lambda_n: f64,
    pub lambda_l: f64,
}

impl Default for ShoreFitConfig {
    fn default() -> Self {
        Self {
            radial_order: 6,
            lambda_n: 1e-8,
            lambda_l: 1e-8,
        }
    }
}

impl ShoreFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radial_order % 2 != 0 {
            return Err(invalid("radial order must be even"));
        }
        if !(self.lambda_n >= 0.0) || !(self.lambda_l >= 0.0) {
            return Err(invalid("regularization weights must be non-negative"));
        }
        Ok(())
    }

    /// Diagonal penalty λ_N·(n(n+1))² + λ_L·(l(l+1))² per coefficient.
    pub fn penalty(&self) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(shore_indices(self.radial_order)?
            .into_iter()
            .map(|(n, l, _)| {
                let pn = (n * (n + 1)) as f64;
                let pl = (l * (l + 1)) as f64;
                self.lambda_n * pn * pn + self.lambda_l * pl * pl
            })
            .collect())
    }
}

/// SHORE coefficients with their radial order and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ShoreSeries {
    radial_order: usize,
    zeta: f64,
    coeffs: Vec<f64>,
}

impl ShoreSeries {
    pub fn new(radial_order: usize, zeta: f64, coeffs: Vec<f64>) -> Result<Self> {
        check_zeta(zeta)?;
        check_len(shore_coeff_count(radial_order)?, coeffs.len())?;
        Ok(Self {
            radial_order,
            zeta,
            coeffs,
        })
    }

    pub fn radial_order(&self) -> usize {
        self.radial_order
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// E at one q-space point.
    pub fn evaluate(&self, q: f64, d: &Vector3<f64>) -> f64 {
        let mut sh = vec![0.0; sh_coeff_count(self.radial_order).unwrap_or(0)];
        real_sh_row(d, self.radial_order, &mut sh);
        shore_indices(self.radial_order)
            .unwrap_or_default()
            .into_iter()
            .zip(&self.coeffs)
            .map(|((n, l, m), c)| {
                let kappa = radial_norm(n, l, self.zeta).unwrap_or(0.0);
                c * radial_unchecked(n, l, q, self.zeta, kappa) * sh[sh_index(l, m)]
            })
            .sum()
    }
}

/// A reusable SHORE fit for one acquisition scheme and scale.
#[derive(Debug, Clone)]
pub struct ShoreFitter {
    cfg: ShoreFitConfig,
    zeta: f64,
    fit: LinearFit,
}

impl ShoreFitter {
    pub fn new(samples: &QSpaceSamples, cfg: &ShoreFitConfig, zeta: f64) -> Result<Self> {
        let design = shore_design_matrix(samples, cfg.radial_order, zeta)?;
        let fit = LinearFit::new(design, &cfg.penalty()?)?;
        Ok(Self {
            cfg: *cfg,
            zeta,
            fit,
        })
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn config(&self) -> &ShoreFitConfig {
        &self.cfg
    }

    pub fn linear_fit(&self) -> &LinearFit {
        &self.fit
    }

    pub fn fit(&self, signal: &[f64]) -> Result<ShoreSeries> {
        ShoreSeries::new(self.cfg.radial_order, self.zeta, self.fit.solve(signal)?)
    }

    /// Samples × voxels in, coefficients × voxels out.
    pub fn fit_columns(&self, signals: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.fit.solve_columns(signals)
    }

    /// Mean squared residual of the fit over every entry of `signals`.
    pub fn mean_squared_residual(&self, signals: &DMatrix<f64>) -> Result<f64> {
        let coeffs = self.fit.solve_columns(signals)?;
        let residual = signals - self.fit.design() * coeffs;
        let n = residual.len().max(1) as f64;
        Ok(compensated_sum(residual.iter().map(|r| r * r)) / n)
    }
}

/// Regularized least-squares SHORE fit at a fixed ζ.
pub fn fit_shore(signal: &[f64], samples: &QSpaceSamples, cfg: &ShoreFitConfig, zeta: f64) -> Result<ShoreSeries> {
    check_len(samples.len(), signal.len())?;
    ShoreFitter::new(samples, cfg, zeta)?.fit(signal)
}

pub fn reconstruct_signal(series: &ShoreSeries, samples: &QSpaceSamples) -> Result<Vec<f64>> {
    let m = shore_design_matrix(samples, series.radial_order, series.zeta)?;
    let c = nalgebra::DVector::from_column_slice(&series.coeffs);
    Ok((m * c).as_slice().to_vec())
}

/// Values of the series on the sphere of radius q = √b.
pub fn sample_sphere(series: &ShoreSeries, dirs: &DirectionSet, b: f64) -> Result<Vec<f64>> {
    reconstruct_signal(series, &QSpaceSamples::single_shell(dirs.clone(), b)?)
}

/// Result of a scale optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaOptimum {
    pub zeta: f64,
    pub objective: f64,
    pub initial_zeta: f64,
    pub initial_objective: f64,
    pub iterations: usize,
}

/// Central-difference step in log ζ.
const LOG_ZETA_STEP: f64 = 1e-4;
const MAX_ZETA_ITERATIONS: usize = 100;
const LOG_ZETA_TOLERANCE: f64 = 1e-6;
/// Largest single move in log ζ.
const MAX_LOG_STEP: f64 = 2.0;

/// Mean squared SHORE reconstruction residual at `zeta`, refitting every voxel.
/// `signals` is samples × voxels.
pub fn zeta_objective(signals: &DMatrix<f64>, samples: &QSpaceSamples, cfg: &ShoreFitConfig, zeta: f64) -> Result<f64> {
    ShoreFitter::new(samples, cfg, zeta)?.mean_squared_residual(signals)
}

/// Minimize [`zeta_objective`] over log ζ with a one-dimensional BFGS update
/// and backtracking line search. Signals are given one voxel per entry.
pub fn optimize_zeta(signals: &[Vec<f64>], samples: &QSpaceSamples, cfg: &ShoreFitConfig, zeta0: f64) -> Result<ZetaOptimum> {
    if signals.is_empty() {
        return Err(invalid("zeta optimization needs at least one signal"));
    }
    let mut m = DMatrix::zeros(samples.len(), signals.len());
    for (j, s) in signals.iter().enumerate() {
        check_len(samples.len(), s.len())?;
        m.column_mut(j).copy_from_slice(s);
    }
    optimize_zeta_columns(&m, samples, cfg, zeta0)
}

/// [`optimize_zeta`] on a samples × voxels matrix.
pub fn optimize_zeta_columns(signals: &DMatrix<f64>, samples: &QSpaceSamples, cfg: &ShoreFitConfig, zeta0: f64) -> Result<ZetaOptimum> {
    check_zeta(zeta0)?;
    if signals.ncols() == 0 {
        return Err(invalid("zeta optimization needs at least one signal"));
    }
    check_len(samples.len(), signals.nrows())?;
    let f = |t: f64| -> f64 {
        match zeta_objective(signals, samples, cfg, t.exp()) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NAN,
        }
    };
    let fail = |t: f64, reason: &str| Error::OptimizationFailed {
        last_zeta: t.exp(),
        reason: reason.to_string(),
    };

    let mut t = zeta0.ln();
    let mut ft = f(t);
    if !ft.is_finite() {
        return Err(fail(t, "objective is not finite at the starting scale"));
    }
    let initial_objective = ft;
    let mut curvature: Option<f64> = None;
    let mut iterations = 0;

    while iterations < MAX_ZETA_ITERATIONS {
        iterations += 1;
        let (fp, fm) = (f(t + LOG_ZETA_STEP), f(t - LOG_ZETA_STEP));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(fail(t, "objective is not finite near the current iterate"));
        }
        let g = (fp - fm) / (2.0 * LOG_ZETA_STEP);
        if g == 0.0 {
            break;
        }
        let h = match curvature {
            Some(h) => h,
            None => {
                let c = (fp - 2.0 * ft + fm) / (LOG_ZETA_STEP * LOG_ZETA_STEP);
                if c > 0.0 {
                    c
                } else {
                    g.abs()
                }
            }
        };
        let direction = (-g / h).clamp(-MAX_LOG_STEP, MAX_LOG_STEP);

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-10 {
            let trial = t + alpha * direction;
            let ftrial = f(trial);
            if ftrial.is_finite() && ftrial <= ft + 1e-4 * alpha * direction * g {
                accepted = Some((trial, ftrial));
                break;
            }
            alpha *= 0.5;
        }
        let Some((t_new, f_new)) = accepted else {
            break;
        };
        let s = t_new - t;
        let (gp, gm) = (f(t_new + LOG_ZETA_STEP), f(t_new - LOG_ZETA_STEP));
        if gp.is_finite() && gm.is_finite() {
            let g_new = (gp - gm) / (2.0 * LOG_ZETA_STEP);
            let y = g_new - g;
            // secant update; skipped when the curvature condition fails
            if y * s > 0.0 {
                curvature = Some(y / s);
            } else {
                curvature = None;
            }
        }
        t = t_new;
        ft = f_new;
        if s.abs() < LOG_ZETA_TOLERANCE {
            break;
        }
    }

    Ok(ZetaOptimum {
        zeta: t.exp(),
        objective: ft,
        initial_zeta: zeta0,
        initial_objective,
        iterations,
    })
}

/// Fitter that maps FOD values sampled on `dirs` (all at b = 2000) to SHORE.
pub fn fod_shore_fitter(dirs: &DirectionSet, zeta: f64, cfg: &ShoreFitConfig) -> Result<ShoreFitter> {
    ShoreFitter::new(&QSpaceSamples::single_shell(dirs.clone(), FOD_BVALUE)?, cfg, zeta)
}

/// Sample an SH FOD on `dirs`, place every sample at b = 2000 and fit SHORE.
pub fn sh_fod_to_shore(fod: &ShSeries, dirs: &DirectionSet, zeta: f64, cfg: &ShoreFitConfig) -> Result<ShoreSeries> {
    let values = sample_sh(fod, dirs);
    fod_shore_fitter(dirs, zeta, cfg)?.fit(&values)
}

/// Evaluate on the sphere q = √b at `dirs` and fit SH of degree `l_max`.
pub fn shore_to_sh(series: &ShoreSeries, dirs: &DirectionSet, b: f64, l_max: usize) -> Result<ShSeries> {
    if !(b > 0.0) {
        return Err(invalid("shell b-value must be positive"));
    }
    let need = sh_coeff_count(l_max)?;
    if dirs.len() < need {
        return Err(invalid(format!(
            "SH degree {l_max} needs at least {need} directions, got {}",
            dirs.len()
        )));
    }
    let values = sample_sphere(series, dirs, b)?;
    fit_sh(&values, dirs, l_max, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::acc;
    use crate::sphere::generate_uniform_directions;
    use std::f64::consts::PI;

    /// Laguerre by explicit series Σ_i (−1)^i C(k+α, k−i) x^i / i!.
    fn laguerre_series(k: usize, alpha: f64, x: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..=k {
            // generalized binomial C(k+α, k−i)
            let top = k - i;
            let mut binom = 1.0;
            for j in 0..top {
                binom *= (k as f64 + alpha - j as f64) / (j as f64 + 1.0);
            }
            let fact: f64 = (1..=i).map(|v| v as f64).product();
            total += (-1f64).powi(i as i32) * binom * x.powi(i as i32) / fact;
        }
        total
    }

    #[test]
    fn coefficient_counts() {
        assert_eq!(shore_coeff_count(6).unwrap(), 50);
        assert_eq!(shore_coeff_count(0).unwrap(), 1);
        assert_eq!(shore_coeff_count(2).unwrap(), 7);
        for n in [0usize, 2, 4, 6, 8] {
            assert_eq!(shore_coeff_count(n).unwrap(), (n + 2) * (n + 4) * (2 * n + 3) / 24);
        }
        assert!(shore_coeff_count(5).is_err());
    }

    #[test]
    fn laguerre_values() {
        assert_eq!(laguerre(0, 3.3, -2.0), 1.0);
        for x in [-1.0, 0.0, 0.7, 4.0] {
            assert!((laguerre(1, 0.5, x) - (1.5 - x)).abs() < 1e-15);
        }
        let expected = laguerre_series(3, 2.5, 1.2);
        assert!((laguerre(3, 2.5, 1.2) - expected).abs() < 1e-12);
        for k in 0..8 {
            for x in [0.1, 2.0, 9.5] {
                let a = laguerre(k, 4.5, x);
                let b = laguerre_series(k, 4.5, x);
                assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "k={k} x={x}");
            }
        }
    }

    #[test]
    fn radial_normalization_value() {
        // 2 / Γ(3/2) = 4/√π
        let expected = (4.0 / PI.sqrt()).sqrt();
        assert!((radial_basis_g(0, 0, 0.0, 1.0).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 1.50225).abs() < 1e-5);
        assert_eq!(radial_basis_g(4, 2, 0.0, 700.0).unwrap(), 0.0);
        assert!(radial_basis_g(2, 4, 1.0, 1.0).is_err());
        assert!(radial_basis_g(3, 0, 1.0, 1.0).is_err());
        assert!(radial_basis_g(2, 0, 1.0, 0.0).is_err());
    }

    #[test]
    fn gamma_half_integers() {
        assert!((gamma_half_integer(1) - PI.sqrt()).abs() < 1e-15);
        assert!((gamma_half_integer(3) - PI.sqrt() / 2.0).abs() < 1e-15);
        assert!((gamma_half_integer(10) - 24.0).abs() < 1e-12);
        assert!((gamma_half_integer(9) - 11.631728396567448).abs() < 1e-12);
    }

    fn scheme() -> QSpaceSamples {
        let dirs = generate_uniform_directions(100, 3, 400).unwrap();
        let mut b = Vec::new();
        let mut d = Vec::new();
        for (i, v) in dirs.iter().enumerate() {
            b.push([3000.0, 6000.0, 9000.0, 12000.0][i % 4]);
            d.push(*v);
        }
        b.push(0.0);
        d.push(Vector3::z());
        QSpaceSamples::new(b, DirectionSet::new(d).unwrap()).unwrap()
    }

    #[test]
    fn design_matrix_properties() {
        let b0 = QSpaceSamples::new(vec![0.0], DirectionSet::new(vec![Vector3::x()]).unwrap()).unwrap();
        let m = shore_design_matrix(&b0, 6, 700.0).unwrap();
        assert_eq!(m.ncols(), 50);
        for (j, (_, l, _)) in shore_indices(6).unwrap().into_iter().enumerate() {
            if l > 0 {
                assert_eq!(m[(0, j)], 0.0);
            } else {
                assert!(m[(0, j)] != 0.0);
            }
        }
        let d = Vector3::new(0.2, -0.4, 0.7).normalize();
        let pair = QSpaceSamples::new(vec![3000.0; 2], DirectionSet::new(vec![d, -d]).unwrap()).unwrap();
        let m = shore_design_matrix(&pair, 6, 700.0).unwrap();
        assert!((m.row(0) - m.row(1)).amax() < 1e-14);
    }

    #[test]
    fn isotropic_gaussian_is_one_basis_function() {
        let s = scheme();
        let zeta = 700.0;
        let signal: Vec<f64> = s.q().iter().map(|q| (-q * q / (2.0 * zeta)).exp()).collect();
        let fit = fit_shore(&signal, &s, &ShoreFitConfig::default(), zeta).unwrap();
        let c000 = 2.0 * PI.sqrt() / radial_norm(0, 0, zeta).unwrap();
        assert!(((fit.coeffs()[0] - c000) / c000).abs() < 1e-6);
        for c in &fit.coeffs()[1..] {
            assert!(c.abs() < 1e-6 * c000);
        }
    }

    #[test]
    fn synthesis_round_trip() {
        let s = scheme();
        let zeta = 700.0;
        let truth: Vec<f64> = (0..50).map(|k| ((k * 17 % 23) as f64 - 11.0) * 3.0).collect();
        let series = ShoreSeries::new(6, zeta, truth.clone()).unwrap();
        let signal = reconstruct_signal(&series, &s).unwrap();
        let cfg = ShoreFitConfig {
            lambda_n: 0.0,
            lambda_l: 0.0,
            ..Default::default()
        };
        let fit = fit_shore(&signal, &s, &cfg, zeta).unwrap();
        let err: f64 = fit.coeffs().iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 1e-6, "relative error {}", err / norm);
    }

    #[test]
    fn fit_is_linear_in_signal() {
        let s = scheme();
        let signal: Vec<f64> = s.q().iter().map(|q| (-q * q / 1500.0).exp() + 0.01).collect();
        let cfg = ShoreFitConfig::default();
        let a = fit_shore(&signal, &s, &cfg, 600.0).unwrap();
        let scaled: Vec<f64> = signal.iter().map(|v| v * 4.0).collect();
        let b = fit_shore(&scaled, &s, &cfg, 600.0).unwrap();
        for (x, y) in a.coeffs().iter().zip(b.coeffs()) {
            assert!((4.0 * x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn mismatched_signal_length() {
        let s = scheme();
        assert!(matches!(
            fit_shore(&[1.0; 3], &s, &ShoreFitConfig::default(), 700.0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_series_reconstructs_zero() {
        let s = scheme();
        let z = ShoreSeries::new(6, 500.0, vec![0.0; 50]).unwrap();
        assert!(reconstruct_signal(&z, &s).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn optimize_zeta_recovers_scale() {
        let s = scheme();
        let zeta_true = 420.0;
        let signals: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                s.q().iter()
                    .map(|q| (1.0 + 0.1 * k as f64) * (-q * q / (2.0 * zeta_true)).exp())
                    .collect()
            })
            .collect();
        let opt = optimize_zeta(&signals, &s, &ShoreFitConfig::default(), 900.0).unwrap();
        assert!(((opt.zeta - zeta_true) / zeta_true).abs() < 0.05, "zeta {}", opt.zeta);
        assert!(opt.objective <= opt.initial_objective);
        assert!(optimize_zeta(&[], &s, &ShoreFitConfig::default(), 900.0).is_err());
    }

    #[test]
    fn withheld_shell_smooth_signal() {
        let s = scheme();
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let signal = |b: f64, g: &Vector3<f64>| {
            let c = g.dot(&axis);
            (-b * (0.4e-3 + 0.2e-3 * c * c)).exp()
        };
        let keep: Vec<usize> = (0..s.len()).filter(|&i| s.bvalues()[i] != 6000.0).collect();
        let held: Vec<usize> = (0..s.len()).filter(|&i| s.bvalues()[i] == 6000.0).collect();
        let fit_s = s.subset(&keep).unwrap();
        let held_s = s.subset(&held).unwrap();
        let values: Vec<f64> = keep.iter().map(|&i| signal(s.bvalues()[i], &s.directions().as_slice()[i])).collect();
        let cfg = ShoreFitConfig::default();
        let zeta = optimize_zeta(&[values.clone()], &fit_s, &cfg, fit_s.default_zeta0()).unwrap().zeta;
        let pred = reconstruct_signal(&fit_shore(&values, &fit_s, &cfg, zeta).unwrap(), &held_s).unwrap();
        let truth: Vec<f64> = held.iter().map(|&i| signal(6000.0, &s.directions().as_slice()[i])).collect();
        let num: f64 = pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum();
        let den: f64 = truth.iter().map(|t| t * t).sum();
        assert!((num / den).sqrt() < 5e-2, "relative RMSE {}", (num / den).sqrt());
    }

    #[test]
    fn optimize_zeta_from_optimum_does_not_worsen() {
        let s = scheme();
        let signals = vec![s.q().iter().map(|q| (-q * q / 1000.0).exp()).collect::<Vec<_>>()];
        let opt = optimize_zeta(&signals, &s, &ShoreFitConfig::default(), 500.0).unwrap();
        let again = optimize_zeta(&signals, &s, &ShoreFitConfig::default(), opt.zeta).unwrap();
        assert!(again.objective <= again.initial_objective);
    }

    fn band_limited_fod(max_l: usize) -> ShSeries {
        let keep = sh_coeff_count(max_l).unwrap();
        let coeffs = (0..45)
            .map(|k| match k {
                0 => 1.0,
                k if k < keep => ((k * 13 % 7) as f64 - 3.0) / 20.0,
                _ => 0.0,
            })
            .collect();
        ShSeries::new(8, coeffs).unwrap()
    }

    #[test]
    fn fod_round_trip() {
        // radial order 6 carries angular degrees up to 6
        let dirs = generate_uniform_directions(100, 2019, 500).unwrap();
        let dense = generate_uniform_directions(300, 8, 300).unwrap();
        let u = band_limited_fod(6);
        let shore = sh_fod_to_shore(&u, &dirs, 200.0, &ShoreFitConfig::default()).unwrap();
        let back = shore_to_sh(&shore, &dense, FOD_BVALUE, 8).unwrap();
        let a = acc(&u, &back).unwrap();
        assert!(a >= 0.99, "acc {a}");

        let light = ShoreFitConfig {
            lambda_n: 1e-14,
            lambda_l: 1e-14,
            ..Default::default()
        };
        let shore = sh_fod_to_shore(&u, &dirs, 700.0, &light).unwrap();
        let back = shore_to_sh(&shore, &dense, FOD_BVALUE, 8).unwrap();
        assert!(acc(&u, &back).unwrap() >= 0.999_999);
    }

    #[test]
    fn fod_round_trip_drops_degree_eight() {
        let dirs = generate_uniform_directions(100, 2019, 500).unwrap();
        let dense = generate_uniform_directions(300, 8, 300).unwrap();
        let light = ShoreFitConfig {
            lambda_n: 1e-14,
            lambda_l: 1e-14,
            ..Default::default()
        };
        let full = band_limited_fod(8);
        let shore = sh_fod_to_shore(&full, &dirs, 700.0, &light).unwrap();
        let back = shore_to_sh(&shore, &dense, FOD_BVALUE, 8).unwrap();
        assert!(back.coeffs()[28..].iter().all(|c| c.abs() < 0.05));
        let a = acc(&band_limited_fod(6), &back).unwrap();
        assert!(a >= 0.95, "acc {a}");
    }

    #[test]
    fn shore_to_sh_sampling_invariance() {
        let dirs = generate_uniform_directions(100, 2019, 500).unwrap();
        let shore = sh_fod_to_shore(&band_limited_fod(6), &dirs, 300.0, &ShoreFitConfig::default()).unwrap();
        let a = shore_to_sh(&shore, &generate_uniform_directions(200, 1, 300).unwrap(), FOD_BVALUE, 8).unwrap();
        let b = shore_to_sh(&shore, &generate_uniform_directions(200, 2, 300).unwrap(), FOD_BVALUE, 8).unwrap();
        assert!(acc(&a, &b).unwrap() >= 0.999);
        let zero = ShoreSeries::new(6, 300.0, vec![0.0; 50]).unwrap();
        let z = shore_to_sh(&zero, &dirs, FOD_BVALUE, 8).unwrap();
        assert!(z.coeffs().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn isotropic_fod_stays_isotropic() {
        let dirs = generate_uniform_directions(100, 2019, 500).unwrap();
        let mut iso = ShSeries::zeros(8).unwrap();
        iso.coeffs_mut()[0] = 0.5 / PI.sqrt();
        let shore = sh_fod_to_shore(&iso, &dirs, 700.0, &ShoreFitConfig::default()).unwrap();
        let dense = generate_uniform_directions(200, 4, 100).unwrap();
        let v = sample_sphere(&shore, &dense, FOD_BVALUE).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(v.iter().all(|x| (x - mean).abs() < 1e-6));
    }

    #[test]
    fn underdetermined_single_shell_without_penalty() {
        let dirs = generate_uniform_directions(40, 1, 100).unwrap();
        let cfg = ShoreFitConfig {
            lambda_n: 0.0,
            lambda_l: 0.0,
            ..Default::default()
        };
        let fod = ShSeries::new(8, vec![0.1; 45]).unwrap();
        assert!(matches!(
            sh_fod_to_shore(&fod, &dirs, 700.0, &cfg),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn shore_to_sh_trivia() {
        let dirs = generate_uniform_directions(100, 1, 100).unwrap();
        let z = ShoreSeries::new(6, 500.0, vec![0.0; 50]).unwrap();
        let sh = shore_to_sh(&z, &dirs, FOD_BVALUE, 8).unwrap();
        assert!(sh.coeffs().iter().all(|&c| c == 0.0));
        let few = generate_uniform_directions(30, 1, 10).unwrap();
        assert!(shore_to_sh(&z, &few, FOD_BVALUE, 8).is_err());
    }

    #[test]
    fn shells_and_masks() {
        let s = scheme();
        assert_eq!(s.shells(), vec![3000.0, 6000.0, 9000.0, 12000.0]);
        let idx = s.shell_mask_indices(&[6000.0]);
        assert_eq!(idx.len(), 26);
        assert!((s.default_zeta0() - 750.0).abs() < 1e-12);
    }
}
