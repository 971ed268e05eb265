//! Real, even-degree spherical harmonics.
//!
//! Convention: orthonormal on the unit sphere, no Condon–Shortley phase,
//! coefficients ordered by ascending even degree `l` and, within a degree, by
//! `m = −l..=l`. For `m > 0` the basis function is `√2·Re Y_l^m`, for `m < 0`
//! it is `√2·Im Y_l^{|m|}`, and `m = 0` is `Y_l^0` itself.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::LinearFit;
use crate::sphere::{rotate_directions, DirectionSet, Rotation};

/// Number of even-degree real harmonics up to degree `l_max`: (L+1)(L+2)/2.
pub fn sh_coeff_count(l_max: usize) -> Result<usize> {
    if l_max % 2 != 0 {
        return Err(invalid(format!("SH degree must be even, got {l_max}")));
    }
    Ok((l_max + 1) * (l_max + 2) / 2)
}

/// Position of `(l, m)` in the coefficient vector. `l` must be even.
pub fn sh_index(l: usize, m: i64) -> usize {
    debug_assert!(l % 2 == 0 && m.unsigned_abs() as usize <= l);
    l * (l - usize::from(l > 0)) / 2 + (m + l as i64) as usize
}

/// `(l, m)` pairs in coefficient order.
pub fn sh_degrees(l_max: usize) -> Vec<(usize, i64)> {
    let mut out = Vec::new();
    for l in (0..=l_max).step_by(2) {
        for m in -(l as i64)..=(l as i64) {
            out.push((l, m));
        }
    }
    out
}

/// Orthonormal associated Legendre values p[l][m] for 0 ≤ m ≤ l ≤ l_max,
/// normalized so that p·e^{imφ} is an orthonormal complex harmonic.
fn normalized_legendre(l_max: usize, x: f64) -> Vec<Vec<f64>> {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut p = vec![vec![0.0; l_max + 1]; l_max + 1];
    p[0][0] = (1.0 / (4.0 * PI)).sqrt();
    for m in 1..=l_max {
        p[m][m] = ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * s * p[m - 1][m - 1];
    }
    for m in 0..l_max {
        p[m + 1][m] = ((2 * m + 3) as f64).sqrt() * x * p[m][m];
    }
    for m in 0..=l_max {
        for l in (m + 2)..=l_max {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[l][m] = a * (x * p[l - 1][m] - b * p[l - 2][m]);
        }
    }
    p
}

/// Even real harmonics at one direction, written into `out` in coefficient order.
pub(crate) fn real_sh_row(d: &Vector3<f64>, l_max: usize, out: &mut [f64]) {
    let z = d.z.clamp(-1.0, 1.0);
    let phi = d.y.atan2(d.x);
    let p = normalized_legendre(l_max, z);
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut k = 0;
    for l in (0..=l_max).step_by(2) {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            out[k] = match m.signum() {
                0 => p[l][0],
                1 => sqrt2 * p[l][am] * (am as f64 * phi).cos(),
                _ => sqrt2 * p[l][am] * (am as f64 * phi).sin(),
            };
            k += 1;
        }
    }
}

/// Harmonics evaluated at a direction set: rows = directions, cols = basis.
#[derive(Debug, Clone)]
pub struct ShBasisMatrix {
    pub l_max: usize,
    pub matrix: DMatrix<f64>,
}

pub fn eval_sh_basis(dirs: &DirectionSet, l_max: usize) -> Result<ShBasisMatrix> {
    let ncoef = sh_coeff_count(l_max)?;
    let mut matrix = DMatrix::zeros(dirs.len(), ncoef);
    let mut row = vec![0.0; ncoef];
    for (i, d) in dirs.iter().enumerate() {
        real_sh_row(d, l_max, &mut row);
        for (k, v) in row.iter().enumerate() {
            matrix[(i, k)] = *v;
        }
    }
    Ok(ShBasisMatrix { l_max, matrix })
}

/// Real even-degree SH expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct ShSeries {
    max_degree: usize,
    coeffs: Vec<f64>,
}

impl ShSeries {
    pub fn new(max_degree: usize, coeffs: Vec<f64>) -> Result<Self> {
        check_len(sh_coeff_count(max_degree)?, coeffs.len())?;
        Ok(Self { max_degree, coeffs })
    }

    pub fn zeros(max_degree: usize) -> Result<Self> {
        Ok(Self {
            max_degree,
            coeffs: vec![0.0; sh_coeff_count(max_degree)?],
        })
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn get(&self, l: usize, m: i64) -> f64 {
        self.coeffs[sh_index(l, m)]
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Function value at a single direction.
    pub fn evaluate(&self, d: &Vector3<f64>) -> f64 {
        let mut row = vec![0.0; self.coeffs.len()];
        real_sh_row(d, self.max_degree, &mut row);
        row.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum()
    }
}

/// Laplace–Beltrami penalty weights `ridge·(l(l+1))²` in coefficient order.
pub fn laplace_beltrami_penalty(l_max: usize, ridge: f64) -> Vec<f64> {
    sh_degrees(l_max)
        .into_iter()
        .map(|(l, _)| {
            let lb = (l * (l + 1)) as f64;
            ridge * lb * lb
        })
        .collect()
}

/// A reusable SH least-squares fit on a fixed direction set.
#[derive(Debug, Clone)]
pub struct ShFitter {
    l_max: usize,
    fit: LinearFit,
}

impl ShFitter {
    pub fn new(dirs: &DirectionSet, l_max: usize, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0) {
            return Err(invalid("ridge must be non-negative"));
        }
        let basis = eval_sh_basis(dirs, l_max)?;
        let fit = LinearFit::new(basis.matrix, &laplace_beltrami_penalty(l_max, ridge))?;
        Ok(Self { l_max, fit })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn linear_fit(&self) -> &LinearFit {
        &self.fit
    }

    pub fn fit(&self, values: &[f64]) -> Result<ShSeries> {
        ShSeries::new(self.l_max, self.fit.solve(values)?)
    }

    /// Samples × voxels in, coefficients × voxels out.
    pub fn fit_columns(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.fit.solve_columns(values)
    }
}

/// Minimize ‖B c − values‖² + ridge·‖Λ c‖² with Λ = diag(l(l+1)).
pub fn fit_sh(values: &[f64], dirs: &DirectionSet, l_max: usize, ridge: f64) -> Result<ShSeries> {
    check_len(dirs.len(), values.len())?;
    ShFitter::new(dirs, l_max, ridge)?.fit(values)
}

pub fn sample_sh(series: &ShSeries, dirs: &DirectionSet) -> Vec<f64> {
    let mut row = vec![0.0; series.coeffs.len()];
    dirs.iter()
        .map(|d| {
            real_sh_row(d, series.max_degree, &mut row);
            row.iter().zip(&series.coeffs).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Angular correlation coefficient over degrees l ≥ 2 (the isotropic term is
/// excluded). Real coefficients make the conjugate a no-op.
pub fn acc(u: &ShSeries, v: &ShSeries) -> Result<f64> {
    if u.max_degree != v.max_degree {
        return Err(invalid(format!(
            "ACC needs equal degrees, got {} and {}",
            u.max_degree, v.max_degree
        )));
    }
    acc_slices(&u.coeffs[1..], &v.coeffs[1..])
}

/// [`acc`] on full coefficient vectors in the standard order (index 0 is
/// the isotropic term and is skipped).
pub fn acc_coeffs(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u.len(), v.len())?;
    if u.is_empty() {
        return Err(Error::UndefinedCorrelation);
    }
    acc_slices(&u[1..], &v[1..])
}

/// ACC on raw coefficient vectors that already exclude the degree-0 term.
pub(crate) fn acc_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

/// Rotate by resampling: sample at R⁻¹·dirs, refit on dirs.
pub fn rotate_sh(series: &ShSeries, rotation: &Rotation, resample_dirs: &DirectionSet) -> Result<ShSeries> {
    let need = series.coeffs.len();
    if resample_dirs.len() < need {
        return Err(invalid(format!(
            "rotation needs at least {need} resampling directions, got {}",
            resample_dirs.len()
        )));
    }
    let pulled_back = rotate_directions(resample_dirs, &rotation.inverse());
    let values = sample_sh(series, &pulled_back);
    fit_sh(&values, resample_dirs, series.max_degree, 0.0)
}
