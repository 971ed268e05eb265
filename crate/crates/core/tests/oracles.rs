//! Independent numerical oracles for the basis functions and statistics.

use deepshore::sh::{acc, eval_sh_basis, sh_coeff_count, ShSeries};
use deepshore::shore::{radial_basis_g, shore_coeff_count, shore_indices};
use deepshore::sphere::gauss_sphere_quadrature;
use deepshore::stats::{wilcoxon_exact, wilcoxon_normal};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&f, a, b, fa, fm, fb, whole, tol, 40)
}

#[test]
fn coefficient_counts() {
    assert_eq!(shore_coeff_count(6).unwrap(), 50);
    assert_eq!(sh_coeff_count(8).unwrap(), 45);
    for n in [0, 2, 4, 6, 8] {
        let closed = (n / 2 + 1) * (n / 2 + 2) * (2 * n + 3) / 6;
        assert_eq!(shore_indices(n).unwrap().len(), closed);
    }
}

#[test]
fn radial_functions_are_orthonormal() {
    for zeta in [200.0, 700.0, 2000.0] {
        // exp(-q²/ζ) is below 1e-35 past this radius
        let upper = (80.0 * zeta as f64).sqrt();
        for l in (0..=6).step_by(2) {
            for n in (l..=6).step_by(2) {
                for n2 in (l..=6).step_by(2) {
                    let v = adaptive_simpson(
                        |q| radial_basis_g(n, l, q, zeta).unwrap() * radial_basis_g(n2, l, q, zeta).unwrap() * q * q,
                        0.0,
                        upper,
                        1e-12,
                    );
                    let expect = if n == n2 { 1.0 } else { 0.0 };
                    assert!((v - expect).abs() < 1e-8, "zeta {zeta} n {n} n' {n2} l {l}: {v}");
                }
            }
        }
    }
}

#[test]
fn sh_gram_is_identity() {
    let quad = gauss_sphere_quadrature(16, 33).unwrap();
    let y = eval_sh_basis(quad.nodes(), 8).unwrap().matrix;
    for i in 0..y.ncols() {
        for j in 0..y.ncols() {
            let g: f64 = (0..y.nrows()).map(|k| quad.weights()[k] * y[(k, i)] * y[(k, j)]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((g - expect).abs() < 1e-10, "({i},{j}) = {g}");
        }
    }
}

#[test]
fn acc_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = ShSeries::new(8, (0..45).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let scaled = ShSeries::new(8, u.coeffs().iter().map(|c| 3.7 * c).collect()).unwrap();
    let neg = ShSeries::new(8, u.coeffs().iter().map(|c| -c).collect()).unwrap();
    assert!((acc(&u, &u).unwrap() - 1.0).abs() < 1e-12);
    assert!((acc(&u, &scaled).unwrap() - 1.0).abs() < 1e-12);
    assert!((acc(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
    let mut a = ShSeries::zeros(8).unwrap();
    let mut b = ShSeries::zeros(8).unwrap();
    a.coeffs_mut()[3] = 1.0; // degree 2
    b.coeffs_mut()[10] = 1.0; // degree 4
    assert!(acc(&a, &b).unwrap().abs() < 1e-12);
}

/// Two-sided p-value by listing all 2ⁿ sign assignments.
fn enumerated_p(diffs: &[f64]) -> f64 {
    let mut abs: Vec<(f64, usize)> = diffs.iter().enumerate().map(|(i, d)| (d.abs(), i)).collect();
    abs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < abs.len() {
        let j = (i..abs.len()).take_while(|&k| abs[k].0 == abs[i].0).last().unwrap() + 1;
        for item in &abs[i..j] {
            ranks[item.1] = (i + j + 1) as f64 / 2.0;
        }
        i = j;
    }
    let observed: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let n = diffs.len();
    let (mut below, mut above) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
        if w <= observed + 1e-9 {
            below += 1;
        }
        if w >= observed - 1e-9 {
            above += 1;
        }
    }
    let _ = total;
    (2.0 * below.min(above) as f64 / (1u64 << n) as f64).min(1.0)
}

#[test]
fn exact_signed_rank_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in [5, 6, 9, 12, 16, 20] {
        for trial in 0..3 {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) + 0.1 * trial as f64).collect();
            if trial == 2 {
                // force a tie in |d|
                b[1] = a[1] - (a[0] - b[0]);
            }
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let p = wilcoxon_exact(&a, &b).unwrap().p_value;
            let oracle = enumerated_p(&d);
            assert!((p - oracle).abs() < 1e-12, "n {n} trial {trial}: {p} vs {oracle}");
        }
    }
}

#[test]
fn normal_approximation_near_exact_at_twenty() {
    // moderate p-values; far tails of the discrete law are not approximable
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for _ in 0..1000 {
        let d: Vec<f64> = (1..=20)
            .map(|k| if rng.random_bool(0.6) { k as f64 } else { -(k as f64) })
            .collect();
        let zeros = vec![0.0; 20];
        let exact = wilcoxon_exact(&d, &zeros).unwrap().p_value;
        if exact < 0.05 {
            continue;
        }
        let approx = wilcoxon_normal(&d, &zeros).unwrap().p_value;
        assert!(((approx - exact) / exact).abs() < 0.05, "{approx} vs {exact}");
        checked += 1;
    }
    assert!(checked > 100);
}
