//! Direction sets on the unit sphere: electrostatic-repulsion sampling,
//! random rotations and Gauss product quadrature.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3, Quaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

const UNIT_TOL: f64 = 1e-12;

/// An ordered, non-empty list of unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    directions: Vec<Vector3<f64>>,
}

impl DirectionSet {
    /// Validates that the list is non-empty and every vector is unit length.
    pub fn new(directions: Vec<Vector3<f64>>) -> Result<Self> {
        if directions.is_empty() {
            return Err(invalid("direction set must be non-empty"));
        }
        for (i, d) in directions.iter().enumerate() {
            if (d.norm() - 1.0).abs() > UNIT_TOL {
                return Err(invalid(format!(
                    "direction {i} has norm {} (expected 1)",
                    d.norm()
                )));
            }
        }
        Ok(Self { directions })
    }

    /// Normalizes each vector; zero vectors are rejected.
    pub fn from_unnormalized(vectors: Vec<Vector3<f64>>) -> Result<Self> {
        let mut out = Vec::with_capacity(vectors.len());
        for (i, v) in vectors.into_iter().enumerate() {
            let n = v.norm();
            if !(n > 0.0) || !n.is_finite() {
                return Err(invalid(format!("direction {i} cannot be normalized")));
            }
            out.push(v / n);
        }
        Self::new(out)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn as_slice(&self) -> &[Vector3<f64>] {
        &self.directions
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vector3<f64>> {
        self.directions.iter()
    }

    pub fn into_inner(self) -> Vec<Vector3<f64>> {
        self.directions
    }

    /// Smallest angle between any two axes, treating ±d as the same axis.
    pub fn min_axis_separation(&self) -> f64 {
        let mut best = PI / 2.0;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                let c = self.directions[i].dot(&self.directions[j]).abs().min(1.0);
                best = best.min(c.acos());
            }
        }
        best
    }
}

/// A proper rotation of 3-space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    matrix: Matrix3<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    /// Checks orthonormality and unit determinant to 1e-12.
    pub fn from_matrix(matrix: Matrix3<f64>) -> Result<Self> {
        let gram = matrix.transpose() * matrix;
        let ortho = (gram - Matrix3::identity()).amax();
        let det = matrix.determinant();
        if ortho > UNIT_TOL || (det - 1.0).abs() > UNIT_TOL {
            return Err(invalid(format!(
                "not a rotation (orthonormality error {ortho:.2e}, det {det})"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        if !(axis.norm() > 0.0) {
            return Err(invalid("rotation axis must be non-zero"));
        }
        let q = UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle);
        Ok(Self {
            matrix: q.to_rotation_matrix().into_inner(),
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
        }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &Rotation) -> Self {
        Self {
            matrix: self.matrix * first.matrix,
        }
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * v
    }
}

/// Haar-uniform rotation from a normalized quaternion of four seeded Gaussians.
pub fn random_rotation(seed: u64) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

pub(crate) fn random_rotation_with<R: rand::Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let g: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(g[0], g[1], g[2], g[3]));
        return Rotation {
            matrix: q.to_rotation_matrix().into_inner(),
        };
    }
}

pub fn rotate_directions(dirs: &DirectionSet, rotation: &Rotation) -> DirectionSet {
    DirectionSet {
        directions: dirs
            .iter()
            .map(|d| {
                let v = rotation.apply(d);
                // keep the unit-norm invariant exact under rounding
                v / v.norm()
            })
            .collect(),
    }
}

pub(crate) fn random_unit_vector<R: rand::Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Antipodally symmetrized Coulomb energy Σ_{i<j} 1/‖dᵢ−dⱼ‖ + 1/‖dᵢ+dⱼ‖.
pub fn electrostatic_energy(dirs: &[Vector3<f64>]) -> f64 {
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            e += 1.0 / (dirs[i] - dirs[j]).norm() + 1.0 / (dirs[i] + dirs[j]).norm();
        }
    }
    e
}

fn energy_gradient(dirs: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut grad = vec![Vector3::zeros(); dirs.len()];
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            let minus = dirs[i] - dirs[j];
            let plus = dirs[i] + dirs[j];
            let gm = minus / minus.norm().powi(3);
            let gp = plus / plus.norm().powi(3);
            grad[i] -= gm + gp;
            grad[j] += gm - gp;
        }
    }
    // project onto the tangent planes
    for (g, d) in grad.iter_mut().zip(dirs) {
        *g -= d * g.dot(d);
    }
    grad
}

/// Outcome of a repulsion run: the final directions and the energy after
/// every accepted iteration (first entry is the starting energy).
#[derive(Debug, Clone)]
pub struct RepulsionRun {
    pub directions: DirectionSet,
    pub energy_trace: Vec<f64>,
}

/// Projected gradient descent on [`electrostatic_energy`] with step halving
/// whenever a trial step would raise the energy.
pub fn repulsion_descent(start: DirectionSet, iterations: usize, seed: u64) -> RepulsionRun {
    let mut dirs = start.into_inner();
    separate_coincident(&mut dirs, seed);
    let n = dirs.len();
    let mut energy = electrostatic_energy(&dirs);
    let mut trace = vec![energy];
    if n < 2 {
        return RepulsionRun {
            directions: DirectionSet { directions: dirs },
            energy_trace: trace,
        };
    }
    let mut step = 0.01 / (n as f64);
    'outer: for _ in 0..iterations {
        let grad = energy_gradient(&dirs);
        for _ in 0..40 {
            let trial: Vec<Vector3<f64>> = dirs
                .iter()
                .zip(&grad)
                .map(|(d, g)| (d - g * step).normalize())
                .collect();
            let e = electrostatic_energy(&trial);
            if e <= energy {
                dirs = trial;
                energy = e;
                trace.push(energy);
                step *= 1.5;
                continue 'outer;
            }
            step *= 0.5;
        }
        // no decreasing step left: converged to working precision
        break;
    }
    RepulsionRun {
        directions: DirectionSet { directions: dirs },
        energy_trace: trace,
    }
}

fn separate_coincident(dirs: &mut [Vector3<f64>], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    loop {
        let mut moved = false;
        for i in 0..dirs.len() {
            for j in (i + 1)..dirs.len() {
                if (dirs[i] - dirs[j]).norm() < 1e-9 || (dirs[i] + dirs[j]).norm() < 1e-9 {
                    let jitter = Vector3::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    ) * 1e-6;
                    dirs[j] = (dirs[j] + jitter).normalize();
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
}

/// Seeded random unit vectors (the repulsion starting point).
pub fn random_directions(n: usize, seed: u64) -> Result<DirectionSet> {
    if n == 0 {
        return Err(invalid("direction count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DirectionSet::new((0..n).map(|_| random_unit_vector(&mut rng)).collect())
}

/// `n` nearly uniform axes minimizing the antipodal Coulomb energy.
pub fn generate_uniform_directions(n: usize, seed: u64, iterations: usize) -> Result<DirectionSet> {
    let start = random_directions(n, seed)?;
    Ok(repulsion_descent(start, iterations, seed).directions)
}

/// Product rule on the sphere with positive weights summing to 4π.
#[derive(Debug, Clone)]
pub struct SphereQuadrature {
    nodes: DirectionSet,
    weights: Vec<f64>,
}

impl SphereQuadrature {
    pub fn nodes(&self) -> &DirectionSet {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate<F: Fn(&Vector3<f64>) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(d, w)| w * f(d))
            .sum()
    }

    /// Weighted sum of pre-sampled values (one per node).
    pub fn integrate_samples(&self, values: &[f64]) -> Result<f64> {
        crate::error::check_len(self.weights.len(), values.len())?;
        Ok(values.iter().zip(&self.weights).map(|(v, w)| v * w).sum())
    }
}

/// Gauss–Legendre nodes in cos θ times a uniform azimuth grid.
///
/// Exact for products whose polar part has degree below `2·n_polar` and whose
/// azimuthal frequency is below `n_azimuth`.
pub fn gauss_sphere_quadrature(n_polar: usize, n_azimuth: usize) -> Result<SphereQuadrature> {
    if n_polar == 0 || n_azimuth == 0 {
        return Err(invalid("quadrature grid counts must be at least 1"));
    }
    let (xs, ws) = gauss_legendre(n_polar);
    let dphi = 2.0 * PI / n_azimuth as f64;
    let mut nodes = Vec::with_capacity(n_polar * n_azimuth);
    let mut weights = Vec::with_capacity(n_polar * n_azimuth);
    for (&z, &w) in xs.iter().zip(&ws) {
        let s = (1.0 - z * z).max(0.0).sqrt();
        for k in 0..n_azimuth {
            let phi = dphi * k as f64;
            let v = Vector3::new(s * phi.cos(), s * phi.sin(), z);
            nodes.push(v / v.norm());
            weights.push(w * dphi);
        }
    }
    Ok(SphereQuadrature {
        nodes: DirectionSet::new(nodes)?,
        weights,
    })
}

/// Gauss–Legendre nodes and weights on [−1, 1] by Newton iteration on Pₙ.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

impl From<DirectionSet> for Vec<Vector3<f64>> {
    fn from(d: DirectionSet) -> Self {
        d.directions
    }
}

impl TryFrom<Vec<Vector3<f64>>> for DirectionSet {
    type Error = Error;

    fn try_from(v: Vec<Vector3<f64>>) -> Result<Self> {
        DirectionSet::new(v)
    }
}
