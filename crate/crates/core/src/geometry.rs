//! Directions on the unit sphere and the q-space points built from them.
//!
//! Directions are stored as unit vectors. The angle pair used by the
//! similarity formula is an (elevation, azimuth) pair: with
//! `unit = (cos θ cos φ, cos θ sin φ, sin θ)` the expression
//! `sin θa sin θb + cos θa cos θb cos(φa − φb)` is exactly the dot product,
//! so every distance here is computed from the vectors directly.
//!
//! Neighbour selection, radius masks and farthest-point sampling all use
//! the angular distance `acos(d_cos)`. Ties are broken by ascending index.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = [f64; 3];

/// Tolerance on `‖v‖ − 1` accepted by [`Direction::from_unit`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec3", into = "Vec3")]
pub struct Direction {
    unit: Vec3,
}

impl Direction {
    /// Accepts a vector that is already unit norm (within [`UNIT_TOLERANCE`])
    /// and renormalises it exactly.
    pub fn from_unit(v: Vec3) -> Result<Self> {
        let n = norm(v);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnit { norm: n });
        }
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self { unit: v });
        }
        Ok(Self {
            unit: [v[0] / n, v[1] / n, v[2] / n],
        })
    }

    /// Normalises any finite non-zero vector.
    pub fn normalize(v: Vec3) -> Result<Self> {
        let n = norm(v);
        if !n.is_finite() || n == 0.0 {
            return Err(Error::NotUnit { norm: n });
        }
        Ok(Self {
            unit: [v[0] / n, v[1] / n, v[2] / n],
        })
    }

    /// Builds a direction from elevation `theta` and azimuth `phi`.
    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Self {
            unit: [ct * cp, ct * sp, st],
        }
    }

    /// Fixed direction carried by b = 0 points.
    pub const fn placeholder() -> Self {
        Self {
            unit: [0.0, 0.0, 1.0],
        }
    }

    pub const fn x() -> Self {
        Self {
            unit: [1.0, 0.0, 0.0],
        }
    }

    pub const fn y() -> Self {
        Self {
            unit: [0.0, 1.0, 0.0],
        }
    }

    pub const fn z() -> Self {
        Self {
            unit: [0.0, 0.0, 1.0],
        }
    }

    pub fn unit(&self) -> Vec3 {
        self.unit
    }

    /// Elevation angle in `[−π/2, π/2]`.
    pub fn theta(&self) -> f64 {
        self.unit[2].clamp(-1.0, 1.0).asin()
    }

    /// Azimuth angle in `(−π, π]`.
    pub fn phi(&self) -> f64 {
        self.unit[1].atan2(self.unit[0])
    }

    pub fn neg(&self) -> Self {
        Self {
            unit: [-self.unit[0], -self.unit[1], -self.unit[2]],
        }
    }

    /// Uniformly distributed random direction.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let z: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).max(0.0).sqrt();
        Self {
            unit: [r * phi.cos(), r * phi.sin(), z],
        }
    }
}

impl TryFrom<Vec3> for Direction {
    type Error = Error;

    fn try_from(v: Vec3) -> Result<Self> {
        Direction::from_unit(v)
    }
}

impl From<Direction> for Vec3 {
    fn from(d: Direction) -> Vec3 {
        d.unit
    }
}

/// A joint spatial–angular coordinate. Spatial components are voxel indices,
/// `rho` is the b-value in s/mm².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QSpacePoint {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub rho: f64,
    pub dir: Direction,
}

impl QSpacePoint {
    pub fn new(u: f64, v: f64, w: f64, rho: f64, dir: Direction) -> Self {
        Self { u, v, w, rho, dir }
    }
}

/// All directions acquired at one b-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shell {
    pub bval: f64,
    pub directions: Vec<Direction>,
}

impl Shell {
    pub fn new(bval: f64, directions: Vec<Direction>) -> Self {
        Self { bval, directions }
    }

    /// A spherical Fibonacci lattice of `n` directions under a random
    /// rotation drawn from `seed`. Same seed, same ordered list.
    pub fn fibonacci(bval: f64, n: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rot = Rotation::random(&mut rng);
        let directions = fibonacci_sphere(n).iter().map(|d| rot.apply(d)).collect();
        Self { bval, directions }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Spherical Fibonacci lattice with `n` points.
pub fn fibonacci_sphere(n: usize) -> Vec<Direction> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Direction::normalize([r * phi.cos(), r * phi.sin(), z]).expect("lattice point")
        })
        .collect()
}

/// Proper rotation of R³, stored as a row-major matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation from a (not necessarily normalised) quaternion `w + xi + yj + zk`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Self {
            m: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        }
    }

    /// Haar-uniform random rotation.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let normal = rand_distr::StandardNormal;
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(normal));
        Self::from_quaternion(q[0], q[1], q[2], q[3])
    }

    pub fn apply_vec(&self, v: Vec3) -> Vec3 {
        std::array::from_fn(|r| dot(self.m[r], v))
    }

    pub fn apply(&self, d: &Direction) -> Direction {
        let v = self.apply_vec(d.unit);
        let n = norm(v);
        Direction {
            unit: [v[0] / n, v[1] / n, v[2] / n],
        }
    }
}

/// Spherical similarity: the cosine of the angle between `a` and `b`,
/// clamped to `[−1, 1]`.
#[inline]
pub fn d_cos(a: &Direction, b: &Direction) -> f64 {
    dot(a.unit, b.unit).clamp(-1.0, 1.0)
}

/// The similarity written in angle form, for elevation `theta` and azimuth `phi`.
pub fn d_cos_angles(theta_a: f64, phi_a: f64, theta_b: f64, phi_b: f64) -> f64 {
    theta_a.sin() * theta_b.sin() + theta_a.cos() * theta_b.cos() * (phi_a - phi_b).cos()
}

/// Angular (great-circle) distance in radians.
#[inline]
pub fn d_ang(a: &Direction, b: &Direction) -> f64 {
    d_cos(a, b).acos()
}

/// Indices of the `k` candidates nearest to `center` with `d_ang ≤ d_max`,
/// ascending by distance and then by index.
pub fn k_nearest_angular(
    center: &Direction,
    candidates: &[Direction],
    k: usize,
    d_max: f64,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (d_ang(center, c), i))
        .filter(|(d, _)| *d <= d_max)
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// `mask[i] = d_ang(center, candidates[i]) ≤ d_max`.
pub fn radius_mask(center: &Direction, candidates: &[Direction], d_max: f64) -> Vec<bool> {
    candidates
        .iter()
        .map(|c| d_ang(center, c) <= d_max)
        .collect()
}

/// Greedy farthest-point ordering: starts at `q0`, then repeatedly takes the
/// direction whose minimum angular distance to the chosen set is largest.
pub fn farthest_point_subset(directions: &[Direction], q0: usize, n: usize) -> Result<Vec<usize>> {
    if q0 >= directions.len() {
        return Err(Error::IndexOutOfRange {
            index: q0,
            len: directions.len(),
        });
    }
    if n == 0 || n > directions.len() {
        return Err(Error::InvalidConfig(format!(
            "subset size {n} must lie in 1..={}",
            directions.len()
        )));
    }
    let mut chosen = vec![q0];
    farthest_point_extend(directions, &mut chosen, n - 1);
    Ok(chosen)
}

/// Continues a greedy farthest-point sequence by `extra` more indices, never
/// revisiting an index already in `chosen`. Stops early when every direction
/// has been taken.
pub fn farthest_point_extend(directions: &[Direction], chosen: &mut Vec<usize>, extra: usize) {
    let mut taken = vec![false; directions.len()];
    let mut min_dist = vec![f64::INFINITY; directions.len()];
    for &c in chosen.iter() {
        taken[c] = true;
    }
    for (j, d) in directions.iter().enumerate() {
        for &c in chosen.iter() {
            min_dist[j] = min_dist[j].min(d_ang(d, &directions[c]));
        }
    }
    for _ in 0..extra {
        let mut best: Option<usize> = None;
        for j in 0..directions.len() {
            if taken[j] {
                continue;
            }
            match best {
                Some(b) if min_dist[j] <= min_dist[b] => {}
                _ => best = Some(j),
            }
        }
        let Some(b) = best else { break };
        taken[b] = true;
        chosen.push(b);
        for (j, d) in directions.iter().enumerate() {
            min_dist[j] = min_dist[j].min(d_ang(d, &directions[b]));
        }
    }
}

/// One row of a b-vector table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEntry {
    pub bval: f64,
    pub dir: Direction,
}

/// Writes `x y z b` lines; b = 0 rows get a zero vector.
pub fn write_bvecs(entries: &[GradientEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let u = if e.bval == 0.0 { [0.0; 3] } else { e.dir.unit() };
        writeln!(out, "{} {} {} {}", u[0], u[1], u[2], e.bval).unwrap();
    }
    out
}

pub fn parse_bvecs(text: &str) -> Result<Vec<GradientEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("b-vector line {}: {e}", lineno + 1)))?;
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "b-vector line {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let v = [fields[0], fields[1], fields[2]];
        let bval = fields[3];
        let dir = if bval == 0.0 && norm(v) == 0.0 {
            Direction::placeholder()
        } else {
            Direction::from_unit(v)
                .map_err(|e| Error::Parse(format!("b-vector line {}: {e}", lineno + 1)))?
        };
        out.push(GradientEntry { bval, dir });
    }
    Ok(out)
}
