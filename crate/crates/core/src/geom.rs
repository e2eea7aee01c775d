//! Geometric kernels: Gaussian distance expansion, rigid motions,
//! pairwise distances, internal coordinates and RMSD.

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molio::Molecule;
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Gaussian basis expansion settings: `n_centers` centres evenly spaced
/// on `[d_min, d_max]`, each with standard deviation `width`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbfConfig {
    pub n_centers: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub width: f64,
}

impl Default for GbfConfig {
    fn default() -> Self {
        let n_centers = 32;
        let (d_min, d_max) = (0.0, 8.0);
        Self {
            n_centers,
            d_min,
            d_max,
            width: (d_max - d_min) / (n_centers - 1) as f64,
        }
    }
}

impl GbfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_centers == 0 || !(self.d_min < self.d_max) || !(self.width > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid GBF config {self:?}")));
        }
        Ok(())
    }

    pub fn center(&self, k: usize) -> f64 {
        if self.n_centers == 1 {
            self.d_min
        } else {
            self.d_min + (self.d_max - self.d_min) * k as f64 / (self.n_centers - 1) as f64
        }
    }
}

/// `exp(-(d - c_k)^2 / (2 width^2))` for every centre `c_k`.
pub fn gbf_expand(d: f64, cfg: &GbfConfig) -> Vec<f64> {
    let denom = 2.0 * cfg.width * cfg.width;
    (0..cfg.n_centers)
        .map(|k| {
            let diff = d - cfg.center(k);
            (-(diff * diff) / denom).exp()
        })
        .collect()
}

/// Proper rigid motion `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Se3Transform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Se3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation matrix of a unit quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4], translation: Vec3) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        let rotation = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Self { rotation, translation }
    }

    pub fn rotate(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot(r[0], p), dot(r[1], p), dot(r[2], p)]
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        add(self.rotate(p), self.translation)
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &Se3Transform) -> Se3Transform {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.rotation[i][k] * first.rotation[k][j]).sum();
            }
        }
        Se3Transform {
            rotation,
            translation: self.apply_point(first.translation),
        }
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        dot(r[0], cross(r[1], r[2]))
    }

    /// Largest deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// Uniform rotation (normalized Gaussian quaternion) and a translation with
/// i.i.d. `N(0, trans_var)` components.
pub fn sample_se3<R: Rng + ?Sized>(rng: &mut R, trans_var: f64) -> Se3Transform {
    let q = sample_quaternion(rng);
    let std = trans_var.max(0.0).sqrt();
    let translation = [
        std * rng.sample::<f64, _>(StandardNormal),
        std * rng.sample::<f64, _>(StandardNormal),
        std * rng.sample::<f64, _>(StandardNormal),
    ];
    Se3Transform::from_quaternion(q, translation)
}

pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> Se3Transform {
    Se3Transform::from_quaternion(sample_quaternion(rng), [0.0; 3])
}

fn sample_quaternion<R: Rng + ?Sized>(rng: &mut R) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 1e-12 {
            return q;
        }
    }
}

pub fn apply_se3(coords: &[Vec3], t: &Se3Transform) -> Vec<Vec3> {
    coords.iter().map(|&p| t.apply_point(p)).collect()
}

/// Symmetric `n x n` Euclidean distance matrix with a zero diagonal.
pub fn pairwise_distances(coords: &[Vec3]) -> Tensor {
    let n = coords.len();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = norm(sub(coords[i], coords[j]));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InternalCoords {
    /// Å
    pub bond_lengths: Vec<f64>,
    /// Degrees in `[0, 180]`.
    pub bond_angles: Vec<f64>,
    /// Signed degrees in `(-180, 180]`.
    pub dihedrals: Vec<f64>,
    /// Entries skipped because a defining vector was degenerate.
    pub skipped: usize,
}

const DEGENERATE: f64 = 1e-10;

/// Bond lengths over bonded pairs, angles over bonded triples `i-j-k` and
/// dihedrals over bonded chains `i-j-k-l`, each counted once.
pub fn internal_coords(mol: &Molecule) -> InternalCoords {
    let x = mol.coords();
    let n = mol.n_atoms();
    let mut out = InternalCoords::default();
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| mol.neighbors(i).collect()).collect();

    for (i, j, _) in mol.edges() {
        let d = norm(sub(x[j], x[i]));
        if d > DEGENERATE {
            out.bond_lengths.push(d);
        } else {
            out.skipped += 1;
        }
    }

    for j in 0..n {
        let nb = &neighbors[j];
        for a in 0..nb.len() {
            for b in a + 1..nb.len() {
                let u = sub(x[nb[a]], x[j]);
                let v = sub(x[nb[b]], x[j]);
                let (nu, nv) = (norm(u), norm(v));
                if nu <= DEGENERATE || nv <= DEGENERATE {
                    out.skipped += 1;
                    continue;
                }
                let c = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
                out.bond_angles.push(c.acos().to_degrees());
            }
        }
    }

    for (j, k, _) in mol.edges() {
        for &i in &neighbors[j] {
            if i == k {
                continue;
            }
            for &l in &neighbors[k] {
                if l == j || l == i {
                    continue;
                }
                match dihedral(x[i], x[j], x[k], x[l]) {
                    Some(phi) => out.dihedrals.push(phi),
                    None => out.skipped += 1,
                }
            }
        }
    }
    out
}

/// Signed dihedral angle in degrees, `None` when any defining plane is
/// degenerate.
pub fn dihedral(p0: Vec3, p1: Vec3, p2: Vec3, p3: Vec3) -> Option<f64> {
    let b1 = sub(p1, p0);
    let b2 = sub(p2, p1);
    let b3 = sub(p3, p2);
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let nb2 = norm(b2);
    if norm(b1) <= DEGENERATE || nb2 <= DEGENERATE || norm(b3) <= DEGENERATE {
        return None;
    }
    if norm(n1) <= DEGENERATE * nb2 || norm(n2) <= DEGENERATE * nb2 {
        return None;
    }
    let y = nb2 * dot(b1, n2);
    let xx = dot(n1, n2);
    let phi = y.atan2(xx).to_degrees();
    Some(if phi <= -180.0 { 180.0 } else { phi })
}

fn centroid(x: &[Vec3]) -> Vec3 {
    let n = x.len() as f64;
    let s = x.iter().fold([0.0; 3], |acc, &p| add(acc, p));
    scale(s, 1.0 / n)
}

/// Rotation `R` minimizing `sum |R (y_i - cy) - (x_i - cx)|^2`, plus both
/// centroids.
pub fn kabsch(x: &[Vec3], y: &[Vec3]) -> (Matrix3<f64>, Vec3, Vec3) {
    let cx = centroid(x);
    let cy = centroid(y);
    let mut h = Matrix3::zeros();
    for (px, py) in x.iter().zip(y) {
        let a = sub(*py, cy);
        let b = sub(*px, cx);
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += a[r] * b[c];
            }
        }
    }
    let svd = h.svd(true, true);
    let u: Matrix3<f64> = svd.u.expect("svd u");
    let v_t: Matrix3<f64> = svd.v_t.expect("svd v_t");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d }));
    (v * fix * u.transpose(), cx, cy)
}

/// Root-mean-square deviation; with `align`, `y` is first rigidly
/// superposed onto `x`.
pub fn rmsd(x: &[Vec3], y: &[Vec3], align: bool) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("rmsd of {} vs {} points", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Empty("rmsd point set"));
    }
    let n = x.len() as f64;
    if !align {
        let s: f64 = x.iter().zip(y).map(|(a, b)| dot(sub(*a, *b), sub(*a, *b))).sum();
        return Ok((s / n).sqrt());
    }
    let (r, cx, cy) = kabsch(x, y);
    let mut s = 0.0;
    for (px, py) in x.iter().zip(y) {
        let a = sub(*py, cy);
        let v = r * nalgebra::Vector3::new(a[0], a[1], a[2]);
        let b = sub(*px, cx);
        let d = [v[0] - b[0], v[1] - b[1], v[2] - b[2]];
        s += dot(d, d);
    }
    Ok((s / n).sqrt())
}
