//! Sample-quality metrics: valency-based stability, validity and
//! completeness, uniqueness and novelty, and kernel MMD between pooled
//! bond-length, bond-angle and dihedral distributions.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{internal_coords, InternalCoords};
use crate::molio::{canonical_key, Element, Molecule};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Allowed valences per element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValencyTable {
    pub allowed: BTreeMap<Element, Vec<u32>>,
}

impl Default for ValencyTable {
    fn default() -> Self {
        let allowed = [
            (Element::H, vec![1]),
            (Element::C, vec![4]),
            (Element::N, vec![3]),
            (Element::O, vec![2]),
            (Element::F, vec![1]),
        ];
        Self {
            allowed: allowed.into_iter().collect(),
        }
    }
}

impl ValencyTable {
    pub fn allows(&self, element: Element, valence: u32) -> Result<bool> {
        self.allowed
            .get(&element)
            .map(|v| v.contains(&valence))
            .ok_or_else(|| Error::MissingValency(element.symbol().to_string()))
    }
}

/// Summed bond order of atom `i`, aromatic bonds counting 1.5, rounded to
/// the nearest integer.
pub fn valence(mol: &Molecule, i: usize) -> u32 {
    let total: f64 = mol.neighbors(i).map(|j| mol.bond_class(i, j).order()).sum();
    total.round() as u32
}

fn stable_atoms(mol: &Molecule, table: &ValencyTable) -> Result<usize> {
    let mut count = 0;
    for (i, &a) in mol.atoms().iter().enumerate() {
        if table.allows(a, valence(mol, i))? {
            count += 1;
        }
    }
    Ok(count)
}

/// Fraction of atoms whose valence is allowed.
pub fn atom_stability(mol: &Molecule, table: &ValencyTable) -> Result<f64> {
    Ok(stable_atoms(mol, table)? as f64 / mol.n_atoms() as f64)
}

/// Atom stability pooled over every atom of a batch.
pub fn batch_atom_stability(batch: &[Molecule], table: &ValencyTable) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("molecule batch"));
    }
    let mut stable = 0;
    let mut total = 0;
    for m in batch {
        stable += stable_atoms(m, table)?;
        total += m.n_atoms();
    }
    Ok(stable as f64 / total as f64)
}

pub fn molecule_stability(mol: &Molecule, table: &ValencyTable) -> Result<bool> {
    Ok(stable_atoms(mol, table)? == mol.n_atoms())
}

/// Stable and a single connected component.
pub fn is_valid_complete(mol: &Molecule, table: &ValencyTable) -> Result<bool> {
    Ok(molecule_stability(mol, table)? && mol.is_connected())
}

pub fn validity_completeness(batch: &[Molecule], table: &ValencyTable) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("molecule batch"));
    }
    let mut ok = 0;
    for m in batch {
        if is_valid_complete(m, table)? {
            ok += 1;
        }
    }
    Ok(ok as f64 / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessNovelty {
    pub v_and_u: f64,
    pub v_and_u_and_n: f64,
}

/// Distinct valid-and-complete graphs per batch member, with and without
/// the graphs already present in `train_keys`.
pub fn uniqueness_novelty(
    batch: &[Molecule],
    train_keys: &HashSet<String>,
    table: &ValencyTable,
) -> Result<UniquenessNovelty> {
    if batch.is_empty() {
        return Err(Error::Empty("molecule batch"));
    }
    let mut keys = HashSet::new();
    for m in batch {
        if is_valid_complete(m, table)? {
            keys.insert(canonical_key(m));
        }
    }
    let novel = keys.iter().filter(|k| !train_keys.contains(*k)).count();
    let n = batch.len() as f64;
    Ok(UniquenessNovelty {
        v_and_u: keys.len() as f64 / n,
        v_and_u_and_n: novel as f64 / n,
    })
}

/// Biased squared MMD with a Gaussian kernel, clamped at zero.
pub fn mmd(a: &[f64], b: &[f64], bandwidth: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("MMD sample"));
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mean_k = |x: &[f64], y: &[f64]| {
        let mut s = 0.0;
        for &u in x {
            for &v in y {
                s += (-(u - v) * (u - v) * inv).exp();
            }
        }
        s / (x.len() * y.len()) as f64
    };
    let kab = if a.len() <= b.len() { mean_k(a, b) } else { mean_k(b, a) };
    Ok((mean_k(a, a) + mean_k(b, b) - 2.0 * kab).max(0.0))
}

/// Pool size above which the median heuristic works on an even subsample.
const MEDIAN_POOL: usize = 1000;

/// Median absolute difference over pairs of the pooled samples; 1 if the
/// pool is degenerate.
pub fn median_heuristic(a: &[f64], b: &[f64]) -> f64 {
    let mut pool: Vec<f64> = a.iter().chain(b).copied().collect();
    pool.sort_by(f64::total_cmp);
    if pool.len() > MEDIAN_POOL {
        let step = pool.len() as f64 / MEDIAN_POOL as f64;
        pool = (0..MEDIAN_POOL).map(|i| pool[(i as f64 * step) as usize]).collect();
    }
    let mut diffs = Vec::with_capacity(pool.len() * pool.len().saturating_sub(1) / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            diffs.push((pool[i] - pool[j]).abs());
        }
    }
    if diffs.is_empty() {
        return 1.0;
    }
    let mid = diffs.len() / 2;
    let (_, m, _) = diffs.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Kernel widths per geometric quantity; `None` selects the median heuristic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub bond_length: Option<f64>,
    pub bond_angle: Option<f64>,
    pub dihedral: Option<f64>,
}

/// Bond lengths, angles and absolute dihedrals pooled over a batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeometryPool {
    pub bond_lengths: Vec<f64>,
    pub bond_angles: Vec<f64>,
    pub dihedrals: Vec<f64>,
}

impl GeometryPool {
    pub fn from_molecules(batch: &[Molecule]) -> Self {
        let mut pool = Self::default();
        for m in batch {
            let InternalCoords {
                bond_lengths,
                bond_angles,
                dihedrals,
                ..
            } = internal_coords(m);
            pool.bond_lengths.extend(bond_lengths);
            pool.bond_angles.extend(bond_angles);
            pool.dihedrals.extend(dihedrals.into_iter().map(f64::abs));
        }
        // Pooled statistics must not depend on batch order.
        for v in [&mut pool.bond_lengths, &mut pool.bond_angles, &mut pool.dihedrals] {
            v.sort_by(f64::total_cmp);
        }
        pool
    }

    /// CSV rows `source,quantity,value`.
    pub fn write_csv(&self, source: &str, out: &mut String) {
        for (name, values) in [
            ("bond_length", &self.bond_lengths),
            ("bond_angle", &self.bond_angles),
            ("dihedral", &self.dihedrals),
        ] {
            for v in values {
                writeln!(out, "{source},{name},{v}").expect("writing to a String");
            }
        }
    }
}

/// CSV of both pools with a header line.
pub fn geometry_csv(generated: &GeometryPool, reference: &GeometryPool) -> String {
    let mut out = String::from("source,quantity,value\n");
    generated.write_csv("generated", &mut out);
    reference.write_csv("reference", &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub n_generated: usize,
    pub n_reference: usize,
    pub atom_stability: f64,
    pub mol_stability: f64,
    pub validity_completeness: f64,
    pub validity_uniqueness: f64,
    pub validity_uniqueness_novelty: f64,
    /// `None` when either side has no bonds (or angles, or dihedrals).
    pub mmd_bond_length: Option<f64>,
    pub mmd_bond_angle: Option<f64>,
    pub mmd_dihedral: Option<f64>,
    /// Widths actually used for the three MMDs.
    pub bandwidths: Bandwidths,
}

/// Largest pool scored exactly; bigger sorted pools are thinned to this
/// many evenly spaced order statistics.
pub const MMD_POOL: usize = 4000;

/// Even quantile subsample of a sorted pool.
pub fn thin_sorted(pool: &[f64], max: usize) -> Vec<f64> {
    if pool.len() <= max {
        return pool.to_vec();
    }
    let step = pool.len() as f64 / max as f64;
    (0..max).map(|i| pool[((i as f64 + 0.5) * step) as usize]).collect()
}

fn pooled_mmd(a: &[f64], b: &[f64], bw: Option<f64>) -> Result<(Option<f64>, Option<f64>)> {
    if a.is_empty() || b.is_empty() {
        return Ok((None, bw));
    }
    let (a, b) = (thin_sorted(a, MMD_POOL), thin_sorted(b, MMD_POOL));
    let h = bw.unwrap_or_else(|| median_heuristic(&a, &b));
    Ok((Some(mmd(&a, &b, h)?), Some(h)))
}

/// Scores `generated` against `reference`. Novelty is measured against
/// `train_keys`.
pub fn geometry_report(
    generated: &[Molecule],
    reference: &[Molecule],
    train_keys: &HashSet<String>,
    table: &ValencyTable,
    bandwidths: Bandwidths,
) -> Result<MetricsReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Empty("generated or reference set"));
    }
    let gp = GeometryPool::from_molecules(generated);
    let rp = GeometryPool::from_molecules(reference);
    let (mmd_bond_length, bl) = pooled_mmd(&gp.bond_lengths, &rp.bond_lengths, bandwidths.bond_length)?;
    let (mmd_bond_angle, ba) = pooled_mmd(&gp.bond_angles, &rp.bond_angles, bandwidths.bond_angle)?;
    let (mmd_dihedral, dh) = pooled_mmd(&gp.dihedrals, &rp.dihedrals, bandwidths.dihedral)?;

    let mut stable_mols = 0;
    for m in generated {
        if molecule_stability(m, table)? {
            stable_mols += 1;
        }
    }
    let vc = validity_completeness(generated, table)?;
    let un = uniqueness_novelty(generated, train_keys, table)?;
    assert!(
        un.v_and_u_and_n <= un.v_and_u && un.v_and_u <= vc && vc <= 1.0,
        "validity, uniqueness and novelty fractions must be nested"
    );
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_generated: generated.len(),
        n_reference: reference.len(),
        atom_stability: batch_atom_stability(generated, table)?,
        mol_stability: stable_mols as f64 / generated.len() as f64,
        validity_completeness: vc,
        validity_uniqueness: un.v_and_u,
        validity_uniqueness_novelty: un.v_and_u_and_n,
        mmd_bond_length,
        mmd_bond_angle,
        mmd_dihedral,
        bandwidths: Bandwidths {
            bond_length: bl,
            bond_angle: ba,
            dihedral: dh,
        },
    })
}
