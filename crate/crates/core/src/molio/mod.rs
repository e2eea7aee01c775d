//! Molecule data model and ingestion.
//!
//! A [`Molecule`] holds atom types, a symmetric bond-class matrix and
//! Cartesian coordinates in Ångström.

mod canon;
mod formats;
mod split;
mod toy;

pub use canon::canonical_key;
pub use formats::{
    parse_json, parse_jsonl, parse_sdf_v2000, parse_xyz, to_json, write_jsonl, write_sdf_v2000,
    write_xyz, MoleculeJson,
};
pub use split::{split_dataset, DatasetSplit};
pub use toy::{generate_toy_dataset, ToyGenerator};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of atom types in the vocabulary.
pub const N_ATOM_TYPES: usize = 5;
/// Number of bond classes, including class 0 ("no bond").
pub const N_BOND_TYPES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    H,
    C,
    N,
    O,
    F,
}

impl Element {
    pub const ALL: [Element; N_ATOM_TYPES] = [Element::H, Element::C, Element::N, Element::O, Element::F];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Element> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
        }
    }

    pub fn is_heavy(self) -> bool {
        self != Element::H
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Element {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "H" => Ok(Element::H),
            "C" => Ok(Element::C),
            "N" => Ok(Element::N),
            "O" => Ok(Element::O),
            "F" => Ok(Element::F),
            other => Err(format!("unknown element symbol {other:?}")),
        }
    }
}

/// Bond classes stored in the bond matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum BondClass {
    None = 0,
    Single = 1,
    Double = 2,
    Triple = 3,
    Aromatic = 4,
}

impl BondClass {
    pub fn from_index(i: u8) -> Option<BondClass> {
        match i {
            0 => Some(BondClass::None),
            1 => Some(BondClass::Single),
            2 => Some(BondClass::Double),
            3 => Some(BondClass::Triple),
            4 => Some(BondClass::Aromatic),
            _ => None,
        }
    }

    /// Contribution to the valence sum.
    pub fn order(self) -> f64 {
        match self {
            BondClass::None => 0.0,
            BondClass::Single => 1.0,
            BondClass::Double => 2.0,
            BondClass::Triple => 3.0,
            BondClass::Aromatic => 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    atoms: Vec<Element>,
    bonds: Vec<u8>,
    coords: Vec<[f64; 3]>,
}

impl Molecule {
    /// Validates and builds a molecule. `bonds` is a row-major `n x n` matrix.
    pub fn new(atoms: Vec<Element>, bonds: Vec<u8>, coords: Vec<[f64; 3]>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(Error::InvalidMolecule("molecule has no atoms".into()));
        }
        if coords.len() != n {
            return Err(Error::InvalidMolecule(format!(
                "{} coordinates for {} atoms",
                coords.len(),
                n
            )));
        }
        if bonds.len() != n * n {
            return Err(Error::InvalidMolecule(format!(
                "bond matrix has {} entries, expected {}",
                bonds.len(),
                n * n
            )));
        }
        for i in 0..n {
            if bonds[i * n + i] != 0 {
                return Err(Error::InvalidMolecule(format!("self-bond on atom {i}")));
            }
            for j in 0..n {
                let b = bonds[i * n + j];
                if b as usize >= N_BOND_TYPES {
                    return Err(Error::InvalidMolecule(format!("bond class {b} out of range")));
                }
                if b != bonds[j * n + i] {
                    return Err(Error::InvalidMolecule(format!("bond matrix asymmetric at ({i},{j})")));
                }
            }
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMolecule("non-finite coordinate".into()));
        }
        Ok(Self { atoms, bonds, coords })
    }

    /// Builds a molecule from an edge list `(i, j, class)`.
    pub fn from_edges(atoms: Vec<Element>, edges: &[(usize, usize, u8)], coords: Vec<[f64; 3]>) -> Result<Self> {
        let n = atoms.len();
        let mut bonds = vec![0u8; n * n];
        for &(i, j, c) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidMolecule(format!("bond ({i},{j}) references a missing atom")));
            }
            if i == j {
                return Err(Error::InvalidMolecule(format!("self-bond on atom {i}")));
            }
            bonds[i * n + j] = c;
            bonds[j * n + i] = c;
        }
        Self::new(atoms, bonds, coords)
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[Element] {
        &self.atoms
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    /// Row-major `n x n` bond-class matrix.
    pub fn bond_matrix(&self) -> &[u8] {
        &self.bonds
    }

    pub fn bond(&self, i: usize, j: usize) -> u8 {
        self.bonds[i * self.n_atoms() + j]
    }

    pub fn bond_class(&self, i: usize, j: usize) -> BondClass {
        BondClass::from_index(self.bond(i, j)).expect("validated bond class")
    }

    /// Bonded pairs `(i, j, class)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, u8)> {
        let n = self.n_atoms();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let b = self.bond(i, j);
                if b != 0 {
                    out.push((i, j, b));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.n_atoms();
        (0..n).filter(move |&j| self.bonds[i * n + j] != 0)
    }

    pub fn heavy_atom_count(&self) -> usize {
        self.atoms.iter().filter(|a| a.is_heavy()).count()
    }

    /// Coordinates as an `n x 3` tensor.
    pub fn coord_tensor(&self) -> Tensor {
        Tensor::from_vec(self.n_atoms(), 3, self.coords.iter().flatten().copied().collect())
    }

    /// Same atoms and bonds with new coordinates.
    pub fn with_coords(&self, coords: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(self.atoms.clone(), self.bonds.clone(), coords)
    }

    /// Reorders atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_atoms();
        assert_eq!(perm.len(), n, "permutation length");
        let atoms = perm.iter().map(|&p| self.atoms[p]).collect();
        let coords = perm.iter().map(|&p| self.coords[p]).collect();
        let mut bonds = vec![0u8; n * n];
        for a in 0..n {
            for b in 0..n {
                bonds[a * n + b] = self.bonds[perm[a] * n + perm[b]];
            }
        }
        Self { atoms, bonds, coords }
    }

    /// True when every atom is reachable through nonzero bonds.
    pub fn is_connected(&self) -> bool {
        let n = self.n_atoms();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == n
    }
}
