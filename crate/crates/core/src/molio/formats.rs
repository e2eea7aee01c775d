use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Element, Molecule};
use crate::error::{parse_err, Error, Result};

/// Parses an XYZ block: count line, comment line, then one
/// `symbol x y z` line per atom. XYZ carries no bonds.
pub fn parse_xyz(text: &str) -> Result<Molecule> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, count_line) = lines.next().ok_or_else(|| parse_err(1, "missing atom count line"))?;
    let n: usize = count_line
        .trim()
        .parse()
        .map_err(|_| parse_err(1, format!("invalid atom count {:?}", count_line.trim())))?;
    if n == 0 {
        return Err(parse_err(1, "atom count must be positive"));
    }
    lines.next().ok_or_else(|| parse_err(2, "missing comment line"))?;
    let mut atoms = Vec::with_capacity(n);
    let mut coords = Vec::with_capacity(n);
    let mut last_line = 2;
    for (lineno, line) in lines {
        if atoms.len() == n {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(lineno, format!("more than the declared {n} atom lines")));
        }
        last_line = lineno;
        let mut fields = line.split_whitespace();
        let sym = fields
            .next()
            .ok_or_else(|| parse_err(lineno, "empty atom line"))?;
        let element: Element = sym.parse().map_err(|e: String| parse_err(lineno, e))?;
        let mut xyz = [0.0; 3];
        for (axis, slot) in xyz.iter_mut().enumerate() {
            let tok = fields
                .next()
                .ok_or_else(|| parse_err(lineno, format!("missing coordinate {axis}")))?;
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(lineno, format!("non-numeric coordinate {tok:?}")))?;
        }
        atoms.push(element);
        coords.push(xyz);
    }
    if atoms.len() != n {
        return Err(parse_err(
            last_line,
            format!("header declares {n} atoms but body has {}", atoms.len()),
        ));
    }
    Molecule::new(atoms, vec![0; n * n], coords)
}

pub fn write_xyz(mol: &Molecule, comment: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", mol.n_atoms());
    let _ = writeln!(out, "{comment}");
    for (a, c) in mol.atoms().iter().zip(mol.coords()) {
        let _ = writeln!(out, "{} {:.6} {:.6} {:.6}", a, c[0], c[1], c[2]);
    }
    out
}

/// Fixed-width field with a whitespace-token fallback for short lines.
fn sdf_ints(line: &str, widths: &[usize]) -> Option<Vec<i64>> {
    let total: usize = widths.iter().sum();
    if line.len() >= total && line.is_char_boundary(total) {
        let mut out = Vec::with_capacity(widths.len());
        let mut pos = 0;
        let mut ok = true;
        for &w in widths {
            match line[pos..pos + w].trim().parse::<i64>() {
                Ok(v) => out.push(v),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
            pos += w;
        }
        if ok {
            return Some(out);
        }
    }
    let toks: Vec<i64> = line
        .split_whitespace()
        .take(widths.len())
        .map(|t| t.parse::<i64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    (toks.len() == widths.len()).then_some(toks)
}

/// Parses the atom and bond blocks of a V2000 molfile record.
///
/// Bond types 1, 2, 3 map to single/double/triple, 4 to aromatic. Charge,
/// stereo and property blocks are ignored.
pub fn parse_sdf_v2000(text: &str) -> Result<Molecule> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.iter().any(|l| l.contains("V3000")) {
        let at = lines.iter().position(|l| l.contains("V3000")).unwrap_or(0);
        return Err(parse_err(at + 1, "V3000 records are not supported"));
    }
    let counts_line = *lines
        .get(3)
        .ok_or_else(|| parse_err(lines.len().max(1), "truncated header: missing counts line"))?;
    let counts = sdf_ints(counts_line, &[3, 3]).ok_or_else(|| parse_err(4, "malformed counts line"))?;
    let (n_atoms, n_bonds) = (counts[0], counts[1]);
    if n_atoms <= 0 || n_bonds < 0 {
        return Err(parse_err(4, format!("invalid counts {n_atoms} atoms / {n_bonds} bonds")));
    }
    let (n_atoms, n_bonds) = (n_atoms as usize, n_bonds as usize);

    let mut atoms = Vec::with_capacity(n_atoms);
    let mut coords = Vec::with_capacity(n_atoms);
    for k in 0..n_atoms {
        let lineno = 5 + k;
        let line = lines
            .get(lineno - 1)
            .ok_or_else(|| parse_err(lineno, "truncated atom block"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(parse_err(lineno, "truncated atom line"));
        }
        let mut xyz = [0.0; 3];
        for axis in 0..3 {
            xyz[axis] = toks[axis]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(lineno, format!("non-numeric coordinate {:?}", toks[axis])))?;
        }
        let element: Element = toks[3].parse().map_err(|e: String| parse_err(lineno, e))?;
        atoms.push(element);
        coords.push(xyz);
    }

    let mut edges = Vec::with_capacity(n_bonds);
    for k in 0..n_bonds {
        let lineno = 5 + n_atoms + k;
        let line = lines
            .get(lineno - 1)
            .ok_or_else(|| parse_err(lineno, "truncated bond block"))?;
        let f = sdf_ints(line, &[3, 3, 3]).ok_or_else(|| parse_err(lineno, "malformed bond line"))?;
        let (a, b, order) = (f[0], f[1], f[2]);
        for idx in [a, b] {
            if idx < 1 || idx as usize > n_atoms {
                return Err(parse_err(
                    lineno,
                    format!("bond references atom {idx} but the record has {n_atoms} atoms"),
                ));
            }
        }
        if a == b {
            return Err(parse_err(lineno, "bond from an atom to itself"));
        }
        let class = match order {
            1..=4 => order as u8,
            other => return Err(parse_err(lineno, format!("unsupported bond type {other}"))),
        };
        edges.push((a as usize - 1, b as usize - 1, class));
    }
    Molecule::from_edges(atoms, &edges, coords)
}

pub fn write_sdf_v2000(mol: &Molecule, title: &str) -> String {
    let edges = mol.edges();
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "  uae3d");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>3}{:>3}  0  0  0  0  0  0  0  0999 V2000",
        mol.n_atoms(),
        edges.len()
    );
    for (a, c) in mol.atoms().iter().zip(mol.coords()) {
        let _ = writeln!(
            out,
            "{:>10.4}{:>10.4}{:>10.4} {:<3} 0  0  0  0  0  0  0  0  0  0  0  0",
            c[0], c[1], c[2], a.symbol()
        );
    }
    for (i, j, b) in edges {
        let _ = writeln!(out, "{:>3}{:>3}{:>3}  0", i + 1, j + 1, b);
    }
    let _ = writeln!(out, "M  END");
    out
}

/// Line-oriented JSON schema used between pipeline stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeJson {
    pub atoms: Vec<String>,
    pub bonds: Vec<(usize, usize, u8)>,
    pub coords: Vec<[f64; 3]>,
}

impl From<&Molecule> for MoleculeJson {
    fn from(m: &Molecule) -> Self {
        Self {
            atoms: m.atoms().iter().map(|a| a.symbol().to_string()).collect(),
            bonds: m.edges(),
            coords: m.coords().to_vec(),
        }
    }
}

impl TryFrom<MoleculeJson> for Molecule {
    type Error = Error;

    fn try_from(j: MoleculeJson) -> Result<Self> {
        let atoms = j
            .atoms
            .iter()
            .map(|s| s.parse::<Element>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(Error::InvalidMolecule)?;
        Molecule::from_edges(atoms, &j.bonds, j.coords)
    }
}

pub fn to_json(mol: &Molecule) -> String {
    serde_json::to_string(&MoleculeJson::from(mol)).expect("molecule serializes")
}

pub fn parse_json(text: &str) -> Result<Molecule> {
    let j: MoleculeJson = serde_json::from_str(text)?;
    Molecule::try_from(j)
}

/// One molecule per line.
pub fn write_jsonl(mols: &[Molecule]) -> String {
    let mut out = String::new();
    for m in mols {
        out.push_str(&to_json(m));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Molecule>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_json(l).map_err(|e| parse_err(i + 1, e.to_string()))
        })
        .collect()
}
