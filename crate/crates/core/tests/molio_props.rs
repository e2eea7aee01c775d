mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;

use uae3d::metrics::{atom_stability, ValencyTable};
use uae3d::molio::{
    canonical_key, generate_toy_dataset, parse_json, parse_jsonl, parse_sdf_v2000, parse_xyz, split_dataset, to_json,
    write_jsonl, write_sdf_v2000, write_xyz, Molecule,
};

/// Labelled-graph isomorphism by backtracking over atom assignments.
fn isomorphic(a: &Molecule, b: &Molecule) -> bool {
    fn extend(a: &Molecule, b: &Molecule, map: &mut Vec<usize>, used: &mut [bool]) -> bool {
        let i = map.len();
        if i == a.n_atoms() {
            return true;
        }
        for j in 0..b.n_atoms() {
            if used[j] || a.atoms()[i] != b.atoms()[j] {
                continue;
            }
            if (0..i).any(|p| a.bond(i, p) != b.bond(j, map[p])) {
                continue;
            }
            map.push(j);
            used[j] = true;
            if extend(a, b, map, used) {
                return true;
            }
            map.pop();
            used[j] = false;
        }
        false
    }
    if a.n_atoms() != b.n_atoms() {
        return false;
    }
    extend(a, b, &mut Vec::new(), &mut vec![false; b.n_atoms()])
}

proptest! {
    #[test]
    fn json_round_trip_is_exact(seed in any::<u64>(), max_atoms in 2usize..16) {
        let mol = common::toy_molecule(seed, max_atoms);
        prop_assert_eq!(parse_json(&to_json(&mol)).unwrap(), mol.clone());
        let batch = generate_toy_dataset(3, seed, max_atoms);
        prop_assert_eq!(parse_jsonl(&write_jsonl(&batch)).unwrap(), batch);
    }

    #[test]
    fn sdf_round_trip_keeps_graph_and_rounded_coordinates(seed in any::<u64>(), max_atoms in 2usize..16) {
        let mol = common::toy_molecule(seed, max_atoms);
        let back = parse_sdf_v2000(&write_sdf_v2000(&mol, "t")).unwrap();
        prop_assert_eq!(back.atoms(), mol.atoms());
        prop_assert_eq!(back.bond_matrix(), mol.bond_matrix());
        for (p, q) in back.coords().iter().zip(mol.coords()) {
            for k in 0..3 {
                prop_assert!((p[k] - q[k]).abs() <= 5e-5 + 1e-12);
            }
        }
    }

    #[test]
    fn xyz_round_trip_keeps_atoms(seed in any::<u64>(), max_atoms in 2usize..16) {
        let mol = common::toy_molecule(seed, max_atoms);
        let back = parse_xyz(&write_xyz(&mol, "comment")).unwrap();
        prop_assert_eq!(back.atoms(), mol.atoms());
        prop_assert!(back.edges().is_empty());
        for (p, q) in back.coords().iter().zip(mol.coords()) {
            for k in 0..3 {
                prop_assert!((p[k] - q[k]).abs() <= 5e-7 + 1e-12);
            }
        }
    }

    #[test]
    fn split_is_a_disjoint_cover(size in 0usize..400, seed in any::<u64>(), a in 0.05f64..1.0, b in 0.05f64..1.0, c in 0.05f64..1.0) {
        let total = a + b + c;
        let ratios = [a / total, b / total, 1.0 - a / total - b / total];
        let s = split_dataset(size, ratios, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..size).collect::<Vec<_>>());
    }
}

#[test]
fn canonical_key_ignores_every_atom_order() {
    let mut r = common::rng(11);
    for seed in 0..40 {
        let mol = common::toy_molecule(seed, 6);
        let key = canonical_key(&mol);
        for perm in common::permutations(mol.n_atoms()) {
            assert_eq!(canonical_key(&mol.permuted(&perm)), key);
        }
        let mut perm: Vec<usize> = (0..mol.n_atoms()).collect();
        perm.shuffle(&mut r);
        let moved = mol.with_coords(mol.coords().iter().map(|c| [c[0] + 1.0, c[2], -c[1]]).collect()).unwrap();
        assert_eq!(canonical_key(&moved.permuted(&perm)), key);
    }
}

#[test]
fn canonical_key_equality_matches_isomorphism() {
    let mut r = common::rng(12);
    let mut mols = generate_toy_dataset(80, 5, 8);
    // Shuffled copies guarantee isomorphic pairs with different atom orders.
    for i in 0..20 {
        let mut perm: Vec<usize> = (0..mols[i].n_atoms()).collect();
        perm.shuffle(&mut r);
        let copy = mols[i].permuted(&perm);
        mols.push(copy);
    }
    let keys: Vec<String> = mols.iter().map(canonical_key).collect();
    let mut equal_pairs = 0;
    for i in 0..mols.len() {
        for j in i + 1..mols.len() {
            let same = keys[i] == keys[j];
            assert_eq!(same, isomorphic(&mols[i], &mols[j]), "molecules {i} and {j}");
            equal_pairs += usize::from(same);
        }
    }
    assert!(equal_pairs >= 20);
    let distinct: HashSet<&String> = keys.iter().collect();
    assert!(distinct.len() > 10);
}

#[test]
fn toy_molecules_are_fully_stable() {
    let table = ValencyTable::default();
    for mol in generate_toy_dataset(1000, 3, 12) {
        assert_eq!(atom_stability(&mol, &table).unwrap(), 1.0);
        assert!(mol.is_connected());
    }
}
