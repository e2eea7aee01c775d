use sha2::{Digest, Sha256};

use super::Molecule;

fn hash_u64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Order- and coordinate-independent key of the atom-typed bond graph.
///
/// Weisfeiler-Leman colour refinement: atoms start coloured by element and
/// each round rehashes an atom's colour with the sorted multiset of
/// `(bond class, neighbour colour)`. After `|V|` rounds the partition is
/// stable; the key is the hash of the sorted colour multiset.
pub fn canonical_key(mol: &Molecule) -> String {
    let n = mol.n_atoms();
    let mut colors: Vec<u64> = mol
        .atoms()
        .iter()
        .map(|a| hash_u64(&[0xA7, a.index() as u8]))
        .collect();
    let mut buf = Vec::new();
    for _ in 0..n {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut neigh: Vec<(u8, u64)> = mol.neighbors(i).map(|j| (mol.bond(i, j), colors[j])).collect();
                neigh.sort_unstable();
                buf.clear();
                buf.extend_from_slice(&colors[i].to_le_bytes());
                for (b, c) in neigh {
                    buf.push(b);
                    buf.extend_from_slice(&c.to_le_bytes());
                }
                hash_u64(&buf)
            })
            .collect();
        colors = next;
    }
    colors.sort_unstable();
    let mut hasher = Sha256::new();
    hasher.update((n as u64).to_le_bytes());
    for c in &colors {
        hasher.update(c.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}
