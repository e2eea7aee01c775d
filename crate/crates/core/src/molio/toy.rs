//! Seeded generator of small organic-like molecules with idealized
//! geometry, used for offline desk-scale training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Element, Molecule};
use crate::geom::{self, add, cross, dot, norm, normalize, scale, sub, Vec3};

/// Standard deviation of the Gaussian position jitter, Å.
pub const COORD_JITTER: f64 = 0.02;
const MIN_NONBONDED: f64 = 1.6;
const TETRAHEDRAL: f64 = 109.471_220_634_490_7;

fn valence(e: Element) -> u8 {
    match e {
        Element::H | Element::F => 1,
        Element::C => 4,
        Element::N => 3,
        Element::O => 2,
    }
}

/// Idealized bond length for an element pair and bond class, Å.
pub fn ideal_bond_length(a: Element, b: Element, class: u8) -> f64 {
    use Element::*;
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    match (a, b, class) {
        (H, H, _) => 0.74,
        (H, C, _) => 1.09,
        (H, N, _) => 1.01,
        (H, O, _) => 0.96,
        (H, F, _) => 0.92,
        (C, C, 1) => 1.54,
        (C, C, 2) => 1.34,
        (C, C, 3) => 1.20,
        (C, C, _) => 1.39,
        (C, N, 1) => 1.47,
        (C, N, 2) => 1.28,
        (C, N, 3) => 1.16,
        (C, N, _) => 1.34,
        (C, O, 1) => 1.43,
        (C, O, _) => 1.21,
        (C, F, _) => 1.35,
        (N, N, 1) => 1.45,
        (N, N, _) => 1.25,
        (N, O, 1) => 1.40,
        (N, O, _) => 1.21,
        (N, F, _) => 1.36,
        (O, O, _) => 1.48,
        (O, F, _) => 1.42,
        (F, F, _) => 1.42,
        _ => 1.5,
    }
}

/// Draws random molecules over {H, C, N, O, F} that satisfy the default
/// valency table: acyclic heavy-atom skeletons with random multiple bonds,
/// and six-membered aromatic rings when `max_atoms >= 12`.
pub struct ToyGenerator {
    rng: ChaCha8Rng,
    max_atoms: usize,
    jitter: Normal<f64>,
}

impl ToyGenerator {
    pub fn new(seed: u64, max_atoms: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_atoms: max_atoms.clamp(2, 32),
            jitter: Normal::new(0.0, COORD_JITTER).expect("valid normal"),
        }
    }

    pub fn next_molecule(&mut self) -> Molecule {
        loop {
            let graph = if self.max_atoms >= 12 && self.rng.gen_bool(0.12) {
                self.ring_graph()
            } else {
                self.tree_graph()
            };
            let Some((atoms, edges)) = graph else { continue };
            for _ in 0..8 {
                if let Some(coords) = self.embed(&atoms, &edges) {
                    return Molecule::from_edges(atoms, &edges, coords).expect("generator emits valid molecules");
                }
            }
        }
    }

    fn pick_heavy(&mut self, leaf_ok: bool) -> Element {
        let r: f64 = self.rng.gen();
        match r {
            r if r < 0.55 => Element::C,
            r if r < 0.72 => Element::N,
            r if r < 0.89 => Element::O,
            _ if leaf_ok => Element::F,
            _ => Element::C,
        }
    }

    fn tree_graph(&mut self) -> Option<(Vec<Element>, Vec<(usize, usize, u8)>)> {
        // Each heavy atom brings at least one hydrogen on average.
        let max_heavy = (self.max_atoms / 2).clamp(1, 9);
        let n_heavy = self.rng.gen_range(1..=max_heavy);
        let mut atoms = vec![self.pick_heavy(n_heavy == 1)];
        let mut edges: Vec<(usize, usize, u8)> = Vec::new();
        let mut used = vec![0u8];
        while atoms.len() < n_heavy {
            let open: Vec<usize> = (0..atoms.len()).filter(|&i| used[i] < valence(atoms[i])).collect();
            let &parent = open.choose(&mut self.rng)?;
            let e = self.pick_heavy(true);
            atoms.push(e);
            used.push(1);
            used[parent] += 1;
            edges.push((parent, atoms.len() - 1, 1));
        }
        // Promote some bonds to double/triple where both ends have room.
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.shuffle(&mut self.rng);
        for k in order {
            let (a, b, c) = edges[k];
            if c < 3
                && used[a] < valence(atoms[a])
                && used[b] < valence(atoms[b])
                && self.rng.gen_bool(0.35)
            {
                edges[k].2 += 1;
                used[a] += 1;
                used[b] += 1;
            }
        }
        let mut n_h = 0usize;
        for i in 0..atoms.len() {
            n_h += (valence(atoms[i]) - used[i]) as usize;
        }
        if atoms.len() + n_h > self.max_atoms || atoms.len() + n_h < 2 {
            return None;
        }
        let n_heavy = atoms.len();
        for i in 0..n_heavy {
            for _ in used[i]..valence(atoms[i]) {
                atoms.push(Element::H);
                edges.push((i, atoms.len() - 1, 1));
            }
        }
        Some((atoms, edges))
    }

    /// Benzene / pyridine ring with optional fluorine substituents.
    fn ring_graph(&mut self) -> Option<(Vec<Element>, Vec<(usize, usize, u8)>)> {
        let mut atoms = Vec::with_capacity(12);
        let mut edges = Vec::new();
        let n_pos = if self.rng.gen_bool(0.3) { Some(self.rng.gen_range(0..6)) } else { None };
        for k in 0..6 {
            atoms.push(if Some(k) == n_pos { Element::N } else { Element::C });
        }
        for k in 0..6 {
            edges.push((k, (k + 1) % 6, 4));
        }
        for k in 0..6 {
            if atoms[k] == Element::C {
                let sub = if self.rng.gen_bool(0.15) { Element::F } else { Element::H };
                atoms.push(sub);
                edges.push((k, atoms.len() - 1, 1));
            }
        }
        (atoms.len() <= self.max_atoms).then_some((atoms, edges))
    }

    /// Places atoms by walking the graph from atom 0, using tetrahedral,
    /// trigonal or linear direction sets by hybridization. Returns `None`
    /// on a steric clash.
    fn embed(&mut self, atoms: &[Element], edges: &[(usize, usize, u8)]) -> Option<Vec<Vec3>> {
        let n = atoms.len();
        let mut adj: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
        for &(a, b, c) in edges {
            adj[a].push((b, c));
            adj[b].push((a, c));
        }
        let is_ring = edges.iter().any(|e| e.2 == 4);
        let mut pos: Vec<Option<Vec3>> = vec![None; n];

        if is_ring {
            let r_ring = 1.39;
            for k in 0..6 {
                let th = std::f64::consts::PI / 3.0 * k as f64;
                pos[k] = Some([r_ring * th.cos(), r_ring * th.sin(), 0.0]);
            }
            for i in 6..n {
                let (anchor, _) = adj[i][0];
                let p = pos[anchor].expect("ring placed");
                let dir = normalize([p[0], p[1], 0.0]);
                pos[i] = Some(add(p, scale(dir, ideal_bond_length(atoms[anchor], atoms[i], 1))));
            }
        } else {
            pos[0] = Some([0.0; 3]);
            let mut queue = std::collections::VecDeque::from([(0usize, None::<usize>)]);
            while let Some((a, parent)) = queue.pop_front() {
                let pa = pos[a].expect("placed before expansion");
                let hybrid = hybridization(&adj[a]);
                let degree = adj[a].len();
                let children: Vec<(usize, u8)> = adj[a].iter().copied().filter(|&(b, _)| Some(b) != parent).collect();
                let axis = match parent {
                    Some(p) => normalize(sub(pos[p].expect("parent placed"), pa)),
                    None => random_unit(&mut self.rng),
                };
                // Reference direction fixing the torsion of the children.
                let reference = parent
                    .and_then(|p| {
                        adj[p]
                            .iter()
                            .find(|&&(q, _)| q != a && pos[q].is_some())
                            .map(|&(q, _)| sub(pos[q].unwrap(), pos[p].unwrap()))
                    })
                    .filter(|_| hybrid == 2 && parent.is_some_and(|p| hybridization(&adj[p]) == 2))
                    .unwrap_or_else(|| random_unit(&mut self.rng));
                let dirs = direction_set(hybrid, degree.max(1), axis, reference);
                // dirs[0] points at the parent (or is unused for the root).
                let offset = usize::from(parent.is_some());
                for (slot, &(b, class)) in children.iter().enumerate() {
                    let d = dirs[(slot + offset) % dirs.len()];
                    let len = ideal_bond_length(atoms[a], atoms[b], class);
                    pos[b] = Some(add(pa, scale(d, len)));
                    queue.push_back((b, Some(a)));
                }
            }
        }

        let mut coords: Vec<Vec3> = pos.into_iter().map(|p| p.expect("connected graph")).collect();
        for c in &mut coords {
            for v in c.iter_mut() {
                *v += self.jitter.sample(&mut self.rng);
            }
        }
        let bonded = |a: usize, b: usize| adj[a].iter().any(|&(x, _)| x == b);
        for i in 0..n {
            for j in i + 1..n {
                if !bonded(i, j) && norm(sub(coords[i], coords[j])) < MIN_NONBONDED {
                    return None;
                }
            }
        }
        let c = coords.iter().fold([0.0; 3], |acc, &p| add(acc, p));
        let c = scale(c, 1.0 / n as f64);
        let rot = geom::sample_rotation(&mut self.rng);
        Some(coords.iter().map(|&p| rot.rotate(sub(p, c))).collect())
    }
}

/// 3 = tetrahedral, 2 = trigonal, 1 = linear.
fn hybridization(bonds: &[(usize, u8)]) -> u8 {
    let doubles = bonds.iter().filter(|b| b.1 == 2).count();
    if bonds.iter().any(|b| b.1 == 3) || doubles >= 2 {
        1
    } else if doubles == 1 || bonds.iter().any(|b| b.1 == 4) {
        2
    } else {
        3
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = norm(v);
        if n > 1e-3 && n <= 1.0 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Ideal bond directions with the first one along `axis`; the remaining
/// ones are rotated about `axis` so that the second lies in the plane of
/// `axis` and `reference`.
fn direction_set(hybrid: u8, degree: usize, axis: Vec3, reference: Vec3) -> Vec<Vec3> {
    let mut perp = sub(reference, scale(axis, dot(reference, axis)));
    if norm(perp) < 1e-6 {
        let trial = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        perp = sub(trial, scale(axis, dot(trial, axis)));
    }
    let e1 = normalize(perp);
    let e2 = cross(axis, e1);
    let (polar, count): (f64, usize) = match hybrid {
        1 => (180.0, 1),
        2 => (120.0, 2),
        _ => (TETRAHEDRAL, 3),
    };
    let mut dirs = vec![axis];
    let p = polar.to_radians();
    for k in 0..count {
        let az = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
        let radial = add(scale(e1, az.cos()), scale(e2, az.sin()));
        dirs.push(add(scale(axis, p.cos()), scale(radial, p.sin())));
    }
    debug_assert!(dirs.len() >= degree.min(4));
    dirs
}

/// `n` molecules from a fresh generator seeded with `seed`.
pub fn generate_toy_dataset(n: usize, seed: u64, max_atoms: usize) -> Vec<Molecule> {
    let mut g = ToyGenerator::new(seed, max_atoms);
    (0..n).map(|_| g.next_molecule()).collect()
}
