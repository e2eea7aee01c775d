//! WebAssembly bindings for the static page in `www/`.
//!
//! The exports are ordinary Rust functions as well, so they are tested
//! natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use uae3d::geom::{gbf_expand, sample_se3, GbfConfig};
use uae3d::metrics::{atom_stability, ValencyTable};
use uae3d::molio::{MoleculeJson, ToyGenerator};
use uae3d::uae::transform_molecule;
use uae3d::udm::{make_schedule, ScheduleKind};

/// `alpha_bar[0..=steps]` for `kind` ("cosine" or "linear"); empty on bad
/// input.
#[wasm_bindgen]
pub fn schedule_curve(kind: &str, steps: usize) -> Vec<f64> {
    let Ok(kind) = kind.parse::<ScheduleKind>() else {
        return Vec::new();
    };
    make_schedule(steps, kind).map(|s| s.alpha_bar).unwrap_or_default()
}

/// Gaussian basis responses of one distance with the default centres.
#[wasm_bindgen]
pub fn gbf_features(distance: f64) -> Vec<f64> {
    if !distance.is_finite() {
        return Vec::new();
    }
    gbf_expand(distance, &GbfConfig::default())
}

#[derive(Serialize)]
struct ToyView {
    molecule: MoleculeJson,
    atom_stability: f64,
}

/// A toy molecule from `seed`, moved by the random rigid motion drawn from
/// `motion_seed` (translation variance 0.01), as JSON.
#[wasm_bindgen]
pub fn toy_molecule(seed: u32, max_atoms: usize, motion_seed: u32) -> String {
    let mol = ToyGenerator::new(u64::from(seed), max_atoms.clamp(1, 32)).next_molecule();
    let t = sample_se3(&mut ChaCha8Rng::seed_from_u64(u64::from(motion_seed)), 0.01);
    let moved = transform_molecule(&mol, &t);
    let view = ToyView {
        atom_stability: atom_stability(&moved, &ValencyTable::default()).unwrap_or(0.0),
        molecule: MoleculeJson::from(&moved),
    };
    serde_json::to_string(&view).expect("view serializes")
}

