//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uae3d::autograd::{Graph, ParamStore, Var};
use uae3d::geom::GbfConfig;
use uae3d::gradcheck::{check_input_grad, check_param_grads};
use uae3d::molio::{generate_toy_dataset, Molecule};
use uae3d::netblocks::{ada_layernorm, DitBlock, LayerNorm, Mlp, PairIndex, RelationalAttention, SelfAttention, TransformerBlock};
use uae3d::tensor::Tensor;
use uae3d::uae::{standard_normal, vae_objective, LossWeights, Uae, UaeConfig};
use uae3d::udm::{Condition, Dit, DitConfig, Property};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    standard_normal(rows, cols, rng)
}

/// `sum(out ⊙ w)` for a fixed random `w`, turning any output into a scalar
/// with a non-trivial gradient.
pub fn project(g: &mut Graph<'_>, out: Var, w: &Tensor) -> Var {
    let wv = g.input(w.clone());
    let p = g.mul(out, wv);
    g.sum(p)
}

pub fn small_uae_config() -> UaeConfig {
    UaeConfig {
        hidden: 8,
        latent_dim: 3,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        ff_mult: 2,
        gbf: GbfConfig {
            n_centers: 6,
            d_min: 0.0,
            d_max: 4.0,
            width: 0.8,
        },
    }
}

pub fn small_dit_config() -> DitConfig {
    DitConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        ff_mult: 2,
        time_features: 6,
        cond_width: 8,
    }
}

/// A small valid molecule from the toy generator.
pub fn toy_molecule(seed: u64, max_atoms: usize) -> Molecule {
    generate_toy_dataset(1, seed, max_atoms).remove(0)
}

pub fn heavy_condition(value: f64) -> Condition {
    Condition::ScalarProperty {
        property: Property::HeavyAtoms,
        value,
    }
}

/// Worst relative finite-difference errors of every differentiable block
/// for one random draw, as `(block, parameter error, input error)`.
pub fn gradient_errors(seed: u64) -> Vec<(&'static str, f64, f64)> {
    const H: f64 = 1e-5;
    let mut r = rng(seed);
    let mut out = Vec::new();
    let n = r.gen_range(2..=4);
    let d = 8;

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, &mut r, "mlp", &[d, 12, 5]);
    let x = random_tensor(n, d, &mut r);
    let w = random_tensor(n, 5, &mut r);
    let f = |g: &mut Graph<'_>, xv: Var| {
        let y = mlp.forward(g, xv);
        project(g, y, &w)
    };
    out.push((
        "mlp",
        check_param_grads(&store, H, 1, |g| {
            let xv = g.input(x.clone());
            f(g, xv)
        }),
        check_input_grad(&store, &x, H, f),
    ));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", d);
    // Move gain and bias away from their identity initialization.
    for id in store.ids().collect::<Vec<_>>() {
        let t = random_tensor(1, d, &mut r);
        *store.get_mut(id) = t;
    }
    let w = random_tensor(n, d, &mut r);
    let f = |g: &mut Graph<'_>, xv: Var| {
        let y = ln.forward(g, xv);
        project(g, y, &w)
    };
    out.push((
        "layernorm",
        check_param_grads(&store, H, 1, |g| {
            let xv = g.input(x.clone());
            f(g, xv)
        }),
        check_input_grad(&store, &x, H, f),
    ));

    // adaLN: gradients through h, shift and scale packed as one input.
    let store = ParamStore::new();
    let packed = random_tensor(n + 2, d, &mut r);
    let f = |g: &mut Graph<'_>, pv: Var| {
        let h = g.slice_rows(pv, 0, n);
        let shift = g.slice_rows(pv, n, n + 1);
        let scale = g.slice_rows(pv, n + 1, n + 2);
        let y = ada_layernorm(g, h, shift, scale);
        project(g, y, &w)
    };
    out.push(("ada_layernorm", 0.0, check_input_grad(&store, &packed, H, f)));

    let mut store = ParamStore::new();
    let ra = RelationalAttention::new(&mut store, &mut r, "ra", d, 2, 2);
    let he = random_tensor(n * n, d, &mut r);
    let pairs = PairIndex::new(n);
    let f = |g: &mut Graph<'_>, xv: Var| {
        let ev = g.input(he.clone());
        let y = ra.forward(g, xv, ev, &pairs);
        project(g, y, &w)
    };
    let fe = |g: &mut Graph<'_>, ev: Var| {
        let xv = g.input(x.clone());
        let y = ra.forward(g, xv, ev, &pairs);
        project(g, y, &w)
    };
    out.push((
        "relational_attention",
        check_param_grads(&store, H, 1, |g| {
            let xv = g.input(x.clone());
            f(g, xv)
        }),
        check_input_grad(&store, &x, H, f).max(check_input_grad(&store, &he, H, fe)),
    ));

    let mut store = ParamStore::new();
    let sa = SelfAttention::new(&mut store, &mut r, "sa", d, 2);
    let f = |g: &mut Graph<'_>, xv: Var| {
        let y = sa.forward(g, xv);
        project(g, y, &w)
    };
    out.push((
        "self_attention",
        check_param_grads(&store, H, 1, |g| {
            let xv = g.input(x.clone());
            f(g, xv)
        }),
        check_input_grad(&store, &x, H, f),
    ));

    let mut store = ParamStore::new();
    let tb = TransformerBlock::new(&mut store, &mut r, "tb", d, 2, 2);
    let f = |g: &mut Graph<'_>, xv: Var| {
        let y = tb.forward(g, xv);
        project(g, y, &w)
    };
    out.push((
        "transformer_block",
        check_param_grads(&store, H, 1, |g| {
            let xv = g.input(x.clone());
            f(g, xv)
        }),
        check_input_grad(&store, &x, H, f),
    ));

    let mut store = ParamStore::new();
    let db = DitBlock::new(&mut store, &mut r, "db", d, 6, 2, 2);
    let c = random_tensor(1, 6, &mut r);
    let f = |g: &mut Graph<'_>, xv: Var| {
        let cv = g.input(c.clone());
        let y = db.forward(g, xv, cv);
        project(g, y, &w)
    };
    out.push((
        "dit_block",
        check_param_grads(&store, H, 1, |g| {
            let xv = g.input(x.clone());
            f(g, xv)
        }),
        check_input_grad(&store, &x, H, f),
    ));

    let mut store = ParamStore::new();
    let dit = Dit::new(small_dit_config(), 3, &mut store, &mut r).unwrap();
    let z = random_tensor(n, 3, &mut r);
    let wz = random_tensor(n, 3, &mut r);
    let t: f64 = r.gen_range(0.05..1.0);
    let cond = heavy_condition(r.gen_range(0.0..1.0));
    let f = |g: &mut Graph<'_>, zv: Var| {
        let y = dit.forward(g, zv, t, &cond);
        project(g, y, &wz)
    };
    out.push((
        "dit",
        check_param_grads(&store, H, 3, |g| {
            let zv = g.input(z.clone());
            f(g, zv)
        }),
        check_input_grad(&store, &z, H, f),
    ));

    let mut store = ParamStore::new();
    let vae = Uae::new(small_uae_config(), &mut store, &mut r).unwrap();
    let mol = toy_molecule(seed, 5);
    let eps = random_tensor(mol.n_atoms(), 3, &mut r);
    let weights = LossWeights {
        gamma: [r.gen_range(0.5..2.0), r.gen_range(0.5..2.0), r.gen_range(0.5..2.0), r.gen_range(0.5..2.0)],
        gamma_d: 10.0,
        beta: 0.1,
    };
    let loss = check_param_grads(&store, H, 3, |g| vae_objective(g, &vae, &mol, &eps, &weights).loss);
    let dec_in = random_tensor(mol.n_atoms(), 3, &mut r);
    let decoder_input = check_input_grad(&store, &dec_in, H, |g, zv| {
        let d = vae.decode_vars(g, zv);
        let a = g.sum(d.coords);
        let b = g.sum(d.atom_logits);
        let c = g.sum(d.bond_upper);
        let ab = g.add(a, b);
        g.add(ab, c)
    });
    out.push(("vae_loss", loss, decoder_input));
    out
}

/// Applies `perm` to the rows of an `n^2`-row pair table: new row
/// `(i, j)` is old row `(perm[i], perm[j])`.
pub fn permute_pairs(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let index: Vec<usize> = (0..n * n).map(|r| perm[r / n] * n + perm[r % n]).collect();
    t.gather_rows(&index)
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    out.push(a.clone());
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// A training config small enough for a test to run a few epochs.
pub fn tiny_config() -> uae3d::harness::TrainConfig {
    uae3d::harness::TrainConfig {
        epochs: 2,
        batch_size: 4,
        model: small_uae_config(),
        denoiser: small_dit_config(),
        diffusion_steps: 20,
        ..Default::default()
    }
}
