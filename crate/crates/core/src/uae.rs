//! Unified variational autoencoder: one latent vector per atom that
//! carries atom type, bonding and position together.
//!
//! The encoder embeds `[X; onehot F]` per atom and `[onehot E; GBF(d)]` per
//! ordered pair, runs relational attention blocks, and emits `mu` and
//! `sigma`. The decoder is a plain Transformer over the latent rows with
//! three heads: coordinates, atom logits, and bond logits computed from
//! `P_i + P_j` so that bond logits are symmetric by construction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geom::{self, gbf_expand, GbfConfig, Se3Transform};
use crate::molio::{Element, Molecule, N_ATOM_TYPES, N_BOND_TYPES};
use crate::netblocks::{Dense, LayerNorm, Mlp, PairIndex, RelationalAttention, TransformerBlock};
use crate::tensor::Tensor;

/// Floor added to the softplus output so `sigma` stays strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UaeConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub gbf: GbfConfig,
}

impl Default for UaeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            latent_dim: 16,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 4,
            ff_mult: 4,
            gbf: GbfConfig::default(),
        }
    }
}

impl UaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent_dim == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        self.gbf.validate()
    }
}

/// Weights of the loss terms `[atom, bond, coordinate, distance]`, the
/// bonded-pair multiplier inside the distance term, and the KL weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: [f64; 4],
    pub gamma_d: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: [1.0; 4],
            gamma_d: 10.0,
            beta: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.gamma.iter().chain([&self.gamma_d, &self.beta]);
        if all.into_iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-atom latents; `mu`/`sigma` are present when produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub z: Tensor,
    pub mu: Option<Tensor>,
    pub sigma: Option<Tensor>,
}

/// Decoder outputs. `bond_logits` has row `i * n + j` for pair `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VaePrediction {
    pub coords: Tensor,
    pub atom_logits: Tensor,
    pub bond_logits: Tensor,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

impl VaePrediction {
    pub fn n_atoms(&self) -> usize {
        self.coords.rows()
    }

    pub fn bond_row(&self, i: usize, j: usize) -> &[f64] {
        self.bond_logits.row(i * self.n_atoms() + j)
    }

    /// Argmax decoding into a molecule. The diagonal is ignored and each
    /// unordered pair is read once, so the result is always symmetric.
    pub fn to_molecule(&self) -> Molecule {
        let n = self.n_atoms();
        let atoms = (0..n)
            .map(|i| Element::from_index(argmax(self.atom_logits.row(i))).expect("logit width is the vocabulary"))
            .collect();
        let mut bonds = vec![0u8; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let c = argmax(self.bond_row(i, j)) as u8;
                bonds[i * n + j] = c;
                bonds[j * n + i] = c;
            }
        }
        let coords = (0..n).map(|i| {
            let r = self.coords.row(i);
            [r[0], r[1], r[2]]
        });
        Molecule::new(atoms, bonds, coords.collect()).expect("argmax decoding yields a valid molecule")
    }
}

/// Unordered pairs `i <= j` in row-major order, diagonal included.
pub fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push((i, j));
        }
    }
    out
}

/// Encoder and decoder parameter handles.
#[derive(Clone, Debug)]
pub struct Uae {
    pub cfg: UaeConfig,
    node_embed: Mlp,
    edge_embed: Mlp,
    blocks: Vec<RelationalAttention>,
    enc_norm: LayerNorm,
    mu_head: Dense,
    sigma_head: Dense,
    dec_in: Dense,
    dec_blocks: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    coord_head: Mlp,
    atom_head: Mlp,
    bond_head: Mlp,
}

/// Graph handles of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Graph handles of one decoder pass; `bond_upper` follows [`upper_pairs`].
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub coords: Var,
    pub atom_logits: Var,
    pub bond_upper: Var,
}

impl Uae {
    /// Registers every parameter under `uae.*` in `store`.
    pub fn new<R: Rng>(cfg: UaeConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let k = cfg.gbf.n_centers;
        let node_embed = Mlp::new(store, rng, "uae.enc.node_embed", &[3 + N_ATOM_TYPES, d, d]);
        let edge_embed = Mlp::new(store, rng, "uae.enc.edge_embed", &[N_BOND_TYPES + k, d, d]);
        let blocks = (0..cfg.encoder_layers)
            .map(|l| RelationalAttention::new(store, rng, &format!("uae.enc.block{l}"), d, cfg.heads, cfg.ff_mult))
            .collect();
        let enc_norm = LayerNorm::new(store, "uae.enc.norm", d);
        let mu_head = Dense::new(store, rng, "uae.enc.mu", d, cfg.latent_dim);
        let sigma_head = Dense::new(store, rng, "uae.enc.sigma", d, cfg.latent_dim);
        let dec_in = Dense::new(store, rng, "uae.dec.input", cfg.latent_dim, d);
        let dec_blocks = (0..cfg.decoder_layers)
            .map(|l| TransformerBlock::new(store, rng, &format!("uae.dec.block{l}"), d, cfg.heads, cfg.ff_mult))
            .collect();
        let dec_norm = LayerNorm::new(store, "uae.dec.norm", d);
        let coord_head = Mlp::new(store, rng, "uae.dec.coord_head", &[d, d, 3]);
        let atom_head = Mlp::new(store, rng, "uae.dec.atom_head", &[d, d, N_ATOM_TYPES]);
        let bond_head = Mlp::new(store, rng, "uae.dec.bond_head", &[d, d, N_BOND_TYPES]);
        Ok(Self {
            cfg,
            node_embed,
            edge_embed,
            blocks,
            enc_norm,
            mu_head,
            sigma_head,
            dec_in,
            dec_blocks,
            dec_norm,
            coord_head,
            atom_head,
            bond_head,
        })
    }

    /// `[X; onehot F]` per atom.
    pub fn node_features(mol: &Molecule) -> Tensor {
        let n = mol.n_atoms();
        let mut t = Tensor::zeros(n, 3 + N_ATOM_TYPES);
        for (i, (a, x)) in mol.atoms().iter().zip(mol.coords()).enumerate() {
            let r = t.row_mut(i);
            r[..3].copy_from_slice(x);
            r[3 + a.index()] = 1.0;
        }
        t
    }

    /// `[onehot E_ij; GBF(|X_i - X_j|)]` for every ordered pair, row `i * n + j`.
    pub fn edge_features(mol: &Molecule, gbf: &GbfConfig) -> Tensor {
        let n = mol.n_atoms();
        let dist = geom::pairwise_distances(mol.coords());
        let mut t = Tensor::zeros(n * n, N_BOND_TYPES + gbf.n_centers);
        for i in 0..n {
            for j in 0..n {
                let r = t.row_mut(i * n + j);
                r[mol.bond(i, j) as usize] = 1.0;
                r[N_BOND_TYPES..].copy_from_slice(&gbf_expand(dist.get(i, j), gbf));
            }
        }
        t
    }

    pub fn encode_vars(&self, g: &mut Graph<'_>, mol: &Molecule) -> EncoderVars {
        let n = mol.n_atoms();
        let pairs = PairIndex::new(n);
        let xn = g.input(Self::node_features(mol));
        let xe = g.input(Self::edge_features(mol, &self.cfg.gbf));
        let mut hn = self.node_embed.forward(g, xn);
        let he = self.edge_embed.forward(g, xe);
        for block in &self.blocks {
            hn = block.forward(g, hn, he, &pairs);
        }
        let h = self.enc_norm.forward(g, hn);
        let mu = self.mu_head.forward(g, h);
        let raw = self.sigma_head.forward(g, h);
        let sp = g.softplus(raw);
        let sigma = g.add_scalar(sp, SIGMA_FLOOR);
        EncoderVars { mu, sigma }
    }

    pub fn decode_vars(&self, g: &mut Graph<'_>, z: Var) -> DecoderVars {
        let n = g.value(z).rows();
        let mut h = self.dec_in.forward(g, z);
        for block in &self.dec_blocks {
            h = block.forward(g, h);
        }
        let p = self.dec_norm.forward(g, h);
        let coords = self.coord_head.forward(g, p);
        let atom_logits = self.atom_head.forward(g, p);
        let (first, second): (Vec<usize>, Vec<usize>) = upper_pairs(n).into_iter().unzip();
        let pi = g.gather_rows(p, first.into());
        let pj = g.gather_rows(p, second.into());
        let sum = g.add(pi, pj);
        let bond_upper = self.bond_head.forward(g, sum);
        DecoderVars {
            coords,
            atom_logits,
            bond_upper,
        }
    }

    /// Deterministic encoding; `z` is the posterior mean.
    pub fn encode(&self, store: &ParamStore, mol: &Molecule) -> LatentSequence {
        let mut g = Graph::frozen(store);
        let e = self.encode_vars(&mut g, mol);
        let mu = g.value(e.mu).clone();
        LatentSequence {
            z: mu.clone(),
            mu: Some(mu),
            sigma: Some(g.value(e.sigma).clone()),
        }
    }

    pub fn decode(&self, store: &ParamStore, z: &Tensor) -> Result<VaePrediction> {
        if z.cols() != self.cfg.latent_dim || z.rows() == 0 {
            return Err(Error::Shape(format!(
                "decoder expects n x {} latents with n >= 1, got {:?}",
                self.cfg.latent_dim,
                z.shape()
            )));
        }
        if !z.is_finite() {
            return Err(Error::InvalidArgument("latents must be finite".into()));
        }
        let mut g = Graph::frozen(store);
        let zv = g.input(z.clone());
        let d = self.decode_vars(&mut g, zv);
        Ok(VaePrediction {
            coords: g.value(d.coords).clone(),
            atom_logits: g.value(d.atom_logits).clone(),
            bond_logits: expand_upper(g.value(d.bond_upper), z.rows()),
        })
    }

    /// Encode with `z = mu`, decode, and read off a molecule.
    pub fn reconstruct(&self, store: &ParamStore, mol: &Molecule) -> Result<Molecule> {
        let lat = self.encode(store, mol);
        Ok(self.decode(store, &lat.z)?.to_molecule())
    }
}

/// Mirrors upper-triangle rows into the full `n^2` table.
fn expand_upper(upper: &Tensor, n: usize) -> Tensor {
    let mut full = Tensor::zeros(n * n, upper.cols());
    for (r, (i, j)) in upper_pairs(n).into_iter().enumerate() {
        full.row_mut(i * n + j).copy_from_slice(upper.row(r));
        full.row_mut(j * n + i).copy_from_slice(upper.row(r));
    }
    full
}

/// `z = mu + sigma * eps`, `eps ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(mu: &Tensor, sigma: &Tensor, rng: &mut R) -> Result<Tensor> {
    if mu.shape() != sigma.shape() {
        return Err(Error::Shape(format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape())));
    }
    let eps = standard_normal(mu.rows(), mu.cols(), rng);
    Ok(Tensor::from_vec(
        mu.rows(),
        mu.cols(),
        mu.data().iter().zip(sigma.data()).zip(eps.data()).map(|((m, s), e)| m + s * e).collect(),
    ))
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Graph handles of the loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub atom: Var,
    pub bond: Var,
    pub coordinate: Var,
    pub distance: Var,
}

/// Reconstruction loss values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconLoss {
    pub total: f64,
    pub atom: f64,
    pub bond: f64,
    pub coordinate: f64,
    pub distance: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph<'_>) -> ReconLoss {
        ReconLoss {
            total: g.value(self.total).item(),
            atom: g.value(self.atom).item(),
            bond: g.value(self.bond).item(),
            coordinate: g.value(self.coordinate).item(),
            distance: g.value(self.distance).item(),
        }
    }
}

/// Builds the reconstruction loss against `target` on the graph.
pub fn reconstruction_loss_vars(
    g: &mut Graph<'_>,
    target: &Molecule,
    pred: &DecoderVars,
    w: &LossWeights,
) -> LossVars {
    let n = target.n_atoms();

    let atom_targets: Vec<usize> = target.atoms().iter().map(|a| a.index()).collect();
    let atom = g.cross_entropy(pred.atom_logits, atom_targets.into(), vec![1.0 / n as f64; n].into());

    let upper = upper_pairs(n);
    let n_off = n * (n - 1) / 2;
    let bond_targets: Vec<usize> = upper.iter().map(|&(i, j)| target.bond(i, j) as usize).collect();
    let bond_weights: Vec<f64> = upper
        .iter()
        .map(|&(i, j)| if i == j { 0.0 } else { 1.0 / n_off as f64 })
        .collect();
    let bond = g.cross_entropy(pred.bond_upper, bond_targets.into(), bond_weights.into());

    let xt = g.input(target.coord_tensor());
    let diff = g.sub(pred.coords, xt);
    let sq = g.square(diff);
    let coordinate = g.weighted_sum(sq, vec![1.0 / (3 * n) as f64; 3 * n].into());

    let distance = if n_off == 0 {
        g.input(Tensor::scalar(0.0))
    } else {
        let pairs: Vec<(usize, usize)> = upper.into_iter().filter(|(i, j)| i != j).collect();
        let truth = geom::pairwise_distances(target.coords());
        let dt: Vec<f64> = pairs.iter().map(|&(i, j)| truth.get(i, j)).collect();
        let raw: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| if target.bond(i, j) != 0 { w.gamma_d } else { 1.0 })
            .collect();
        let norm: f64 = raw.iter().sum();
        let weights: Vec<f64> = if norm > 0.0 { raw.iter().map(|v| v / norm).collect() } else { raw };
        let dp = g.pair_distances(pred.coords, pairs.into());
        let dtv = g.input(Tensor::from_vec(dt.len(), 1, dt));
        let e = g.sub(dp, dtv);
        let e2 = g.square(e);
        g.weighted_sum(e2, weights.into())
    };

    let parts = [atom, bond, coordinate, distance];
    let mut total = g.scale(parts[0], w.gamma[0]);
    for (p, &gamma) in parts.iter().zip(&w.gamma).skip(1) {
        let s = g.scale(*p, gamma);
        total = g.add(total, s);
    }
    LossVars {
        total,
        atom,
        bond,
        coordinate,
        distance,
    }
}

/// `sum 1/2 (mu^2 + sigma^2 - 1 - 2 ln sigma)` averaged over atoms.
pub fn kl_term_vars(g: &mut Graph<'_>, mu: Var, sigma: Var) -> Var {
    let n = g.value(mu).rows();
    let m2 = g.square(mu);
    let s2 = g.square(sigma);
    let ls = g.log(sigma);
    let ls2 = g.scale(ls, 2.0);
    let a = g.add(m2, s2);
    let b = g.sub(a, ls2);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    g.scale(s, 0.5 / n as f64)
}

fn check_prediction(mol: &Molecule, pred: &VaePrediction) -> Result<()> {
    let n = mol.n_atoms();
    if pred.coords.shape() != (n, 3)
        || pred.atom_logits.shape() != (n, N_ATOM_TYPES)
        || pred.bond_logits.shape() != (n * n, N_BOND_TYPES)
    {
        return Err(Error::Shape(format!("prediction does not match a {n}-atom molecule")));
    }
    Ok(())
}

fn prediction_inputs(g: &mut Graph<'_>, pred: &VaePrediction) -> DecoderVars {
    let n = pred.n_atoms();
    let rows: Vec<usize> = upper_pairs(n).into_iter().map(|(i, j)| i * n + j).collect();
    DecoderVars {
        coords: g.input(pred.coords.clone()),
        atom_logits: g.input(pred.atom_logits.clone()),
        bond_upper: g.input(pred.bond_logits.gather_rows(&rows)),
    }
}

pub fn reconstruction_loss(mol: &Molecule, pred: &VaePrediction, w: &LossWeights) -> Result<ReconLoss> {
    check_prediction(mol, pred)?;
    let store = ParamStore::new();
    let mut g = Graph::frozen(&store);
    let vars = prediction_inputs(&mut g, pred);
    Ok(reconstruction_loss_vars(&mut g, mol, &vars, w).values(&g))
}

pub fn kl_term(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if mu.shape() != sigma.shape() || mu.rows() == 0 {
        return Err(Error::Shape(format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape())));
    }
    if sigma.data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::frozen(&store);
    let m = g.input(mu.clone());
    let s = g.input(sigma.clone());
    let kl = kl_term_vars(&mut g, m, s);
    Ok(g.value(kl).item())
}

/// Reconstruction total plus `beta` times the KL term.
pub fn vae_loss(mol: &Molecule, pred: &VaePrediction, mu: &Tensor, sigma: &Tensor, w: &LossWeights) -> Result<f64> {
    Ok(reconstruction_loss(mol, pred, w)?.total + w.beta * kl_term(mu, sigma)?)
}

/// Graph handles of one full training objective.
#[derive(Clone, Copy, Debug)]
pub struct VaeObjective {
    pub loss: Var,
    pub recon: LossVars,
    pub kl: Var,
}

/// Encode `mol`, sample `z = mu + sigma * eps`, decode, and score against
/// `mol` itself. Callers pass the augmented molecule, so the target is the
/// transformed geometry.
pub fn vae_objective(g: &mut Graph<'_>, model: &Uae, mol: &Molecule, eps: &Tensor, w: &LossWeights) -> VaeObjective {
    let enc = model.encode_vars(g, mol);
    let e = g.input(eps.clone());
    let noise = g.mul(enc.sigma, e);
    let z = g.add(enc.mu, noise);
    let dec = model.decode_vars(g, z);
    let recon = reconstruction_loss_vars(g, mol, &dec, w);
    let kl = kl_term_vars(g, enc.mu, enc.sigma);
    let weighted = g.scale(kl, w.beta);
    let loss = g.add(recon.total, weighted);
    VaeObjective { loss, recon, kl }
}

/// Which parts of a random rigid motion to apply during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    None,
    #[serde(rename = "rot")]
    Rotation,
    #[serde(rename = "trans")]
    Translation,
    #[default]
    Both,
}

impl std::str::FromStr for Augmentation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "rot" => Ok(Self::Rotation),
            "trans" => Ok(Self::Translation),
            "both" => Ok(Self::Both),
            _ => Err(Error::InvalidArgument(format!("unknown augmentation '{s}'"))),
        }
    }
}

/// Draws the transform for `mode`. The random stream consumed is the same
/// for every mode, so switching modes does not shift later draws.
pub fn sample_augmentation<R: Rng + ?Sized>(rng: &mut R, mode: Augmentation, trans_var: f64) -> Se3Transform {
    let mut t = geom::sample_se3(rng, trans_var);
    match mode {
        Augmentation::Both => {}
        Augmentation::Rotation => t.translation = [0.0; 3],
        Augmentation::Translation => t.rotation = Se3Transform::identity().rotation,
        Augmentation::None => t = Se3Transform::identity(),
    }
    t
}

/// Applies `t` to the coordinates; types and bonds are untouched.
pub fn transform_molecule(mol: &Molecule, t: &Se3Transform) -> Molecule {
    mol.with_coords(geom::apply_se3(mol.coords(), t))
        .expect("rigid motions keep coordinates finite")
}

/// Random rotation plus `N(0, trans_var I)` translation.
pub fn augment<R: Rng + ?Sized>(mol: &Molecule, rng: &mut R, trans_var: f64) -> Molecule {
    transform_molecule(mol, &sample_augmentation(rng, Augmentation::Both, trans_var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::generate_toy_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> UaeConfig {
        UaeConfig {
            hidden: 16,
            latent_dim: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ff_mult: 2,
            gbf: GbfConfig::default(),
        }
    }

    fn model(seed: u64) -> (ParamStore, Uae) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Uae::new(small_cfg(), &mut store, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn encoder_shapes_and_positive_sigma() {
        let (store, m) = model(1);
        for mol in generate_toy_dataset(5, 3, 10) {
            let lat = m.encode(&store, &mol);
            let n = mol.n_atoms();
            assert_eq!(lat.z.shape(), (n, 4));
            let sigma = lat.sigma.unwrap();
            assert_eq!(sigma.shape(), (n, 4));
            assert!(sigma.data().iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn decoder_bond_logits_are_exactly_symmetric() {
        let (store, m) = model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = standard_normal(6, 4, &mut rng);
        let p = m.decode(&store, &z).unwrap();
        assert_eq!(p.coords.shape(), (6, 3));
        assert_eq!(p.atom_logits.shape(), (6, N_ATOM_TYPES));
        assert_eq!(p.bond_logits.shape(), (36, N_BOND_TYPES));
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(p.bond_row(i, j), p.bond_row(j, i));
            }
        }
        assert!(m.decode(&store, &Tensor::zeros(3, 5)).is_err());
    }

    fn perfect_prediction(mol: &Molecule) -> VaePrediction {
        let n = mol.n_atoms();
        let mut atom_logits = Tensor::filled(n, N_ATOM_TYPES, -1e4);
        for (i, a) in mol.atoms().iter().enumerate() {
            atom_logits.set(i, a.index(), 0.0);
        }
        let mut bond_logits = Tensor::filled(n * n, N_BOND_TYPES, -1e4);
        for i in 0..n {
            for j in 0..n {
                bond_logits.set(i * n + j, mol.bond(i, j) as usize, 0.0);
            }
        }
        VaePrediction {
            coords: mol.coord_tensor(),
            atom_logits,
            bond_logits,
        }
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let mol = &generate_toy_dataset(1, 9, 8)[0];
        let l = reconstruction_loss(mol, &perfect_prediction(mol), &LossWeights::default()).unwrap();
        assert_eq!([l.total, l.atom, l.bond, l.coordinate, l.distance], [0.0; 5]);
    }

    #[test]
    fn coordinate_only_weighting_returns_coordinate_term() {
        let mol = &generate_toy_dataset(1, 4, 8)[0];
        let mut pred = perfect_prediction(mol);
        pred.coords.data_mut()[0] += 0.3;
        pred.atom_logits.data_mut()[1] = 2.0;
        let w = LossWeights {
            gamma: [0.0, 0.0, 1.0, 0.0],
            ..LossWeights::default()
        };
        let l = reconstruction_loss(mol, &pred, &w).unwrap();
        assert!(l.coordinate > 0.0 && l.atom > 0.0);
        assert_eq!(l.total, l.coordinate);
    }

    #[test]
    fn single_atom_has_no_pair_terms() {
        let mol = Molecule::new(vec![Element::C], vec![0], vec![[0.1, 0.2, 0.3]]).unwrap();
        let mut pred = perfect_prediction(&mol);
        pred.bond_logits.data_mut().fill(3.0);
        let l = reconstruction_loss(&mol, &pred, &LossWeights::default()).unwrap();
        assert_eq!(l.bond, 0.0);
        assert_eq!(l.distance, 0.0);
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_term(&Tensor::zeros(3, 2), &Tensor::filled(3, 2, 1.0)).unwrap(), 0.0);
        assert_eq!(kl_term(&Tensor::scalar(1.0), &Tensor::scalar(1.0)).unwrap(), 0.5);
        assert!(kl_term(&Tensor::scalar(1.0), &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn reparameterize_is_seeded() {
        let mu = Tensor::filled(2, 3, 0.5);
        let sigma = Tensor::filled(2, 3, SIGMA_FLOOR);
        let a = reparameterize(&mu, &sigma, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = reparameterize(&mu, &sigma, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&mu) < 1e-3);
    }

    #[test]
    fn augmentation_moves_only_coordinates() {
        let mol = &generate_toy_dataset(1, 11, 10)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(mol, &mut rng, 0.01);
        assert_eq!(out.atoms(), mol.atoms());
        assert_eq!(out.bond_matrix(), mol.bond_matrix());
        assert_ne!(out.coords(), mol.coords());
        let none = transform_molecule(mol, &sample_augmentation(&mut rng, Augmentation::None, 0.01));
        assert_eq!(none.coords(), mol.coords());
    }

    #[test]
    fn beta_enters_linearly() {
        let (store, m) = model(6);
        let mol = &generate_toy_dataset(1, 2, 8)[0];
        let lat = m.encode(&store, mol);
        let pred = m.decode(&store, &lat.z).unwrap();
        let (mu, sigma) = (lat.mu.unwrap(), lat.sigma.unwrap());
        let w0 = LossWeights { beta: 0.0, ..LossWeights::default() };
        let w1 = LossWeights { beta: 0.3, ..LossWeights::default() };
        let w2 = LossWeights { beta: 0.6, ..LossWeights::default() };
        let recon = reconstruction_loss(mol, &pred, &w0).unwrap().total;
        assert_eq!(vae_loss(mol, &pred, &mu, &sigma, &w0).unwrap(), recon);
        let kl = kl_term(&mu, &sigma).unwrap();
        let l1 = vae_loss(mol, &pred, &mu, &sigma, &w1).unwrap();
        let l2 = vae_loss(mol, &pred, &mu, &sigma, &w2).unwrap();
        assert!((l2 - l1 - 0.3 * kl).abs() < 1e-12 * l2.abs().max(1.0));
    }
}
