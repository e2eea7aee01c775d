use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{geometry_report, Bandwidths, MetricsReport, ValencyTable};
use crate::molio::Molecule;
use crate::autograd::ParamStore;
use crate::uae::Uae;
use crate::udm::{make_schedule, sample_atom_count, Condition, Generator, Property, ScheduleKind};

use super::checkpoint::Checkpoint;
use super::config::ConditionMode;
use super::train::{load_dit, load_vae};
use super::{stream_rng, stream_seed, tag};

/// Sampling knobs for [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Guidance weight `w`.
    pub guidance: f64,
    /// Reverse steps actually taken; `None` walks the full training grid.
    pub sampling_steps: Option<usize>,
    /// Fixed normalized heavy-atom target. `None` draws a target from the
    /// training molecules of the sampled size.
    pub condition_value: Option<f64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            n_samples: 256,
            seed: 0,
            guidance: 0.0,
            sampling_steps: None,
            condition_value: None,
        }
    }
}

/// Provenance of one generated molecule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    /// Seed of this molecule's own stream.
    pub seed: u64,
    pub run_seed: u64,
    pub diffusion_steps: usize,
    pub sampling_steps: usize,
    pub guidance: f64,
    pub schedule: ScheduleKind,
    pub condition: Condition,
    pub n_atoms: usize,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub samples: Vec<Molecule>,
    pub manifest: Vec<ManifestEntry>,
    pub report: MetricsReport,
}

/// Draws molecules from a trained pair of checkpoints.
pub fn generate(vae_ckpt: &Checkpoint, ldm_ckpt: &Checkpoint, opts: &SampleOptions) -> Result<(Vec<Molecule>, Vec<ManifestEntry>)> {
    if opts.n_samples == 0 {
        return Err(Error::Empty("sample request"));
    }
    if let Some(expected) = &ldm_ckpt.vae_digest {
        if *expected != vae_ckpt.digest()? {
            return Err(Error::Checkpoint("denoiser was trained on a different autoencoder checkpoint".into()));
        }
    }
    let (vae, vae_store) = load_vae(vae_ckpt)?;
    let (dit, dit_store) = load_dit(ldm_ckpt)?;
    let stats = ldm_ckpt
        .latent_stats
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("denoiser checkpoint has no latent statistics".into()))?;
    let cfg = &ldm_ckpt.config;
    let full = make_schedule(cfg.diffusion_steps, cfg.schedule)?;
    let schedule = match opts.sampling_steps {
        Some(n) => full.strided(n)?,
        None => full,
    };
    let gen = Generator {
        dit: &dit,
        dit_store: &dit_store,
        vae: &vae,
        vae_store: &vae_store,
        stats,
    };
    let ds = &ldm_ckpt.dataset;
    let scale = ds.max_heavy_atoms.max(1) as f64;
    let mut samples = Vec::with_capacity(opts.n_samples);
    let mut manifest = Vec::with_capacity(opts.n_samples);
    for index in 0..opts.n_samples {
        let parts = [tag::GENERATE, index as u64];
        let mut rng = stream_rng(opts.seed, &parts);
        let n_atoms = sample_atom_count(&ds.atom_histogram, &mut rng)?;
        let condition = match (cfg.condition, opts.condition_value) {
            (ConditionMode::None, _) => Condition::None,
            (ConditionMode::HeavyAtoms, Some(value)) => Condition::ScalarProperty {
                property: Property::HeavyAtoms,
                value,
            },
            (ConditionMode::HeavyAtoms, None) => {
                let same: Vec<usize> = ds.sizes.iter().filter(|s| s.0 == n_atoms).map(|s| s.1).collect();
                let heavy = same[rng.gen_range(0..same.len())];
                Condition::ScalarProperty {
                    property: Property::HeavyAtoms,
                    value: heavy as f64 / scale,
                }
            }
        };
        condition.validate()?;
        samples.push(gen.sample(n_atoms, &schedule, opts.guidance, &condition, &mut rng)?);
        manifest.push(ManifestEntry {
            index,
            seed: stream_seed(opts.seed, &parts),
            run_seed: opts.seed,
            diffusion_steps: cfg.diffusion_steps,
            sampling_steps: schedule.steps(),
            guidance: opts.guidance,
            schedule: cfg.schedule,
            condition,
            n_atoms,
        });
    }
    Ok((samples, manifest))
}

/// Samples and scores against `reference`; novelty is judged against the
/// training graphs recorded in the denoiser checkpoint.
pub fn evaluate(
    vae_ckpt: &Checkpoint,
    ldm_ckpt: &Checkpoint,
    reference: &[Molecule],
    opts: &SampleOptions,
    bandwidths: Bandwidths,
) -> Result<Evaluation> {
    if reference.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let (samples, manifest) = generate(vae_ckpt, ldm_ckpt, opts)?;
    let keys: HashSet<String> = ldm_ckpt.dataset.train_keys.iter().cloned().collect();
    let report = geometry_report(&samples, reference, &keys, &ValencyTable::default(), bandwidths)?;
    Ok(Evaluation {
        samples,
        manifest,
        report,
    })
}

/// Anything that maps a molecule to its reconstruction.
pub trait Reconstructor {
    fn reconstruct(&self, mol: &Molecule) -> Result<Molecule>;
}

/// Deterministic autoencoder pass with `z = mu`.
pub struct VaeReconstructor {
    pub model: Uae,
    pub store: ParamStore,
}

impl VaeReconstructor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, store) = load_vae(ckpt)?;
        Ok(Self { model, store })
    }
}

impl Reconstructor for VaeReconstructor {
    fn reconstruct(&self, mol: &Molecule) -> Result<Molecule> {
        self.model.reconstruct(&self.store, mol)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconEval {
    /// Fraction of atoms whose element is recovered.
    pub atom_acc: f64,
    /// Fraction of unordered atom pairs whose bond class (including "none")
    /// is recovered.
    pub bond_acc: f64,
    /// Mean over molecules of the per-molecule RMSD, without superposition.
    pub coord_rmsd: f64,
}

pub fn reconstruct_eval(model: &impl Reconstructor, split: &[Molecule]) -> Result<ReconEval> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let (mut atoms_ok, mut atoms) = (0usize, 0usize);
    let (mut pairs_ok, mut pairs) = (0usize, 0usize);
    let mut rmsd_sum = 0.0;
    for mol in split {
        let rec = model.reconstruct(mol)?;
        let n = mol.n_atoms();
        if rec.n_atoms() != n {
            return Err(Error::Shape(format!("reconstruction has {} atoms, input {n}", rec.n_atoms())));
        }
        atoms += n;
        atoms_ok += mol.atoms().iter().zip(rec.atoms()).filter(|(a, b)| a == b).count();
        for i in 0..n {
            for j in i + 1..n {
                pairs += 1;
                pairs_ok += usize::from(mol.bond(i, j) == rec.bond(i, j));
            }
        }
        let sq: f64 = mol
            .coords()
            .iter()
            .zip(rec.coords())
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
            .sum();
        rmsd_sum += (sq / n as f64).sqrt();
    }
    Ok(ReconEval {
        atom_acc: atoms_ok as f64 / atoms as f64,
        // Single-atom splits have no pairs to get wrong.
        bond_acc: if pairs == 0 { 1.0 } else { pairs_ok as f64 / pairs as f64 },
        coord_rmsd: rmsd_sum / split.len() as f64,
    })
}
