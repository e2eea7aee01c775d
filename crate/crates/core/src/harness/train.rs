use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Grads, ParamStore};
use crate::error::{Error, Result};
use crate::molio::{canonical_key, Molecule};
use crate::uae::{
    reparameterize, sample_augmentation, standard_normal, transform_molecule, vae_objective, Uae,
};
use crate::udm::{condition_dropout, forward_noise, make_schedule, Condition, Dit, LatentStats};

use super::checkpoint::{Checkpoint, DatasetSummary, ResumeState};
use super::config::{ConditionMode, Stage, TrainConfig};
use super::optim::Adam;
use super::{stream_rng, tag};

/// Per-epoch means of the logged quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub values: Vec<(&'static str, f64)>,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// CSV with one row per epoch; wall time is the last column.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,steps");
    if let Some(first) = log.first() {
        for (n, _) in &first.values {
            write!(out, ",{n}").expect("writing to a String");
        }
    }
    out.push_str(",wall_seconds\n");
    for e in log {
        write!(out, "{},{}", e.epoch, e.steps).expect("writing to a String");
        for (_, v) in &e.values {
            write!(out, ",{v}").expect("writing to a String");
        }
        writeln!(out, ",{:.3}", e.wall_seconds).expect("writing to a String");
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub fn summarize_dataset(data: &[Molecule]) -> DatasetSummary {
    let max_n = data.iter().map(Molecule::n_atoms).max().unwrap_or(0);
    let mut atom_histogram = vec![0u64; max_n + 1];
    let mut sizes = Vec::with_capacity(data.len());
    for m in data {
        atom_histogram[m.n_atoms()] += 1;
        sizes.push((m.n_atoms(), m.heavy_atom_count()));
    }
    sizes.sort_unstable();
    let keys: BTreeSet<String> = data.iter().map(canonical_key).collect();
    DatasetSummary {
        atom_histogram,
        max_heavy_atoms: sizes.iter().map(|s| s.1).max().unwrap_or(0),
        sizes,
        train_keys: keys.into_iter().collect(),
    }
}

/// Shared mini-batch loop. `sample_step` adds one sample's gradient to the
/// buffer and returns its logged values, the loss first.
fn optimize<F>(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    n_items: usize,
    names: &[&'static str],
    on_epoch: &mut dyn FnMut(&EpochLog),
    mut sample_step: F,
) -> Result<(Vec<EpochLog>, ResumeState)>
where
    F: FnMut(&ParamStore, usize, &mut ChaCha8Rng, &mut Grads) -> Vec<f64>,
{
    let stage = cfg.stage as u64;
    let mut opt = Adam::new(store, cfg.learning_rate);
    let mut log = Vec::new();
    let mut steps = 0usize;
    let start = Instant::now();
    let mut epochs_done = 0;
    let per_epoch = n_items.div_ceil(cfg.batch_size);
    let planned = cfg.max_steps.map_or(cfg.epochs * per_epoch, |m| m.min(cfg.epochs * per_epoch));
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &[tag::ORDER, stage, epoch as u64]));
        let mut sums = vec![0.0; names.len()];
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let mut grads = Grads::zeros_like(store);
            for &i in chunk {
                let mut rng = stream_rng(cfg.seed, &[tag::SAMPLE, stage, epoch as u64, i as u64]);
                let values = sample_step(store, i, &mut rng, &mut grads);
                if !values[0].is_finite() {
                    return Err(Error::Diverged { step: steps, loss: values[0] });
                }
                for (s, v) in sums.iter_mut().zip(&values) {
                    *s += v;
                }
                seen += 1;
            }
            grads.scale(1.0 / chunk.len() as f64);
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            opt.lr = cfg.lr_decay.rate(cfg.learning_rate, steps, planned);
            opt.update(store, &grads);
            if !store.all_finite() {
                return Err(Error::Diverged { step: steps, loss: f64::NAN });
            }
            steps += 1;
        }
        epochs_done = epoch + 1;
        log.push(EpochLog {
            epoch,
            steps,
            values: names.iter().zip(&sums).map(|(n, s)| (*n, s / seen.max(1) as f64)).collect(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        on_epoch(log.last().expect("just pushed"));
    }
    // An epoch cut short by the step budget is still logged.
    if epochs_done < cfg.epochs && log.len() == epochs_done && steps > 0 {
        epochs_done += 1;
    }
    Ok((
        log,
        ResumeState {
            seed: cfg.seed,
            epochs_done,
            steps_done: steps,
        },
    ))
}

fn check_dataset(data: &[Molecule]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    Ok(())
}

/// Stage 1: autoencoder training with augmentation and reparameterized
/// latents. Latent statistics are computed afterwards from the posterior
/// means of the (unaugmented) training set.
pub fn train_vae(cfg: &TrainConfig, data: &[Molecule]) -> Result<TrainOutcome> {
    train_vae_with(cfg, data, &mut |_| {})
}

/// As [`train_vae`], calling `on_epoch` after every epoch.
pub fn train_vae_with(cfg: &TrainConfig, data: &[Molecule], on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Vae {
        return Err(Error::InvalidArgument("train_vae needs a vae-stage config".into()));
    }
    cfg.validate()?;
    check_dataset(data)?;
    let mut store = ParamStore::new();
    let model = Uae::new(cfg.model.clone(), &mut store, &mut stream_rng(cfg.seed, &[tag::VAE_INIT]))?;
    store.quantize_f32();
    let dz = cfg.model.latent_dim;
    let names = ["loss", "atom", "bond", "coordinate", "distance", "kl"];
    let (log, resume) = optimize(cfg, &mut store, data.len(), &names, on_epoch, |store, i, rng, grads| {
        let t = sample_augmentation(rng, cfg.augmentation, cfg.trans_var);
        let mol = transform_molecule(&data[i], &t);
        let eps = standard_normal(mol.n_atoms(), dz, rng);
        let mut g = Graph::new(store);
        let o = vae_objective(&mut g, &model, &mol, &eps, &cfg.loss);
        let loss = g.value(o.loss).item();
        if loss.is_finite() {
            g.backward(o.loss).accumulate_params(&g, grads);
        }
        let r = o.recon.values(&g);
        vec![loss, r.atom, r.bond, r.coordinate, r.distance, g.value(o.kl).item()]
    })?;
    let means: Vec<_> = data.iter().map(|m| model.encode(&store, m).z).collect();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Vae,
            config: cfg.clone(),
            latent_stats: Some(LatentStats::from_latents(&means)?),
            params: store,
            dataset: summarize_dataset(data),
            resume,
            vae_digest: None,
        },
        log,
    })
}

/// Rebuilds the autoencoder from a stage-1 checkpoint.
pub fn load_vae(ckpt: &Checkpoint) -> Result<(Uae, ParamStore)> {
    ckpt.expect_stage(Stage::Vae)?;
    let mut store = ParamStore::new();
    let model = Uae::new(ckpt.config.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.restore_into(&mut store)?;
    Ok((model, store))
}

/// Rebuilds the denoiser from a stage-2 checkpoint.
pub fn load_dit(ckpt: &Checkpoint) -> Result<(Dit, ParamStore)> {
    ckpt.expect_stage(Stage::Ldm)?;
    let mut store = ParamStore::new();
    let model = Dit::new(
        ckpt.config.denoiser.clone(),
        ckpt.config.model.latent_dim,
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    ckpt.restore_into(&mut store)?;
    Ok((model, store))
}

/// Stage 2: noise-prediction training on standardized latents of the frozen
/// encoder. Each sample draws its own step, noise and condition dropout.
pub fn train_ldm(cfg: &TrainConfig, data: &[Molecule], vae_ckpt: &Checkpoint) -> Result<TrainOutcome> {
    train_ldm_with(cfg, data, vae_ckpt, &mut |_| {})
}

/// As [`train_ldm`], calling `on_epoch` after every epoch.
pub fn train_ldm_with(
    cfg: &TrainConfig,
    data: &[Molecule],
    vae_ckpt: &Checkpoint,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Ldm {
        return Err(Error::InvalidArgument("train_ldm needs an ldm-stage config".into()));
    }
    cfg.validate()?;
    check_dataset(data)?;
    let (vae, vae_store) = load_vae(vae_ckpt)?;
    let stats = vae_ckpt
        .latent_stats
        .clone()
        .ok_or_else(|| Error::Checkpoint("autoencoder checkpoint has no latent statistics".into()))?;
    // The denoiser must match the latent width the encoder produces.
    let mut cfg = cfg.clone();
    cfg.model = vae_ckpt.config.model.clone();
    let cfg = &cfg;
    let schedule = make_schedule(cfg.diffusion_steps, cfg.schedule)?;
    let summary = summarize_dataset(data);
    let scale = summary.max_heavy_atoms.max(1);
    let mut store = ParamStore::new();
    let dit = Dit::new(
        cfg.denoiser.clone(),
        cfg.model.latent_dim,
        &mut store,
        &mut stream_rng(cfg.seed, &[tag::DIT_INIT]),
    )?;
    store.quantize_f32();
    let k_max = schedule.steps();
    let (log, resume) = optimize(cfg, &mut store, data.len(), &["loss"], on_epoch, |store, i, rng, grads| {
        let t = sample_augmentation(rng, cfg.augmentation, cfg.trans_var);
        let mol = transform_molecule(&data[i], &t);
        let lat = vae.encode(&vae_store, &mol);
        let (mu, sigma) = (lat.mu.expect("encoder mean"), lat.sigma.expect("encoder spread"));
        let z = reparameterize(&mu, &sigma, rng).expect("matching shapes");
        let z0 = stats.standardize(&z);
        let k = rng.gen_range(1..=k_max);
        let eps = standard_normal(z0.rows(), z0.cols(), rng);
        let zk = forward_noise(&z0, k, &eps, &schedule).expect("valid step");
        let cond = match cfg.condition {
            ConditionMode::None => Condition::None,
            ConditionMode::HeavyAtoms => Condition::heavy_atoms(&mol, scale),
        };
        let cond = condition_dropout(cond, cfg.cond_dropout, rng);
        let mut g = Graph::new(store);
        let zv = g.input(zk);
        let pred = dit.forward(&mut g, zv, schedule.times[k], &cond);
        let target = g.input(eps);
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let value = g.value(loss).item();
        if value.is_finite() {
            g.backward(loss).accumulate_params(&g, grads);
        }
        vec![value]
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Ldm,
            config: cfg.clone(),
            params: store,
            latent_stats: Some(stats),
            dataset: summary,
            resume,
            vae_digest: Some(vae_ckpt.digest()?),
        },
        log,
    })
}
