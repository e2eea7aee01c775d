mod common;

use uae3d::harness::{
    evaluate, generate, log_csv, reconstruct_eval, train_ldm, train_vae, Checkpoint, ConditionMode, Reconstructor,
    SampleOptions, Stage, TrainConfig, FORMAT_VERSION, MAGIC,
};
use uae3d::molio::{generate_toy_dataset, Molecule};
use uae3d::uae::Augmentation;

fn data() -> Vec<Molecule> {
    generate_toy_dataset(12, 71, 8)
}

fn ldm_config() -> TrainConfig {
    TrainConfig {
        stage: Stage::Ldm,
        ..common::tiny_config()
    }
}

fn strip_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let out = train_vae(&common::tiny_config(), &data()).unwrap();
    let ckpt = out.checkpoint;
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.latent_stats, ckpt.latent_stats);
    assert_eq!(back.resume.epochs_done, 2);
    assert_eq!(back.resume.steps_done, 6);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), bytes);

    assert_eq!(&bytes[..5], MAGIC);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    bad[5..9].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(ckpt.expect_stage(Stage::Ldm).is_err());
    assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn training_and_sampling_are_deterministic() {
    let d = data();
    let a = train_vae(&common::tiny_config(), &d).unwrap();
    let b = train_vae(&common::tiny_config(), &d).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(strip_wall(&log_csv(&a.log)), strip_wall(&log_csv(&b.log)));

    let la = train_ldm(&ldm_config(), &d, &a.checkpoint).unwrap();
    let lb = train_ldm(&ldm_config(), &d, &b.checkpoint).unwrap();
    assert_eq!(la.checkpoint.to_bytes().unwrap(), lb.checkpoint.to_bytes().unwrap());

    let opts = SampleOptions {
        n_samples: 6,
        seed: 3,
        ..Default::default()
    };
    let ea = evaluate(&a.checkpoint, &la.checkpoint, &d, &opts, Default::default()).unwrap();
    let eb = evaluate(&b.checkpoint, &lb.checkpoint, &d, &opts, Default::default()).unwrap();
    assert_eq!(ea.samples, eb.samples);
    assert_eq!(serde_json::to_string(&ea.report).unwrap(), serde_json::to_string(&eb.report).unwrap());
    assert_eq!(serde_json::to_string(&ea.manifest).unwrap(), serde_json::to_string(&eb.manifest).unwrap());

    // Each sample depends only on its own index, not on the batch size.
    let (fewer, _) = generate(&a.checkpoint, &la.checkpoint, &SampleOptions { n_samples: 3, ..opts.clone() }).unwrap();
    assert_eq!(fewer[..], ea.samples[..3]);
}

#[test]
fn latent_training_leaves_the_autoencoder_untouched() {
    let d = data();
    let vae = train_vae(&common::tiny_config(), &d).unwrap().checkpoint;
    let before = vae.to_bytes().unwrap();
    let ldm = train_ldm(&ldm_config(), &d, &vae).unwrap().checkpoint;
    assert_eq!(vae.to_bytes().unwrap(), before);
    assert_eq!(ldm.vae_digest.as_deref(), Some(vae.digest().unwrap().as_str()));
    assert!(ldm.params.iter().all(|(p, _)| p.starts_with("udm.")));
    assert!(vae.params.iter().all(|(p, _)| p.starts_with("uae.")));

    // Sampling refuses an autoencoder the denoiser was not trained on.
    let other = train_vae(&TrainConfig { seed: 9, ..common::tiny_config() }, &d).unwrap().checkpoint;
    assert!(generate(&other, &ldm, &SampleOptions::default()).is_err());
}

#[test]
fn full_condition_dropout_matches_unconditional_training() {
    let d = data();
    let vae = train_vae(&common::tiny_config(), &d).unwrap().checkpoint;
    let base = TrainConfig {
        cond_dropout: 1.0,
        ..ldm_config()
    };
    let plain = train_ldm(&base, &d, &vae).unwrap().checkpoint;
    let conditioned = train_ldm(
        &TrainConfig {
            condition: ConditionMode::HeavyAtoms,
            ..base
        },
        &d,
        &vae,
    )
    .unwrap()
    .checkpoint;
    let values = |c: &Checkpoint| c.params.iter().map(|(p, t)| (p.to_string(), t.clone())).collect::<Vec<_>>();
    assert_eq!(values(&plain), values(&conditioned));
}

#[test]
fn evaluation_rejects_empty_requests() {
    let d = data();
    let vae = train_vae(&common::tiny_config(), &d).unwrap().checkpoint;
    let ldm = train_ldm(&ldm_config(), &d, &vae).unwrap().checkpoint;
    let none = SampleOptions {
        n_samples: 0,
        ..Default::default()
    };
    assert!(evaluate(&vae, &ldm, &d, &none, Default::default()).is_err());
    assert!(evaluate(&vae, &ldm, &[], &SampleOptions::default(), Default::default()).is_err());
    assert!(generate(&ldm, &ldm, &SampleOptions::default()).is_err());
}

struct Perfect;

impl Reconstructor for Perfect {
    fn reconstruct(&self, mol: &Molecule) -> uae3d::Result<Molecule> {
        Ok(mol.clone())
    }
}

#[test]
fn perfect_reconstructor_scores_exactly() {
    let r = reconstruct_eval(&Perfect, &data()).unwrap();
    assert_eq!((r.atom_acc, r.bond_acc, r.coord_rmsd), (1.0, 1.0, 0.0));
    assert!(reconstruct_eval(&Perfect, &[]).is_err());
}

#[test]
fn every_augmentation_mode_trains() {
    let d = data();
    for aug in [Augmentation::None, Augmentation::Rotation, Augmentation::Translation, Augmentation::Both] {
        let cfg = TrainConfig {
            epochs: 1,
            augmentation: aug,
            ..common::tiny_config()
        };
        let out = train_vae(&cfg, &d).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].get("loss").unwrap().is_finite());
        assert_eq!(out.checkpoint.config.augmentation, aug);
    }
}
