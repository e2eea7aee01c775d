//! `uae3d` command-line driver.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when the command itself
//! fails.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use uae3d::harness::{
    evaluate, generate, log_csv, reconstruct_eval, train_ldm_with, train_vae_with, Checkpoint, ConditionMode, EpochLog,
    SampleOptions, Stage, TrainConfig, VaeReconstructor,
};
use uae3d::metrics::{geometry_csv, geometry_report, Bandwidths, GeometryPool, ValencyTable};
use uae3d::molio::{canonical_key, generate_toy_dataset, parse_jsonl, parse_sdf_v2000, parse_xyz, write_jsonl, Molecule};
use uae3d::uae::Augmentation;
use uae3d::udm::ScheduleKind;

#[derive(Debug, Parser)]
#[command(name = "uae3d", version, about = "Train and sample a 3D molecule autoencoder with latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic toy dataset as JSON lines.
    GenData(GenDataArgs),
    /// Convert XYZ or SDF (V2000) files into JSON lines.
    Import(ImportArgs),
    /// Train the autoencoder.
    TrainVae(TrainVaeArgs),
    /// Train the latent denoiser on a frozen autoencoder.
    TrainLdm(TrainLdmArgs),
    /// Draw molecules from trained checkpoints.
    Sample(SampleArgs),
    /// Sample and score against a reference set.
    Eval(EvalArgs),
    /// Measure autoencoder reconstruction accuracy on a split.
    Reconstruct(ReconstructArgs),
    /// Score an existing set of molecules against a reference set.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    max_atoms: usize,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ImportArgs {
    /// `.xyz` or `.sdf`/`.mol` files; SDF files may hold several records.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides applied on top of the desk defaults or `--config`.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON file with `TrainConfig` fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainVaeArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Training molecules (JSON lines).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    gamma_d: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    aug: Option<Augmentation>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainLdmArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vae_ckpt: PathBuf,
    #[arg(long)]
    aug: Option<Augmentation>,
    /// Diffusion steps K.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    /// Default guidance weight stored with the checkpoint.
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    cond: Option<ConditionMode>,
    #[arg(long)]
    cond_dropout: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    vae_ckpt: PathBuf,
    #[arg(long)]
    ldm_ckpt: PathBuf,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Guidance weight; defaults to the one stored in the checkpoint.
    #[arg(long)]
    w: Option<f64>,
    /// Reverse steps to take, evenly strided over the training grid.
    #[arg(long)]
    sampling_steps: Option<usize>,
    /// Fixed normalized heavy-atom target for conditioned models.
    #[arg(long)]
    cond_value: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    sample: SampleArgs,
    /// Reference molecules (JSON lines).
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    vae_ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Molecules to score (JSON lines).
    #[arg(long)]
    samples: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Training molecules for novelty; without it every valid unique
    /// molecule counts as novel.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            if let Some(help) = subcommand_help(&argv) {
                eprintln!("\n{help}");
            }
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn subcommand_help(argv: &[OsString]) -> Option<String> {
    let name = argv.get(1)?.to_str()?;
    let mut cmd = Cli::command();
    let sub = cmd.find_subcommand_mut(name)?;
    Some(sub.render_help().to_string())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Import(a) => import(a),
        Command::TrainVae(a) => train_vae_cmd(a),
        Command::TrainLdm(a) => train_ldm_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn read_molecules(path: &Path) -> Result<Vec<Molecule>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_jsonl(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(dir: &Path) -> Result<&Path> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be positive");
    }
    let mols = generate_toy_dataset(a.n, a.seed, a.max_atoms);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    fs::write(&a.out, write_jsonl(&mols)).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} molecules to {}", mols.len(), a.out.display());
    Ok(())
}

fn import(a: ImportArgs) -> Result<()> {
    let mut mols = Vec::new();
    for path in &a.inputs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "xyz" => mols.push(parse_xyz(&text).with_context(|| format!("parsing {}", path.display()))?),
            "sdf" | "mol" => {
                for (i, record) in text.split("$$$$").enumerate() {
                    if record.trim().is_empty() {
                        continue;
                    }
                    let record = record.strip_prefix('\n').unwrap_or(record);
                    let mol = parse_sdf_v2000(record)
                        .with_context(|| format!("parsing record {} of {}", i + 1, path.display()))?;
                    mols.push(mol);
                }
            }
            _ => bail!("{}: expected an .xyz, .sdf or .mol file", path.display()),
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    fs::write(&a.out, write_jsonl(&mols)).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("imported {} molecules", mols.len());
    Ok(())
}

fn base_config(c: &ConfigArgs, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None if stage == Stage::Ldm => TrainConfig::desk_ldm(),
        None => TrainConfig::desk(),
    };
    cfg.stage = stage;
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = c.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = c.lr {
        cfg.learning_rate = v;
    }
    if c.max_steps.is_some() {
        cfg.max_steps = c.max_steps;
    }
    Ok(cfg)
}

fn progress(stage: &'static str) -> impl FnMut(&EpochLog) {
    move |e| {
        let loss = e.get("loss").unwrap_or(f64::NAN);
        eprintln!("{stage} epoch {:>3}  steps {:>6}  loss {loss:.5}  {:.1}s", e.epoch + 1, e.steps, e.wall_seconds);
    }
}

fn train_vae_cmd(a: TrainVaeArgs) -> Result<()> {
    let mut cfg = base_config(&a.common, Stage::Vae)?;
    if let Some(v) = a.latent_dim {
        cfg.model.latent_dim = v;
    }
    if let Some(v) = a.gamma_d {
        cfg.loss.gamma_d = v;
    }
    if let Some(v) = a.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = a.aug {
        cfg.augmentation = v;
    }
    cfg.validate()?;
    let data = read_molecules(&a.data)?;
    let dir = out_dir(&a.out)?;
    let outcome = train_vae_with(&cfg, &data, &mut progress("vae"))?;
    outcome.checkpoint.save(&dir.join("vae.ckpt"))?;
    write_file(dir, "vae_log.csv", log_csv(&outcome.log))?;
    write_file(dir, "vae_config.json", serde_json::to_string_pretty(&cfg)?)?;
    Ok(())
}

fn train_ldm_cmd(a: TrainLdmArgs) -> Result<()> {
    let mut cfg = base_config(&a.common, Stage::Ldm)?;
    if let Some(v) = a.aug {
        cfg.augmentation = v;
    }
    if let Some(v) = a.steps {
        cfg.diffusion_steps = v;
    }
    if let Some(v) = a.schedule {
        cfg.schedule = v;
    }
    if let Some(v) = a.w {
        cfg.guidance = v;
    }
    if let Some(v) = a.cond {
        cfg.condition = v;
    }
    if let Some(v) = a.cond_dropout {
        cfg.cond_dropout = v;
    }
    cfg.validate()?;
    let data = read_molecules(&a.data)?;
    let vae = load_checkpoint(&a.vae_ckpt)?;
    let dir = out_dir(&a.out)?;
    let outcome = train_ldm_with(&cfg, &data, &vae, &mut progress("ldm"))?;
    outcome.checkpoint.save(&dir.join("ldm.ckpt"))?;
    write_file(dir, "ldm_log.csv", log_csv(&outcome.log))?;
    write_file(dir, "ldm_config.json", serde_json::to_string_pretty(&outcome.checkpoint.config)?)?;
    Ok(())
}

fn sample_options(a: &SampleArgs, ldm: &Checkpoint) -> SampleOptions {
    SampleOptions {
        n_samples: a.n,
        seed: a.seed,
        guidance: a.w.unwrap_or(ldm.config.guidance),
        sampling_steps: a.sampling_steps,
        condition_value: a.cond_value,
    }
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let vae = load_checkpoint(&a.vae_ckpt)?;
    let ldm = load_checkpoint(&a.ldm_ckpt)?;
    let opts = sample_options(&a, &ldm);
    let (samples, manifest) = generate(&vae, &ldm, &opts)?;
    let dir = out_dir(&a.out)?;
    write_file(dir, "samples.jsonl", write_jsonl(&samples))?;
    write_file(dir, "manifest.json", serde_json::to_string_pretty(&manifest)?)?;
    eprintln!("wrote {} samples", samples.len());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let vae = load_checkpoint(&a.sample.vae_ckpt)?;
    let ldm = load_checkpoint(&a.sample.ldm_ckpt)?;
    let reference = read_molecules(&a.reference)?;
    let opts = sample_options(&a.sample, &ldm);
    let ev = evaluate(&vae, &ldm, &reference, &opts, Bandwidths::default())?;
    let dir = out_dir(&a.sample.out)?;
    write_file(dir, "samples.jsonl", write_jsonl(&ev.samples))?;
    write_file(dir, "manifest.json", serde_json::to_string_pretty(&ev.manifest)?)?;
    write_file(dir, "report.json", serde_json::to_string_pretty(&ev.report)?)?;
    let csv = geometry_csv(&GeometryPool::from_molecules(&ev.samples), &GeometryPool::from_molecules(&reference));
    write_file(dir, "geometry.csv", csv)?;
    println!("{}", serde_json::to_string_pretty(&ev.report)?);
    Ok(())
}

fn reconstruct_cmd(a: ReconstructArgs) -> Result<()> {
    let vae = load_checkpoint(&a.vae_ckpt)?;
    let data = read_molecules(&a.data)?;
    let model = VaeReconstructor::from_checkpoint(&vae)?;
    let result = reconstruct_eval(&model, &data)?;
    let dir = out_dir(&a.out)?;
    write_file(dir, "reconstruction.json", serde_json::to_string_pretty(&result)?)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let samples = read_molecules(&a.samples)?;
    let reference = read_molecules(&a.reference)?;
    let train_keys: HashSet<String> = match &a.train {
        Some(p) => read_molecules(p)?.iter().map(canonical_key).collect(),
        None => HashSet::new(),
    };
    let report = geometry_report(&samples, &reference, &train_keys, &ValencyTable::default(), Bandwidths::default())?;
    let dir = out_dir(&a.out)?;
    write_file(dir, "report.json", serde_json::to_string_pretty(&report)?)?;
    let csv = geometry_csv(&GeometryPool::from_molecules(&samples), &GeometryPool::from_molecules(&reference));
    write_file(dir, "geometry.csv", csv)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
