//! Latent diffusion over the per-atom latent sequence: noise schedules,
//! the forward process, a diffusion transformer conditioned through
//! adaptive layer norm, classifier-free guidance and ancestral sampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::molio::Molecule;
use crate::netblocks::{ada_layernorm, timestep_embed, Dense, DitBlock, Mlp};
use crate::tensor::Tensor;
use crate::uae::{standard_normal, Uae};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::InvalidArgument(format!("unknown schedule '{s}'"))),
        }
    }
}

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Rate bounds of the variance-preserving linear schedule.
pub const LINEAR_BETA_MIN: f64 = 0.1;
pub const LINEAR_BETA_MAX: f64 = 20.0;
/// Largest admissible `alpha_bar` at the last step.
pub const TERMINAL_ALPHA_BAR: f64 = 1e-4;

/// Unnormalized cosine-schedule value at time `t`.
fn cosine_raw(t: f64) -> f64 {
    let c = ((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
    c * c
}

/// `alpha_bar(t)` of the cosine schedule, straight from the formula.
pub fn cosine_alpha_bar(t: f64) -> f64 {
    cosine_raw(t) / cosine_raw(0.0)
}

/// `alpha_bar(t) = exp(-(b0 t + (b1 - b0) t^2 / 2))`.
pub fn linear_alpha_bar(t: f64) -> f64 {
    (-(LINEAR_BETA_MIN * t + 0.5 * (LINEAR_BETA_MAX - LINEAR_BETA_MIN) * t * t)).exp()
}

/// Discrete grid of `alpha_bar` values with the per-step quantities the
/// reverse process needs. Index 0 is clean data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub alpha_bar: Vec<f64>,
    /// `alpha_k = alpha_bar_k / alpha_bar_{k-1}`; entry 0 is 1.
    pub alpha: Vec<f64>,
    /// Posterior variance of step `k`; entry 0 is 0.
    pub posterior_var: Vec<f64>,
    /// Diffusion time of each grid point, fed to the timestep embedding.
    pub times: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds a schedule from explicit values. Requires `alpha_bar[0] = 1`,
    /// strictly decreasing, all in `(0, 1]`, and one time per entry.
    pub fn from_alpha_bar(kind: ScheduleKind, alpha_bar: Vec<f64>, times: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || times.len() != alpha_bar.len() {
            return Err(Error::InvalidArgument("a schedule needs at least one step and one time per entry".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidArgument("alpha_bar must start at exactly 1".into()));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] > 0.0 && w[1] < w[0]) {
                return Err(Error::InvalidArgument(format!("alpha_bar must decrease strictly in (0, 1], got {} after {}", w[1], w[0])));
            }
        }
        let k_max = alpha_bar.len() - 1;
        let mut alpha = vec![1.0; k_max + 1];
        let mut posterior_var = vec![0.0; k_max + 1];
        for k in 1..=k_max {
            alpha[k] = alpha_bar[k] / alpha_bar[k - 1];
            posterior_var[k] = (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]) * (1.0 - alpha[k]);
        }
        Ok(Self {
            kind,
            alpha_bar,
            alpha,
            posterior_var,
            times,
        })
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Sub-schedule on `n` grid points spread uniformly over `1..=K`
    /// (always including `K`), keeping the original times.
    pub fn strided(&self, n: usize) -> Result<Self> {
        let k_max = self.steps();
        if n == 0 || n > k_max {
            return Err(Error::InvalidArgument(format!("cannot take {n} sampling steps from a {k_max}-step schedule")));
        }
        let idx: Vec<usize> = (0..=n).map(|i| (i * k_max + n / 2) / n).collect();
        let idx = {
            let mut v = idx;
            v.dedup();
            v
        };
        Self::from_alpha_bar(
            self.kind,
            idx.iter().map(|&k| self.alpha_bar[k]).collect(),
            idx.iter().map(|&k| self.times[k]).collect(),
        )
    }
}

/// `K`-step schedule on the grid `t_k = k / K`.
///
/// The cosine formula reaches 0 at `t = 1`, which would make the last
/// reverse step divide by `sqrt(alpha_K) ~ 0`. Its endpoint is therefore set
/// to `min(alpha_bar_{K-1}, 1e-4) / 2`; all other points follow the formula.
pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("a schedule needs at least 2 steps, got {steps}")));
    }
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let mut alpha_bar: Vec<f64> = match kind {
        ScheduleKind::Cosine => times.iter().map(|&t| cosine_alpha_bar(t)).collect(),
        ScheduleKind::Linear => times.iter().map(|&t| linear_alpha_bar(t)).collect(),
    };
    alpha_bar[0] = 1.0;
    if kind == ScheduleKind::Cosine {
        alpha_bar[steps] = 0.5 * alpha_bar[steps - 1].min(TERMINAL_ALPHA_BAR);
    }
    let s = DiffusionSchedule::from_alpha_bar(kind, alpha_bar, times)?;
    assert!(s.alpha_bar[steps] <= TERMINAL_ALPHA_BAR, "schedule endpoint must be near pure noise");
    Ok(s)
}

/// `z_k = sqrt(alpha_bar_k) z0 + sqrt(1 - alpha_bar_k) eps`.
pub fn forward_noise(z0: &Tensor, k: usize, eps: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    if k > s.steps() {
        return Err(Error::InvalidArgument(format!("step {k} is outside 0..={}", s.steps())));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("z0 {:?} vs noise {:?}", z0.shape(), eps.shape())));
    }
    let a = s.alpha_bar[k].sqrt();
    let b = (1.0 - s.alpha_bar[k]).sqrt();
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Scalar property a sample may be conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    /// Heavy-atom count divided by the largest molecule size.
    HeavyAtoms,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Condition {
    #[default]
    None,
    ScalarProperty { property: Property, value: f64 },
}

impl Condition {
    pub fn heavy_atoms(mol: &Molecule, max_atoms: usize) -> Self {
        Self::ScalarProperty {
            property: Property::HeavyAtoms,
            value: mol.heavy_atom_count() as f64 / max_atoms.max(1) as f64,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Self::None => None,
            Self::ScalarProperty { value, .. } => Some(*value),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.value() {
            Some(v) if !v.is_finite() => Err(Error::InvalidArgument("condition value must be finite".into())),
            _ => Ok(()),
        }
    }
}

/// Replaces `cond` by the null condition with probability `p`. Exactly one
/// uniform draw is consumed whatever the outcome.
pub fn condition_dropout<R: Rng + ?Sized>(cond: Condition, p: f64, rng: &mut R) -> Condition {
    let u: f64 = rng.gen();
    if u < p {
        Condition::None
    } else {
        cond
    }
}

/// `(1 + w) eps_cond - w eps_uncond`.
pub fn cfg_blend(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", eps_cond.shape(), eps_uncond.shape())));
    }
    if w == 0.0 {
        return Ok(eps_cond.clone());
    }
    Ok(eps_cond.zip_map(eps_uncond, |c, u| (1.0 + w) * c - w * u))
}

/// Mean of the reverse step from `k` given the predicted noise.
pub fn posterior_mean(z_k: &Tensor, eps_hat: &Tensor, k: usize, s: &DiffusionSchedule) -> Tensor {
    let a = s.alpha[k];
    let coef = (1.0 - a) / (1.0 - s.alpha_bar[k]).sqrt();
    let inv = 1.0 / a.sqrt();
    z_k.zip_map(eps_hat, |z, e| inv * (z - coef * e))
}

/// One ancestral step `z_k -> z_{k-1}`; the step into `k = 0` adds no noise
/// and draws nothing from `rng`.
pub fn ddpm_step<R: Rng + ?Sized>(
    z_k: &Tensor,
    eps_hat: &Tensor,
    k: usize,
    s: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    if k == 0 || k > s.steps() {
        return Err(Error::InvalidArgument(format!("reverse step {k} is outside 1..={}", s.steps())));
    }
    if z_k.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z_k.shape(), eps_hat.shape())));
    }
    let mut mean = posterior_mean(z_k, eps_hat, k, s);
    if k > 1 {
        let std = s.posterior_var[k].sqrt();
        let noise = standard_normal(z_k.rows(), z_k.cols(), rng);
        for (m, e) in mean.data_mut().iter_mut().zip(noise.data()) {
            *m += std * e;
        }
    }
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
    /// Width of the conditioning row that drives adaLN.
    pub cond_width: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 6,
            heads: 4,
            ff_mult: 4,
            time_features: 64,
            cond_width: 128,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.cond_width == 0 || self.ff_mult == 0 {
            return Err(Error::InvalidArgument("denoiser widths must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument("denoiser width must be divisible by the head count".into()));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::InvalidArgument("timestep feature width must be even and positive".into()));
        }
        Ok(())
    }
}

/// Diffusion transformer predicting the noise in a latent sequence.
#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: DitConfig,
    pub latent_dim: usize,
    input: Dense,
    time_mlp: Mlp,
    cond_mlp: Mlp,
    blocks: Vec<DitBlock>,
    final_modulation: Dense,
    output: Dense,
    /// Linear path from the noisy input straight to the output; the final
    /// normalization discards each row's scale, which the noise estimate
    /// needs at high noise levels.
    skip: Dense,
}

impl Dit {
    /// Registers parameters under `udm.*`.
    pub fn new<R: Rng>(cfg: DitConfig, latent_dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, c) = (cfg.hidden, cfg.cond_width);
        let input = Dense::new(store, rng, "udm.input", latent_dim, d);
        let time_mlp = Mlp::new(store, rng, "udm.time_embed", &[cfg.time_features, c, c]);
        let cond_mlp = Mlp::new(store, rng, "udm.cond_embed", &[1, c, c]);
        let blocks = (0..cfg.layers)
            .map(|l| DitBlock::new(store, rng, &format!("udm.block{l}"), d, c, cfg.heads, cfg.ff_mult))
            .collect();
        let final_modulation = Dense::with_gain(store, rng, "udm.final.ada", c, 2 * d, 0.1);
        for v in &mut store.get_mut(final_modulation.bias).data_mut()[d..] {
            *v = 1.0;
        }
        let output = Dense::new(store, rng, "udm.final.out", d, latent_dim);
        let skip = Dense::new(store, rng, "udm.skip", latent_dim, latent_dim);
        Ok(Self {
            cfg,
            latent_dim,
            input,
            time_mlp,
            cond_mlp,
            blocks,
            final_modulation,
            output,
            skip,
        })
    }

    /// Conditioning row `SiLU(MLP_t(Embed(t)) + MLP_c(c))`; the condition
    /// term is absent for the null condition.
    fn conditioning(&self, g: &mut Graph<'_>, t: f64, cond: &Condition) -> Var {
        let te = timestep_embed(t, self.cfg.time_features).expect("validated even width");
        let te = g.input(Tensor::row_vector(&te));
        let mut row = self.time_mlp.forward(g, te);
        if let Some(v) = cond.value() {
            let cv = g.input(Tensor::scalar(v));
            let ce = self.cond_mlp.forward(g, cv);
            row = g.add(row, ce);
        }
        g.silu(row)
    }

    /// Noise prediction on the graph for latents `z` at diffusion time `t`.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, t: f64, cond: &Condition) -> Var {
        let d = self.cfg.hidden;
        let c = self.conditioning(g, t, cond);
        let mut h = self.input.forward(g, z);
        for block in &self.blocks {
            h = block.forward(g, h, c);
        }
        let m = self.final_modulation.forward(g, c);
        let shift = g.slice_cols(m, 0, d);
        let scale = g.slice_cols(m, d, 2 * d);
        let h = ada_layernorm(g, h, shift, scale);
        let out = self.output.forward(g, h);
        let direct = self.skip.forward(g, z);
        g.add(out, direct)
    }

    /// Checked evaluation of the denoiser at grid point `k` of `s`.
    pub fn denoise(
        &self,
        store: &ParamStore,
        z_k: &Tensor,
        k: usize,
        s: &DiffusionSchedule,
        cond: &Condition,
    ) -> Result<Tensor> {
        if z_k.cols() != self.latent_dim || z_k.rows() == 0 {
            return Err(Error::Shape(format!(
                "denoiser expects n x {} latents, got {:?}",
                self.latent_dim,
                z_k.shape()
            )));
        }
        if k > s.steps() {
            return Err(Error::InvalidArgument(format!("step {k} is outside 0..={}", s.steps())));
        }
        if !z_k.is_finite() {
            return Err(Error::InvalidArgument("latents must be finite".into()));
        }
        cond.validate()?;
        let mut g = Graph::frozen(store);
        let z = g.input(z_k.clone());
        let out = self.forward(&mut g, z, s.times[k], cond);
        Ok(g.value(out).clone())
    }
}

/// Per-dimension statistics used to standardize latents for diffusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Pools all rows of all sequences; a zero spread maps to 1.
    pub fn from_latents<'a>(latents: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for z in latents {
            if sum.is_empty() {
                sum = vec![0.0; z.cols()];
                sq = vec![0.0; z.cols()];
            }
            for r in 0..z.rows() {
                for (c, v) in z.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += z.rows();
        }
        if count == 0 {
            return Err(Error::Empty("latent set"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let v = (q / n - m * m).max(0.0).sqrt();
                if v > 1e-12 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, z: &Tensor) -> Tensor {
        let mut out = z.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn destandardize(&self, z: &Tensor) -> Tensor {
        let mut out = z.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

/// Draws an atom count with probability proportional to `histogram[n]`.
pub fn sample_atom_count<R: Rng + ?Sized>(histogram: &[u64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(histogram).map_err(|_| Error::Empty("atom-count histogram"))?;
    Ok(dist.sample(rng))
}

/// Everything needed to turn noise into molecules.
#[derive(Clone, Copy, Debug)]
pub struct Generator<'a> {
    pub dit: &'a Dit,
    pub dit_store: &'a ParamStore,
    pub vae: &'a Uae,
    pub vae_store: &'a ParamStore,
    pub stats: &'a LatentStats,
}

impl Generator<'_> {
    /// Guided noise estimate at grid point `k`.
    pub fn guided_noise(&self, z: &Tensor, k: usize, s: &DiffusionSchedule, w: f64, cond: &Condition) -> Result<Tensor> {
        let eps_c = self.dit.denoise(self.dit_store, z, k, s, cond)?;
        if w == 0.0 || *cond == Condition::None {
            return Ok(eps_c);
        }
        let eps_u = self.dit.denoise(self.dit_store, z, k, s, &Condition::None)?;
        cfg_blend(&eps_c, &eps_u, w)
    }

    /// Reverse chain from `N(0, I)` down to standardized clean latents.
    pub fn sample_latents<R: Rng + ?Sized>(
        &self,
        n_atoms: usize,
        s: &DiffusionSchedule,
        w: f64,
        cond: &Condition,
        rng: &mut R,
    ) -> Result<Tensor> {
        if n_atoms == 0 {
            return Err(Error::InvalidArgument("cannot sample a molecule with no atoms".into()));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidArgument(format!("guidance weight must be >= 0, got {w}")));
        }
        let mut z = standard_normal(n_atoms, self.dit.latent_dim, rng);
        for k in (1..=s.steps()).rev() {
            let eps = self.guided_noise(&z, k, s, w, cond)?;
            z = ddpm_step(&z, &eps, k, s, rng)?;
        }
        Ok(z)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        n_atoms: usize,
        s: &DiffusionSchedule,
        w: f64,
        cond: &Condition,
        rng: &mut R,
    ) -> Result<Molecule> {
        let z = self.sample_latents(n_atoms, s, w, cond, rng)?;
        let pred = self.vae.decode(self.vae_store, &self.stats.destandardize(&z))?;
        Ok(pred.to_molecule())
    }
}
