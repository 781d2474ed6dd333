//! Noise schedules, the denoiser interface, classifier-free guidance, DDIM
//! stepping, and the edit loop that strings them together.
//!
//! Notation: `beta[t]` here is the *cumulative signal coefficient* — the
//! monotone sequence starting at 1 that scales the clean latent when noising
//! to level `t` (`z_t = sqrt(beta_t) z + sqrt(1 - beta_t) eps`). The DDIM
//! update below is written directly in terms of it.

pub mod backends;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::scene::LatentImage;

/// Monotone signal-coefficient sequence plus the editing time window.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
    pub delta_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    ScaledLinear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled_linear" => Ok(ScheduleKind::ScaledLinear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Build a schedule with `T` steps. `beta[0] = 1`, strictly decreasing,
/// `beta[T] > 0`.
pub fn make_schedule(
    num_steps: usize,
    kind: ScheduleKind,
    t_min: f64,
    t_max: f64,
    delta_t: f64,
) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(Error::config("schedule needs at least 2 steps"));
    }
    if !(0.0 < t_min && t_min < t_max && t_max < 1.0) {
        return Err(Error::config(format!(
            "need 0 < t_min < t_max < 1, got [{t_min}, {t_max}]"
        )));
    }
    if !(0.0 < delta_t && delta_t < 1.0) {
        return Err(Error::config(format!("delta_t must be in (0,1), got {delta_t}")));
    }
    let mut beta = Vec::with_capacity(num_steps + 1);
    beta.push(1.0);
    match kind {
        ScheduleKind::ScaledLinear => {
            // Per-step noise rates linear in sqrt-space over the usual
            // latent-diffusion range.
            let (start, end) = (0.00085f64.sqrt(), 0.012f64.sqrt());
            let mut acc = 1.0;
            for i in 0..num_steps {
                let frac = if num_steps == 1 {
                    0.0
                } else {
                    i as f64 / (num_steps - 1) as f64
                };
                let rate = (start + frac * (end - start)).powi(2);
                acc *= 1.0 - rate;
                beta.push(acc);
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                let x = ((t + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let f0 = f(0.0);
            let mut acc = 1.0;
            let mut prev = 1.0;
            for i in 1..=num_steps {
                let cur = f(i as f64 / num_steps as f64) / f0;
                // Clamp the per-step rate so the sequence stays strictly
                // decreasing and positive.
                let alpha = (cur / prev).clamp(1e-3, 1.0 - 1e-9);
                acc *= alpha;
                prev = cur.max(1e-12);
                beta.push(acc);
            }
        }
    }
    Ok(NoiseSchedule {
        beta,
        t_min,
        t_max,
        delta_t,
    })
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.beta.len() - 1
    }

    /// Cumulative signal coefficient at index `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// Nearest schedule index for a continuous time fraction in `[0, 1]`.
    pub fn index_for(&self, t_frac: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&t_frac) {
            return Err(Error::validation(format!(
                "time fraction {t_frac} outside [0, 1]"
            )));
        }
        Ok(((t_frac * self.num_steps() as f64).round() as usize).min(self.num_steps()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta[0] != 1.0 {
            return Err(Error::validation("beta[0] must be 1"));
        }
        if *self.beta.last().unwrap() <= 0.0 {
            return Err(Error::validation("beta[T] must stay positive"));
        }
        for w in self.beta.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::validation("beta must be strictly decreasing"));
            }
        }
        Ok(())
    }
}

/// Classifier-free guidance scales.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidanceConfig {
    pub s_image: f64,
    pub s_text: f64,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.s_image.is_finite() || !self.s_text.is_finite() {
            return Err(Error::validation("guidance scales must be finite"));
        }
        Ok(())
    }
}

/// Noise-prediction backend. Null conditions are expressed as `None`.
///
/// Implementations must be deterministic in their arguments and return maps
/// shaped like the input.
pub trait Denoiser: Send + Sync {
    fn eps(
        &self,
        z_t: &LatentImage,
        t: usize,
        image_cond: Option<&LatentImage>,
        text_cond: Option<&str>,
    ) -> Result<LatentImage>;

    /// Side channel for test oracles that need the noise injected by
    /// [`add_noise`]; production backends ignore it.
    fn note_injected_noise(&self, _eps: &LatentImage) {}
}

/// Draw standard-normal noise shaped like `z` from a bare seed.
pub fn draw_noise(shape: (usize, usize), view_id: usize, seed: u64) -> LatentImage {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_fn((shape.0, shape.1, 4), |_| rng.sample(StandardNormal));
    LatentImage { data, view_id }
}

/// Noise a latent map to time fraction `t_frac`: `z_t = sqrt(beta_t) z +
/// sqrt(1 - beta_t) eps`. Returns both the noisy map and the drawn noise.
///
/// At index 0 (`beta = 1`) the input is returned bit-exactly.
pub fn add_noise(
    z: &LatentImage,
    t_frac: f64,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(LatentImage, LatentImage)> {
    let t = sched.index_for(t_frac)?;
    add_noise_at_index(z, t, sched, seed)
}

/// [`add_noise`] with an explicit schedule index.
pub fn add_noise_at_index(
    z: &LatentImage,
    t: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(LatentImage, LatentImage)> {
    let eps = draw_noise(z.shape2(), z.view_id, seed);
    let beta = sched.beta(t);
    if beta == 1.0 {
        return Ok((z.clone(), eps));
    }
    let sb = beta.sqrt();
    let snb = (1.0 - beta).sqrt();
    let data = ndarray::Zip::from(&z.data)
        .and(&eps.data)
        .map_collect(|&zv, &ev| sb * zv + snb * ev);
    Ok((
        LatentImage {
            data,
            view_id: z.view_id,
        },
        eps,
    ))
}

/// Classifier-free-guided noise prediction: exactly three denoiser calls,
/// combined as `uncond + s_I (image - uncond) + s_T (full - image)`.
pub fn guided_score(
    d: &dyn Denoiser,
    z_t: &LatentImage,
    t: usize,
    image_cond: Option<&LatentImage>,
    text_cond: Option<&str>,
    g: &GuidanceConfig,
) -> Result<LatentImage> {
    g.validate()?;
    let uncond = d.eps(z_t, t, None, None)?;
    let image = d.eps(z_t, t, image_cond, None)?;
    let full = d.eps(z_t, t, image_cond, text_cond)?;
    let data = ndarray::Zip::from(&uncond.data)
        .and(&image.data)
        .and(&full.data)
        .map_collect(|&u, &i, &f| u + g.s_image * (i - u) + g.s_text * (f - i));
    Ok(LatentImage {
        data,
        view_id: z_t.view_id,
    })
}

/// One deterministic DDIM update from index `t` down to `t_prev`.
pub fn ddim_step(
    z_t: &LatentImage,
    eps_pred: &LatentImage,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    if t_prev >= t {
        return Err(Error::validation(format!(
            "ddim_step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    if z_t.data.dim() != eps_pred.data.dim() {
        return Err(Error::validation("ddim_step shape mismatch"));
    }
    let beta_t = sched.beta(t);
    let beta_prev = sched.beta(t_prev);
    let (sb_t, snb_t) = (beta_t.sqrt(), (1.0 - beta_t).sqrt());
    let (sb_p, snb_p) = (beta_prev.sqrt(), (1.0 - beta_prev).sqrt());
    let data = ndarray::Zip::from(&z_t.data)
        .and(&eps_pred.data)
        .map_collect(|&zv, &ev| sb_p * ((zv - snb_t * ev) / sb_t) + snb_p * ev);
    Ok(LatentImage {
        data,
        view_id: z_t.view_id,
    })
}

/// Full guided edit of one latent map: draw an editing time uniformly in
/// `[t_min, t_max]`, noise the map there, then run `n_steps` uniform DDIM
/// strides down to zero, re-evaluating the guided score at every stride.
pub fn denoise_edit(
    d: &dyn Denoiser,
    z: &LatentImage,
    image_cond: Option<&LatentImage>,
    text_cond: Option<&str>,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
    n_steps: usize,
    seed: u64,
) -> Result<LatentImage> {
    if n_steps < 1 {
        return Err(Error::validation("denoise_edit needs at least one stride"));
    }
    let mut t_rng = rng::stream(seed, tags::EDIT_TIME_DRAW, 0);
    let t_frac = t_rng.gen_range(sched.t_min..sched.t_max);
    let t_start = sched.index_for(t_frac)?;
    let (mut z_cur, eps) = add_noise_at_index(
        z,
        t_start,
        sched,
        rng::derive_seed(seed, tags::EDIT_NOISE, 0),
    )?;
    d.note_injected_noise(&eps);

    let mut t_cur = t_start;
    for j in 1..=n_steps {
        let t_next = ((t_start as f64) * (n_steps - j) as f64 / n_steps as f64).round() as usize;
        if t_next >= t_cur {
            continue;
        }
        let score = guided_score(d, &z_cur, t_cur, image_cond, text_cond, g)?;
        z_cur = ddim_step(&z_cur, &score, t_cur, t_next, sched)?;
        t_cur = t_next;
    }
    debug_assert_eq!(t_cur, 0);
    Ok(z_cur)
}
