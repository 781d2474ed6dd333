//! The editing procedure: iterative dataset update at a fixed editing rate,
//! masked blending of denoised edits, per-phase loss scheduling, and
//! multi-prompt handling.
//!
//! [`EditSession::step`] advances one training iteration; every
//! `editing_rate`-th iteration additionally performs a dataset update (DU):
//! render the next view, score it against each prompt, threshold the scores
//! into masks, denoise-edit the render, blend the edit into the stored latent
//! under the mask, and replace that view's supervision target. Pixels outside
//! the union of masks are never touched — the blend is a per-pixel selector,
//! so they stay bit-identical across the whole session.

pub mod metrics;
pub mod prompt;

use serde::{Deserialize, Serialize};

use crate::delta::{delta_scores, threshold_mask, Mask};
use crate::diffusion::{denoise_edit, Denoiser, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::train::Phase;
use crate::field::{
    render_view, train_step, FieldState, OptimizerState, RayBatch, RenderConfig, TrainStepConfig,
};
use crate::refine::AdapterWeights;
use crate::rng::{self, tags};
use crate::scene::{LatentImage, SceneDataset};

pub use metrics::{directional_similarity, edit_psnr, Embedder, RandomProjectionEmbedder};
pub use prompt::split_prompt;

/// Blend an edited map into an original under a binary mask:
/// `out = edited ⊙ M + (1 − M) ⊙ original`, exact per-pixel selection.
pub fn blend_masked(
    edited: &LatentImage,
    original: &LatentImage,
    mask: &Mask,
) -> Result<LatentImage> {
    if edited.data.dim() != original.data.dim() {
        return Err(Error::validation(format!(
            "blend shape mismatch: {:?} vs {:?}",
            edited.data.dim(),
            original.data.dim()
        )));
    }
    let (h, w, _) = edited.data.dim();
    if mask.data.dim() != (h, w) {
        return Err(Error::validation(format!(
            "mask shape {:?} does not match latents {:?}",
            mask.data.dim(),
            (h, w)
        )));
    }
    let mut data = original.data.clone();
    for r in 0..h {
        for c in 0..w {
            if mask.data[(r, c)] == 1 {
                for ch in 0..4 {
                    data[(r, c, ch)] = edited.data[(r, c, ch)];
                }
            }
        }
    }
    Ok(LatentImage {
        data,
        view_id: original.view_id,
    })
}

/// Editing-session configuration.
#[derive(Debug, Clone)]
pub struct EditConfig {
    /// Iterations between dataset updates.
    pub editing_rate: usize,
    pub mask_threshold: f64,
    pub guidance: GuidanceConfig,
    pub edit_iterations: u64,
    /// Must partition `[0, edit_iterations)`.
    pub phase_schedule: Vec<Phase>,
    pub refresh_mask_each_edit: bool,
    /// DDIM strides per edit.
    pub ddim_steps: usize,
    /// Ray samples for training steps and DU renders.
    pub samples_per_ray: usize,
    pub background: [f64; 4],
    pub patch_size: usize,
    pub stratified: bool,
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.editing_rate < 1 {
            return Err(Error::config("editing rate must be at least 1"));
        }
        if self.edit_iterations < 1 {
            return Err(Error::config("need at least one edit iteration"));
        }
        let mut expected = 0;
        for (i, p) in self.phase_schedule.iter().enumerate() {
            if p.start != expected || p.end <= p.start {
                return Err(Error::config(format!(
                    "phase {i} covers [{}, {}), expected to start at {expected}",
                    p.start, p.end
                )));
            }
            expected = p.end;
        }
        if expected != self.edit_iterations {
            return Err(Error::config(format!(
                "phases cover [0, {expected}) but the session runs {} iterations",
                self.edit_iterations
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::config("mask threshold must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn phase_index(&self, step: u64) -> usize {
        self.phase_schedule
            .iter()
            .position(|p| step >= p.start && step < p.end)
            .unwrap_or(self.phase_schedule.len().saturating_sub(1))
    }
}

/// One log record per iteration; serialized as JSON-lines by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionRecord {
    pub step: u64,
    pub phase: usize,
    pub loss_r: f64,
    pub loss_f: f64,
    pub loss_reg: f64,
    pub du_view: Option<usize>,
    pub mask_area_frac: Option<f64>,
    /// Fraction of union-mask pixels claimed by more than one prompt mask
    /// (multi-prompt sessions only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_overlap_frac: Option<f64>,
}

/// Mutable editing state: the field, adapter, working dataset copy, masks,
/// and optimizer state.
pub struct EditSession {
    pub field: FieldState,
    pub adapter: AdapterWeights,
    pub dataset: SceneDataset,
    originals: Vec<LatentImage>,
    /// Latest per-view union mask (None until the view's first DU).
    pub masks: Vec<Option<Mask>>,
    /// Monotone union of every mask ever applied per view.
    pub union_masks: Vec<Mask>,
    pub step: u64,
    /// Per-prompt masks from the most recent dataset update (None on
    /// non-DU steps); consumed by mask-dump tooling.
    pub last_du_masks: Option<Vec<Mask>>,
    opt: OptimizerState,
    du_count: u64,
    mask_cache: Vec<Option<Vec<Mask>>>,
}

impl EditSession {
    /// Start a session from an initialized (converged) field and adapter.
    pub fn new(
        field: FieldState,
        adapter: AdapterWeights,
        dataset: SceneDataset,
        lr_field: f64,
        lr_camera: f64,
    ) -> EditSession {
        let originals = dataset.latents().to_vec();
        let n = dataset.n_views();
        let shape = dataset.latent_shape();
        let opt = OptimizerState::new(&field, &adapter, n, lr_field, lr_camera);
        EditSession {
            field,
            adapter,
            dataset,
            originals,
            masks: vec![None; n],
            union_masks: (0..n).map(|_| Mask::zeros(shape)).collect(),
            step: 0,
            last_du_masks: None,
            opt,
            du_count: 0,
            mask_cache: vec![None; n],
        }
    }

    /// Pristine (pre-session) latents.
    pub fn originals(&self) -> &[LatentImage] {
        &self.originals
    }

    /// Dataset updates performed so far.
    pub fn du_count(&self) -> u64 {
        self.du_count
    }

    fn du_cfg(&self, cfg: &EditConfig) -> RenderConfig {
        RenderConfig {
            samples_per_ray: cfg.samples_per_ray,
            background_latent: cfg.background,
            stratified: false,
            seed: 0,
        }
    }

    /// One editing iteration: a dataset update on every `editing_rate`-th
    /// step, then one training step with the phase's loss weights.
    pub fn step(
        &mut self,
        prompts: &[String],
        backends: &[&dyn Denoiser],
        cfg: &EditConfig,
        sched: &NoiseSchedule,
        seed: u64,
    ) -> Result<SessionRecord> {
        if prompts.is_empty() || prompts.len() != backends.len() {
            return Err(Error::config(
                "need one denoiser backend per prompt, at least one prompt",
            ));
        }
        let i = self.step;
        let phase_idx = cfg.phase_index(i);
        let weights = cfg.phase_schedule[phase_idx].weights;
        let n_views = self.dataset.n_views();
        let shape = self.dataset.latent_shape();

        let mut du_view = None;
        let mut mask_area_frac = None;
        let mut mask_overlap_frac = None;
        self.last_du_masks = None;

        // 1-based gating: the first update lands on the rate-th iteration,
        // so a session of I iterations performs exactly floor(I / rate)
        // dataset updates.
        if (i + 1) % cfg.editing_rate as u64 == 0 {
            let view = (self.du_count as usize) % n_views;
            du_view = Some(view);
            let render = render_view(
                &self.field,
                Some(&self.adapter),
                self.dataset.camera(view),
                &self.du_cfg(cfg),
                shape,
                view,
            )?;

            // Per-prompt masks (recomputed every DU by default).
            let masks: Vec<Mask> = if cfg.refresh_mask_each_edit || self.mask_cache[view].is_none()
            {
                let mut ms = Vec::with_capacity(prompts.len());
                for (j, prompt) in prompts.iter().enumerate() {
                    let scores = delta_scores(
                        backends[j],
                        &render,
                        Some(&self.originals[view]),
                        prompt,
                        sched,
                        rng::derive_seed(seed, tags::DELTA_NOISE, i * 64 + j as u64),
                    )?;
                    ms.push(threshold_mask(&scores, cfg.mask_threshold)?);
                }
                self.mask_cache[view] = Some(ms.clone());
                ms
            } else {
                self.mask_cache[view].clone().unwrap()
            };

            // Union bookkeeping.
            let mut union = Mask {
                data: ndarray::Array2::zeros(shape),
                threshold_used: cfg.mask_threshold,
            };
            for m in &masks {
                union.union_with(m);
            }
            if prompts.len() > 1 && union.area() > 0 {
                let mut multi = 0usize;
                for r in 0..shape.0 {
                    for c in 0..shape.1 {
                        let covered = masks.iter().filter(|m| m.data[(r, c)] == 1).count();
                        if covered >= 2 {
                            multi += 1;
                        }
                    }
                }
                mask_overlap_frac = Some(multi as f64 / union.area() as f64);
            }
            mask_area_frac = Some(union.area_fraction());
            self.union_masks[view].union_with(&union);
            self.masks[view] = Some(union);

            // Edit each prompt within its own mask; later prompts win where
            // masks overlap.
            let mut updated = self.dataset.latent(view).clone();
            for (j, prompt) in prompts.iter().enumerate() {
                let edited = denoise_edit(
                    backends[j],
                    &render,
                    Some(&self.originals[view]),
                    Some(prompt),
                    &cfg.guidance,
                    sched,
                    cfg.ddim_steps,
                    rng::derive_seed(seed, tags::EDIT_NOISE, i * 64 + j as u64),
                )?;
                updated = blend_masked(&edited, &updated, &masks[j])?;
            }
            self.dataset.replace_latent(view, &updated)?;
            self.last_du_masks = Some(masks);
            self.du_count += 1;
        }

        // One training step against the (possibly just updated) dataset.
        let train_view = (i as usize) % n_views;
        let mut batch_rng = rng::stream(seed, tags::TRAIN_BATCH, i);
        let batch = RayBatch::sample_patch(&self.dataset, train_view, cfg.patch_size, &mut batch_rng)?;
        let report = train_step(
            &mut self.field,
            &mut self.adapter,
            self.dataset.cameras_mut(),
            &batch,
            &weights,
            &mut self.opt,
            &TrainStepConfig {
                samples_per_ray: cfg.samples_per_ray,
                background: cfg.background,
                stratified: cfg.stratified,
                seed,
            },
        )?;

        self.step = i + 1;
        Ok(SessionRecord {
            step: i,
            phase: phase_idx,
            loss_r: report.loss_r,
            loss_f: report.loss_f,
            loss_reg: report.loss_reg,
            du_view,
            mask_area_frac,
            mask_overlap_frac,
        })
    }
}

/// Run a full editing session; a pure function of its arguments. Returns the
/// final session and the per-iteration log.
pub fn edit_scene(
    mut session: EditSession,
    prompts: &[String],
    backends: &[&dyn Denoiser],
    cfg: &EditConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(EditSession, Vec<SessionRecord>)> {
    cfg.validate()?;
    let mut log = Vec::with_capacity(cfg.edit_iterations as usize);
    while session.step < cfg.edit_iterations {
        let record = session.step(prompts, backends, cfg, sched, seed)?;
        log.push(record);
    }
    Ok((session, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::LossWeights;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn random_latent(h: usize, w: usize, seed: u64) -> LatentImage {
        let mut rng = crate::rng::stream(seed, 0x3001, 0);
        LatentImage::new(
            Array3::from_shape_fn((h, w, 4), |_| rng.gen_range(-1.0..1.0)),
            0,
        )
        .unwrap()
    }

    #[test]
    fn blend_extremes_are_bit_exact() {
        let edited = random_latent(6, 5, 1);
        let original = random_latent(6, 5, 2);

        let zeros = Mask::from_map(Array2::zeros((6, 5)), 0.5).unwrap();
        let out = blend_masked(&edited, &original, &zeros).unwrap();
        assert_eq!(out.data, original.data);

        let ones = Mask::from_map(Array2::ones((6, 5)), 0.5).unwrap();
        let out = blend_masked(&edited, &original, &ones).unwrap();
        assert_eq!(out.data, edited.data);
    }

    #[test]
    fn blend_is_a_per_pixel_selector() {
        let edited = random_latent(8, 8, 3);
        let original = random_latent(8, 8, 4);
        let mask = Mask::from_map(
            Array2::from_shape_fn((8, 8), |(r, c)| u8::from((r * 3 + c) % 2 == 0)),
            0.5,
        )
        .unwrap();
        let out = blend_masked(&edited, &original, &mask).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                for ch in 0..4 {
                    let want = if mask.data[(r, c)] == 1 {
                        edited.data[(r, c, ch)]
                    } else {
                        original.data[(r, c, ch)]
                    };
                    assert_eq!(out.data[(r, c, ch)], want);
                }
            }
        }
    }

    #[test]
    fn blend_rejects_shape_mismatches() {
        let a = random_latent(4, 4, 5);
        let b = random_latent(4, 6, 6);
        let m = Mask::from_map(Array2::zeros((4, 4)), 0.5).unwrap();
        assert!(blend_masked(&a, &b, &m).is_err());
        let m_bad = Mask::from_map(Array2::zeros((3, 4)), 0.5).unwrap();
        assert!(blend_masked(&a, &a, &m_bad).is_err());
    }

    #[test]
    fn phase_schedule_must_partition_the_run() {
        let w = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let mut cfg = EditConfig {
            editing_rate: 10,
            mask_threshold: 0.45,
            guidance: GuidanceConfig {
                s_image: 1.5,
                s_text: 7.5,
            },
            edit_iterations: 100,
            phase_schedule: vec![
                Phase {
                    start: 0,
                    end: 40,
                    weights: w,
                },
                Phase {
                    start: 40,
                    end: 100,
                    weights: w,
                },
            ],
            refresh_mask_each_edit: true,
            ddim_steps: 4,
            samples_per_ray: 4,
            background: [0.0; 4],
            patch_size: 4,
            stratified: false,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.phase_index(0), 0);
        assert_eq!(cfg.phase_index(39), 0);
        assert_eq!(cfg.phase_index(40), 1);

        cfg.phase_schedule[1].end = 90;
        assert!(cfg.validate().is_err());
        cfg.phase_schedule[1].end = 100;
        cfg.phase_schedule[1].start = 50;
        assert!(cfg.validate().is_err());
    }
}
