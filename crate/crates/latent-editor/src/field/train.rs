//! Losses and the training step.
//!
//! One step renders a ray batch (normally a rectangular patch so the adapter
//! can see a coherent map), forms the weighted total loss, backpropagates
//! analytically through rendering into the field MLP, through the adapter,
//! and — when camera alignment is active — through ray geometry into the
//! preconditioned camera residuals, then applies one adaptive-moment update
//! per parameter group.
//!
//! Reductions over rays run in fixed chunk order, so results do not depend on
//! the worker thread count.

use nalgebra::{DVector, Vector3};
use rand::Rng;
use rayon::prelude::*;

use super::mlp::FieldState;
use super::render::{
    composite_backward, forward_ray_traced, generate_rays, RayForward, RenderConfig,
};
use crate::camera::{loss_camera_reg, loss_camera_reg_grad, CameraParams, EffectivePose, PARAM_DIM};
use crate::error::{Error, Result};
use crate::refine::{adapter_backward, adapter_forward_traced, loss_refinement, AdapterWeights};
use crate::rng::{derive_seed, tags};
use crate::scene::{LatentImage, SceneDataset};

/// Weights of the three loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_f: f64,
    pub lambda_p: f64,
}

impl LossWeights {
    pub fn new(lambda_r: f64, lambda_f: f64, lambda_p: f64) -> Result<Self> {
        if lambda_r < 0.0 || lambda_f < 0.0 || lambda_p < 0.0 {
            return Err(Error::validation("loss weights must be non-negative"));
        }
        Ok(LossWeights {
            lambda_r,
            lambda_f,
            lambda_p,
        })
    }
}

/// Weighted total loss.
pub fn loss_total(l_r: f64, l_f: f64, l_reg: f64, w: &LossWeights) -> f64 {
    w.lambda_r * l_r + w.lambda_f * l_f + w.lambda_p * l_reg
}

/// The three loss components of one step; nothing else is ever computed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub loss_r: f64,
    pub loss_f: f64,
    pub loss_reg: f64,
}

impl LossReport {
    pub fn total(&self, w: &LossWeights) -> f64 {
        loss_total(self.loss_r, self.loss_f, self.loss_reg, w)
    }

    pub fn is_finite(&self) -> bool {
        self.loss_r.is_finite() && self.loss_f.is_finite() && self.loss_reg.is_finite()
    }
}

/// Mean over rays of the squared L2 distance between predicted and target
/// latent 4-vectors.
pub fn loss_reconstruction_rays(pred: &[[f64; 4]], target: &[[f64; 4]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::validation(format!(
            "reconstruction loss over {} vs {} rays",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::validation("reconstruction loss needs rays"));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for c in 0..4 {
            let d = p[c] - t[c];
            sum += d * d;
        }
    }
    Ok(sum / pred.len() as f64)
}

/// Same reduction over full latent maps.
pub fn loss_reconstruction(pred: &LatentImage, target: &LatentImage) -> Result<f64> {
    if pred.data.dim() != target.data.dim() {
        return Err(Error::validation(format!(
            "reconstruction loss shape mismatch: {:?} vs {:?}",
            pred.data.dim(),
            target.data.dim()
        )));
    }
    let n = (pred.data.dim().0 * pred.data.dim().1) as f64;
    let sum: f64 = pred
        .data
        .iter()
        .zip(target.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// First-order adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One range of iterations sharing loss weights.
#[derive(Debug, Clone)]
pub struct Phase {
    pub start: u64,
    pub end: u64,
    pub weights: LossWeights,
}

/// Loss weights in effect at `step` (the last phase covers any overflow).
pub fn weights_at(phases: &[Phase], step: u64) -> LossWeights {
    phases
        .iter()
        .find(|p| step >= p.start && step < p.end)
        .or_else(|| phases.last())
        .map(|p| p.weights)
        .unwrap_or(LossWeights {
            lambda_r: 1.0,
            lambda_f: 0.0,
            lambda_p: 0.0,
        })
}

/// Configuration for a full training run over a dataset.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub steps: u64,
    pub patch_size: usize,
    pub samples_per_ray: usize,
    pub background: [f64; 4],
    pub stratified: bool,
    pub phases: Vec<Phase>,
    pub seed: u64,
    pub lr_field: f64,
    pub lr_camera: f64,
    /// Geometric learning-rate decay: the field/adapter rate falls to
    /// `lr_field * lr_final_fraction` by the last step (1.0 = constant).
    pub lr_final_fraction: f64,
    /// Compute the camera preconditioner before the first step (disable when
    /// resuming from a checkpoint that already carries it).
    pub precondition: bool,
}

/// Train field and adapter (and cameras, per the phase weights) on a dataset
/// until `cfg.steps`, starting from the field's current step counter. Views
/// rotate round-robin; patches are seeded per step, so interrupted runs
/// resume onto the identical trajectory.
pub fn fit(
    state: &mut FieldState,
    adapter: &mut AdapterWeights,
    dataset: &mut SceneDataset,
    opt: &mut OptimizerState,
    cfg: &FitConfig,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<()> {
    if cfg.precondition {
        let (bbox_min, bbox_max) = dataset.bounding_box;
        crate::camera::precondition_cameras(dataset.cameras_mut(), bbox_min, bbox_max, cfg.seed)?;
    }
    let n_views = dataset.n_views();
    let step_cfg = TrainStepConfig {
        samples_per_ray: cfg.samples_per_ray,
        background: cfg.background,
        stratified: cfg.stratified,
        seed: cfg.seed,
    };
    while state.step_count < cfg.steps {
        let step = state.step_count;
        if cfg.lr_final_fraction != 1.0 && cfg.steps > 1 {
            let frac = step as f64 / (cfg.steps - 1) as f64;
            let lr = cfg.lr_field * cfg.lr_final_fraction.powf(frac);
            opt.field.lr = lr;
            opt.adapter.lr = lr;
        }
        let weights = weights_at(&cfg.phases, step);
        let view = (step as usize) % n_views;
        let mut rng = crate::rng::stream(cfg.seed, tags::TRAIN_BATCH, step);
        let batch = RayBatch::sample_patch(dataset, view, cfg.patch_size, &mut rng)?;
        let report = {
            let cameras = dataset.cameras_mut();
            train_step(state, adapter, cameras, &batch, &weights, opt, &step_cfg)?
        };
        on_step(step, &report);
    }
    Ok(())
}

/// A rectangular pixel region of one view.
#[derive(Debug, Clone, Copy)]
pub struct Patch {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

/// A batch of rays with supervision targets, all from one view.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub view: usize,
    pub latent_shape: (usize, usize),
    pub pixels: Vec<(usize, usize)>,
    pub targets: Vec<[f64; 4]>,
    pub patch: Option<Patch>,
}

impl RayBatch {
    /// Batch over a rectangular patch, row-major pixel order.
    pub fn from_patch(ds: &SceneDataset, view: usize, patch: Patch) -> Result<RayBatch> {
        let (h, w) = ds.latent_shape();
        if patch.height == 0
            || patch.width == 0
            || patch.row0 + patch.height > h
            || patch.col0 + patch.width > w
        {
            return Err(Error::validation("patch outside latent resolution"));
        }
        let latent = ds.latent(view);
        let mut pixels = Vec::with_capacity(patch.height * patch.width);
        let mut targets = Vec::with_capacity(patch.height * patch.width);
        for r in patch.row0..patch.row0 + patch.height {
            for c in patch.col0..patch.col0 + patch.width {
                pixels.push((r, c));
                targets.push([
                    latent.data[(r, c, 0)],
                    latent.data[(r, c, 1)],
                    latent.data[(r, c, 2)],
                    latent.data[(r, c, 3)],
                ]);
            }
        }
        Ok(RayBatch {
            view,
            latent_shape: (h, w),
            pixels,
            targets,
            patch: Some(patch),
        })
    }

    /// Batch over arbitrary pixels (no refinement loss possible).
    pub fn scattered(ds: &SceneDataset, view: usize, pixels: Vec<(usize, usize)>) -> Result<RayBatch> {
        let (h, w) = ds.latent_shape();
        let latent = ds.latent(view);
        let mut targets = Vec::with_capacity(pixels.len());
        for &(r, c) in &pixels {
            if r >= h || c >= w {
                return Err(Error::validation(format!("pixel ({r},{c}) out of range")));
            }
            targets.push([
                latent.data[(r, c, 0)],
                latent.data[(r, c, 1)],
                latent.data[(r, c, 2)],
                latent.data[(r, c, 3)],
            ]);
        }
        Ok(RayBatch {
            view,
            latent_shape: (h, w),
            pixels,
            targets,
            patch: None,
        })
    }

    /// Random even-sized square patch of (at most) `size`, uniform position.
    pub fn sample_patch(
        ds: &SceneDataset,
        view: usize,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<RayBatch> {
        let (h, w) = ds.latent_shape();
        let mut s = size.min(h).min(w);
        if s % 2 == 1 {
            s -= 1;
        }
        if s == 0 {
            return Err(Error::validation("patch size too small"));
        }
        let row0 = if h > s { rng.gen_range(0..=h - s) } else { 0 };
        let col0 = if w > s { rng.gen_range(0..=w - s) } else { 0 };
        RayBatch::from_patch(
            ds,
            view,
            Patch {
                row0,
                col0,
                height: s,
                width: s,
            },
        )
    }
}

/// Optimizer state for the three parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub field: Adam,
    pub adapter: Adam,
    pub cameras: Adam,
}

impl OptimizerState {
    pub fn new(
        state: &FieldState,
        adapter: &AdapterWeights,
        n_cameras: usize,
        lr_field: f64,
        lr_camera: f64,
    ) -> OptimizerState {
        OptimizerState {
            field: Adam::new(state.params.len(), lr_field),
            adapter: Adam::new(adapter.params.len(), lr_field),
            cameras: Adam::new(n_cameras * PARAM_DIM, lr_camera),
        }
    }
}

/// Per-step configuration (sampling and seeding).
#[derive(Debug, Clone)]
pub struct TrainStepConfig {
    pub samples_per_ray: usize,
    pub background: [f64; 4],
    pub stratified: bool,
    /// Master seed; the per-step stratified stream is derived from it and the
    /// field's step counter, so resumed runs replay exactly.
    pub seed: u64,
}

pub(crate) struct Grads {
    pub field: Vec<f64>,
    pub adapter: Vec<f64>,
    pub cameras: Vec<DVector<f64>>,
}

/// Gradient of `g . normalize(R k)` chained to the 10-dim camera chart.
fn ray_chart_backward(
    pose: &EffectivePose,
    row: usize,
    col: usize,
    d_origin: Vector3<f64>,
    d_dir_unit: Vector3<f64>,
) -> [f64; PARAM_DIM] {
    let u = col as f64 + 0.5;
    let v = row as f64 + 0.5;
    let k = Vector3::new(
        (u - pose.principal.x) / pose.focal.x,
        (v - pose.principal.y) / pose.focal.y,
        1.0,
    );
    let d_raw = pose.rotation * k;
    let n = d_raw.norm();
    let u_hat = d_raw / n;
    // d(unit)/d(raw) = (I - u u^T) / n, applied to the upstream vector.
    let d_raw_grad = (d_dir_unit - u_hat * u_hat.dot(&d_dir_unit)) / n;

    let mut g = [0.0; PARAM_DIM];
    for j in 0..3 {
        let axis = pose.rot_left_jacobian.column(j).clone_owned();
        g[j] = d_raw_grad.dot(&axis.cross(&d_raw));
    }
    for j in 0..3 {
        g[3 + j] = d_origin[j];
    }
    let col0 = pose.rotation.column(0).clone_owned();
    let col1 = pose.rotation.column(1).clone_owned();
    g[6] = d_raw_grad.dot(&col0) * (-(u - pose.principal.x) / (pose.focal.x * pose.focal.x));
    g[7] = d_raw_grad.dot(&col1) * (-(v - pose.principal.y) / (pose.focal.y * pose.focal.y));
    g[8] = d_raw_grad.dot(&col0) * (-1.0 / pose.focal.x);
    g[9] = d_raw_grad.dot(&col1) * (-1.0 / pose.focal.y);
    g
}

fn render_config(cfg: &TrainStepConfig, step: u64) -> RenderConfig {
    RenderConfig {
        samples_per_ray: cfg.samples_per_ray,
        background_latent: cfg.background,
        stratified: cfg.stratified,
        seed: derive_seed(cfg.seed, tags::TRAIN_STRATIFIED, step),
    }
}

fn patch_image(batch: &RayBatch, values: &[[f64; 4]], view: usize) -> Result<LatentImage> {
    let patch = batch
        .patch
        .ok_or_else(|| Error::validation("refinement loss needs a rectangular patch batch"))?;
    let mut data = ndarray::Array3::zeros((patch.height, patch.width, 4));
    for (i, v) in values.iter().enumerate() {
        let r = i / patch.width;
        let c = i % patch.width;
        for ch in 0..4 {
            data[(r, c, ch)] = v[ch];
        }
    }
    LatentImage::new(data, view)
}

fn losses_and_grads(
    state: &FieldState,
    adapter: &AdapterWeights,
    cameras: &[CameraParams],
    batch: &RayBatch,
    weights: &LossWeights,
    rcfg: &RenderConfig,
    want_grads: bool,
) -> Result<(LossReport, Option<Grads>)> {
    if batch.pixels.is_empty() {
        return Err(Error::validation("ray batch must be nonempty"));
    }
    rcfg.validate()?;
    state.validate()?;
    let camera = &cameras[batch.view];
    let rays = generate_rays(camera, &batch.pixels, batch.latent_shape)?;

    let forwards: Vec<RayForward> = (0..rays.len())
        .into_par_iter()
        .map(|i| forward_ray_traced(state, &rays[i], rcfg, i as u64))
        .collect();
    let preds: Vec<[f64; 4]> = forwards.iter().map(|f| f.shade.value).collect();

    let loss_r = loss_reconstruction_rays(&preds, &batch.targets)?;
    let n_rays = preds.len() as f64;

    // Refinement loss through the adapter on the rendered patch.
    let mut loss_f = 0.0;
    let mut adapter_grads = vec![0.0; if want_grads { adapter.params.len() } else { 0 }];
    let mut refine_input_grad: Option<ndarray::Array3<f64>> = None;
    if weights.lambda_f > 0.0 {
        let pred_img = patch_image(batch, &preds, batch.view)?;
        let target_img = patch_image(batch, &batch.targets, batch.view)?;
        let (refined, trace) = adapter_forward_traced(adapter, &pred_img)?;
        loss_f = loss_refinement(&refined, &target_img)?;
        if want_grads {
            let n_px = n_rays;
            let d_refined = ndarray::Array3::from_shape_fn(refined.data.dim(), |idx| {
                2.0 * (refined.data[idx] - target_img.data[idx]) / n_px
            });
            let d_in = adapter_backward(adapter, &pred_img, &trace, &d_refined, &mut adapter_grads);
            refine_input_grad = Some(d_in);
        }
    }

    let loss_reg = loss_camera_reg(cameras);
    let report = LossReport {
        loss_r,
        loss_f,
        loss_reg,
    };
    if !want_grads {
        return Ok((report, None));
    }

    // Upstream gradient per ray, with loss weights folded in.
    let patch_width = batch.patch.map(|p| p.width).unwrap_or(0);
    let upstream: Vec<[f64; 4]> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut g = [0.0; 4];
            for c in 0..4 {
                g[c] = weights.lambda_r * 2.0 * (p[c] - batch.targets[i][c]) / n_rays;
            }
            if let Some(d_in) = &refine_input_grad {
                let r = i / patch_width;
                let cc = i % patch_width;
                for c in 0..4 {
                    g[c] += weights.lambda_f * d_in[(r, cc, c)];
                }
            }
            g
        })
        .collect();

    let want_camera = weights.lambda_p > 0.0;
    let pose = camera.effective_pose();
    let delta_by_ray: Vec<f64> = rays
        .iter()
        .map(|r| (r.t_far - r.t_near) / rcfg.samples_per_ray as f64)
        .collect();

    struct ChunkOut {
        field: Vec<f64>,
        chart: [f64; PARAM_DIM],
    }

    const CHUNK: usize = 16;
    let n_chunks = rays.len().div_ceil(CHUNK);
    let chunks: Vec<ChunkOut> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut out = ChunkOut {
                field: vec![0.0; state.params.len()],
                chart: [0.0; PARAM_DIM],
            };
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(rays.len());
            for i in lo..hi {
                let fwd = &forwards[i];
                let ray = &rays[i];
                let zs: Vec<[f64; 4]> = fwd.traces.iter().map(|t| t.z).collect();
                let (d_sigma, d_z) = composite_backward(
                    &fwd.shade,
                    &zs,
                    delta_by_ray[i],
                    rcfg.background_latent,
                    upstream[i],
                );
                let v = [ray.direction.x, ray.direction.y, ray.direction.z];
                let mut d_origin = Vector3::zeros();
                let mut d_dir = Vector3::zeros();
                for (s, trace) in fwd.traces.iter().enumerate() {
                    let t = fwd.depths[s];
                    let p = ray.origin + ray.direction * t;
                    if want_camera {
                        let mut dp = [0.0; 3];
                        let mut dv = [0.0; 3];
                        state.arch.backward(
                            &state.params,
                            [p.x, p.y, p.z],
                            v,
                            trace,
                            d_z[s],
                            d_sigma[s],
                            &mut out.field,
                            Some((&mut dp, &mut dv)),
                        );
                        let dp = Vector3::new(dp[0], dp[1], dp[2]);
                        let dv = Vector3::new(dv[0], dv[1], dv[2]);
                        d_origin += dp;
                        d_dir += dp * t + dv;
                    } else {
                        state.arch.backward(
                            &state.params,
                            [p.x, p.y, p.z],
                            v,
                            trace,
                            d_z[s],
                            d_sigma[s],
                            &mut out.field,
                            None,
                        );
                    }
                }
                if want_camera {
                    let (row, col) = batch.pixels[i];
                    let chart = ray_chart_backward(&pose, row, col, d_origin, d_dir);
                    for k in 0..PARAM_DIM {
                        out.chart[k] += chart[k];
                    }
                }
            }
            out
        })
        .collect();

    // Fixed-order reduction.
    let mut field_grads = vec![0.0; state.params.len()];
    let mut chart = [0.0; PARAM_DIM];
    for c in &chunks {
        for (a, b) in field_grads.iter_mut().zip(&c.field) {
            *a += b;
        }
        for k in 0..PARAM_DIM {
            chart[k] += c.chart[k];
        }
    }

    for g in adapter_grads.iter_mut() {
        *g *= weights.lambda_f;
    }

    let mut camera_grads: Vec<DVector<f64>> = cameras
        .iter()
        .map(|_| DVector::zeros(PARAM_DIM))
        .collect();
    if want_camera {
        let chart = DVector::from_row_slice(&chart);
        camera_grads[batch.view] += camera.precond.transpose() * chart;
        for (g, reg) in camera_grads.iter_mut().zip(loss_camera_reg_grad(cameras)) {
            *g += weights.lambda_p * reg;
        }
    }

    Ok((
        report,
        Some(Grads {
            field: field_grads,
            adapter: adapter_grads,
            cameras: camera_grads,
        }),
    ))
}

/// Forward-only loss evaluation (used by tests and finite-difference checks).
pub fn evaluate_losses(
    state: &FieldState,
    adapter: &AdapterWeights,
    cameras: &[CameraParams],
    batch: &RayBatch,
    weights: &LossWeights,
    cfg: &TrainStepConfig,
    step: u64,
) -> Result<LossReport> {
    let rcfg = render_config(cfg, step);
    losses_and_grads(state, adapter, cameras, batch, weights, &rcfg, false).map(|(r, _)| r)
}

/// One gradient step on the total loss. Updates the field always, the adapter
/// when `lambda_f > 0`, and camera residuals (through the preconditioner)
/// when `lambda_p > 0`. A non-finite loss or gradient rejects the step and
/// leaves every parameter untouched.
pub fn train_step(
    state: &mut FieldState,
    adapter: &mut AdapterWeights,
    cameras: &mut [CameraParams],
    batch: &RayBatch,
    weights: &LossWeights,
    opt: &mut OptimizerState,
    cfg: &TrainStepConfig,
) -> Result<LossReport> {
    let step = state.step_count;
    let rcfg = render_config(cfg, step);
    let (report, grads) =
        losses_and_grads(state, adapter, cameras, batch, weights, &rcfg, true)?;
    let grads = grads.expect("gradients requested");

    if !report.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            step,
        });
    }
    let finite = grads.field.iter().all(|g| g.is_finite())
        && grads.adapter.iter().all(|g| g.is_finite())
        && grads.cameras.iter().all(|g| g.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(Error::NonFinite {
            what: "gradient",
            step,
        });
    }

    opt.field.step(&mut state.params, &grads.field);
    if weights.lambda_f > 0.0 {
        opt.adapter.step(&mut adapter.params, &grads.adapter);
    }
    if weights.lambda_p > 0.0 {
        let mut flat = Vec::with_capacity(cameras.len() * PARAM_DIM);
        let mut flat_grads = Vec::with_capacity(cameras.len() * PARAM_DIM);
        for (cam, g) in cameras.iter().zip(&grads.cameras) {
            flat.extend(cam.delta_phi.iter());
            flat_grads.extend(g.iter());
        }
        opt.cameras.step(&mut flat, &flat_grads);
        for (i, cam) in cameras.iter_mut().enumerate() {
            for k in 0..PARAM_DIM {
                cam.delta_phi[k] = flat[i * PARAM_DIM + k];
            }
        }
    }

    if state.validate().is_err() {
        return Err(Error::NonFinite {
            what: "parameters",
            step,
        });
    }
    state.step_count += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::mlp::FieldArch;
    use crate::scene::synth::{synth_scene, SceneSpec};

    fn tiny_setup() -> (FieldState, AdapterWeights, SceneDataset) {
        let ds = synth_scene(&SceneSpec::named("box", 2, 8, 8).unwrap(), 4).unwrap();
        let state = FieldState::init(FieldArch::new(2, 1, vec![10, 8]).unwrap(), 3);
        let adapter = AdapterWeights::init(2, 5).unwrap();
        (state, adapter, ds)
    }

    fn tiny_cfg() -> TrainStepConfig {
        TrainStepConfig {
            samples_per_ray: 4,
            background: [0.0; 4],
            stratified: false,
            seed: 77,
        }
    }

    #[test]
    fn loss_total_examples() {
        let w = LossWeights::new(0.80, 0.1, 0.1).unwrap();
        assert!((loss_total(1.0, 1.0, 1.0, &w) - 1.0).abs() < 1e-12);
        let w = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(loss_total(3.7, 9.0, 4.0, &w), 3.7);
        let w = LossWeights::new(0.75, 0.0, 0.25).unwrap();
        assert!((loss_total(2.0, 9.0, 4.0, &w) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_examples() {
        let a = vec![[1.0, 2.0, 3.0, 4.0]; 5];
        assert_eq!(loss_reconstruction_rays(&a, &a).unwrap(), 0.0);

        let b = vec![[2.0, 3.0, 4.0, 5.0]; 5];
        assert!((loss_reconstruction_rays(&b, &a).unwrap() - 4.0).abs() < 1e-12);

        // Brute-force scalar reference on a random pair.
        let mut rng = crate::rng::stream(3, 0x77, 0);
        use rand::Rng;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<[f64; 4]> {
            (0..7)
                .map(|_| {
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ]
                })
                .collect()
        };
        let p = mk(&mut rng);
        let t = mk(&mut rng);
        let mut want = 0.0;
        for i in 0..7 {
            for c in 0..4 {
                want += (p[i][c] - t[i][c]) * (p[i][c] - t[i][c]);
            }
        }
        want /= 7.0;
        assert!((loss_reconstruction_rays(&p, &t).unwrap() - want).abs() < 1e-12);

        let short = vec![[0.0; 4]; 3];
        assert!(loss_reconstruction_rays(&p, &short).is_err());
    }

    #[test]
    fn adam_leaves_params_alone_on_zero_gradient() {
        let mut adam = Adam::new(3, 1e-2);
        let mut params = vec![1.5, -2.25, 0.0];
        let before = params.clone();
        adam.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, before);
    }

    #[test]
    fn zero_lambda_f_and_p_leave_adapter_and_cameras_untouched() {
        let (mut state, mut adapter, ds) = tiny_setup();
        let mut cameras = ds.cameras().to_vec();
        let before_adapter = adapter.params.clone();
        let before_cameras: Vec<_> = cameras.iter().map(|c| c.delta_phi.clone()).collect();
        let mut opt = OptimizerState::new(&state, &adapter, cameras.len(), 1e-3, 1e-4);
        let batch = RayBatch::from_patch(
            &ds,
            0,
            Patch {
                row0: 0,
                col0: 0,
                height: 4,
                width: 4,
            },
        )
        .unwrap();
        let w = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        train_step(
            &mut state,
            &mut adapter,
            &mut cameras,
            &batch,
            &w,
            &mut opt,
            &tiny_cfg(),
        )
        .unwrap();
        assert_eq!(adapter.params, before_adapter);
        for (cam, before) in cameras.iter().zip(&before_cameras) {
            assert_eq!(&cam.delta_phi, before);
        }
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let (mut state, mut adapter, ds) = tiny_setup();
        let mut cameras = ds.cameras().to_vec();
        let mut opt = OptimizerState::new(&state, &adapter, cameras.len(), 1e-2, 1e-4);
        let batch = RayBatch::from_patch(
            &ds,
            0,
            Patch {
                row0: 2,
                col0: 2,
                height: 4,
                width: 4,
            },
        )
        .unwrap();
        let w = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let cfg = tiny_cfg();
        let mut first = 0.0;
        let mut last = 0.0;
        for i in 0..100 {
            let rep = train_step(
                &mut state,
                &mut adapter,
                &mut cameras,
                &batch,
                &w,
                &mut opt,
                &cfg,
            )
            .unwrap();
            if i == 0 {
                first = rep.loss_r;
            }
            last = rep.loss_r;
        }
        assert!(
            last < 0.5 * first,
            "loss should drop on a fixed batch: {first} -> {last}"
        );
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let (mut state, mut adapter, ds) = tiny_setup();
            let mut cameras = ds.cameras().to_vec();
            crate::camera::precondition_cameras(
                &mut cameras,
                ds.bounding_box.0,
                ds.bounding_box.1,
                9,
            )
            .unwrap();
            let mut opt = OptimizerState::new(&state, &adapter, cameras.len(), 1e-3, 1e-4);
            let w = LossWeights::new(0.8, 0.1, 0.1).unwrap();
            let cfg = TrainStepConfig {
                stratified: true,
                ..tiny_cfg()
            };
            for step in 0..20 {
                let mut rng = crate::rng::stream(cfg.seed, tags::TRAIN_BATCH, step);
                let batch =
                    RayBatch::sample_patch(&ds, (step % 2) as usize, 4, &mut rng).unwrap();
                train_step(
                    &mut state,
                    &mut adapter,
                    &mut cameras,
                    &batch,
                    &w,
                    &mut opt,
                    &cfg,
                )
                .unwrap();
            }
            (state.params, adapter.params, cameras[0].delta_phi.clone())
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    /// Central finite differences over every trainable path of the total
    /// loss, on a deliberately tiny configuration.
    #[test]
    fn full_training_gradient_matches_finite_differences() {
        let (mut state, adapter, ds) = tiny_setup();
        let mut cameras = ds.cameras().to_vec();
        crate::camera::precondition_cameras(
            &mut cameras,
            ds.bounding_box.0,
            ds.bounding_box.1,
            5,
        )
        .unwrap();
        // Move off the residual origin so the rotation chain is exercised.
        use rand::Rng;
        let mut rng = crate::rng::stream(8, 0xfd, 0);
        for cam in cameras.iter_mut() {
            for k in 0..PARAM_DIM {
                cam.delta_phi[k] = rng.gen_range(-0.02..0.02);
            }
        }
        // And give the field some training so gradients are not at init.
        for p in state.params.iter_mut() {
            *p += rng.gen_range(-0.01..0.01);
        }

        let batch = RayBatch::from_patch(
            &ds,
            1,
            Patch {
                row0: 1,
                col0: 2,
                height: 4,
                width: 4,
            },
        )
        .unwrap();
        let weights = LossWeights::new(0.7, 0.2, 0.1).unwrap();
        let cfg = tiny_cfg();
        let rcfg = render_config(&cfg, 0);

        let (_, grads) =
            losses_and_grads(&state, &adapter, &cameras, &batch, &weights, &rcfg, true).unwrap();
        let grads = grads.unwrap();

        let total = |state: &FieldState, adapter: &AdapterWeights, cams: &[CameraParams]| -> f64 {
            let rep = evaluate_losses(state, adapter, cams, &batch, &weights, &cfg, 0).unwrap();
            rep.total(&weights)
        };

        let h = 1e-4;
        // Field parameters (a random subset).
        for _ in 0..40 {
            let k = rng.gen_range(0..state.params.len());
            let mut sp = state.clone();
            let mut sm = state.clone();
            sp.params[k] += h;
            sm.params[k] -= h;
            let fd = (total(&sp, &adapter, &cameras) - total(&sm, &adapter, &cameras)) / (2.0 * h);
            let denom = grads.field[k].abs().max(fd.abs()).max(1e-2);
            assert!(
                ((grads.field[k] - fd) / denom).abs() < 1e-4,
                "field param {k}: {} vs {fd}",
                grads.field[k]
            );
        }
        // Adapter parameters (subset).
        for _ in 0..30 {
            let k = rng.gen_range(0..adapter.params.len());
            let mut ap = adapter.clone();
            let mut am = adapter.clone();
            ap.params[k] += h;
            am.params[k] -= h;
            let fd = (total(&state, &ap, &cameras) - total(&state, &am, &cameras)) / (2.0 * h);
            let denom = grads.adapter[k].abs().max(fd.abs()).max(1e-2);
            assert!(
                ((grads.adapter[k] - fd) / denom).abs() < 1e-4,
                "adapter param {k}: {} vs {fd}",
                grads.adapter[k]
            );
        }
        // Camera residuals: the rendered view's camera and a reg-only one.
        for cam_idx in 0..cameras.len() {
            for k in 0..PARAM_DIM {
                let mut cp = cameras.to_vec();
                let mut cm = cameras.to_vec();
                cp[cam_idx].delta_phi[k] += h;
                cm[cam_idx].delta_phi[k] -= h;
                let fd = (total(&state, &adapter, &cp) - total(&state, &adapter, &cm)) / (2.0 * h);
                let got = grads.cameras[cam_idx][k];
                let denom = got.abs().max(fd.abs()).max(1e-2);
                assert!(
                    ((got - fd) / denom).abs() < 1e-4,
                    "camera {cam_idx} residual {k}: {got} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn refinement_loss_requires_a_patch_batch() {
        let (state, adapter, ds) = tiny_setup();
        let cameras = ds.cameras().to_vec();
        let batch = RayBatch::scattered(&ds, 0, vec![(0, 0), (3, 5), (7, 7)]).unwrap();
        let w = LossWeights::new(0.8, 0.2, 0.0).unwrap();
        let err = evaluate_losses(&state, &adapter, &cameras, &batch, &w, &tiny_cfg(), 0);
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
