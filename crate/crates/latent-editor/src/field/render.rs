//! Ray generation and latent volume rendering.
//!
//! Rendering quadrature: `S` midpoint (optionally stratified) samples per
//! ray, weights `w_i = T_i (1 - exp(-sigma_i d_i))` with transmittance
//! `T_i = exp(-sum_{j<i} sigma_j d_j)`, composited over the field's latent
//! output with the remainder going to a background latent.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

use super::mlp::{FieldState, Trace};
use crate::camera::CameraParams;
use crate::error::{Error, Result};
use crate::refine::AdapterWeights;
use crate::rng::{self, tags};
use crate::scene::LatentImage;

/// A world-space ray with frozen near/far bounds.
#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction (within 1e-6).
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::validation("ray direction must be unit length"));
        }
        if !(t_near < t_far) {
            return Err(Error::validation("ray needs t_near < t_far"));
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }
}

/// Quadrature settings for [`render_ray`] and friends.
#[derive(Debug, Clone)]
pub struct RenderConfig {
    /// Samples per ray (at least 2).
    pub samples_per_ray: usize,
    pub background_latent: [f64; 4],
    /// Jitter sample positions within their segments.
    pub stratified: bool,
    /// Seed for stratified jitter, mixed with the per-ray index.
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            background_latent: [0.0; 4],
            stratified: false,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::validation("samples_per_ray must be at least 2"));
        }
        if !self.background_latent.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("background latent must be finite"));
        }
        Ok(())
    }
}

/// One ray per requested latent pixel, through the pixel center, using the
/// camera's current effective pose. Intrinsics must already be at latent
/// resolution ([`CameraParams::to_latent_resolution`] divides them by the
/// codec downscale factor when a scene was encoded from images).
pub fn generate_rays(
    camera: &CameraParams,
    pixels: &[(usize, usize)],
    latent_shape: (usize, usize),
) -> Result<Vec<Ray>> {
    let (h, w) = latent_shape;
    let pose = camera.effective_pose();
    let (t_near, t_far) = camera.ray_bounds();
    let mut rays = Vec::with_capacity(pixels.len());
    for &(row, col) in pixels {
        if row >= h || col >= w {
            return Err(Error::validation(format!(
                "pixel ({row},{col}) outside latent resolution {h}x{w}"
            )));
        }
        let (origin, dir) = pose.pixel_ray(row, col);
        rays.push(Ray::new(origin, dir, t_near, t_far)?);
    }
    Ok(rays)
}

/// Every pixel of an `(h, w)` latent map in row-major order.
pub fn all_pixels(shape: (usize, usize)) -> Vec<(usize, usize)> {
    let (h, w) = shape;
    let mut px = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            px.push((r, c));
        }
    }
    px
}

/// Sample depths along a ray: segment midpoints, or stratified positions
/// seeded per `(cfg.seed, ray_index)`.
pub fn sample_depths(ray: &Ray, cfg: &RenderConfig, ray_index: u64) -> Vec<f64> {
    let s = cfg.samples_per_ray;
    let delta = (ray.t_far - ray.t_near) / s as f64;
    if cfg.stratified {
        let mut rng = rng::stream(cfg.seed, tags::TRAIN_STRATIFIED, ray_index);
        (0..s)
            .map(|i| ray.t_near + (i as f64 + rng.gen_range(0.0..1.0)) * delta)
            .collect()
    } else {
        (0..s)
            .map(|i| ray.t_near + (i as f64 + 0.5) * delta)
            .collect()
    }
}

/// Forward compositing result with enough detail kept for depth queries.
#[derive(Debug, Clone)]
pub struct RayShade {
    pub value: [f64; 4],
    pub weights: Vec<f64>,
    /// Transmittance after each sample (`T_{i+1}`).
    pub trans_next: Vec<f64>,
    pub depths: Vec<f64>,
    pub weight_sum: f64,
}

impl RayShade {
    /// Expected termination depth `sum(w t) / sum(w)`; `None` when the ray
    /// accumulated (almost) no weight.
    pub fn expected_depth(&self) -> Option<f64> {
        if self.weight_sum <= 1e-9 {
            return None;
        }
        let num: f64 = self
            .weights
            .iter()
            .zip(&self.depths)
            .map(|(w, t)| w * t)
            .sum();
        Some(num / self.weight_sum)
    }
}

pub(crate) fn composite(
    sigmas: &[f64],
    zs: &[[f64; 4]],
    delta: f64,
    background: [f64; 4],
    depths: &[f64],
) -> RayShade {
    let mut value = [0.0; 4];
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut trans_next = Vec::with_capacity(sigmas.len());
    let mut transmittance = 1.0;
    let mut weight_sum = 0.0;
    for (i, &sigma) in sigmas.iter().enumerate() {
        let att = (-sigma * delta).exp();
        let w = transmittance * (1.0 - att);
        transmittance *= att;
        weight_sum += w;
        for c in 0..4 {
            value[c] += w * zs[i][c];
        }
        weights.push(w);
        trans_next.push(transmittance);
    }
    for c in 0..4 {
        value[c] += (1.0 - weight_sum) * background[c];
    }
    RayShade {
        value,
        weights,
        trans_next,
        depths: depths.to_vec(),
        weight_sum,
    }
}

/// Gradients of `g . composite(...)` with respect to per-sample densities and
/// latents.
pub(crate) fn composite_backward(
    shade: &RayShade,
    zs: &[[f64; 4]],
    delta: f64,
    background: [f64; 4],
    g: [f64; 4],
) -> (Vec<f64>, Vec<[f64; 4]>) {
    let n = shade.weights.len();
    let bg_dot: f64 = background.iter().zip(&g).map(|(a, b)| a * b).sum();
    let a_dot: Vec<f64> = zs
        .iter()
        .map(|z| z.iter().zip(&g).map(|(a, b)| a * b).sum())
        .collect();
    // Suffix sums of w_k (A_k - B) for k > i.
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + shade.weights[i] * (a_dot[i] - bg_dot);
    }
    let mut d_sigma = Vec::with_capacity(n);
    let mut d_z = Vec::with_capacity(n);
    for i in 0..n {
        d_sigma.push(delta * (shade.trans_next[i] * (a_dot[i] - bg_dot) - suffix[i + 1]));
        let mut dz = [0.0; 4];
        for c in 0..4 {
            dz[c] = shade.weights[i] * g[c];
        }
        d_z.push(dz);
    }
    (d_sigma, d_z)
}

/// Per-ray forward pass with kept traces, for training backprop.
pub(crate) struct RayForward {
    pub depths: Vec<f64>,
    pub traces: Vec<Trace>,
    pub shade: RayShade,
}

pub(crate) fn forward_ray_traced(
    state: &FieldState,
    ray: &Ray,
    cfg: &RenderConfig,
    ray_index: u64,
) -> RayForward {
    let depths = sample_depths(ray, cfg, ray_index);
    let delta = (ray.t_far - ray.t_near) / cfg.samples_per_ray as f64;
    let v = [ray.direction.x, ray.direction.y, ray.direction.z];
    let mut traces = Vec::with_capacity(depths.len());
    let mut sigmas = Vec::with_capacity(depths.len());
    let mut zs = Vec::with_capacity(depths.len());
    for &t in &depths {
        let p = ray.origin + ray.direction * t;
        let mut trace = Trace::default();
        state.arch.forward(&state.params, [p.x, p.y, p.z], v, &mut trace);
        sigmas.push(trace.sigma);
        zs.push(trace.z);
        traces.push(trace);
    }
    let shade = composite(&sigmas, &zs, delta, cfg.background_latent, &depths);
    RayForward {
        depths,
        traces,
        shade,
    }
}

/// Render one ray to a 4-vector.
pub fn render_ray(state: &FieldState, ray: &Ray, cfg: &RenderConfig) -> Result<[f64; 4]> {
    Ok(shade_ray(state, ray, cfg, 0)?.value)
}

/// Render one ray keeping weights and depths (for termination-depth queries).
pub fn shade_ray(
    state: &FieldState,
    ray: &Ray,
    cfg: &RenderConfig,
    ray_index: u64,
) -> Result<RayShade> {
    cfg.validate()?;
    state.validate()?;
    let depths = sample_depths(ray, cfg, ray_index);
    let delta = (ray.t_far - ray.t_near) / cfg.samples_per_ray as f64;
    let v = [ray.direction.x, ray.direction.y, ray.direction.z];
    let mut sigmas = Vec::with_capacity(depths.len());
    let mut zs = Vec::with_capacity(depths.len());
    let mut trace = Trace::default();
    for &t in &depths {
        let p = ray.origin + ray.direction * t;
        state
            .arch
            .forward(&state.params, [p.x, p.y, p.z], v, &mut trace);
        sigmas.push(trace.sigma);
        zs.push(trace.z);
    }
    Ok(composite(&sigmas, &zs, delta, cfg.background_latent, &depths))
}

/// Render a full latent view; when an adapter is given, refine the rendered
/// map with it.
pub fn render_view(
    state: &FieldState,
    adapter: Option<&AdapterWeights>,
    camera: &CameraParams,
    cfg: &RenderConfig,
    latent_shape: (usize, usize),
    view_id: usize,
) -> Result<LatentImage> {
    cfg.validate()?;
    state.validate()?;
    let pixels = all_pixels(latent_shape);
    let rays = generate_rays(camera, &pixels, latent_shape)?;
    let shades: Vec<[f64; 4]> = rays
        .par_iter()
        .enumerate()
        .map(|(i, ray)| shade_ray(state, ray, cfg, i as u64).map(|s| s.value))
        .collect::<Result<_>>()?;
    let (h, w) = latent_shape;
    let mut data = ndarray::Array3::zeros((h, w, 4));
    for (i, px) in shades.iter().enumerate() {
        let (r, c) = pixels[i];
        for ch in 0..4 {
            data[(r, c, ch)] = px[ch];
        }
    }
    let raw = LatentImage::new(data, view_id)?;
    match adapter {
        Some(w) => crate::refine::adapter_forward(w, &raw),
        None => Ok(raw),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::mlp::{softplus, FieldArch};
    use nalgebra::Matrix3;

    fn test_camera(principal: [f64; 2]) -> CameraParams {
        CameraParams::new(
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, -2.2),
            [48.0, 48.0],
            principal,
            [0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn principal_pixel_ray_is_the_forward_axis() {
        // Principal point at the center of pixel (2, 3).
        let cam = test_camera([3.5, 2.5]);
        let rays = generate_rays(&cam, &[(2, 3)], (8, 8)).unwrap();
        let forward = Vector3::new(0.0, 0.0, 1.0);
        assert!((rays[0].direction - forward).norm() < 1e-12);
        assert_eq!(rays[0].origin, Vector3::new(0.0, 0.0, -2.2));
    }

    #[test]
    fn full_latent_view_ray_count_and_unit_norms() {
        let cam = test_camera([20.0, 32.0]);
        let pixels = all_pixels((64, 40));
        let rays = generate_rays(&cam, &pixels, (64, 40)).unwrap();
        assert_eq!(rays.len(), 2560);
        for ray in &rays {
            assert!((ray.direction.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_pixel_is_rejected() {
        let cam = test_camera([4.0, 4.0]);
        assert!(generate_rays(&cam, &[(8, 0)], (8, 8)).is_err());
        assert!(generate_rays(&cam, &[(0, 9)], (8, 9)).is_err());
    }

    fn unit_ray() -> Ray {
        Ray::new(
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(0.0, 0.0, 1.0),
            0.25,
            1.75,
        )
        .unwrap()
    }

    #[test]
    fn zero_density_returns_background_exactly() {
        let state = FieldState::constant(FieldArch::default(), [3.0, -1.0, 0.5, 2.0], -1e4);
        let cfg = RenderConfig {
            samples_per_ray: 16,
            background_latent: [0.25, -0.5, 1.5, 4.0],
            ..Default::default()
        };
        let out = render_ray(&state, &unit_ray(), &cfg).unwrap();
        assert_eq!(out, cfg.background_latent);
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        let sigma: f64 = 1.3;
        let z_c = [0.8, -0.4, 0.2, 1.1];
        // softplus(b) = sigma  =>  b = ln(e^sigma - 1)
        let b = (sigma.exp() - 1.0).ln();
        let state = FieldState::constant(FieldArch::default(), z_c, b);
        let ray = unit_ray();
        let cfg = RenderConfig {
            samples_per_ray: 256,
            ..Default::default()
        };
        let got = render_ray(&state, &ray, &cfg).unwrap();
        let opacity = 1.0 - (-(softplus(b)) * (ray.t_far - ray.t_near)).exp();
        for c in 0..4 {
            assert!(
                (got[c] - z_c[c] * opacity).abs() < 1e-3,
                "channel {c}: {} vs {}",
                got[c],
                z_c[c] * opacity
            );
        }
    }

    #[test]
    fn weights_stay_in_unit_interval_and_transmittance_decreases() {
        let state = FieldState::init(FieldArch::new(3, 1, vec![12, 8]).unwrap(), 5);
        let cfg = RenderConfig {
            samples_per_ray: 32,
            ..Default::default()
        };
        for i in 0..10u64 {
            let dir = Vector3::new(0.3, 0.1 * i as f64 - 0.5, 1.0).normalize();
            let ray = Ray::new(Vector3::new(0.0, 0.0, -2.0), dir, 0.5, 3.0).unwrap();
            let shade = shade_ray(&state, &ray, &cfg, i).unwrap();
            assert!(shade.weight_sum >= 0.0 && shade.weight_sum <= 1.0 + 1e-9);
            let mut prev = 1.0;
            for (w, t) in shade.weights.iter().zip(&shade.trans_next) {
                assert!(*w >= 0.0);
                assert!(*t <= prev + 1e-12, "transmittance must not increase");
                prev = *t;
            }
        }
    }

    #[test]
    fn render_is_linear_in_the_latent_head() {
        let arch = FieldArch::new(3, 1, vec![12, 8]).unwrap();
        let mut state = FieldState::init(arch.clone(), 9);
        let cfg = RenderConfig {
            samples_per_ray: 16,
            background_latent: [0.3, 0.3, 0.3, 0.3],
            ..Default::default()
        };
        let ray = unit_ray();
        let base = shade_ray(&state, &ray, &cfg, 0).unwrap();

        // Scale the latent head (last layer) parameters by alpha.
        let alpha = 2.75;
        let n = state.params.len();
        let head = 8 * 4 + 4; // dir width 8 -> 4 channels + biases
        for p in state.params[n - head..].iter_mut() {
            *p *= alpha;
        }
        let scaled = shade_ray(&state, &ray, &cfg, 0).unwrap();
        for c in 0..4 {
            let body = base.value[c] - (1.0 - base.weight_sum) * cfg.background_latent[c];
            let body_scaled =
                scaled.value[c] - (1.0 - scaled.weight_sum) * cfg.background_latent[c];
            assert!(
                (body_scaled - alpha * body).abs() < 1e-10,
                "channel {c}: {body_scaled} vs {}",
                alpha * body
            );
        }
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = crate::rng::stream(4, 0x7777, 0);
        use rand::Rng;
        let n = 6;
        let delta = 0.21;
        let bg = [0.2, -0.1, 0.4, 0.05];
        let g = [0.7, -0.3, 0.5, 1.1];
        let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let zs: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let depths: Vec<f64> = (0..n).map(|i| i as f64 * delta).collect();
        let shade = composite(&sigmas, &zs, delta, bg, &depths);
        let (d_sigma, d_z) = composite_backward(&shade, &zs, delta, bg, g);

        let f = |sig: &[f64], zz: &[[f64; 4]]| -> f64 {
            let s = composite(sig, zz, delta, bg, &depths);
            s.value.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..n {
            let mut sp = sigmas.clone();
            let mut sm = sigmas.clone();
            sp[i] += h;
            sm[i] -= h;
            let fd = (f(&sp, &zs) - f(&sm, &zs)) / (2.0 * h);
            assert!(
                (d_sigma[i] - fd).abs() < 1e-7,
                "sigma {i}: {} vs {fd}",
                d_sigma[i]
            );
            for c in 0..4 {
                let mut zp = zs.clone();
                let mut zm = zs.clone();
                zp[i][c] += h;
                zm[i][c] -= h;
                let fd = (f(&sigmas, &zp) - f(&sigmas, &zm)) / (2.0 * h);
                assert!((d_z[i][c] - fd).abs() < 1e-7, "z {i}.{c}");
            }
        }
    }
}
