//! Synthetic scenes with closed-form renders, used as training targets and
//! test oracles.
//!
//! The `"box"` scene is a constant-density axis-aligned box with
//! region-tagged latent colors: latents inside the top slab (`z >= 0.1`)
//! differ from the rest of the box. Cameras sit on a jittered ring looking at
//! the origin. Because the medium is piecewise constant along any ray, the
//! volume rendering integral has an exact segment-wise closed form, so the
//! dataset's latent maps are analytic ground truth rather than approximations.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use rand::Rng;

use super::{LatentImage, SceneDataset};
use crate::camera::CameraParams;
use crate::error::{Error, Result};
use crate::rng::{self, tags};

/// Box extent (axis-aligned, centered).
pub const BOX_MIN: f64 = -0.5;
pub const BOX_MAX: f64 = 0.5;
/// The tagged edit region is the slab `z >= REGION_Z` inside the box.
pub const REGION_Z: f64 = 0.1;
/// Constant density inside the box. Full-box transmittance is
/// `exp(-8) ~ 3e-4` (opaque), while `sigma * delta` stays near 1 for
/// desk-scale sample counts, keeping the medium well-resolved by quadrature.
pub const SIGMA: f64 = 8.0;
/// Minimum chord length for a pixel to count as seeing the region.
pub const CHORD_MIN: f64 = 0.02;

/// Latent color outside the tagged region.
pub const BASE_LATENT: [f64; 4] = [0.55, 0.35, 0.45, 0.25];
/// Latent color inside the tagged region.
pub const TAG_LATENT: [f64; 4] = [0.25, 0.65, 0.15, 0.55];

const RING_RADIUS: f64 = 2.2;
const RING_ELEVATION: f64 = 0.9;

/// Description of a synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub name: String,
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
}

impl SceneSpec {
    pub fn named(name: &str, n_views: usize, height: usize, width: usize) -> Result<Self> {
        if name != "box" {
            return Err(Error::config(format!("unknown scene spec {name:?}")));
        }
        Ok(SceneSpec {
            name: name.to_string(),
            n_views,
            height,
            width,
        })
    }
}

/// Density and latent color of the box medium at a world point.
pub fn medium_at(p: &Vector3<f64>) -> (f64, [f64; 4]) {
    let inside = (BOX_MIN..=BOX_MAX).contains(&p.x)
        && (BOX_MIN..=BOX_MAX).contains(&p.y)
        && (BOX_MIN..=BOX_MAX).contains(&p.z);
    if !inside {
        (0.0, [0.0; 4])
    } else if p.z >= REGION_Z {
        (SIGMA, TAG_LATENT)
    } else {
        (SIGMA, BASE_LATENT)
    }
}

/// Slab intersection of a ray with the box; `None` when the ray misses.
pub fn box_intersection(o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let (oa, da) = (o[axis], d[axis]);
        if da.abs() < 1e-15 {
            if oa < BOX_MIN || oa > BOX_MAX {
                return None;
            }
        } else {
            let a = (BOX_MIN - oa) / da;
            let b = (BOX_MAX - oa) / da;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t1 > t0).then_some((t0, t1))
}

/// Exact render of the box medium along one ray over `[t_near, t_far]`.
pub fn analytic_render_ray(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    t_near: f64,
    t_far: f64,
    background: [f64; 4],
) -> [f64; 4] {
    let mut out = [0.0; 4];
    let mut transmittance = 1.0;
    if let Some((bt0, bt1)) = box_intersection(o, d) {
        let seg0 = bt0.max(t_near);
        let seg1 = bt1.min(t_far);
        if seg1 > seg0 {
            // Split at the region plane when the ray crosses it inside the box.
            let mut cuts = vec![seg0, seg1];
            if d.z.abs() > 1e-15 {
                let tz = (REGION_Z - o.z) / d.z;
                if tz > seg0 && tz < seg1 {
                    cuts.insert(1, tz);
                }
            }
            for pair in cuts.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let mid = o + d * (0.5 * (a + b));
                let (_, color) = medium_at(&mid);
                let absorb = 1.0 - (-(SIGMA) * (b - a)).exp();
                for c in 0..4 {
                    out[c] += transmittance * absorb * color[c];
                }
                transmittance *= (-(SIGMA) * (b - a)).exp();
            }
        }
    }
    for c in 0..4 {
        out[c] += transmittance * background[c];
    }
    out
}

/// Whether the pixel's ray sees the tagged region: the box chord must be at
/// least [`CHORD_MIN`] long and the entry point must lie in the slab.
pub fn region_visible(o: &Vector3<f64>, d: &Vector3<f64>, t_near: f64, t_far: f64) -> bool {
    match box_intersection(o, d) {
        Some((bt0, bt1)) => {
            let a = bt0.max(t_near);
            let b = bt1.min(t_far);
            if b - a < CHORD_MIN {
                return false;
            }
            let entry = o + d * a;
            entry.z >= REGION_Z
        }
        None => false,
    }
}

fn look_at_camera(center: Vector3<f64>, focal: f64, principal: [f64; 2]) -> Result<CameraParams> {
    let forward = (-center).normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let x_c = forward.cross(&up).normalize();
    let y_c = forward.cross(&x_c);
    let rotation = Matrix3::from_columns(&[x_c, y_c, forward]);
    CameraParams::new(rotation, center, [focal, focal], principal, [0.0, 0.0])
}

/// Generate a synthetic scene. Pure function of `(spec, seed)`.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<SceneDataset> {
    if spec.name != "box" {
        return Err(Error::config(format!("unknown scene spec {:?}", spec.name)));
    }
    let (h, w) = (spec.height, spec.width);
    if h < 1 || w < 1 {
        return Err(Error::validation("scene resolution must be at least 1x1"));
    }

    let n = spec.n_views;
    let mut latents = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    for k in 0..n {
        let mut jitter = rng::stream(seed, tags::SCENE_CAMERA_JITTER, k as u64);
        let angle = std::f64::consts::TAU * k as f64 / n.max(1) as f64
            + jitter.gen_range(-0.05..0.05);
        let elevation = RING_ELEVATION + jitter.gen_range(-0.08..0.08);
        let center = Vector3::new(
            RING_RADIUS * angle.cos(),
            RING_RADIUS * angle.sin(),
            elevation,
        );
        let camera = look_at_camera(
            center,
            w as f64,
            [w as f64 / 2.0, h as f64 / 2.0],
        )?;
        let (t_near, t_far) = camera.ray_bounds();
        let pose = camera.effective_pose();

        let mut data = Array3::zeros((h, w, 4));
        let mut region = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let (o, d) = pose.pixel_ray(r, c);
                let px = analytic_render_ray(&o, &d, t_near, t_far, [0.0; 4]);
                for ch in 0..4 {
                    data[(r, c, ch)] = px[ch];
                }
                region[(r, c)] = u8::from(region_visible(&o, &d, t_near, t_far));
            }
        }
        latents.push(LatentImage::new(data, k)?);
        cameras.push(camera);
        regions.push(region);
    }

    let mut ds = SceneDataset::new(latents, cameras, Some(regions))?;
    ds.bounding_box = ([BOX_MIN; 3], [BOX_MAX; 3]);
    Ok(ds)
}
