//! Cross-view mask consolidation by geometric reprojection.
//!
//! Each view's positive pixels are lifted to 3D at the field's expected ray
//! termination depth, pooled, and reprojected into every view. The
//! reprojected footprint is closed (dilated then eroded, radius 1) to fill
//! sampling gaps, and unioned with the original mask — so consolidation never
//! shrinks a mask, and geometry-consistent masks are a fixed point.

use nalgebra::Vector3;

use super::{kmedoids_query_points, Mask};
use crate::camera::project_points;
use crate::error::{Error, Result};
use crate::field::{generate_rays, shade_ray, FieldState, RenderConfig};
use crate::scene::SceneDataset;

fn dilate(map: &ndarray::Array2<u8>) -> ndarray::Array2<u8> {
    let (h, w) = map.dim();
    ndarray::Array2::from_shape_fn((h, w), |(r, c)| {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                    if map[(rr as usize, cc as usize)] == 1 {
                        return 1;
                    }
                }
            }
        }
        0
    })
}

fn erode(map: &ndarray::Array2<u8>) -> ndarray::Array2<u8> {
    let (h, w) = map.dim();
    ndarray::Array2::from_shape_fn((h, w), |(r, c)| {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                    if map[(rr as usize, cc as usize)] == 0 {
                        return 0;
                    }
                } else {
                    // Treat out-of-frame as positive so edge pixels survive.
                }
            }
        }
        1
    })
}

/// Number of query points ordered first when pooling a view's lifted pixels.
const QUERY_POINTS: usize = 8;

/// Consolidate per-view masks into cross-view-consistent ones.
///
/// Pixels whose rays accumulate (almost) no weight have undefined depth and
/// are skipped, as are pooled points that fall behind a camera.
pub fn consolidate_masks(
    masks: &[Mask],
    scene: &SceneDataset,
    field: &FieldState,
    render: &RenderConfig,
    seed: u64,
) -> Result<Vec<Mask>> {
    if masks.len() <= 1 {
        return Ok(masks.to_vec());
    }
    if masks.len() != scene.n_views() {
        return Err(Error::validation(format!(
            "{} masks for {} views",
            masks.len(),
            scene.n_views()
        )));
    }
    let shape = scene.latent_shape();
    for (i, m) in masks.iter().enumerate() {
        if m.data.dim() != shape {
            return Err(Error::validation(format!(
                "mask {i} has shape {:?}, expected {shape:?}",
                m.data.dim()
            )));
        }
    }

    // Lift every positive pixel of every view; medoid query points first so
    // the pooled order favors well-spread representatives.
    let mut pooled: Vec<Vector3<f64>> = Vec::new();
    for (view, mask) in masks.iter().enumerate() {
        let positives: Vec<(usize, usize)> = {
            let mut px = Vec::new();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    if mask.data[(r, c)] == 1 {
                        px.push((r, c));
                    }
                }
            }
            px
        };
        if positives.is_empty() {
            continue;
        }
        let medoids = kmedoids_query_points(
            mask,
            QUERY_POINTS.min(positives.len()),
            crate::rng::derive_seed(seed, 0x6d65646f, view as u64),
        )?;
        let mut ordered = medoids.clone();
        for p in positives {
            if !medoids.contains(&p) {
                ordered.push(p);
            }
        }

        let camera = scene.camera(view);
        let rays = generate_rays(camera, &ordered, shape)?;
        for (i, ray) in rays.iter().enumerate() {
            let shade = shade_ray(field, ray, render, i as u64)?;
            if let Some(depth) = shade.expected_depth() {
                pooled.push(ray.origin + ray.direction * depth);
            }
        }
    }

    // Reproject the pooled set into every view.
    let mut out = Vec::with_capacity(masks.len());
    for (view, mask) in masks.iter().enumerate() {
        let camera = scene.camera(view);
        let mut footprint = ndarray::Array2::zeros(shape);
        for p in &pooled {
            let uv = match project_points(camera, std::slice::from_ref(p)) {
                Ok(uv) => uv,
                Err(Error::Projection { .. }) => continue,
                Err(e) => return Err(e),
            };
            let col = (uv[0] - 0.5).round();
            let row = (uv[1] - 0.5).round();
            if row >= 0.0 && col >= 0.0 && (row as usize) < shape.0 && (col as usize) < shape.1 {
                footprint[(row as usize, col as usize)] = 1;
            }
        }
        let closed = erode(&dilate(&footprint));
        let mut data = mask.data.clone();
        for (a, &b) in data.iter_mut().zip(closed.iter()) {
            *a = (*a | b) & 1;
        }
        out.push(Mask {
            data,
            threshold_used: mask.threshold_used,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldArch;
    use crate::scene::synth::{synth_scene, SceneSpec};
    use ndarray::Array2;

    #[test]
    fn single_mask_slice_is_returned_unchanged() {
        let ds = synth_scene(&SceneSpec::named("box", 2, 8, 8).unwrap(), 0).unwrap();
        let field = FieldState::constant(FieldArch::new(2, 1, vec![8, 6]).unwrap(), [0.0; 4], 3.0);
        let mask = Mask::from_map(Array2::ones((8, 8)), 0.45).unwrap();
        let out = consolidate_masks(
            &[mask.clone()],
            &ds,
            &field,
            &RenderConfig {
                samples_per_ray: 8,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].data, mask.data);
    }

    #[test]
    fn consolidation_never_shrinks_masks() {
        let ds = synth_scene(&SceneSpec::named("box", 3, 10, 10).unwrap(), 2).unwrap();
        // A crude constant-density field: depths will be wrong, union
        // semantics must still hold.
        let field = FieldState::constant(FieldArch::new(2, 1, vec![8, 6]).unwrap(), [0.1; 4], 2.0);
        let masks: Vec<Mask> = (0..3)
            .map(|v| {
                Mask::from_map(
                    Array2::from_shape_fn((10, 10), |(r, c)| u8::from(r > v && c < 5)),
                    0.45,
                )
                .unwrap()
            })
            .collect();
        let out = consolidate_masks(
            &masks,
            &ds,
            &field,
            &RenderConfig {
                samples_per_ray: 12,
                ..Default::default()
            },
            7,
        )
        .unwrap();
        for (after, before) in out.iter().zip(&masks) {
            assert!(after.contains(before), "consolidation must not shrink");
            assert!(after.data.iter().all(|&v| v == 0 || v == 1));
        }
    }

    #[test]
    fn morphology_closing_fills_isolated_gaps_without_growth() {
        let mut map = Array2::ones((8, 8));
        map[(4, 4)] = 0; // isolated hole
        let closed = erode(&dilate(&map));
        assert_eq!(closed[(4, 4)], 1);

        let mut rect = Array2::zeros((8, 8));
        for r in 2..6 {
            for c in 2..6 {
                rect[(r, c)] = 1;
            }
        }
        let closed = erode(&dilate(&rect));
        assert_eq!(closed, rect, "closing must not grow a solid rectangle");
    }
}
