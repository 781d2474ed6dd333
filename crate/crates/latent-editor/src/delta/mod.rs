//! Prompt-aware pixel scoring: delta scores from conditional vs
//! unconditional denoiser predictions, thresholded binary masks, and their
//! consolidation across views.

pub mod consolidate;
pub mod kmedoids;

use ndarray::{Array2, Array3};

use crate::diffusion::{add_noise, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scene::{LatentImage, RegionMap};

pub use consolidate::consolidate_masks;
pub use kmedoids::kmedoids_query_points;

/// Per-pixel absolute differences between text-conditional and
/// text-unconditional noise predictions at the schedule's `delta_t` level.
#[derive(Debug, Clone)]
pub struct DeltaScores {
    /// Non-negative `(H', W', 4)` score tensor.
    pub data: Array3<f64>,
    pub view_id: usize,
    pub delta_t_used: f64,
}

/// Binary edit mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    /// Entries are exactly 0 or 1.
    pub data: Array2<u8>,
    pub threshold_used: f64,
}

impl Mask {
    pub fn from_map(data: RegionMap, threshold_used: f64) -> Result<Mask> {
        if !data.iter().all(|&v| v == 0 || v == 1) {
            return Err(Error::validation("mask entries must be 0 or 1"));
        }
        Ok(Mask {
            data,
            threshold_used,
        })
    }

    pub fn zeros(shape: (usize, usize)) -> Mask {
        Mask {
            data: Array2::zeros(shape),
            threshold_used: f64::NAN,
        }
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    pub fn contains(&self, other: &Mask) -> bool {
        self.data
            .iter()
            .zip(other.data.iter())
            .all(|(&a, &b)| b == 0 || a == 1)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = (*a | b) & 1;
        }
    }

    /// Intersection-over-union against a reference binary map.
    pub fn iou(&self, reference: &RegionMap) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(reference.iter()) {
            let (a, b) = (a == 1, b == 1);
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Compute delta scores for one view: noise the latents once to `delta_t`,
/// hand the injected noise to oracle backends, then score the two
/// image-conditioned calls (with and without the text condition) against the
/// *same* noisy input.
pub fn delta_scores(
    d: &dyn Denoiser,
    z: &LatentImage,
    image_cond: Option<&LatentImage>,
    text_cond: &str,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<DeltaScores> {
    let (z_dt, eps) = add_noise(z, sched.delta_t, sched, seed)?;
    d.note_injected_noise(&eps);
    let t = sched.index_for(sched.delta_t)?;
    let with_text = d.eps(&z_dt, t, image_cond, Some(text_cond))?;
    let without_text = d.eps(&z_dt, t, image_cond, None)?;
    let data = ndarray::Zip::from(&with_text.data)
        .and(&without_text.data)
        .map_collect(|&a, &b| (a - b).abs());
    Ok(DeltaScores {
        data,
        view_id: z.view_id,
        delta_t_used: sched.delta_t,
    })
}

/// Threshold delta scores into a binary mask.
///
/// The 4-channel scores are reduced to their channel mean and normalized per
/// view to `[0, 1]` before comparing against `mu`. Degenerate score maps
/// resolve by signal presence: an all-zero map (no prompt response anywhere)
/// yields the empty mask, a uniform positive map (the prompt touches every
/// pixel) yields the full mask.
pub fn threshold_mask(scores: &DeltaScores, mu: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::validation(format!("mu must be in [0,1], got {mu}")));
    }
    let (h, w, _) = scores.data.dim();
    let mut mean = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let s: f64 = (0..4).map(|ch| scores.data[(r, c, ch)]).sum();
            mean[(r, c)] = s / 4.0;
        }
    }
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Score maps that are uniform up to floating-point noise carry no spatial
    // signal to normalize.
    let uniform = hi - lo <= 1e-9 * hi.abs();
    let data = if !uniform && hi > lo {
        Array2::from_shape_fn((h, w), |(r, c)| {
            u8::from((mean[(r, c)] - lo) / (hi - lo) >= mu)
        })
    } else if hi > 0.0 {
        Array2::ones((h, w))
    } else {
        Array2::zeros((h, w))
    };
    Ok(Mask {
        data,
        threshold_used: mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::backends::{IdentityDenoiser, OracleEditDenoiser};
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::rng;
    use rand::Rng;

    fn sched() -> NoiseSchedule {
        make_schedule(1000, ScheduleKind::ScaledLinear, 0.02, 0.98, 0.75).unwrap()
    }

    fn random_latent(h: usize, w: usize, seed: u64) -> LatentImage {
        let mut r = rng::stream(seed, 0x2001, 0);
        LatentImage::new(
            Array3::from_shape_fn((h, w, 4), |_| r.gen_range(-1.0..1.0)),
            0,
        )
        .unwrap()
    }

    fn rect_region(h: usize, w: usize, r0: usize, c0: usize, rh: usize, rw: usize) -> RegionMap {
        Array2::from_shape_fn((h, w), |(r, c)| {
            u8::from(r >= r0 && r < r0 + rh && c >= c0 && c < c0 + rw)
        })
    }

    #[test]
    fn identical_predictions_give_zero_scores_and_an_empty_mask() {
        let z = random_latent(8, 8, 1);
        let backend = IdentityDenoiser::new();
        let scores = delta_scores(&backend, &z, Some(&z), "prompt", &sched(), 3).unwrap();
        assert!(scores.data.iter().all(|&v| v == 0.0));
        let mask = threshold_mask(&scores, 0.45).unwrap();
        assert_eq!(mask.area(), 0);
    }

    #[test]
    fn oracle_scores_are_exactly_the_scaled_direction_inside_the_region() {
        let region = rect_region(8, 10, 2, 3, 4, 5);
        let dvec = [0.5, -0.5, 0.5, -0.5];
        let a = 0.9;
        let backend = OracleEditDenoiser::with_region(region.clone(), dvec, a).unwrap();
        let z = random_latent(8, 10, 2);
        let scores = delta_scores(&backend, &z, Some(&z), "prompt", &sched(), 5).unwrap();
        assert!((scores.delta_t_used - 0.75).abs() < 1e-15);
        for r in 0..8 {
            for c in 0..10 {
                for ch in 0..4 {
                    let want = if region[(r, c)] == 1 {
                        a * dvec[ch].abs()
                    } else {
                        0.0
                    };
                    // Outside the region the two predictions are literally the
                    // same tensor, so the difference is exactly zero; inside,
                    // the subtraction reassociates, costing an ulp.
                    let got = scores.data[(r, c, ch)];
                    if want == 0.0 {
                        assert_eq!(got, 0.0, "({r},{c},{ch})");
                    } else {
                        assert!((got - want).abs() < 1e-12, "({r},{c},{ch}): {got} vs {want}");
                    }
                }
            }
        }
        let mask = threshold_mask(&scores, 0.45).unwrap();
        assert_eq!(mask.iou(&region), 1.0);
        assert!(scores.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn threshold_monotonicity_and_argmax_level_set() {
        let mut r = rng::stream(7, 0x2002, 0);
        let scores = DeltaScores {
            data: Array3::from_shape_fn((6, 6, 4), |_| r.gen_range(0.0..1.0)),
            view_id: 0,
            delta_t_used: 0.75,
        };
        let mut prev = threshold_mask(&scores, 0.0).unwrap();
        for k in 1..=9 {
            let mu = k as f64 / 10.0;
            let cur = threshold_mask(&scores, mu).unwrap();
            assert!(prev.contains(&cur), "mask(mu={mu}) must shrink");
            prev = cur;
        }

        let top = threshold_mask(&scores, 1.0).unwrap();
        // Exactly the argmax-level set of the channel mean.
        let mut mean = Array2::zeros((6, 6));
        for rr in 0..6 {
            for cc in 0..6 {
                mean[(rr, cc)] = (0..4).map(|ch| scores.data[(rr, cc, ch)]).sum::<f64>() / 4.0;
            }
        }
        let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for rr in 0..6 {
            for cc in 0..6 {
                assert_eq!(top.data[(rr, cc)] == 1, mean[(rr, cc)] == hi);
            }
        }
    }

    #[test]
    fn degenerate_score_maps() {
        let zeros = DeltaScores {
            data: Array3::zeros((4, 4, 4)),
            view_id: 0,
            delta_t_used: 0.75,
        };
        assert_eq!(threshold_mask(&zeros, 0.45).unwrap().area(), 0);

        let uniform = DeltaScores {
            data: Array3::from_elem((4, 4, 4), 0.37),
            view_id: 0,
            delta_t_used: 0.75,
        };
        assert_eq!(threshold_mask(&uniform, 0.45).unwrap().area(), 16);

        assert!(threshold_mask(&zeros, 1.5).is_err());
    }

    #[test]
    fn oracle_mask_is_exact_for_many_region_shapes() {
        let shapes: Vec<RegionMap> = vec![
            rect_region(9, 9, 0, 0, 1, 1),             // single pixel
            rect_region(9, 9, 0, 0, 9, 9),             // full frame
            rect_region(9, 9, 3, 1, 2, 7),             // wide bar
            Array2::from_shape_fn((9, 9), |(r, c)| u8::from((r + c) % 4 == 0)), // scattered
            Array2::from_shape_fn((9, 9), |(r, c)| {
                let (dr, dc) = (r as f64 - 4.0, c as f64 - 4.0);
                u8::from(dr * dr + dc * dc <= 9.0)
            }), // disc
        ];
        let dvec = [0.5, 0.5, -0.5, 0.5];
        for (i, region) in shapes.into_iter().enumerate() {
            let backend = OracleEditDenoiser::with_region(region.clone(), dvec, 0.4).unwrap();
            let z = random_latent(9, 9, 40 + i as u64);
            let scores = delta_scores(&backend, &z, Some(&z), "p", &sched(), i as u64).unwrap();
            let mask = threshold_mask(&scores, 0.45).unwrap();
            assert_eq!(mask.iou(&region), 1.0, "shape {i}");
        }
    }

    #[test]
    fn masking_path_is_deterministic_in_the_seed() {
        let region = rect_region(8, 8, 1, 1, 3, 3);
        let backend =
            OracleEditDenoiser::with_region(region, [1.0, 0.0, 0.0, 0.0], 0.3).unwrap();
        let z = random_latent(8, 8, 3);
        let s = sched();
        let a = delta_scores(&backend, &z, Some(&z), "p", &s, 11).unwrap();
        let b = delta_scores(&backend, &z, Some(&z), "p", &s, 11).unwrap();
        assert_eq!(a.data, b.data);
    }
}
