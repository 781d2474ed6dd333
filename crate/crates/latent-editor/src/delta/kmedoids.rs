//! K-Medoids over positive mask pixels (PAM build + swap), used to pick
//! well-spread query points from a mask.

use rand::Rng;

use super::Mask;
use crate::error::{Error, Result};
use crate::rng::{self, tags};

fn dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

fn total_cost(points: &[(usize, usize)], medoids: &[usize]) -> f64 {
    points
        .iter()
        .map(|&p| {
            medoids
                .iter()
                .map(|&m| dist(p, points[m]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Pick `k` medoid pixels from the mask's positive pixels under Euclidean
/// distance. Deterministic given the seed.
pub fn kmedoids_query_points(mask: &Mask, k: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let (h, w) = mask.data.dim();
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.data[(r, c)] == 1 {
                points.push((r, c));
            }
        }
    }
    if k == 0 {
        return Err(Error::validation("k must be positive"));
    }
    if points.len() < k {
        return Err(Error::validation(format!(
            "mask has {} positive pixels, need at least {k}",
            points.len()
        )));
    }
    if points.len() == k {
        return Ok(points);
    }

    // Build: seeded first pick, then greedy farthest-point spread.
    let mut rng = rng::stream(seed, tags::KMEDOIDS, 0);
    let mut medoids = vec![rng.gen_range(0..points.len())];
    while medoids.len() < k {
        let (mut best_idx, mut best_d) = (0, -1.0);
        for (i, &p) in points.iter().enumerate() {
            if medoids.contains(&i) {
                continue;
            }
            let d = medoids
                .iter()
                .map(|&m| dist(p, points[m]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best_idx = i;
            }
        }
        medoids.push(best_idx);
    }

    // Swap until no single exchange improves the total cost.
    let mut cost = total_cost(&points, &medoids);
    loop {
        let mut improved = false;
        for slot in 0..k {
            let (mut best_cand, mut best_cost) = (medoids[slot], cost);
            for cand in 0..points.len() {
                if medoids.contains(&cand) {
                    continue;
                }
                let mut trial = medoids.clone();
                trial[slot] = cand;
                let c = total_cost(&points, &trial);
                if c + 1e-12 < best_cost {
                    best_cost = c;
                    best_cand = cand;
                }
            }
            if best_cand != medoids[slot] {
                medoids[slot] = best_cand;
                cost = best_cost;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }

    let mut out: Vec<(usize, usize)> = medoids.into_iter().map(|m| points[m]).collect();
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn disc_mask(h: usize, w: usize, cr: f64, cc: f64, rad: f64) -> Mask {
        Mask::from_map(
            Array2::from_shape_fn((h, w), |(r, c)| {
                let dr = r as f64 - cr;
                let dc = c as f64 - cc;
                u8::from(dr * dr + dc * dc <= rad * rad)
            }),
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn single_medoid_of_a_disc_is_its_center() {
        let mask = disc_mask(15, 15, 7.0, 7.0, 5.0);
        let got = kmedoids_query_points(&mask, 1, 3).unwrap();

        // Brute-force 1-medoid over all positives.
        let mut points = Vec::new();
        for r in 0..15 {
            for c in 0..15 {
                if mask.data[(r, c)] == 1 {
                    points.push((r, c));
                }
            }
        }
        let best = points
            .iter()
            .min_by(|&&a, &&b| {
                let ca: f64 = points.iter().map(|&p| dist(p, a)).sum();
                let cb: f64 = points.iter().map(|&p| dist(p, b)).sum();
                ca.partial_cmp(&cb).unwrap()
            })
            .unwrap();
        let d = dist(got[0], *best);
        assert!(d <= 1.0 + 1e-9, "medoid {:?} vs brute force {:?}", got[0], best);
    }

    #[test]
    fn k_equal_to_positive_count_returns_all_positives() {
        let mask = Mask::from_map(
            Array2::from_shape_fn((5, 5), |(r, c)| u8::from((r * 5 + c) % 7 == 0)),
            0.5,
        )
        .unwrap();
        let n = mask.area();
        let got = kmedoids_query_points(&mask, n, 0).unwrap();
        assert_eq!(got.len(), n);
        for p in &got {
            assert_eq!(mask.data[*p], 1);
        }
    }

    #[test]
    fn collinear_two_medoids_match_exhaustive_search() {
        // A 1-pixel-tall bar: all positives collinear.
        let mask = Mask::from_map(
            Array2::from_shape_fn((1, 24), |_| 1u8),
            0.5,
        )
        .unwrap();
        let got = kmedoids_query_points(&mask, 2, 9).unwrap();

        let points: Vec<(usize, usize)> = (0..24).map(|c| (0, c)).collect();
        let mut best = f64::INFINITY;
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                let cost: f64 = points
                    .iter()
                    .map(|&p| dist(p, points[a]).min(dist(p, points[b])))
                    .sum();
                best = best.min(cost);
            }
        }
        let got_cost: f64 = points
            .iter()
            .map(|&p| dist(p, got[0]).min(dist(p, got[1])))
            .sum();
        assert!(
            (got_cost - best).abs() < 1e-9,
            "PAM cost {got_cost} vs exhaustive {best}"
        );
    }

    #[test]
    fn too_few_positives_is_an_error_and_seeds_reproduce() {
        let mask = disc_mask(9, 9, 4.0, 4.0, 2.0);
        assert!(kmedoids_query_points(&mask, mask.area() + 1, 0).is_err());
        let a = kmedoids_query_points(&mask, 3, 5).unwrap();
        let b = kmedoids_query_points(&mask, 3, 5).unwrap();
        assert_eq!(a, b);
    }
}
