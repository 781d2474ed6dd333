//! Edit-quality metrics: region-restricted PSNR and directional similarity
//! under a pluggable embedder.

use crate::delta::Mask;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::scene::LatentImage;

/// Documented peak for normalized latent comparisons.
pub const PSNR_PEAK: f64 = 1.0;

/// PSNR sentinel reported for identical inputs (and as a cap).
pub const PSNR_CAP_DB: f64 = 99.0;

/// PSNR between two latent maps over the pixels selected by `region`
/// (`None` compares everything). The caller passes a mask or its complement
/// explicitly, depending on which side of the edit it wants to measure.
pub fn edit_psnr(a: &LatentImage, b: &LatentImage, region: Option<&Mask>) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::validation("edit_psnr shape mismatch"));
    }
    let (h, w, _) = a.data.dim();
    if let Some(mask) = region {
        if mask.data.dim() != (h, w) {
            return Err(Error::validation("edit_psnr mask shape mismatch"));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..h {
        for c in 0..w {
            if let Some(mask) = region {
                if mask.data[(r, c)] == 0 {
                    continue;
                }
            }
            for ch in 0..4 {
                let d = a.data[(r, c, ch)] - b.data[(r, c, ch)];
                sum += d * d;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::validation("edit_psnr selection is empty"));
    }
    let mse = sum / (count * 4) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean displacement 4-vector between two maps over a mask's positives.
pub fn mean_masked_displacement(
    before: &LatentImage,
    after: &LatentImage,
    mask: &Mask,
) -> Result<[f64; 4]> {
    if before.data.dim() != after.data.dim() {
        return Err(Error::validation("displacement shape mismatch"));
    }
    let (h, w, _) = before.data.dim();
    let mut acc = [0.0; 4];
    let mut count = 0usize;
    for r in 0..h {
        for c in 0..w {
            if mask.data[(r, c)] == 1 {
                for ch in 0..4 {
                    acc[ch] += after.data[(r, c, ch)] - before.data[(r, c, ch)];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::validation("displacement selection is empty"));
    }
    for a in acc.iter_mut() {
        *a /= count as f64;
    }
    Ok(acc)
}

/// Cosine between two vectors; errors when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation("cosine length mismatch"));
    }
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("cosine of a zero-norm vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Maps latent maps and prompts to unit vectors in a shared space.
pub trait Embedder {
    fn embed_image(&self, image: &LatentImage) -> Vec<f64>;
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

/// Seeded random-projection embedder. Non-semantic: it provides a fixed
/// deterministic geometry for exercising the metric plumbing, nothing more.
pub struct RandomProjectionEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl RandomProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        RandomProjectionEmbedder { dim, seed }
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    v
}

impl Embedder for RandomProjectionEmbedder {
    fn embed_image(&self, image: &LatentImage) -> Vec<f64> {
        use rand::Rng;
        let flat: Vec<f64> = image.data.iter().copied().collect();
        let out = (0..self.dim)
            .map(|k| {
                let mut rng = rng::stream(self.seed, tags::EMBEDDER, k as u64);
                flat.iter()
                    .map(|v| v * rng.gen_range(-1.0..1.0))
                    .sum::<f64>()
                    / (flat.len() as f64).sqrt()
            })
            .collect();
        normalize(out)
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        use rand::Rng;
        let mut acc = vec![0.0; self.dim];
        let mut n_tokens = 0usize;
        for token in text.split_whitespace() {
            let token = token.to_ascii_lowercase();
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in token.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
            let mut rng = rng::stream(self.seed, tags::EMBEDDER ^ 0xff, h);
            for a in acc.iter_mut() {
                *a += rng.gen_range(-1.0..1.0);
            }
            n_tokens += 1;
        }
        if n_tokens > 0 {
            for a in acc.iter_mut() {
                *a /= n_tokens as f64;
            }
        }
        normalize(acc)
    }
}

/// Cosine between the image-embedding change and the prompt-embedding change.
pub fn directional_similarity(
    embedder: &dyn Embedder,
    before: &LatentImage,
    after: &LatentImage,
    prompt_before: &str,
    prompt_after: &str,
) -> Result<f64> {
    let ib = embedder.embed_image(before);
    let ia = embedder.embed_image(after);
    let tb = embedder.embed_text(prompt_before);
    let ta = embedder.embed_text(prompt_after);
    let di: Vec<f64> = ia.iter().zip(&ib).map(|(a, b)| a - b).collect();
    let dt: Vec<f64> = ta.iter().zip(&tb).map(|(a, b)| a - b).collect();
    cosine(&di, &dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn random_latent(seed: u64) -> LatentImage {
        let mut rng = crate::rng::stream(seed, 0x5001, 0);
        LatentImage::new(
            Array3::from_shape_fn((6, 6, 4), |_| rng.gen_range(0.0..1.0)),
            0,
        )
        .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = random_latent(1);
        assert_eq!(edit_psnr(&a, &a, None).unwrap(), PSNR_CAP_DB);

        // MSE 0.01 with peak 1 is 20 dB: offset every entry by 0.1.
        let mut b = a.clone();
        b.data.mapv_inplace(|v| v + 0.1);
        let got = edit_psnr(&a, &b, None).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "{got}");

        // Scalar reference on a random pair.
        let c = random_latent(2);
        let mut mse = 0.0;
        for (x, y) in a.data.iter().zip(c.data.iter()) {
            mse += (x - y) * (x - y);
        }
        mse /= a.data.len() as f64;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((edit_psnr(&a, &c, None).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_respects_the_selection_mask() {
        let a = random_latent(3);
        let mut b = a.clone();
        // Damage only the top half.
        for r in 0..3 {
            for c in 0..6 {
                for ch in 0..4 {
                    b.data[(r, c, ch)] += 0.5;
                }
            }
        }
        let bottom = Mask::from_map(
            Array2::from_shape_fn((6, 6), |(r, _)| u8::from(r >= 3)),
            0.5,
        )
        .unwrap();
        assert_eq!(edit_psnr(&a, &b, Some(&bottom)).unwrap(), PSNR_CAP_DB);
        let top = Mask::from_map(
            Array2::from_shape_fn((6, 6), |(r, _)| u8::from(r < 3)),
            0.5,
        )
        .unwrap();
        assert!(edit_psnr(&a, &b, Some(&top)).unwrap() < 10.0);

        let empty = Mask::from_map(Array2::zeros((6, 6)), 0.5).unwrap();
        assert!(edit_psnr(&a, &b, Some(&empty)).is_err());
    }

    #[test]
    fn directional_similarity_errors_on_identical_images() {
        let a = random_latent(4);
        let e = RandomProjectionEmbedder::new(16, 7);
        assert!(matches!(
            directional_similarity(&e, &a, &a, "before", "after"),
            Err(Error::Undefined(_))
        ));
    }

    /// Fixture embedder that maps images through their mean channel values
    /// and texts through fixed vectors, aligning the oracle edit direction
    /// with the prompt delta by construction.
    struct Fixture {
        dir: [f64; 4],
        flip: f64,
    }

    impl Embedder for Fixture {
        fn embed_image(&self, image: &LatentImage) -> Vec<f64> {
            let n = image.data.len() as f64 / 4.0;
            let mut mean = vec![0.0; 4];
            for ((.., ch), v) in image.data.indexed_iter() {
                mean[ch] += v / n;
            }
            mean
        }
        fn embed_text(&self, text: &str) -> Vec<f64> {
            if text == "after" {
                self.dir.iter().map(|d| d * self.flip).collect()
            } else {
                vec![0.0; 4]
            }
        }
    }

    #[test]
    fn aligned_and_antialigned_fixtures_hit_plus_minus_one() {
        let dir = [0.5, -0.5, 0.5, -0.5];
        let before = random_latent(5);
        let mut after = before.clone();
        for r in 0..6 {
            for c in 0..6 {
                for ch in 0..4 {
                    after.data[(r, c, ch)] += 0.3 * dir[ch];
                }
            }
        }
        let aligned = Fixture { dir, flip: 1.0 };
        let got = directional_similarity(&aligned, &before, &after, "before", "after").unwrap();
        assert!((got - 1.0).abs() < 1e-6, "{got}");

        let anti = Fixture { dir, flip: -1.0 };
        let got = directional_similarity(&anti, &before, &after, "before", "after").unwrap();
        assert!((got + 1.0).abs() < 1e-6, "{got}");
    }

    #[test]
    fn random_projection_embedder_is_deterministic_and_unit_norm() {
        let e = RandomProjectionEmbedder::new(12, 3);
        let img = random_latent(6);
        let a = e.embed_image(&img);
        let b = e.embed_image(&img);
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let t = e.embed_text("make the box glow");
        let nt: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((nt - 1.0).abs() < 1e-12);
    }
}
