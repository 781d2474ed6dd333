//! Image/latent codecs standing in for a diffusion VAE.
//!
//! Two codecs ship:
//!
//! * identity (`factor = 1`): zero-pads RGB to 4 channels and truncates on
//!   decode; `decode(encode(I)) == I` bit-exactly.
//! * pooled (`factor = 8` mirrors the usual VAE geometry): per-channel
//!   average pooling followed by a fixed orthonormal 3→4 channel lift;
//!   decode is the transposed lift plus nearest-neighbor upsampling.
//!
//! Either way an `(H, W, 3)` image becomes an `(H/f, W/f, 4)` latent map, so
//! downstream ray counts shrink by exactly `f^2`.

use ndarray::Array3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Identity,
    Pooled { factor: u32 },
}

/// Encoder/decoder pair between RGB images and 4-channel latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    kind: Kind,
}

/// Fixed 3->4 channel lift with orthonormal columns (Gram-Schmidt over a
/// fixed basis), so the decode-side transpose is an exact left inverse.
fn lift_matrix() -> [[f64; 3]; 4] {
    let seeds: [[f64; 4]; 3] = [
        [1.0, 0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0, -1.0],
        [0.0, 0.0, 1.0, 1.0],
    ];
    let mut cols: Vec<[f64; 4]> = Vec::new();
    for s in seeds {
        let mut v = s;
        for u in &cols {
            let dot: f64 = (0..4).map(|i| v[i] * u[i]).sum();
            for i in 0..4 {
                v[i] -= dot * u[i];
            }
        }
        let norm: f64 = (0..4).map(|i| v[i] * v[i]).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        cols.push(v);
    }
    let mut lift = [[0.0; 3]; 4];
    for (c, col) in cols.iter().enumerate() {
        for r in 0..4 {
            lift[r][c] = col[r];
        }
    }
    lift
}

impl Codec {
    pub fn identity() -> Codec {
        Codec { kind: Kind::Identity }
    }

    pub fn pooled(factor: u32) -> Result<Codec> {
        if factor < 2 {
            return Err(Error::config("pooled codec needs a factor of at least 2"));
        }
        Ok(Codec {
            kind: Kind::Pooled { factor },
        })
    }

    /// Build by name: `"identity"` or `"pool8"` style (`pool<factor>`).
    pub fn by_name(name: &str) -> Result<Codec> {
        if name == "identity" {
            return Ok(Codec::identity());
        }
        if let Some(f) = name.strip_prefix("pool") {
            let factor: u32 = f
                .parse()
                .map_err(|_| Error::config(format!("bad codec name {name:?}")))?;
            return Codec::pooled(factor);
        }
        Err(Error::config(format!("unknown codec {name:?}")))
    }

    pub fn downscale_factor(&self) -> u32 {
        match self.kind {
            Kind::Identity => 1,
            Kind::Pooled { factor } => factor,
        }
    }

    /// `(H, W, 3)` image to `(H/f, W/f, 4)` latents. H and W must be
    /// divisible by the downscale factor.
    pub fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::validation(format!("expected 3 channels, got {c}")));
        }
        let f = self.downscale_factor() as usize;
        if h % f != 0 || w % f != 0 {
            return Err(Error::validation(format!(
                "image dims {h}x{w} not divisible by downscale factor {f}"
            )));
        }
        match self.kind {
            Kind::Identity => {
                let mut out = Array3::zeros((h, w, 4));
                for r in 0..h {
                    for cc in 0..w {
                        for ch in 0..3 {
                            out[(r, cc, ch)] = image[(r, cc, ch)];
                        }
                    }
                }
                Ok(out)
            }
            Kind::Pooled { .. } => {
                let (oh, ow) = (h / f, w / f);
                let lift = lift_matrix();
                let inv_area = 1.0 / (f * f) as f64;
                let mut out = Array3::zeros((oh, ow, 4));
                for r in 0..oh {
                    for cc in 0..ow {
                        let mut rgb = [0.0; 3];
                        for dr in 0..f {
                            for dc in 0..f {
                                for ch in 0..3 {
                                    rgb[ch] += image[(r * f + dr, cc * f + dc, ch)];
                                }
                            }
                        }
                        for ch in 0..3 {
                            rgb[ch] *= inv_area;
                        }
                        for k in 0..4 {
                            out[(r, cc, k)] = (0..3).map(|ch| lift[k][ch] * rgb[ch]).sum();
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// `(H', W', 4)` latents back to an `(H'*f, W'*f, 3)` image.
    pub fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        let (h, w, c) = latent.dim();
        if c != 4 {
            return Err(Error::validation(format!("expected 4 channels, got {c}")));
        }
        match self.kind {
            Kind::Identity => {
                let mut out = Array3::zeros((h, w, 3));
                for r in 0..h {
                    for cc in 0..w {
                        for ch in 0..3 {
                            out[(r, cc, ch)] = latent[(r, cc, ch)];
                        }
                    }
                }
                Ok(out)
            }
            Kind::Pooled { factor } => {
                let f = factor as usize;
                let lift = lift_matrix();
                let mut out = Array3::zeros((h * f, w * f, 3));
                for r in 0..h {
                    for cc in 0..w {
                        let mut rgb = [0.0; 3];
                        for ch in 0..3 {
                            rgb[ch] = (0..4).map(|k| lift[k][ch] * latent[(r, cc, k)]).sum();
                        }
                        for dr in 0..f {
                            for dc in 0..f {
                                for ch in 0..3 {
                                    out[(r * f + dr, cc * f + dc, ch)] = rgb[ch];
                                }
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
            (r as f64 * 0.31 + c as f64 * 0.17 + ch as f64 * 0.05).sin() * 0.5 + 0.5
        })
    }

    #[test]
    fn identity_zero_pads_and_round_trips_bit_exactly() {
        let img = ramp(8, 8);
        let codec = Codec::identity();
        let lat = codec.encode(&img).unwrap();
        assert_eq!(lat.dim(), (8, 8, 4));
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(lat[(r, c, 3)], 0.0);
            }
        }
        assert_eq!(codec.decode(&lat).unwrap(), img);
    }

    #[test]
    fn pool8_produces_the_expected_latent_geometry() {
        let codec = Codec::pooled(8).unwrap();
        let lat = codec.encode(&ramp(512, 320)).unwrap();
        assert_eq!(lat.dim(), (64, 40, 4));

        let lat2 = codec.encode(&ramp(512, 512)).unwrap();
        let in_px = 512 * 512;
        let out_px = lat2.dim().0 * lat2.dim().1;
        assert_eq!(in_px / out_px, 64);
    }

    #[test]
    fn indivisible_dims_error() {
        let codec = Codec::pooled(8).unwrap();
        assert!(codec.encode(&ramp(30, 64)).is_err());
    }

    #[test]
    fn decode_preserves_spatial_shape() {
        for codec in [Codec::identity(), Codec::pooled(4).unwrap()] {
            let img = ramp(16, 24);
            let lat = codec.encode(&img).unwrap();
            let back = codec.decode(&lat).unwrap();
            assert_eq!(back.dim(), img.dim());
        }
    }

    #[test]
    fn lift_columns_are_orthonormal() {
        let l = lift_matrix();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..4).map(|r| l[r][a] * l[r][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "col {a}.{b} dot {dot}");
            }
        }
    }

    #[test]
    fn codec_ratio_shrinks_pixels_by_factor_squared() {
        for f in [2u32, 4, 8] {
            let codec = Codec::pooled(f).unwrap();
            let img = ramp(16 * f as usize, 8 * f as usize);
            let lat = codec.encode(&img).unwrap();
            let ratio = (img.dim().0 * img.dim().1) / (lat.dim().0 * lat.dim().1);
            assert_eq!(ratio, (f * f) as usize);
        }
    }
}
