//! Denoiser backends.
//!
//! * [`IdentityDenoiser`] — returns the recorded injected noise for every
//!   call; the DDIM chain then reconstructs its input exactly. Because its
//!   conditional and unconditional predictions coincide, it doubles as the
//!   null-edit backend.
//! * [`OracleEditDenoiser`] — steers text-conditioned predictions along a
//!   known latent direction inside a known region, giving ground truth for
//!   masks and edits.
//! * [`ExternalDenoiser`] — hands requests to a subprocess over a simple
//!   stdin/stdout protocol, the integration point for real models.

use std::io::{BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use ndarray::Array3;

use super::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scene::io::{latent_to_raw, read_tensor_from, write_tensor_to, Dtype, RawTensor};
use crate::scene::{LatentImage, RegionMap};

fn recorded_or_err(slot: &Mutex<Option<Array3<f64>>>, z_t: &LatentImage) -> Result<Array3<f64>> {
    let guard = slot.lock().unwrap();
    let rec = guard
        .as_ref()
        .ok_or_else(|| Error::Undefined("oracle backend called before any noise was recorded".into()))?;
    if rec.dim() != z_t.data.dim() {
        return Err(Error::validation(format!(
            "recorded noise shape {:?} does not match input {:?}",
            rec.dim(),
            z_t.data.dim()
        )));
    }
    Ok(rec.clone())
}

/// Returns the recorded injected noise for every call.
#[derive(Debug, Default)]
pub struct IdentityDenoiser {
    recorded: Mutex<Option<Array3<f64>>>,
}

impl IdentityDenoiser {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Denoiser for IdentityDenoiser {
    fn eps(
        &self,
        z_t: &LatentImage,
        _t: usize,
        _image_cond: Option<&LatentImage>,
        _text_cond: Option<&str>,
    ) -> Result<LatentImage> {
        Ok(LatentImage {
            data: recorded_or_err(&self.recorded, z_t)?,
            view_id: z_t.view_id,
        })
    }

    fn note_injected_noise(&self, eps: &LatentImage) {
        *self.recorded.lock().unwrap() = Some(eps.data.clone());
    }
}

enum Regions {
    Shared(RegionMap),
    PerView(Vec<RegionMap>),
}

/// Saturation settings: stop pushing once the region's mean displacement
/// along the edit direction reaches `target`. Mimics an absolute-state
/// instruction ("make it X") instead of a relative one ("more X").
#[derive(Debug, Clone)]
pub struct Saturation {
    pub target: f64,
    /// Text guidance scale the caller will use (needed to anticipate the
    /// DDIM amplification of the score offset).
    pub s_text: f64,
    pub schedule: NoiseSchedule,
}

/// Test backend with a known edit region and direction.
///
/// Unconditional and image-conditioned calls return the recorded injected
/// noise; text-conditioned calls return that noise minus
/// `magnitude * direction` inside the region, which steers DDIM toward
/// displacing the region along `direction`.
pub struct OracleEditDenoiser {
    regions: Regions,
    direction: [f64; 4],
    magnitude: f64,
    saturation: Option<Saturation>,
    recorded: Mutex<Option<Array3<f64>>>,
}

impl OracleEditDenoiser {
    pub fn with_region(region: RegionMap, direction: [f64; 4], magnitude: f64) -> Result<Self> {
        Self::build(Regions::Shared(region), direction, magnitude, None)
    }

    pub fn with_regions(
        regions: Vec<RegionMap>,
        direction: [f64; 4],
        magnitude: f64,
    ) -> Result<Self> {
        Self::build(Regions::PerView(regions), direction, magnitude, None)
    }

    pub fn saturating(mut self, saturation: Saturation) -> Self {
        self.saturation = Some(saturation);
        self
    }

    fn build(
        regions: Regions,
        direction: [f64; 4],
        magnitude: f64,
        saturation: Option<Saturation>,
    ) -> Result<Self> {
        let norm: f64 = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "oracle edit direction must be unit length, got {norm}"
            )));
        }
        if !magnitude.is_finite() || magnitude < 0.0 {
            return Err(Error::validation("oracle magnitude must be non-negative"));
        }
        Ok(OracleEditDenoiser {
            regions,
            direction,
            magnitude,
            saturation,
            recorded: Mutex::new(None),
        })
    }

    fn region_for(&self, view_id: usize, shape: (usize, usize)) -> Result<&RegionMap> {
        let region = match &self.regions {
            Regions::Shared(r) => r,
            Regions::PerView(rs) => rs.get(view_id).ok_or_else(|| {
                Error::validation(format!("oracle has no region for view {view_id}"))
            })?,
        };
        if region.dim() != shape {
            return Err(Error::validation(format!(
                "oracle region shape {:?} does not match latents {:?}",
                region.dim(),
                shape
            )));
        }
        Ok(region)
    }
}

impl Denoiser for OracleEditDenoiser {
    fn eps(
        &self,
        z_t: &LatentImage,
        t: usize,
        image_cond: Option<&LatentImage>,
        text_cond: Option<&str>,
    ) -> Result<LatentImage> {
        let rec = recorded_or_err(&self.recorded, z_t)?;
        if text_cond.is_none() {
            return Ok(LatentImage {
                data: rec,
                view_id: z_t.view_id,
            });
        }
        let region = self.region_for(z_t.view_id, z_t.shape2())?;

        let mut magnitude = self.magnitude;
        if let (Some(sat), Some(img)) = (&self.saturation, image_cond) {
            // Exact denoised input from the recorded noise, then the region's
            // current displacement along the edit direction.
            let beta = sat.schedule.beta(t);
            if beta < 1.0 {
                let (sb, snb) = (beta.sqrt(), (1.0 - beta).sqrt());
                let mut disp = 0.0;
                let mut count = 0usize;
                for r in 0..region.dim().0 {
                    for c in 0..region.dim().1 {
                        if region[(r, c)] == 0 {
                            continue;
                        }
                        for ch in 0..4 {
                            let x0 = (z_t.data[(r, c, ch)] - snb * rec[(r, c, ch)]) / sb;
                            disp += (x0 - img.data[(r, c, ch)]) * self.direction[ch];
                        }
                        count += 1;
                    }
                }
                if count > 0 {
                    disp /= count as f64;
                    let scale = ((1.0 - beta) / beta).sqrt();
                    let needed = (sat.target - disp) / (sat.s_text * scale).max(1e-12);
                    magnitude = needed.clamp(0.0, self.magnitude);
                }
            } else {
                magnitude = 0.0;
            }
        }

        let mut data = rec;
        for r in 0..region.dim().0 {
            for c in 0..region.dim().1 {
                if region[(r, c)] == 1 {
                    for ch in 0..4 {
                        data[(r, c, ch)] -= magnitude * self.direction[ch];
                    }
                }
            }
        }
        Ok(LatentImage {
            data,
            view_id: z_t.view_id,
        })
    }

    fn note_injected_noise(&self, eps: &LatentImage) {
        *self.recorded.lock().unwrap() = Some(eps.data.clone());
    }
}

/// Subprocess-backed denoiser.
///
/// Protocol, per request, over the child's stdin:
///
/// 1. one JSON line `{"t": <index>, "text": <string or null>,
///    "has_image": <bool>, "shape": [h, w, 4]}`;
/// 2. the noisy latent `z_t` as an `LTE1` float32 tensor container;
/// 3. when `has_image`, the image condition as another container.
///
/// The child answers with exactly one `LTE1` container holding the noise
/// prediction, shaped like the input. Predictions must be deterministic in
/// the request.
pub struct ExternalDenoiser {
    child: Mutex<(Child, BufReader<std::process::ChildStdout>)>,
    command: String,
}

#[derive(serde::Serialize)]
struct ExternalRequest<'a> {
    t: usize,
    text: Option<&'a str>,
    has_image: bool,
    shape: [usize; 3],
}

impl ExternalDenoiser {
    /// Spawn `command[0] command[1..]` as the backend process.
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| Error::config("external backend needs a command"))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::config(format!("cannot spawn external backend {prog:?}: {e}")))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::config("external backend has no stdout"))?;
        Ok(ExternalDenoiser {
            child: Mutex::new((child, BufReader::new(stdout))),
            command: command.join(" "),
        })
    }
}

impl Denoiser for ExternalDenoiser {
    fn eps(
        &self,
        z_t: &LatentImage,
        t: usize,
        image_cond: Option<&LatentImage>,
        text_cond: Option<&str>,
    ) -> Result<LatentImage> {
        let (h, w) = z_t.shape2();
        let mut guard = self.child.lock().unwrap();
        let header = serde_json::to_string(&ExternalRequest {
            t,
            text: text_cond,
            has_image: image_cond.is_some(),
            shape: [h, w, 4],
        })?;
        {
            let stdin = guard.0.stdin.as_mut().ok_or_else(|| {
                Error::format(format!("external backend {} lost stdin", self.command))
            })?;
            stdin.write_all(header.as_bytes())?;
            stdin.write_all(b"\n")?;
            write_tensor_to(&mut *stdin, &latent_to_raw(z_t), Dtype::F32)?;
            if let Some(img) = image_cond {
                write_tensor_to(&mut *stdin, &latent_to_raw(img), Dtype::F32)?;
            }
            stdin.flush()?;
        }
        let raw: RawTensor = read_tensor_from(&mut guard.1, &self.command)?;
        if raw.dims != [h, w, 4] {
            return Err(Error::format(format!(
                "external backend returned dims {:?}, expected {:?}",
                raw.dims,
                [h, w, 4]
            )));
        }
        let data = Array3::from_shape_vec((h, w, 4), raw.data)
            .map_err(|e| Error::format(format!("external backend payload: {e}")))?;
        Ok(LatentImage {
            data,
            view_id: z_t.view_id,
        })
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.child.lock() {
            let _ = guard.0.kill();
            let _ = guard.0.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::draw_noise;

    fn region(h: usize, w: usize) -> RegionMap {
        ndarray::Array2::from_shape_fn((h, w), |(r, c)| u8::from(r < h / 2 && c < w / 2))
    }

    #[test]
    fn conditional_minus_unconditional_is_the_scaled_direction() {
        let d = [0.5, -0.5, 0.5, -0.5];
        let a = 0.7;
        let backend = OracleEditDenoiser::with_region(region(6, 6), d, a).unwrap();
        let z = LatentImage::zeros(6, 6, 0);
        let eps = draw_noise((6, 6), 0, 3);
        backend.note_injected_noise(&eps);

        let uncond = backend.eps(&z, 500, Some(&z), None).unwrap();
        let cond = backend.eps(&z, 500, Some(&z), Some("x")).unwrap();
        let reg = region(6, 6);
        for r in 0..6 {
            for c in 0..6 {
                for ch in 0..4 {
                    let diff = uncond.data[(r, c, ch)] - cond.data[(r, c, ch)];
                    let want = if reg[(r, c)] == 1 { a * d[ch] } else { 0.0 };
                    if want == 0.0 {
                        assert_eq!(diff, 0.0, "({r},{c},{ch})");
                    } else {
                        assert!((diff - want).abs() < 1e-12, "({r},{c},{ch}): {diff} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_magnitude_behaves_as_the_identity_backend() {
        let d = [1.0, 0.0, 0.0, 0.0];
        let backend = OracleEditDenoiser::with_region(region(4, 4), d, 0.0).unwrap();
        let z = LatentImage::zeros(4, 4, 0);
        let eps = draw_noise((4, 4), 0, 9);
        backend.note_injected_noise(&eps);
        let cond = backend.eps(&z, 100, Some(&z), Some("x")).unwrap();
        assert_eq!(cond.data, eps.data);
    }

    #[test]
    fn oracle_requires_recorded_noise_and_unit_direction() {
        let backend =
            OracleEditDenoiser::with_region(region(4, 4), [1.0, 0.0, 0.0, 0.0], 0.5).unwrap();
        let z = LatentImage::zeros(4, 4, 0);
        assert!(matches!(
            backend.eps(&z, 10, None, None),
            Err(Error::Undefined(_))
        ));
        assert!(OracleEditDenoiser::with_region(region(4, 4), [1.0, 1.0, 0.0, 0.0], 0.5).is_err());
    }

    /// Echo backend written against the documented protocol, in another
    /// language entirely; answers all-zero predictions.
    const PY_ECHO: &str = r#"
import sys, struct, json
def read_exact(n):
    b = sys.stdin.buffer.read(n)
    assert len(b) == n, f"short read {len(b)} < {n}"
    return b
def read_tensor():
    head = read_exact(20)
    magic, dtype, rank, res, d0, d1, d2 = struct.unpack("<4sBBHIII", head)
    assert magic == b"LTE1", magic
    size = 4 if dtype == 1 else 8
    read_exact(d0 * d1 * d2 * size)
while True:
    line = sys.stdin.buffer.readline()
    if not line:
        break
    hdr = json.loads(line)
    h, w, c = hdr["shape"]
    read_tensor()
    if hdr["has_image"]:
        read_tensor()
    out = struct.pack("<4sBBHIII", b"LTE1", 1, 3, 0, h, w, c) + b"\x00" * (h * w * c * 4)
    sys.stdout.buffer.write(out)
    sys.stdout.buffer.flush()
"#;

    #[test]
    fn external_backend_speaks_the_container_protocol() {
        let backend = ExternalDenoiser::spawn(&[
            "python3".to_string(),
            "-c".to_string(),
            PY_ECHO.to_string(),
        ])
        .unwrap();
        let z = draw_noise((5, 7), 2, 11);
        let img = draw_noise((5, 7), 2, 12);
        for _ in 0..3 {
            let out = backend.eps(&z, 321, Some(&img), Some("prompt")).unwrap();
            assert_eq!(out.data.dim(), (5, 7, 4));
            assert!(out.data.iter().all(|&v| v == 0.0));
            let out = backend.eps(&z, 1, None, None).unwrap();
            assert!(out.data.iter().all(|&v| v == 0.0));
        }
    }
}
