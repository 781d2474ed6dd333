//! On-disk formats: the `LTE1` binary tensor container, scene directories,
//! PGM mask export, and PNG helpers for the identity-codec path.
//!
//! Container layout (little-endian):
//!
//! ```text
//! magic "LTE1" | dtype u8 | rank u8 | reserved u16 | dims 3 x u32 | payload
//! ```
//!
//! Latent files use float32 payloads; checkpoints reuse the container with
//! float64 payloads so optimizer state resumes exactly. Unused trailing dims
//! are 1.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{LatentImage, RegionMap, SceneDataset};
use crate::camera::{CameraJson, CameraParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LTE1";

/// Payload element type codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

/// A rank <= 3 tensor as stored in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: [usize; 3],
    pub rank: u8,
    pub data: Vec<f64>,
}

/// Serialize a tensor into any writer (files, pipes).
pub fn write_tensor_to(mut f: impl Write, tensor: &RawTensor, dtype: Dtype) -> Result<()> {
    f.write_all(MAGIC)?;
    f.write_u8(dtype as u8)?;
    f.write_u8(tensor.rank)?;
    f.write_u16::<LittleEndian>(0)?;
    for d in tensor.dims {
        f.write_u32::<LittleEndian>(d as u32)?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in &tensor.data {
                f.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Dtype::F64 => {
            for &v in &tensor.data {
                f.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    Ok(())
}

/// Parse a tensor from any reader. `origin` labels error messages.
pub fn read_tensor_from(mut f: impl Read, origin: &str) -> Result<RawTensor> {
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::format(format!("{origin}: truncated header")))?;
    if &magic != MAGIC {
        return Err(Error::format(format!("{origin}: bad magic {magic:?}")));
    }
    let dtype = f.read_u8()?;
    let rank = f.read_u8()?;
    let _reserved = f.read_u16::<LittleEndian>()?;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = f.read_u32::<LittleEndian>()? as usize;
    }
    if rank == 0 || rank > 3 {
        return Err(Error::format(format!("{origin}: bad rank {rank}")));
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    match dtype {
        x if x == Dtype::F32 as u8 => {
            for _ in 0..count {
                data.push(f64::from(f.read_f32::<LittleEndian>().map_err(
                    |_| Error::format(format!("{origin}: truncated payload")),
                )?));
            }
        }
        x if x == Dtype::F64 as u8 => {
            for _ in 0..count {
                data.push(
                    f.read_f64::<LittleEndian>()
                        .map_err(|_| Error::format(format!("{origin}: truncated payload")))?,
                );
            }
        }
        other => return Err(Error::format(format!("{origin}: unknown dtype code {other}"))),
    }
    Ok(RawTensor { dims, rank, data })
}

pub fn write_tensor(path: &Path, tensor: &RawTensor, dtype: Dtype) -> Result<()> {
    let f = std::io::BufWriter::new(fs::File::create(path)?);
    write_tensor_to(f, tensor, dtype)
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let f = std::io::BufReader::new(
        fs::File::open(path)
            .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?,
    );
    read_tensor_from(f, &path.display().to_string())
}

/// Write a rank-1 vector with float64 payload (checkpoint helper).
pub fn write_vector_f64(path: &Path, data: &[f64]) -> Result<()> {
    write_tensor(
        path,
        &RawTensor {
            dims: [data.len(), 1, 1],
            rank: 1,
            data: data.to_vec(),
        },
        Dtype::F64,
    )
}

pub fn read_vector_f64(path: &Path) -> Result<Vec<f64>> {
    let t = read_tensor(path)?;
    Ok(t.data)
}

pub(crate) fn latent_to_raw(img: &LatentImage) -> RawTensor {
    let (h, w, c) = img.data.dim();
    RawTensor {
        dims: [h, w, c],
        rank: 3,
        data: img.data.iter().copied().collect(),
    }
}

pub(crate) fn raw_to_latent(raw: &RawTensor, view_id: usize) -> Result<LatentImage> {
    let [h, w, c] = raw.dims;
    if raw.rank != 3 || c != 4 {
        return Err(Error::validation(format!(
            "latent tensor must be rank 3 with 4 channels, got rank {} dims {:?}",
            raw.rank, raw.dims
        )));
    }
    let data = Array3::from_shape_vec((h, w, c), raw.data.clone())
        .map_err(|e| Error::format(format!("latent payload: {e}")))?;
    LatentImage::new(data, view_id)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    n_views: usize,
    latent_shape: [usize; 3],
    views: Vec<ViewEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewEntry {
    latent_file: String,
    camera: CameraJson,
}

fn region_path(dir: &Path, latent_file: &str) -> PathBuf {
    dir.join(format!("{latent_file}.region.pgm"))
}

/// Write a scene directory: `manifest.json` plus one latent container per
/// view; ground-truth edit regions ride along as sidecar PGMs.
pub fn write_scene(dir: &Path, ds: &SceneDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = ds.latent_shape();
    let mut views = Vec::with_capacity(ds.n_views());
    for (i, latent) in ds.latents().iter().enumerate() {
        let latent_file = format!("view_{i:03}.lte");
        write_tensor(&dir.join(&latent_file), &latent_to_raw(latent), Dtype::F32)?;
        if let Some(regions) = &ds.ground_truth_edit_region {
            write_pgm(&region_path(dir, &latent_file), &regions[i])?;
        }
        views.push(ViewEntry {
            latent_file,
            camera: ds.camera(i).to_json(),
        });
    }
    let manifest = Manifest {
        n_views: ds.n_views(),
        latent_shape: [h, w, 4],
        views,
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

/// Load a scene directory written by [`write_scene`] (or by hand, following
/// the same format). View order is manifest order.
pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::format(format!("missing manifest {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("bad manifest: {e}")))?;
    if manifest.views.len() != manifest.n_views {
        return Err(Error::validation(format!(
            "manifest declares {} views but lists {}",
            manifest.n_views,
            manifest.views.len()
        )));
    }
    if manifest.latent_shape[2] != 4 {
        return Err(Error::validation("latent_shape must end in 4 channels"));
    }

    let mut latents = Vec::with_capacity(manifest.n_views);
    let mut cameras = Vec::with_capacity(manifest.n_views);
    let mut regions = Vec::new();
    for (i, view) in manifest.views.iter().enumerate() {
        let raw = read_tensor(&dir.join(&view.latent_file))?;
        let latent = raw_to_latent(&raw, i)?;
        if latent.shape2() != (manifest.latent_shape[0], manifest.latent_shape[1]) {
            return Err(Error::validation(format!(
                "view {i} has shape {:?}, manifest says {:?}",
                latent.shape2(),
                (manifest.latent_shape[0], manifest.latent_shape[1])
            )));
        }
        latents.push(latent);
        cameras.push(CameraParams::from_json(&view.camera)?);
        let rp = region_path(dir, &view.latent_file);
        if rp.exists() {
            regions.push(read_pgm(&rp)?);
        }
    }
    let region_opt = if regions.len() == manifest.n_views {
        Some(regions)
    } else if regions.is_empty() {
        None
    } else {
        return Err(Error::validation(
            "edit regions present for some views but not all",
        ));
    };
    SceneDataset::new(latents, cameras, region_opt)
}

/// Write a binary map as an 8-bit PGM (0/255).
pub fn write_pgm(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    for v in map.iter() {
        f.write_u8(if *v != 0 { 255 } else { 0 })?;
    }
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<RegionMap> {
    let bytes = fs::read(path)?;
    let header_err = || Error::format(format!("{}: bad PGM header", path.display()));
    // P5 <w> <h> <maxval> single-whitespace separated, then raw payload.
    let mut fields = Vec::new();
    let mut idx = 0;
    while fields.len() < 4 && idx < bytes.len() {
        while idx < bytes.len() && bytes[idx].is_ascii_whitespace() {
            idx += 1;
        }
        let start = idx;
        while idx < bytes.len() && !bytes[idx].is_ascii_whitespace() {
            idx += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..idx]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    idx += 1; // single whitespace after maxval
    let payload = &bytes[idx..];
    if payload.len() != w * h {
        return Err(Error::format(format!(
            "{}: payload length {} != {w}x{h}",
            path.display(),
            payload.len()
        )));
    }
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        u8::from(payload[r * w + c] >= 128)
    }))
}

/// Read an RGB PNG into a `(H, W, 3)` array scaled to `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(r, c, ch)| f64::from(img.get_pixel(c as u32, r as u32)[ch]) / 255.0,
    ))
}

/// Write a `(H, W, 3)` array in `[0, 1]` as an RGB PNG.
pub fn write_rgb_png(path: &Path, data: &Array3<f64>) -> Result<()> {
    let (h, w, c) = data.dim();
    if c != 3 {
        return Err(Error::validation("write_rgb_png expects 3 channels"));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for cc in 0..w {
            let px = [
                (data[(r, cc, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (data[(r, cc, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (data[(r, cc, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(cc as u32, r as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}
