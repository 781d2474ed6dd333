//! Scene data model: multi-view latent datasets, the image/latent codec
//! boundary, synthetic scenes for tests, and the on-disk format.
//!
//! A scene directory holds `manifest.json` plus one binary tensor file per
//! view (see [`io`]); synthetic scenes additionally carry a per-view
//! ground-truth edit region. Datasets are read-only after construction apart
//! from [`SceneDataset::replace_latent`], the dataset-update path used during
//! editing.

pub mod codec;
pub mod io;
pub mod synth;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::camera::CameraParams;

pub use codec::Codec;
pub use synth::{synth_scene, SceneSpec};

/// A `(H', W', 4)` latent feature map for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    /// Row-major latent features, channels last.
    pub data: Array3<f64>,
    /// Index of the view this map belongs to.
    pub view_id: usize,
}

impl LatentImage {
    pub fn new(data: Array3<f64>, view_id: usize) -> Result<Self> {
        let img = LatentImage { data, view_id };
        img.validate()?;
        Ok(img)
    }

    pub fn zeros(height: usize, width: usize, view_id: usize) -> Self {
        LatentImage {
            data: Array3::zeros((height, width, 4)),
            view_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.data.dim();
        if h < 1 || w < 1 {
            return Err(Error::validation(format!(
                "latent map must be at least 1x1, got {h}x{w}"
            )));
        }
        if c != 4 {
            return Err(Error::validation(format!(
                "latent maps carry exactly 4 channels, got {c}"
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(format!(
                "latent map for view {} contains non-finite values",
                self.view_id
            )));
        }
        Ok(())
    }

    /// Spatial shape `(H', W')`.
    pub fn shape2(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }

    /// Round every entry through `f32`. Dataset latents are stored like this
    /// so that the float32 on-disk format round-trips bit-exactly.
    pub fn quantized(&self) -> LatentImage {
        LatentImage {
            data: self.data.mapv(|v| v as f32 as f64),
            view_id: self.view_id,
        }
    }
}

/// Per-view binary map; used for ground-truth edit regions.
pub type RegionMap = Array2<u8>;

/// A multi-view latent dataset with its cameras.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    latents: Vec<LatentImage>,
    cameras: Vec<CameraParams>,
    /// Ground-truth edit regions (synthetic scenes only).
    pub ground_truth_edit_region: Option<Vec<RegionMap>>,
    /// Axis-aligned world bounds of the scene contents.
    pub bounding_box: ([f64; 3], [f64; 3]),
}

/// Default world bounds for scenes that do not declare any.
pub const DEFAULT_BBOX: ([f64; 3], [f64; 3]) = ([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]);

impl SceneDataset {
    /// Validate and build a dataset. Latents are quantized through `f32` so a
    /// written scene always reloads bit-exactly.
    pub fn new(
        latents: Vec<LatentImage>,
        cameras: Vec<CameraParams>,
        ground_truth_edit_region: Option<Vec<RegionMap>>,
    ) -> Result<Self> {
        if latents.len() != cameras.len() {
            return Err(Error::validation(format!(
                "{} latent maps but {} cameras",
                latents.len(),
                cameras.len()
            )));
        }
        if latents.len() < 2 {
            return Err(Error::validation(format!(
                "a scene needs at least 2 views, got {}",
                latents.len()
            )));
        }
        let shape = latents[0].shape2();
        for (i, l) in latents.iter().enumerate() {
            l.validate()?;
            if l.shape2() != shape {
                return Err(Error::validation(format!(
                    "view {i} has shape {:?}, expected {:?}",
                    l.shape2(),
                    shape
                )));
            }
        }
        if let Some(regions) = &ground_truth_edit_region {
            if regions.len() != latents.len() {
                return Err(Error::validation("one edit region per view required"));
            }
            for (i, r) in regions.iter().enumerate() {
                if r.dim() != shape {
                    return Err(Error::validation(format!(
                        "edit region {i} has shape {:?}, expected {:?}",
                        r.dim(),
                        shape
                    )));
                }
                if !r.iter().all(|&v| v == 0 || v == 1) {
                    return Err(Error::validation("edit regions must be binary"));
                }
            }
        }
        let latents = latents
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let mut q = l.quantized();
                q.view_id = i;
                q
            })
            .collect();
        Ok(SceneDataset {
            latents,
            cameras,
            ground_truth_edit_region,
            bounding_box: DEFAULT_BBOX,
        })
    }

    pub fn n_views(&self) -> usize {
        self.latents.len()
    }

    /// Spatial shape `(H', W')` shared by every view.
    pub fn latent_shape(&self) -> (usize, usize) {
        self.latents[0].shape2()
    }

    pub fn latents(&self) -> &[LatentImage] {
        &self.latents
    }

    pub fn latent(&self, view: usize) -> &LatentImage {
        &self.latents[view]
    }

    pub fn cameras(&self) -> &[CameraParams] {
        &self.cameras
    }

    pub fn cameras_mut(&mut self) -> &mut [CameraParams] {
        &mut self.cameras
    }

    pub fn camera(&self, view: usize) -> &CameraParams {
        &self.cameras[view]
    }

    /// Dataset-update path: replace one view's latents (quantized through
    /// `f32`, same as construction).
    pub fn replace_latent(&mut self, view: usize, latent: &LatentImage) -> Result<()> {
        latent.validate()?;
        if latent.shape2() != self.latent_shape() {
            return Err(Error::validation(format!(
                "replacement for view {view} has shape {:?}, expected {:?}",
                latent.shape2(),
                self.latent_shape()
            )));
        }
        let mut q = latent.quantized();
        q.view_id = view;
        self.latents[view] = q;
        Ok(())
    }
}

/// Encode RGB images into latent maps with the given codec, one view per
/// image in order.
pub fn encode_views(images: &[Array3<f64>], codec: &Codec) -> Result<Vec<LatentImage>> {
    let mut out = Vec::with_capacity(images.len());
    let mut shape = None;
    for (i, img) in images.iter().enumerate() {
        let (h, w, _) = img.dim();
        match shape {
            None => shape = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::validation(format!(
                    "image {i} has shape {:?}, expected {:?}",
                    (h, w),
                    s
                )))
            }
            _ => {}
        }
        out.push(LatentImage::new(codec.encode(img)?, i)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn dummy_camera() -> CameraParams {
        CameraParams::new(
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, -2.0),
            [48.0, 48.0],
            [4.0, 4.0],
            [0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn dataset_rejects_count_mismatch() {
        let latents = vec![LatentImage::zeros(8, 8, 0), LatentImage::zeros(8, 8, 1)];
        let cams = vec![dummy_camera(), dummy_camera(), dummy_camera()];
        assert!(matches!(
            SceneDataset::new(latents, cams, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dataset_rejects_single_view() {
        let latents = vec![LatentImage::zeros(8, 8, 0)];
        let cams = vec![dummy_camera()];
        assert!(matches!(
            SceneDataset::new(latents, cams, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dataset_rejects_shape_mismatch_and_non_finite() {
        let latents = vec![LatentImage::zeros(8, 8, 0), LatentImage::zeros(8, 6, 1)];
        let cams = vec![dummy_camera(), dummy_camera()];
        assert!(SceneDataset::new(latents, cams, None).is_err());

        let mut bad = LatentImage::zeros(8, 8, 0);
        bad.data[(0, 0, 0)] = f64::NAN;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn latent_channel_count_is_enforced() {
        let arr = Array3::<f64>::zeros((4, 4, 3));
        assert!(LatentImage::new(arr, 0).is_err());
    }
}
