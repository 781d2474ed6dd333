//! Checkpoint directories: field and adapter parameters in the shared tensor
//! container (float64 payloads, so resumed runs replay bit-exactly), camera
//! residuals and preconditioners, and optimizer state.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraParams, PARAM_DIM};
use crate::error::{Error, Result};
use crate::field::{Adam, FieldArch, FieldState, OptimizerState};
use crate::refine::AdapterWeights;
use crate::scene::io::{read_vector_f64, write_vector_f64};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldSidecar {
    step_count: u64,
    /// `[position bands, direction bands]`.
    encoding_bands: [usize; 2],
    layer_dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterSidecar {
    channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    delta_phi: Vec<f64>,
    /// Row-major `PARAM_DIM x PARAM_DIM` preconditioner.
    precond: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainState {
    adam_t_field: u64,
    adam_t_adapter: u64,
    adam_t_cameras: u64,
    seed: u64,
}

/// Everything a resumed run needs.
pub struct Checkpoint {
    pub field: FieldState,
    pub adapter: AdapterWeights,
    pub camera_residuals: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub opt: Option<OptimizerState>,
    pub seed: u64,
}

impl Checkpoint {
    /// Copy stored residuals and preconditioners onto scene cameras.
    pub fn apply_to_cameras(&self, cameras: &mut [CameraParams]) -> Result<()> {
        if cameras.len() != self.camera_residuals.len() {
            return Err(Error::validation(format!(
                "checkpoint has {} cameras, scene has {}",
                self.camera_residuals.len(),
                cameras.len()
            )));
        }
        for (cam, (delta, precond)) in cameras.iter_mut().zip(&self.camera_residuals) {
            cam.delta_phi = delta.clone();
            cam.precond = precond.clone();
        }
        Ok(())
    }
}

fn write_adam(dir: &Path, name: &str, adam: &Adam) -> Result<()> {
    let mut joined = adam.m.clone();
    joined.extend_from_slice(&adam.v);
    write_vector_f64(&dir.join(format!("opt_{name}.lte")), &joined)
}

fn read_adam(dir: &Path, name: &str, n: usize, lr: f64, t: u64) -> Result<Adam> {
    let joined = read_vector_f64(&dir.join(format!("opt_{name}.lte")))?;
    if joined.len() != 2 * n {
        return Err(Error::format(format!(
            "optimizer state for {name} has {} entries, expected {}",
            joined.len(),
            2 * n
        )));
    }
    let mut adam = Adam::new(n, lr);
    adam.m.copy_from_slice(&joined[..n]);
    adam.v.copy_from_slice(&joined[n..]);
    adam.t = t;
    Ok(adam)
}

/// Write a checkpoint directory.
pub fn save_checkpoint(
    dir: &Path,
    field: &FieldState,
    adapter: &AdapterWeights,
    cameras: &[CameraParams],
    opt: Option<&OptimizerState>,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_vector_f64(&dir.join("field.lte"), &field.params)?;
    let sidecar = FieldSidecar {
        step_count: field.step_count,
        encoding_bands: [field.arch.pos_bands, field.arch.dir_bands],
        layer_dims: field.arch.hidden.clone(),
    };
    fs::write(
        dir.join("field.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;

    write_vector_f64(&dir.join("adapter.lte"), &adapter.params)?;
    fs::write(
        dir.join("adapter.json"),
        serde_json::to_string_pretty(&AdapterSidecar {
            channels: adapter.channels,
        })?,
    )?;

    let cams: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| CameraRecord {
            delta_phi: c.delta_phi.iter().copied().collect(),
            precond: c.precond.transpose().iter().copied().collect(),
        })
        .collect();
    fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&cams)?)?;

    if let Some(opt) = opt {
        write_adam(dir, "field", &opt.field)?;
        write_adam(dir, "adapter", &opt.adapter)?;
        write_adam(dir, "cameras", &opt.cameras)?;
        fs::write(
            dir.join("train_state.json"),
            serde_json::to_string_pretty(&TrainState {
                adam_t_field: opt.field.t,
                adam_t_adapter: opt.adapter.t,
                adam_t_cameras: opt.cameras.t,
                seed,
            })?,
        )?;
    }
    Ok(())
}

/// Load a checkpoint directory. Learning rates come from the caller (they
/// live in the run configuration, not the checkpoint).
pub fn load_checkpoint(dir: &Path, lr_field: f64, lr_camera: f64) -> Result<Checkpoint> {
    let sidecar: FieldSidecar = serde_json::from_str(
        &fs::read_to_string(dir.join("field.json"))
            .map_err(|e| Error::format(format!("missing field sidecar: {e}")))?,
    )?;
    let arch = FieldArch::new(
        sidecar.encoding_bands[0],
        sidecar.encoding_bands[1],
        sidecar.layer_dims.clone(),
    )?;
    let params = read_vector_f64(&dir.join("field.lte"))?;
    let field = FieldState {
        arch,
        params,
        step_count: sidecar.step_count,
    };
    field.validate()?;

    let adapter_sidecar: AdapterSidecar = serde_json::from_str(
        &fs::read_to_string(dir.join("adapter.json"))
            .map_err(|e| Error::format(format!("missing adapter sidecar: {e}")))?,
    )?;
    let adapter = AdapterWeights {
        channels: adapter_sidecar.channels,
        params: read_vector_f64(&dir.join("adapter.lte"))?,
    };
    adapter.validate()?;

    let cams: Vec<CameraRecord> = serde_json::from_str(
        &fs::read_to_string(dir.join("cameras.json"))
            .map_err(|e| Error::format(format!("missing cameras.json: {e}")))?,
    )?;
    let mut camera_residuals = Vec::with_capacity(cams.len());
    for (i, rec) in cams.iter().enumerate() {
        if rec.delta_phi.len() != PARAM_DIM || rec.precond.len() != PARAM_DIM * PARAM_DIM {
            return Err(Error::format(format!("camera record {i} has bad dimensions")));
        }
        camera_residuals.push((
            DVector::from_row_slice(&rec.delta_phi),
            DMatrix::from_row_slice(PARAM_DIM, PARAM_DIM, &rec.precond),
        ));
    }

    let train_state_path = dir.join("train_state.json");
    let (opt, seed) = if train_state_path.exists() {
        let ts: TrainState = serde_json::from_str(&fs::read_to_string(&train_state_path)?)?;
        let opt = OptimizerState {
            field: read_adam(dir, "field", field.params.len(), lr_field, ts.adam_t_field)?,
            adapter: read_adam(
                dir,
                "adapter",
                adapter.params.len(),
                lr_field,
                ts.adam_t_adapter,
            )?,
            cameras: read_adam(
                dir,
                "cameras",
                cams.len() * PARAM_DIM,
                lr_camera,
                ts.adam_t_cameras,
            )?,
        };
        (Some(opt), ts.seed)
    } else {
        (None, 0)
    };

    Ok(Checkpoint {
        field,
        adapter,
        camera_residuals,
        opt,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth::{synth_scene, SceneSpec};

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_scene(&SceneSpec::named("box", 2, 8, 8).unwrap(), 1).unwrap();
        let mut cameras = ds.cameras().to_vec();
        crate::camera::precondition_cameras(&mut cameras, ds.bounding_box.0, ds.bounding_box.1, 4)
            .unwrap();
        let mut field = FieldState::init(FieldArch::new(3, 1, vec![12, 8]).unwrap(), 2);
        field.step_count = 137;
        let adapter = AdapterWeights::init(3, 5).unwrap();
        let mut opt = OptimizerState::new(&field, &adapter, cameras.len(), 1e-3, 1e-4);
        opt.field.t = 137;
        opt.field.m[3] = 0.25;
        opt.cameras.v[7] = 1e-9;
        cameras[1].delta_phi[2] = -0.01;

        save_checkpoint(dir.path(), &field, &adapter, &cameras, Some(&opt), 42).unwrap();
        let back = load_checkpoint(dir.path(), 1e-3, 1e-4).unwrap();

        assert_eq!(back.field.params, field.params);
        assert_eq!(back.field.step_count, 137);
        assert_eq!(back.field.arch, field.arch);
        assert_eq!(back.adapter.params, adapter.params);
        assert_eq!(back.seed, 42);
        let opt2 = back.opt.as_ref().unwrap();
        assert_eq!(opt2.field.m, opt.field.m);
        assert_eq!(opt2.field.v, opt.field.v);
        assert_eq!(opt2.field.t, 137);
        assert_eq!(opt2.cameras.v, opt.cameras.v);

        let mut cams2 = ds.cameras().to_vec();
        back.apply_to_cameras(&mut cams2).unwrap();
        assert_eq!(cams2[1].delta_phi, cameras[1].delta_phi);
        assert_eq!(cams2[0].precond, cameras[0].precond);
    }
}
