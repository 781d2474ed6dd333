//! Camera model, projection Jacobians, and the Cholesky whitening
//! preconditioner for camera-parameter optimization.
//!
//! A camera stores its initial estimate (pose, intrinsics, distortion) plus a
//! residual vector `delta_phi` in a 10-dimensional parameter chart:
//!
//! ```text
//! [rotation axis-angle (3) | translation (3) | focal (2) | principal (2)]
//! ```
//!
//! The effective parameters are `phi0 ⊕ (M · delta_phi)` where `M` is a
//! whitening preconditioner derived from the Cholesky factor of the
//! projection Jacobian's Gram matrix. Rotation residuals compose through the
//! exponential map on the left of the initial rotation; all other components
//! add. Radial distortion is carried but frozen (it is not part of the chart).

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tags};

/// Dimension of the per-camera parameter chart.
pub const PARAM_DIM: usize = 10;

/// Scenes are contained in the unit ball around the origin; ray bounds for a
/// camera bracket that ball from its initial center.
pub const SCENE_RADIUS: f64 = 1.0;

const ROT: std::ops::Range<usize> = 0..3;
const TRA: std::ops::Range<usize> = 3..6;
const FOC: std::ops::Range<usize> = 6..8;
const PRI: std::ops::Range<usize> = 8..10;

/// On-disk camera record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    /// Row-major 3x3 camera-to-world rotation.
    pub rotation: [f64; 9],
    /// Camera center in world units.
    pub translation: [f64; 3],
    /// (f_x, f_y) in pixels.
    pub focal: [f64; 2],
    /// (c_x, c_y) in pixels.
    pub principal: [f64; 2],
    /// Radial coefficients (k1, k2).
    pub distortion: [f64; 2],
}

/// Pinhole camera with a preconditioned residual parameterization.
///
/// The stored pose/intrinsics fields are the frozen initial estimate; only
/// `delta_phi` changes during optimization.
#[derive(Debug, Clone)]
pub struct CameraParams {
    rotation0: Matrix3<f64>,
    translation0: Vector3<f64>,
    focal0: Vector2<f64>,
    principal0: Vector2<f64>,
    distortion: Vector2<f64>,
    /// Residual coordinates, length [`PARAM_DIM`].
    pub delta_phi: DVector<f64>,
    /// Preconditioner applied to `delta_phi` (identity until
    /// [`precondition_cameras`] runs).
    pub precond: DMatrix<f64>,
    /// Frozen ray bounds bracketing the unit scene ball from the initial
    /// camera center.
    ray_bounds: (f64, f64),
}

/// Snapshot of the effective (residual-applied) camera.
#[derive(Debug, Clone)]
pub struct EffectivePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub focal: Vector2<f64>,
    pub principal: Vector2<f64>,
    pub distortion: Vector2<f64>,
    /// Left Jacobian of SO(3) at the rotation residual; maps chart rotation
    /// velocities to world angular velocities.
    pub rot_left_jacobian: Matrix3<f64>,
}

/// Diagnostics returned alongside the preconditioner.
#[derive(Debug, Clone)]
pub struct PreconditionReport {
    /// Gram matrix `J^T J (+ damping I)`.
    pub sigma: DMatrix<f64>,
    /// Its lower Cholesky factor.
    pub chol: DMatrix<f64>,
    /// `(J M)^T (J M)`; identity when undamped and full-rank.
    pub whitened_gram: DMatrix<f64>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation from an axis-angle vector.
pub fn exp_so3(aa: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = aa.norm_squared();
    let k = skew(aa);
    let (a, b) = if theta2 < 1e-12 {
        // sin t / t, (1 - cos t) / t^2
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3): `d/dt exp(a(t))^ = [J_l(a) a'(t)]^ exp(a)`.
pub fn left_jacobian_so3(aa: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = aa.norm_squared();
    let k = skew(aa);
    let (b, c) = if theta2 < 1e-12 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

impl CameraParams {
    /// Build a camera from its initial estimate. The rotation must be
    /// orthonormal within 1e-8.
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        focal: [f64; 2],
        principal: [f64; 2],
        distortion: [f64; 2],
    ) -> Result<Self> {
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if defect > 1e-8 {
            return Err(Error::validation(format!(
                "rotation is not orthonormal (defect {defect:.3e})"
            )));
        }
        let dist = translation.norm();
        let near = (dist - SCENE_RADIUS).max(1e-2);
        let far = dist + SCENE_RADIUS;
        Ok(CameraParams {
            rotation0: rotation,
            translation0: translation,
            focal0: Vector2::new(focal[0], focal[1]),
            principal0: Vector2::new(principal[0], principal[1]),
            distortion: Vector2::new(distortion[0], distortion[1]),
            delta_phi: DVector::zeros(PARAM_DIM),
            precond: DMatrix::identity(PARAM_DIM, PARAM_DIM),
            ray_bounds: (near, far),
        })
    }

    pub fn from_json(j: &CameraJson) -> Result<Self> {
        let r = Matrix3::from_row_slice(&j.rotation);
        CameraParams::new(
            r,
            Vector3::new(j.translation[0], j.translation[1], j.translation[2]),
            j.focal,
            j.principal,
            j.distortion,
        )
    }

    pub fn to_json(&self) -> CameraJson {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = self.rotation0[(r, c)];
            }
        }
        CameraJson {
            rotation,
            translation: [self.translation0.x, self.translation0.y, self.translation0.z],
            focal: [self.focal0.x, self.focal0.y],
            principal: [self.principal0.x, self.principal0.y],
            distortion: [self.distortion.x, self.distortion.y],
        }
    }

    /// Initial chart vector `phi0`: rotation coordinates are zero by
    /// construction (the chart is anchored at the initial rotation).
    pub fn initial_chart_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(PARAM_DIM);
        v.rows_mut(TRA.start, 3).copy_from(&self.translation0);
        v[FOC.start] = self.focal0.x;
        v[FOC.start + 1] = self.focal0.y;
        v[PRI.start] = self.principal0.x;
        v[PRI.start + 1] = self.principal0.y;
        v
    }

    /// Preconditioned residual `M · delta_phi` in chart coordinates.
    pub fn chart_residual(&self) -> DVector<f64> {
        &self.precond * &self.delta_phi
    }

    /// Effective parameter vector `phi0 ⊕ (M · delta_phi)`.
    ///
    /// At `delta_phi = 0` this equals the initial vector exactly.
    pub fn apply_residual(&self) -> DVector<f64> {
        self.initial_chart_vector() + self.chart_residual()
    }

    /// Effective pose and intrinsics, with the rotation residual composed via
    /// the exponential map on the left of the initial rotation.
    pub fn effective_pose(&self) -> EffectivePose {
        let res = self.chart_residual();
        let aa = Vector3::new(res[0], res[1], res[2]);
        EffectivePose {
            rotation: exp_so3(&aa) * self.rotation0,
            translation: self.translation0 + res.rows(TRA.start, 3).clone_owned(),
            focal: self.focal0 + Vector2::new(res[FOC.start], res[FOC.start + 1]),
            principal: self.principal0 + Vector2::new(res[PRI.start], res[PRI.start + 1]),
            distortion: self.distortion,
            rot_left_jacobian: left_jacobian_so3(&aa),
        }
    }

    /// Frozen `(t_near, t_far)` bounds for rays from this camera.
    pub fn ray_bounds(&self) -> (f64, f64) {
        self.ray_bounds
    }

    /// Divide intrinsics by a codec downscale factor, producing the camera
    /// for latent-resolution rays. Residuals must not have been applied yet.
    pub fn to_latent_resolution(&self, factor: u32) -> Result<CameraParams> {
        if factor == 0 {
            return Err(Error::config("downscale factor must be positive"));
        }
        let f = f64::from(factor);
        CameraParams::new(
            self.rotation0,
            self.translation0,
            [self.focal0.x / f, self.focal0.y / f],
            [self.principal0.x / f, self.principal0.y / f],
            [self.distortion.x, self.distortion.y],
        )
    }
}

impl EffectivePose {
    /// World ray through the center of latent pixel `(row, col)`.
    ///
    /// Intrinsics must already be at latent resolution. Returns
    /// `(origin, unit direction)`.
    pub fn pixel_ray(&self, row: usize, col: usize) -> (Vector3<f64>, Vector3<f64>) {
        let u = col as f64 + 0.5;
        let v = row as f64 + 0.5;
        let dir_cam = Vector3::new(
            (u - self.principal.x) / self.focal.x,
            (v - self.principal.y) / self.focal.y,
            1.0,
        );
        let dir = self.rotation * dir_cam;
        (self.translation, dir.normalize())
    }
}

fn distort(pose: &EffectivePose, offset: Vector2<f64>) -> Vector2<f64> {
    let r2 = offset.norm_squared();
    let s = 1.0 + pose.distortion.x * r2 + pose.distortion.y * r2 * r2;
    offset * s
}

/// Project world points through the effective camera, stacking `(u, v)` pairs.
///
/// `x_cam = R^T (p - t)`, then pinhole plus radial distortion around the
/// principal point.
pub fn project_points(camera: &CameraParams, points: &[Vector3<f64>]) -> Result<DVector<f64>> {
    let pose = camera.effective_pose();
    let mut out = DVector::zeros(2 * points.len());
    for (j, p) in points.iter().enumerate() {
        let x = pose.rotation.transpose() * (p - pose.translation);
        if x.z <= 0.0 {
            return Err(Error::Projection { index: j, depth: x.z });
        }
        let offset = Vector2::new(pose.focal.x * x.x / x.z, pose.focal.y * x.y / x.z);
        let uv = pose.principal + distort(&pose, offset);
        out[2 * j] = uv.x;
        out[2 * j + 1] = uv.y;
    }
    Ok(out)
}

/// Jacobian of [`project_points`] with respect to the 10-vector chart,
/// evaluated at the current effective parameters. Shape `(2m, 10)`.
pub fn projection_jacobian(
    camera: &CameraParams,
    points: &[Vector3<f64>],
) -> Result<DMatrix<f64>> {
    let pose = camera.effective_pose();
    let rt = pose.rotation.transpose();
    let mut jac = DMatrix::zeros(2 * points.len(), PARAM_DIM);

    for (j, p) in points.iter().enumerate() {
        let w = p - pose.translation;
        let x = rt * w;
        if x.z <= 0.0 {
            return Err(Error::Projection { index: j, depth: x.z });
        }
        let z_inv = 1.0 / x.z;
        let d = Vector2::new(pose.focal.x * x.x * z_inv, pose.focal.y * x.y * z_inv);
        let r2 = d.norm_squared();
        let s = 1.0 + pose.distortion.x * r2 + pose.distortion.y * r2 * r2;
        let ds_dr2 = pose.distortion.x + 2.0 * pose.distortion.y * r2;
        // d out / d offset = s I + 2 ds_dr2 * d d^T
        let dout_dd =
            nalgebra::Matrix2::identity() * s + (d * d.transpose()) * (2.0 * ds_dr2);
        // d offset / d x_cam
        let dd_dx = nalgebra::Matrix2x3::new(
            pose.focal.x * z_inv,
            0.0,
            -pose.focal.x * x.x * z_inv * z_inv,
            0.0,
            pose.focal.y * z_inv,
            -pose.focal.y * x.y * z_inv * z_inv,
        );
        let dout_dx = dout_dd * dd_dx;

        // Rotation columns: d x_cam / d aa_k = -R^T ((J_l e_k) x w).
        for k in 0..3 {
            let axis = pose.rot_left_jacobian.column(k).clone_owned();
            let dx = -(rt * axis.cross(&w));
            let duv = dout_dx * dx;
            jac[(2 * j, ROT.start + k)] = duv.x;
            jac[(2 * j + 1, ROT.start + k)] = duv.y;
        }
        // Translation columns: d x_cam / d t = -R^T.
        for k in 0..3 {
            let dx = -rt.column(k).clone_owned();
            let duv = dout_dx * dx;
            jac[(2 * j, TRA.start + k)] = duv.x;
            jac[(2 * j + 1, TRA.start + k)] = duv.y;
        }
        // Focal columns: d offset / d f = diag(x/z, y/z).
        let df_u = dout_dd * Vector2::new(x.x * z_inv, 0.0);
        let df_v = dout_dd * Vector2::new(0.0, x.y * z_inv);
        jac[(2 * j, FOC.start)] = df_u.x;
        jac[(2 * j + 1, FOC.start)] = df_u.y;
        jac[(2 * j, FOC.start + 1)] = df_v.x;
        jac[(2 * j + 1, FOC.start + 1)] = df_v.y;
        // Principal columns: exactly identity.
        jac[(2 * j, PRI.start)] = 1.0;
        jac[(2 * j + 1, PRI.start + 1)] = 1.0;
    }
    Ok(jac)
}

/// Whitening preconditioner from a projection Jacobian.
///
/// With `Sigma = J^T J + damping I = L L^T`, returns `M = L^{-T}` so that the
/// preconditioned Gram matrix `(J M)^T (J M)` is the identity when undamped
/// and full-rank.
pub fn precondition_matrix(
    jacobian: &DMatrix<f64>,
    damping: f64,
) -> Result<(DMatrix<f64>, PreconditionReport)> {
    let k = jacobian.ncols();
    let mut sigma = jacobian.transpose() * jacobian;
    for i in 0..k {
        sigma[(i, i)] += damping;
    }
    let chol = match nalgebra::Cholesky::new(sigma.clone()) {
        Some(c) => c,
        None => {
            // Report the most singular direction.
            let eig = nalgebra::SymmetricEigen::new(sigma.clone());
            let (mut idx, mut best) = (0, f64::INFINITY);
            for (i, &ev) in eig.eigenvalues.iter().enumerate() {
                if ev < best {
                    best = ev;
                    idx = i;
                }
            }
            let dir: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            return Err(Error::RankDeficient { null_direction: dir });
        }
    };
    let l = chol.l();
    let m = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient {
            null_direction: vec![0.0; k],
        })?
        .transpose();
    let jm = jacobian * &m;
    let report = PreconditionReport {
        sigma,
        chol: l,
        whitened_gram: jm.transpose() * &jm,
    };
    Ok((m, report))
}

/// Default damping used when preconditioning cameras: `1e-10 tr(Sigma) / k`.
pub fn default_damping(jacobian: &DMatrix<f64>) -> f64 {
    let sigma = jacobian.transpose() * jacobian;
    1e-10 * sigma.trace() / sigma.nrows() as f64
}

/// Draw `m` proxy points uniformly inside an axis-aligned bounding box.
pub fn sample_proxy_points(
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    m: usize,
    seed: u64,
) -> Vec<Vector3<f64>> {
    use rand::Rng;
    let mut rng = rng::stream(seed, tags::PROXY_POINTS, 0);
    (0..m)
        .map(|_| {
            let x = rng.gen_range(bbox_min[0]..bbox_max[0]);
            let y = rng.gen_range(bbox_min[1]..bbox_max[1]);
            let z = rng.gen_range(bbox_min[2]..bbox_max[2]);
            Vector3::new(x, y, z)
        })
        .collect()
}

/// Compute and install the whitening preconditioner for every camera, using a
/// shared seeded proxy point set. Runs once at initialization.
pub fn precondition_cameras(
    cameras: &mut [CameraParams],
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    seed: u64,
) -> Result<Vec<PreconditionReport>> {
    let points = sample_proxy_points(bbox_min, bbox_max, 32, seed);
    let mut reports = Vec::with_capacity(cameras.len());
    for cam in cameras.iter_mut() {
        let jac = projection_jacobian(cam, &points)?;
        let damping = default_damping(&jac);
        let (m, report) = precondition_matrix(&jac, damping)?;
        cam.precond = m;
        reports.push(report);
    }
    Ok(reports)
}

/// Camera regularization: squared deviation of every effective parameter from
/// its initial value, summed over all cameras.
pub fn loss_camera_reg(cameras: &[CameraParams]) -> f64 {
    cameras.iter().map(|c| c.chart_residual().norm_squared()).sum()
}

/// Gradient of [`loss_camera_reg`] with respect to each camera's `delta_phi`.
pub fn loss_camera_reg_grad(cameras: &[CameraParams]) -> Vec<DVector<f64>> {
    cameras
        .iter()
        .map(|c| 2.0 * (c.precond.transpose() * c.chart_residual()))
        .collect()
}
