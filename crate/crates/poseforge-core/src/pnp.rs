//! Perspective-n-Point pose estimation: EPnP closed-form solving,
//! Gauss–Newton refinement to reprojection stationarity, and Jacobians of
//! the solved pose with respect to the 2D keypoints via the implicit
//! function theorem (the mechanism that lets gradients flow "through" a
//! PnP solve).

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::geometry::{
    project_jacobian, project_points, CameraIntrinsics, GeometryError, KeypointSet2D, Point2,
    Point3, Pose,
};

/// Errors from PnP solving and differentiation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PnPError {
    #[error("PnP needs at least 4 correspondences, got {got}")]
    TooFewPoints { got: usize },
    #[error("2D/3D correspondence count mismatch: {n2d} vs {n3d}")]
    LengthMismatch { n2d: usize, n3d: usize },
    #[error("degenerate point configuration: {message}")]
    DegenerateConfiguration { message: alloc::string::String },
    #[error("no candidate pose places all points in front of the camera")]
    NoPositiveDepthSolution,
    #[error("pose Jacobian requires a converged solution")]
    NotConverged,
    #[error("reprojection Hessian is singular at the solution")]
    SingularHessian,
    #[error("input coordinates must be finite")]
    NonFiniteInput,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Result of a PnP solve.
///
/// `converged` means the scaled gradient norm of the squared-reprojection
/// objective dropped below [`GRADIENT_TOL`] — the stationarity required for
/// implicit-function-theorem differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct PnPSolution {
    pub pose: Pose,
    /// Root-mean-square reprojection error over points, in pixels.
    pub reprojection_rms: f64,
    /// Gauss–Newton/LM iterations spent in refinement.
    pub iterations: usize,
    pub converged: bool,
}

/// Refinement stops when `‖∇E‖ < GRADIENT_TOL · (1 + ‖r‖)` for the squared
/// reprojection error `E = Σ‖r‖²`.
pub const GRADIENT_TOL: f64 = 1e-10;

/// Maximum Gauss–Newton/LM refinement iterations.
pub const MAX_REFINE_ITERATIONS: usize = 100;

/// How `∂g/∂θ` (the Hessian of the reprojection objective) is formed when
/// differentiating the solved pose w.r.t. the 2D keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianMode {
    /// First-order approximation `2·JᵀJ`. Cheap, exact only at zero
    /// residual; adequate for noiseless correspondences.
    GaussNewton,
    /// Central finite differences of the analytic gradient `g = 2·Jᵀr`
    /// (step 1e-6), capturing the curvature term `2·(∂Jᵀ/∂θ)·r` that
    /// matters once residuals are nonzero. The default.
    #[default]
    Exact,
}

fn check_inputs(k2d: &[Point2], k3d: &[Point3]) -> Result<(), PnPError> {
    if k2d.len() != k3d.len() {
        return Err(PnPError::LengthMismatch {
            n2d: k2d.len(),
            n3d: k3d.len(),
        });
    }
    if k2d.len() < 4 {
        return Err(PnPError::TooFewPoints { got: k2d.len() });
    }
    let finite_2d = k2d.iter().all(|p| p.x.is_finite() && p.y.is_finite());
    let finite_3d = k3d
        .iter()
        .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite());
    if !finite_2d || !finite_3d {
        return Err(PnPError::NonFiniteInput);
    }
    Ok(())
}

/// The four EPnP control points: centroid plus the principal axes of the
/// point cloud scaled by the per-axis RMS extent.
fn control_points(k3d: &[Point3]) -> Result<[Point3; 4], PnPError> {
    let n = k3d.len() as f64;
    let centroid: Point3 = k3d.iter().sum::<Point3>() / n;
    let mut cov = Matrix3::zeros();
    for p in k3d {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    // Sort principal directions by descending eigenvalue.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let spread = |i: usize| (eig.eigenvalues[order[i]].max(0.0) / n).sqrt();
    if spread(1) <= 1e-9 * spread(0).max(1e-12) {
        return Err(PnPError::DegenerateConfiguration {
            message: alloc::string::String::from("3D points are collinear"),
        });
    }
    let axis = |i: usize| -> Vector3<f64> { eig.eigenvectors.column(order[i]).into_owned() };
    Ok([
        centroid,
        centroid + axis(0) * spread(0),
        centroid + axis(1) * spread(1),
        centroid + axis(2) * spread(2).max(1e-9 * spread(0)),
    ])
}

/// Barycentric coordinates of each point in the control-point frame,
/// solved through the 4×4 affine system (SVD pseudo-inverse, so
/// near-planar clouds degrade gracefully instead of failing).
fn barycentric_coordinates(
    k3d: &[Point3],
    ctrl: &[Point3; 4],
) -> Result<Vec<Vector4<f64>>, PnPError> {
    let mut c = DMatrix::<f64>::zeros(4, 4);
    for (j, cp) in ctrl.iter().enumerate() {
        c[(0, j)] = cp.x;
        c[(1, j)] = cp.y;
        c[(2, j)] = cp.z;
        c[(3, j)] = 1.0;
    }
    let svd = c.svd(true, true);
    let mut alphas = Vec::with_capacity(k3d.len());
    for p in k3d {
        let rhs = DVector::from_column_slice(&[p.x, p.y, p.z, 1.0]);
        let a = svd
            .solve(&rhs, 1e-12)
            .map_err(|_| PnPError::DegenerateConfiguration {
                message: alloc::string::String::from("control-point system is singular"),
            })?;
        alphas.push(Vector4::new(a[0], a[1], a[2], a[3]));
    }
    Ok(alphas)
}

/// The 2N×12 EPnP design matrix whose null space contains the camera-frame
/// control points.
fn design_matrix(
    k2d: &[Point2],
    alphas: &[Vector4<f64>],
    cam: &CameraIntrinsics,
) -> DMatrix<f64> {
    let n = k2d.len();
    let mut m = DMatrix::<f64>::zeros(2 * n, 12);
    for i in 0..n {
        let (u, v) = (k2d[i].x, k2d[i].y);
        for j in 0..4 {
            let a = alphas[i][j];
            m[(2 * i, 3 * j)] = a * cam.fx;
            m[(2 * i, 3 * j + 2)] = a * (cam.cx - u);
            m[(2 * i + 1, 3 * j + 1)] = a * cam.fy;
            m[(2 * i + 1, 3 * j + 2)] = a * (cam.cy - v);
        }
    }
    m
}

/// Null-space basis of the design matrix: eigenvectors of MᵀM for the four
/// smallest eigenvalues, most-null first.
fn kernel_vectors(m: &DMatrix<f64>) -> [DVector<f64>; 4] {
    let mtm = m.transpose() * m;
    let eig = mtm.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    core::array::from_fn(|k| eig.eigenvectors.column(order[k]).into_owned())
}

/// Squared distances between the six control-point pairs, model frame.
fn rho(ctrl: &[Point3; 4]) -> [f64; 6] {
    let mut out = [0.0; 6];
    for (r, &(i, j)) in CTRL_PAIRS.iter().enumerate() {
        out[r] = (ctrl[i] - ctrl[j]).norm_squared();
    }
    out
}

const CTRL_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// 6×10 constraint matrix over the β products
/// `[β1², β1β2, β2², β1β3, β2β3, β3², β1β4, β2β4, β3β4, β4²]`.
fn l_matrix(kernel: &[DVector<f64>; 4]) -> DMatrix<f64> {
    let mut l = DMatrix::<f64>::zeros(6, 10);
    for (row, &(i, j)) in CTRL_PAIRS.iter().enumerate() {
        let dv: Vec<Vector3<f64>> = kernel
            .iter()
            .map(|v| {
                Vector3::new(
                    v[3 * i] - v[3 * j],
                    v[3 * i + 1] - v[3 * j + 1],
                    v[3 * i + 2] - v[3 * j + 2],
                )
            })
            .collect();
        l[(row, 0)] = dv[0].dot(&dv[0]);
        l[(row, 1)] = 2.0 * dv[0].dot(&dv[1]);
        l[(row, 2)] = dv[1].dot(&dv[1]);
        l[(row, 3)] = 2.0 * dv[0].dot(&dv[2]);
        l[(row, 4)] = 2.0 * dv[1].dot(&dv[2]);
        l[(row, 5)] = dv[2].dot(&dv[2]);
        l[(row, 6)] = 2.0 * dv[0].dot(&dv[3]);
        l[(row, 7)] = 2.0 * dv[1].dot(&dv[3]);
        l[(row, 8)] = 2.0 * dv[2].dot(&dv[3]);
        l[(row, 9)] = dv[3].dot(&dv[3]);
    }
    l
}

fn lstsq(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    a.svd(true, true).solve(&b, 1e-12).ok()
}

/// β initialization, case 1: columns {β1², β1β2, β1β3, β1β4}.
fn betas_case1(l: &DMatrix<f64>, rho: &[f64; 6]) -> Option<Vector4<f64>> {
    let a = DMatrix::from_fn(6, 4, |r, c| l[(r, [0, 1, 3, 6][c])]);
    let b = lstsq(a, DVector::from_column_slice(rho))?;
    let (b0, b1, b2, b3) = (b[0], b[1], b[2], b[3]);
    Some(if b0 < 0.0 {
        let beta1 = (-b0).sqrt();
        Vector4::new(beta1, -b1 / beta1, -b2 / beta1, -b3 / beta1)
    } else {
        let beta1 = b0.sqrt();
        Vector4::new(beta1, b1 / beta1, b2 / beta1, b3 / beta1)
    })
}

/// β initialization, case 2: columns {β1², β1β2, β2²}.
fn betas_case2(l: &DMatrix<f64>, rho: &[f64; 6]) -> Option<Vector4<f64>> {
    let a = DMatrix::from_fn(6, 3, |r, c| l[(r, [0, 1, 2][c])]);
    let b = lstsq(a, DVector::from_column_slice(rho))?;
    let mut beta1 = if b[0] < 0.0 { (-b[0]).sqrt() } else { b[0].sqrt() };
    let beta2 = if b[0] < 0.0 {
        if b[2] < 0.0 {
            (-b[2]).sqrt()
        } else {
            0.0
        }
    } else if b[2] > 0.0 {
        b[2].sqrt()
    } else {
        0.0
    };
    if b[1] < 0.0 {
        beta1 = -beta1;
    }
    Some(Vector4::new(beta1, beta2, 0.0, 0.0))
}

/// β initialization, case 3: columns {β1², β1β2, β2², β1β3, β2β3}.
fn betas_case3(l: &DMatrix<f64>, rho: &[f64; 6]) -> Option<Vector4<f64>> {
    let a = DMatrix::from_fn(6, 5, |r, c| l[(r, [0, 1, 2, 3, 4][c])]);
    let b = lstsq(a, DVector::from_column_slice(rho))?;
    let mut beta1 = if b[0] < 0.0 { (-b[0]).sqrt() } else { b[0].sqrt() };
    let beta2 = if b[0] < 0.0 {
        if b[2] < 0.0 {
            (-b[2]).sqrt()
        } else {
            0.0
        }
    } else if b[2] > 0.0 {
        b[2].sqrt()
    } else {
        0.0
    };
    if b[1] < 0.0 {
        beta1 = -beta1;
    }
    if beta1.abs() < 1e-12 {
        return None;
    }
    Some(Vector4::new(beta1, beta2, b[3] / beta1, 0.0))
}

/// Gauss–Newton relinearization of `L·β̂(β) = ρ` over the four β.
fn refine_betas(l: &DMatrix<f64>, rho: &[f64; 6], mut beta: Vector4<f64>) -> Vector4<f64> {
    for _ in 0..5 {
        let products = DVector::from_column_slice(&[
            beta[0] * beta[0],
            beta[0] * beta[1],
            beta[1] * beta[1],
            beta[0] * beta[2],
            beta[1] * beta[2],
            beta[2] * beta[2],
            beta[0] * beta[3],
            beta[1] * beta[3],
            beta[2] * beta[3],
            beta[3] * beta[3],
        ]);
        let residual = DVector::from_column_slice(rho) - l * &products;
        // ∂β̂/∂β, rows in product order above.
        let mut dp = DMatrix::<f64>::zeros(10, 4);
        let b = &beta;
        let rows: [[f64; 4]; 10] = [
            [2.0 * b[0], 0.0, 0.0, 0.0],
            [b[1], b[0], 0.0, 0.0],
            [0.0, 2.0 * b[1], 0.0, 0.0],
            [b[2], 0.0, b[0], 0.0],
            [0.0, b[2], b[1], 0.0],
            [0.0, 0.0, 2.0 * b[2], 0.0],
            [b[3], 0.0, 0.0, b[0]],
            [0.0, b[3], 0.0, b[1]],
            [0.0, 0.0, b[3], b[2]],
            [0.0, 0.0, 0.0, 2.0 * b[3]],
        ];
        for (r, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                dp[(r, c)] = v;
            }
        }
        let jac = l * dp;
        match lstsq(jac, residual) {
            Some(delta) => beta += Vector4::new(delta[0], delta[1], delta[2], delta[3]),
            None => break,
        }
    }
    beta
}

/// Absolute-orientation (Procrustes) fit: the rotation/translation mapping
/// model points onto camera points in least squares.
fn fit_pose(model: &[Point3], camera: &[Point3]) -> Result<Pose, PnPError> {
    let n = model.len() as f64;
    let mc: Point3 = model.iter().sum::<Point3>() / n;
    let cc: Point3 = camera.iter().sum::<Point3>() / n;
    let mut h = Matrix3::zeros();
    for (m, c) in model.iter().zip(camera.iter()) {
        h += (m - mc) * (c - cc).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    let det = (vt.transpose() * u.transpose()).determinant();
    d[(2, 2)] = if det < 0.0 { -1.0 } else { 1.0 };
    let r = vt.transpose() * d * u.transpose();
    let t = cc - r * mc;
    Pose::new(r, t).map_err(PnPError::from)
}

/// Camera-frame points reconstructed from a β combination of the kernel,
/// sign-fixed so depths come out positive.
fn camera_points_from_betas(
    kernel: &[DVector<f64>; 4],
    beta: &Vector4<f64>,
    alphas: &[Vector4<f64>],
) -> Vec<Point3> {
    let mut x = DVector::<f64>::zeros(12);
    for k in 0..4 {
        x += &kernel[k] * beta[k];
    }
    let ctrl_cam: [Point3; 4] =
        core::array::from_fn(|j| Point3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2]));
    let mut pts: Vec<Point3> = alphas
        .iter()
        .map(|a| (0..4).map(|j| ctrl_cam[j] * a[j]).sum())
        .collect();
    let mean_z: f64 = pts.iter().map(|p| p.z).sum::<f64>() / pts.len() as f64;
    if mean_z < 0.0 {
        for p in &mut pts {
            *p = -*p;
        }
    }
    pts
}

fn reprojection_rms(pose: &Pose, k2d: &[Point2], k3d: &[Point3], cam: &CameraIntrinsics) -> f64 {
    match project_points(pose, k3d, cam) {
        Ok(proj) => {
            let sq: f64 = proj
                .iter()
                .zip(k2d.iter())
                .map(|(p, k)| (p - k).norm_squared())
                .sum();
            (sq / k2d.len() as f64).sqrt()
        }
        Err(_) => f64::INFINITY,
    }
}

/// Closed-form EPnP: control points, null-space, and the three β cases with
/// relinearization; returns the candidate with the lowest reprojection RMS
/// (ties: lowest case index) before any iterative refinement.
pub fn epnp_closed_form(
    k2d: &[Point2],
    k3d: &[Point3],
    cam: &CameraIntrinsics,
) -> Result<(Pose, f64), PnPError> {
    check_inputs(k2d, k3d)?;
    let ctrl = control_points(k3d)?;
    let alphas = barycentric_coordinates(k3d, &ctrl)?;
    let m = design_matrix(k2d, &alphas, cam);
    let kernel = kernel_vectors(&m);
    let l = l_matrix(&kernel);
    let rho_v = rho(&ctrl);

    let candidates = [
        betas_case1(&l, &rho_v),
        betas_case2(&l, &rho_v),
        betas_case3(&l, &rho_v),
    ];
    let mut best: Option<(Pose, f64)> = None;
    for beta0 in candidates.into_iter().flatten() {
        let beta = refine_betas(&l, &rho_v, beta0);
        let cam_pts = camera_points_from_betas(&kernel, &beta, &alphas);
        let Ok(pose) = fit_pose(k3d, &cam_pts) else {
            continue;
        };
        // Cheirality: discard candidates that put any point behind the camera.
        if k3d
            .iter()
            .any(|p| pose.transform(p).z <= crate::geometry::Z_NEAR)
        {
            continue;
        }
        let rms = reprojection_rms(&pose, k2d, k3d, cam);
        // Strict comparison keeps the lowest case index on ties.
        if best.as_ref().is_none_or(|(_, b)| rms < *b) {
            best = Some((pose, rms));
        }
    }
    best.ok_or(PnPError::NoPositiveDepthSolution)
}

/// Stacked reprojection residual `r` (2N) and Jacobian `J` (2N×6) at `pose`.
fn residual_and_jacobian(
    pose: &Pose,
    k2d: &[Point2],
    k3d: &[Point3],
    cam: &CameraIntrinsics,
) -> Result<(DVector<f64>, DMatrix<f64>), GeometryError> {
    let proj = project_points(pose, k3d, cam)?;
    let jacs = project_jacobian(pose, k3d, cam)?;
    let n = k3d.len();
    let mut r = DVector::<f64>::zeros(2 * n);
    let mut j = DMatrix::<f64>::zeros(2 * n, 6);
    for i in 0..n {
        r[2 * i] = proj[i].x - k2d[i].x;
        r[2 * i + 1] = proj[i].y - k2d[i].y;
        for c in 0..6 {
            j[(2 * i, c)] = jacs[i][(0, c)];
            j[(2 * i + 1, c)] = jacs[i][(1, c)];
        }
    }
    Ok((r, j))
}

/// Gradient of the squared reprojection error `E(θ) = Σ‖r‖²` in the
/// six-parameter pose chart: `g = 2·Jᵀr`.
fn objective_gradient(
    params: &[f64; 6],
    k2d: &[Point2],
    k3d: &[Point3],
    cam: &CameraIntrinsics,
) -> Result<DVector<f64>, GeometryError> {
    let pose = Pose::from_params(params);
    let (r, j) = residual_and_jacobian(&pose, k2d, k3d, cam)?;
    Ok(2.0 * j.transpose() * r)
}

/// Gauss–Newton refinement of `init` minimizing squared reprojection error,
/// with a Levenberg–Marquardt fallback (λ ×10 on reject, ÷10 on accept)
/// after two consecutive residual increases.
fn refine_pose(
    init: &Pose,
    k2d: &[Point2],
    k3d: &[Point3],
    cam: &CameraIntrinsics,
) -> (Pose, usize, bool) {
    let energy = |params: &[f64; 6]| -> f64 {
        let pose = Pose::from_params(params);
        match project_points(&pose, k3d, cam) {
            Ok(proj) => proj
                .iter()
                .zip(k2d.iter())
                .map(|(p, k)| (p - k).norm_squared())
                .sum(),
            Err(_) => f64::INFINITY,
        }
    };
    let mut params = init.params();
    let mut best_params = params;
    let mut best_energy = energy(&params);
    let mut consecutive_increases = 0usize;
    let mut lm_lambda: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..MAX_REFINE_ITERATIONS {
        iterations = iter;
        let pose = Pose::from_params(&params);
        let Ok((r, j)) = residual_and_jacobian(&pose, k2d, k3d, cam) else {
            break;
        };
        let grad = 2.0 * j.transpose() * &r;
        if grad.norm() < GRADIENT_TOL * (1.0 + r.norm()) {
            converged = true;
            break;
        }
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let step = if let Some(lambda) = lm_lambda.as_mut() {
            // LM: damp by the diagonal, retrying with larger λ on rejection.
            let mut accepted = None;
            for _ in 0..20 {
                let mut damped = jtj.clone();
                for d in 0..6 {
                    damped[(d, d)] += *lambda * jtj[(d, d)].max(1e-12);
                }
                let Some(delta) = damped.clone().lu().solve(&(-&jtr)) else {
                    *lambda *= 10.0;
                    continue;
                };
                let mut trial = params;
                for c in 0..6 {
                    trial[c] += delta[c];
                }
                if energy(&trial) < energy(&params) {
                    *lambda = (*lambda / 10.0).max(1e-12);
                    accepted = Some(trial);
                    break;
                }
                *lambda *= 10.0;
            }
            accepted
        } else {
            jtj.clone().lu().solve(&(-&jtr)).map(|delta| {
                let mut trial = params;
                for c in 0..6 {
                    trial[c] += delta[c];
                }
                trial
            })
        };
        let Some(next) = step else {
            break;
        };
        let next_energy = energy(&next);
        let current_energy = energy(&params);
        if next_energy > current_energy {
            consecutive_increases += 1;
            if lm_lambda.is_none() && consecutive_increases >= 2 {
                lm_lambda = Some(1e-3);
                params = best_params; // restart damped from the best point seen
                consecutive_increases = 0;
                continue;
            }
        } else {
            consecutive_increases = 0;
        }
        params = next;
        if next_energy < best_energy {
            best_energy = next_energy;
            best_params = params;
        }
    }
    if converged {
        best_params = params;
    } else {
        // Plateau polish: near the optimum the energy is flat to rounding
        // noise, so energy-based acceptance stalls, but an undamped
        // Gauss–Newton step still contracts the gradient quadratically.
        // Accept a few steps on gradient decrease alone (energy allowed to
        // wobble within noise), then re-check stationarity.
        let grad_norm = |p: &[f64; 6]| objective_gradient(p, k2d, k3d, cam).ok().map(|g| g.norm());
        if let Some(mut g_best) = grad_norm(&best_params) {
            let e_best = energy(&best_params);
            for _ in 0..10 {
                if g_best < GRADIENT_TOL * (1.0 + e_best.sqrt()) {
                    break;
                }
                let pose = Pose::from_params(&best_params);
                let Ok((r, j)) = residual_and_jacobian(&pose, k2d, k3d, cam) else {
                    break;
                };
                let jtj = j.transpose() * &j;
                let jtr = j.transpose() * &r;
                let Some(delta) = jtj.lu().solve(&(-&jtr)) else {
                    break;
                };
                let mut trial = best_params;
                for c in 0..6 {
                    trial[c] += delta[c];
                }
                match grad_norm(&trial) {
                    Some(g_trial)
                        if g_trial < g_best
                            && energy(&trial) <= e_best * (1.0 + 1e-9) + 1e-300 =>
                    {
                        best_params = trial;
                        g_best = g_trial;
                    }
                    _ => break,
                }
            }
            converged = g_best < GRADIENT_TOL * (1.0 + energy(&best_params).sqrt());
        }
    }
    (Pose::from_params(&best_params), iterations, converged)
}

/// Full EPnP solve: closed form then Gauss–Newton refinement to
/// stationarity of the squared reprojection error.
pub fn epnp_solve(
    k2d: &[Point2],
    k3d: &[Point3],
    cam: &CameraIntrinsics,
) -> Result<PnPSolution, PnPError> {
    let (initial, _) = epnp_closed_form(k2d, k3d, cam)?;
    let (pose, iterations, converged) = refine_pose(&initial, k2d, k3d, cam);
    if k3d
        .iter()
        .any(|p| pose.transform(p).z <= crate::geometry::Z_NEAR)
    {
        return Err(PnPError::NoPositiveDepthSolution);
    }
    Ok(PnPSolution {
        reprojection_rms: reprojection_rms(&pose, k2d, k3d, cam),
        pose,
        iterations,
        converged,
    })
}

/// Solves PnP from `k2d`, then projects `k3d` with the solved pose — the
/// reprojection operator. Idempotent: feeding its output back reproduces it
/// (the output is already pose-consistent).
pub fn reproject(
    k2d: &[Point2],
    k3d: &[Point3],
    cam: &CameraIntrinsics,
) -> Result<KeypointSet2D, PnPError> {
    let solution = epnp_solve(k2d, k3d, cam)?;
    project_points(&solution.pose, k3d, cam).map_err(PnPError::from)
}

/// Implicit-function-theorem Jacobian of the solved pose w.r.t. the 2D
/// keypoints: with `g(θ, k) = ∇_θ Σ‖π(θ) − k‖²` vanishing at the solution,
/// `dθ/dk = −(∂g/∂θ)⁻¹ · ∂g/∂k`.
///
/// Returns a 6×2N matrix; keypoint columns are ordered `[x₀, y₀, x₁, …]`.
/// `∂g/∂k` has the closed form `−2Jᵀ`; `∂g/∂θ` is formed per `mode`.
pub fn pnp_jacobian(
    solution: &PnPSolution,
    k2d: &[Point2],
    k3d: &[Point3],
    cam: &CameraIntrinsics,
    mode: HessianMode,
) -> Result<DMatrix<f64>, PnPError> {
    check_inputs(k2d, k3d)?;
    if !solution.converged {
        return Err(PnPError::NotConverged);
    }
    let params = solution.pose.params();
    let (_, j) = residual_and_jacobian(&solution.pose, k2d, k3d, cam)?;

    let hessian: DMatrix<f64> = match mode {
        HessianMode::GaussNewton => 2.0 * j.transpose() * &j,
        HessianMode::Exact => {
            // Central differences of the analytic gradient g(θ) = 2·Jᵀr,
            // symmetrized; this includes the 2·(∂Jᵀ/∂θ)·r curvature term.
            let step = 1e-6;
            let mut h = DMatrix::<f64>::zeros(6, 6);
            for c in 0..6 {
                let mut hi = params;
                let mut lo = params;
                hi[c] += step;
                lo[c] -= step;
                let ghi = objective_gradient(&hi, k2d, k3d, cam)?;
                let glo = objective_gradient(&lo, k2d, k3d, cam)?;
                let col = (ghi - glo) / (2.0 * step);
                for rr in 0..6 {
                    h[(rr, c)] = col[rr];
                }
            }
            (&h + h.transpose()) * 0.5
        }
    };
    let hinv = hessian
        .clone()
        .lu()
        .try_inverse()
        .ok_or(PnPError::SingularHessian)?;
    // ∂g/∂k is −2Jᵀ with the same [x₀, y₀, …] column order as k.
    let dg_dk = -2.0 * j.transpose();
    Ok(DMatrix::from(-(&hinv * dg_dk)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cube_points() -> Vec<Point3> {
        let mut pts = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[-0.5, 0.5] {
                    pts.push(Point3::new(x, y, z));
                }
            }
        }
        pts
    }

    fn test_cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = loop {
            let v = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            if v.norm() > 1e-6 {
                break v / v.norm();
            }
        };
        let angle = rng.random_range(1e-2..core::f64::consts::PI - 1e-2);
        let t = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(2.0..6.0),
        );
        Pose::from_axis_angle(&(axis * angle), &t)
    }

    #[test]
    fn rejects_three_points() {
        let k3d = cube_points()[..3].to_vec();
        let cam = test_cam();
        let k2d = project_points(&Pose::identity(), &k3d, &cam);
        // Identity pose puts some cube corners behind the camera; build the
        // 2D points from a valid pose instead.
        let pose = Pose::from_axis_angle(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 3.0));
        let k2d = k2d.unwrap_or_else(|_| project_points(&pose, &k3d, &cam).unwrap());
        assert!(matches!(
            epnp_solve(&k2d, &k3d, &cam),
            Err(PnPError::TooFewPoints { got: 3 })
        ));
    }

    #[test]
    fn recovers_fixed_frontal_pose() {
        let cam = test_cam();
        let k3d = cube_points();
        let gt = Pose::from_axis_angle(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 3.0));
        let k2d = project_points(&gt, &k3d, &cam).unwrap();
        let sol = epnp_solve(&k2d, &k3d, &cam).unwrap();
        assert!(sol.converged);
        assert!(sol.pose.geodesic_to(&gt) < 1e-6);
        assert!((sol.pose.translation() - gt.translation()).norm() < 1e-8);
        assert!(sol.reprojection_rms < 1e-8);
    }

    #[test]
    fn round_trip_on_seeded_scenes() {
        let cam = test_cam();
        let k3d = cube_points();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for case in 0..100 {
            let gt = random_pose(&mut rng);
            let k2d = project_points(&gt, &k3d, &cam).unwrap();
            let sol = epnp_solve(&k2d, &k3d, &cam).unwrap();
            let rot_err = sol.pose.geodesic_to(&gt);
            let t_err = (sol.pose.translation() - gt.translation()).norm();
            assert!(
                rot_err < 1e-6 && t_err < 1e-8,
                "case {case}: rot err {rot_err:.3e}, t err {t_err:.3e}"
            );
        }
    }

    #[test]
    fn refinement_never_worsens_closed_form() {
        let cam = test_cam();
        let k3d = cube_points();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for _ in 0..50 {
            let gt = random_pose(&mut rng);
            // Noisy observations so the closed form is not already optimal.
            let k2d: Vec<Point2> = project_points(&gt, &k3d, &cam)
                .unwrap()
                .into_iter()
                .map(|p| {
                    Point2::new(
                        p.x + rng.sample::<f64, _>(StandardNormal),
                        p.y + rng.sample::<f64, _>(StandardNormal),
                    )
                })
                .collect();
            let (closed, closed_rms) = epnp_closed_form(&k2d, &k3d, &cam).unwrap();
            let sol = epnp_solve(&k2d, &k3d, &cam).unwrap();
            assert!(
                sol.reprojection_rms <= closed_rms + 1e-12,
                "refined {} > closed-form {} (closed pose {:?})",
                sol.reprojection_rms,
                closed_rms,
                closed.translation()
            );
        }
    }

    #[test]
    fn duplicated_correspondences_leave_pose_unchanged() {
        let cam = test_cam();
        let k3d = cube_points();
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let gt = random_pose(&mut rng);
        let k2d = project_points(&gt, &k3d, &cam).unwrap();
        let mut k2d_dup = k2d.clone();
        k2d_dup.extend_from_slice(&k2d);
        let mut k3d_dup = k3d.clone();
        k3d_dup.extend_from_slice(&k3d);
        let a = epnp_solve(&k2d, &k3d, &cam).unwrap();
        let b = epnp_solve(&k2d_dup, &k3d_dup, &cam).unwrap();
        assert!(a.pose.geodesic_to(&b.pose) < 1e-9);
        assert!((a.pose.translation() - b.pose.translation()).norm() < 1e-9);
    }

    #[test]
    fn reproject_fixes_consistent_points() {
        let cam = test_cam();
        let k3d = cube_points();
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let gt = random_pose(&mut rng);
        let k2d = project_points(&gt, &k3d, &cam).unwrap();
        let out = reproject(&k2d, &k3d, &cam).unwrap();
        for (a, b) in out.iter().zip(k2d.iter()) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn reproject_is_idempotent_under_noise() {
        let cam = test_cam();
        let k3d = cube_points();
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let gt = random_pose(&mut rng);
        let k2d: Vec<Point2> = project_points(&gt, &k3d, &cam)
            .unwrap()
            .into_iter()
            .map(|p| {
                Point2::new(
                    p.x + 2.0 * rng.sample::<f64, _>(StandardNormal),
                    p.y + 2.0 * rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect();
        let once = reproject(&k2d, &k3d, &cam).unwrap();
        let twice = reproject(&once, &k3d, &cam).unwrap();
        for (a, b) in twice.iter().zip(once.iter()) {
            assert!((a - b).norm() < 1e-8, "idempotence violated: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn reproject_redistributes_gross_outlier() {
        let cam = test_cam();
        let k3d = cube_points();
        let mut rng = ChaCha8Rng::seed_from_u64(127);
        let gt = random_pose(&mut rng);
        let mut k2d = project_points(&gt, &k3d, &cam).unwrap();
        k2d[3].x += 50.0;
        let out = reproject(&k2d, &k3d, &cam).unwrap();
        for (i, (a, b)) in out.iter().zip(k2d.iter()).enumerate() {
            assert!((a - b).norm() > 1e-6, "index {i} unchanged");
        }
        // Independent two-step oracle: solve then project.
        let sol = epnp_solve(&k2d, &k3d, &cam).unwrap();
        let oracle = project_points(&sol.pose, &k3d, &cam).unwrap();
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_requires_convergence() {
        let cam = test_cam();
        let k3d = cube_points();
        let pose = Pose::from_axis_angle(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 3.0));
        let k2d = project_points(&pose, &k3d, &cam).unwrap();
        let sol = PnPSolution {
            pose,
            reprojection_rms: 0.0,
            iterations: 0,
            converged: false,
        };
        assert!(matches!(
            pnp_jacobian(&sol, &k2d, &k3d, &cam, HessianMode::default()),
            Err(PnPError::NotConverged)
        ));
    }

    /// Finite-difference oracle: perturb one 2D coordinate, re-solve, and
    /// difference the pose chart.
    fn fd_pose_jacobian(
        k2d: &[Point2],
        k3d: &[Point3],
        cam: &CameraIntrinsics,
        step: f64,
    ) -> DMatrix<f64> {
        let n = k2d.len();
        let mut fd = DMatrix::<f64>::zeros(6, 2 * n);
        for i in 0..n {
            for c in 0..2 {
                let mut hi = k2d.to_vec();
                let mut lo = k2d.to_vec();
                if c == 0 {
                    hi[i].x += step;
                    lo[i].x -= step;
                } else {
                    hi[i].y += step;
                    lo[i].y -= step;
                }
                let ph = epnp_solve(&hi, k3d, cam).unwrap().pose.params();
                let pl = epnp_solve(&lo, k3d, cam).unwrap().pose.params();
                for rr in 0..6 {
                    fd[(rr, 2 * i + c)] = (ph[rr] - pl[rr]) / (2.0 * step);
                }
            }
        }
        fd
    }

    #[test]
    fn ift_jacobian_matches_resolve_fd_noiseless_and_noisy() {
        let cam = test_cam();
        let k3d = cube_points();
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        for case in 0..6 {
            let gt = random_pose(&mut rng);
            let noise = if case % 2 == 0 { 0.0 } else { 1.0 };
            let k2d: Vec<Point2> = project_points(&gt, &k3d, &cam)
                .unwrap()
                .into_iter()
                .map(|p| {
                    Point2::new(
                        p.x + noise * rng.sample::<f64, _>(StandardNormal),
                        p.y + noise * rng.sample::<f64, _>(StandardNormal),
                    )
                })
                .collect();
            let sol = epnp_solve(&k2d, &k3d, &cam).unwrap();
            assert!(sol.converged, "case {case} did not converge");
            let jac = pnp_jacobian(&sol, &k2d, &k3d, &cam, HessianMode::Exact).unwrap();
            let fd = fd_pose_jacobian(&k2d, &k3d, &cam, 1e-4);
            let rel = crate::numeric::max_relative_error(jac.as_slice(), fd.as_slice());
            assert!(rel < 1e-3, "case {case} (noise {noise}): rel err {rel:.3e}");
        }
    }

    #[test]
    fn gauss_newton_hessian_matches_on_noiseless_scene() {
        // With zero residual the curvature term vanishes, so the cheap
        // Gauss-Newton Hessian is also accurate.
        let cam = test_cam();
        let k3d = cube_points();
        let mut rng = ChaCha8Rng::seed_from_u64(137);
        let gt = random_pose(&mut rng);
        let k2d = project_points(&gt, &k3d, &cam).unwrap();
        let sol = epnp_solve(&k2d, &k3d, &cam).unwrap();
        let jac = pnp_jacobian(&sol, &k2d, &k3d, &cam, HessianMode::GaussNewton).unwrap();
        let fd = fd_pose_jacobian(&k2d, &k3d, &cam, 1e-4);
        let rel = crate::numeric::max_relative_error(jac.as_slice(), fd.as_slice());
        assert!(rel < 1e-3, "rel err {rel:.3e}");
    }

    #[test]
    fn ift_jacobian_predicts_common_translation_response() {
        let cam = test_cam();
        let k3d = cube_points();
        let mut rng = ChaCha8Rng::seed_from_u64(139);
        let gt = random_pose(&mut rng);
        let k2d = project_points(&gt, &k3d, &cam).unwrap();
        let sol = epnp_solve(&k2d, &k3d, &cam).unwrap();
        let jac = pnp_jacobian(&sol, &k2d, &k3d, &cam, HessianMode::Exact).unwrap();

        let delta = 0.01;
        let shifted: Vec<Point2> = k2d.iter().map(|p| Point2::new(p.x + delta, p.y)).collect();
        let resolved = epnp_solve(&shifted, &k3d, &cam).unwrap().pose.params();
        let base = sol.pose.params();
        let actual: Vec<f64> = (0..6).map(|i| resolved[i] - base[i]).collect();
        let mut predicted = vec![0.0; 6];
        for i in 0..k2d.len() {
            for rr in 0..6 {
                predicted[rr] += jac[(rr, 2 * i)] * delta;
            }
        }
        let actual_norm = actual.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff_norm = actual
            .iter()
            .zip(predicted.iter())
            .map(|(a, p)| (a - p) * (a - p))
            .sum::<f64>()
            .sqrt();
        assert!(
            diff_norm <= 0.05 * actual_norm,
            "first-order prediction off by {:.2}%",
            100.0 * diff_norm / actual_norm
        );
    }
}
