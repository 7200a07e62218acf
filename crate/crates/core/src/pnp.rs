//! EPnP pose estimation and the ground-truth rigid-flow oracle built on it.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rigid_flow, so3_exp, Intrinsics, PoseSE3};
use crate::matching::SeedSet;
use crate::raster::{DepthMap, FlowField, ValidityMask};

/// Relative covariance eigenvalue below which the point set is treated as planar.
pub const PLANAR_TOL: f64 = 1e-6;
const COLLINEAR_TOL: f64 = 1e-12;
const REFINE_ITERATIONS: usize = 10;
const REFINE_DAMPING: f64 = 1e-8;

/// A 3D point in the reference frame and its pixel observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence3D2D {
    pub x: Vector3<f64>,
    pub p: Vector2<f64>,
}

struct ControlFrame {
    /// World control points.
    ctrl: Vec<Vector3<f64>>,
    /// Barycentric coordinates of every point, one row per point.
    alphas: Vec<[f64; 4]>,
}

fn control_frame(points: &[Vector3<f64>]) -> Result<ControlFrame> {
    let n = points.len() as f64;
    let c0 = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - c0;
        a + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lambda: [f64; 3] = order.map(|i| eig.eigenvalues[i].max(0.0));
    let axes: [Vector3<f64>; 3] = order.map(|i| eig.eigenvectors.column(i).into_owned());
    if !(lambda[0] > 0.0) {
        return Err(Error::RankDeficient("all 3D points coincide".into()));
    }
    if lambda[1] <= COLLINEAR_TOL * lambda[0] {
        return Err(Error::RankDeficient("3D points are collinear".into()));
    }
    let dims = if lambda[2] < PLANAR_TOL * lambda[0] {
        2
    } else {
        3
    };
    let scales: Vec<f64> = lambda[..dims].iter().map(|l| l.sqrt()).collect();
    let mut ctrl = vec![c0];
    for d in 0..dims {
        ctrl.push(c0 + axes[d] * scales[d]);
    }
    let alphas = points
        .iter()
        .map(|p| {
            let mut a = [0.0; 4];
            for d in 0..dims {
                a[d + 1] = (p - c0).dot(&axes[d]) / scales[d];
            }
            a[0] = 1.0 - a[1..].iter().sum::<f64>();
            a
        })
        .collect();
    Ok(ControlFrame { ctrl, alphas })
}

/// Rigid transform taking `src[i]` onto `dst[i]` in the least-squares sense.
fn align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> PoseSE3 {
    let n = src.len() as f64;
    let ms = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let md = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let h = src.iter().zip(dst).fold(Matrix3::zeros(), |a, (s, d)| {
        a + (s - ms) * (d - md).transpose()
    });
    let svd = h.svd(true, true);
    let (u, v) = (svd.u.expect("u"), svd.v_t.expect("v_t").transpose());
    let mut fix = Matrix3::identity();
    fix[(2, 2)] = (v * u.transpose()).determinant().signum();
    let r = v * fix * u.transpose();
    PoseSE3 {
        rotation: r,
        translation: md - r * ms,
    }
}

fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut fix = Matrix3::identity();
    fix[(2, 2)] = (u * v_t).determinant().signum();
    u * fix * v_t
}

/// Sum of squared pixel reprojection errors; infinite if a point is behind
/// the camera.
fn reprojection_cost(pose: &PoseSE3, corr: &[Correspondence3D2D], k: &Intrinsics) -> f64 {
    let mut cost = 0.0;
    for c in corr {
        let q = pose.transform(&c.x);
        if !(q.z > 0.0) {
            return f64::INFINITY;
        }
        cost += (k.project_unchecked(&q) - c.p).norm_squared();
    }
    cost
}

/// Pixel reprojection error of one correspondence.
pub fn reprojection_error(pose: &PoseSE3, c: &Correspondence3D2D, k: &Intrinsics) -> f64 {
    let q = pose.transform(&c.x);
    if !(q.z > 0.0) {
        return f64::INFINITY;
    }
    (k.project_unchecked(&q) - c.p).norm()
}

/// Damped Gauss–Newton on reprojection error with left perturbations
/// `R ← exp(δω)R, t ← exp(δω)t + δt`. Steps that do not lower the cost are
/// rejected.
fn refine(mut pose: PoseSE3, corr: &[Correspondence3D2D], k: &Intrinsics) -> PoseSE3 {
    let mut cost = reprojection_cost(&pose, corr, k);
    for _ in 0..REFINE_ITERATIONS {
        if !cost.is_finite() || cost == 0.0 {
            break;
        }
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corr {
            let q = pose.transform(&c.x);
            let r = k.project_unchecked(&q) - c.p;
            let pj = k.projection_jacobian(&q);
            for (row, res) in pj.iter().zip([r.x, r.y]) {
                // ∂q/∂δω = −[q]×, ∂q/∂δt = I.
                let dw = q.cross(row);
                let j = Vector6::new(dw.x, dw.y, dw.z, row.x, row.y, row.z);
                jtj += j * j.transpose();
                jtr += j * res;
            }
        }
        jtj += Matrix6::identity() * REFINE_DAMPING;
        let Some(delta) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
            break;
        };
        let dr = so3_exp(&Vector3::new(delta[0], delta[1], delta[2]));
        let candidate = PoseSE3 {
            rotation: dr * pose.rotation,
            translation: dr * pose.translation + Vector3::new(delta[3], delta[4], delta[5]),
        };
        let new_cost = reprojection_cost(&candidate, corr, k);
        if new_cost < cost {
            pose = candidate;
            cost = new_cost;
        } else {
            break;
        }
    }
    pose
}

/// Least-squares solve via SVD.
fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().svd(true, true).solve(b, 1e-14).ok()
}

/// Camera-frame control points for `n_null` null vectors with coefficients
/// fitted to the world control-point distances.
fn betas_for(
    null: &[Vec<Vector3<f64>>],
    pairs: &[(usize, usize)],
    dist2: &[f64],
    n_null: usize,
) -> Option<Vec<f64>> {
    let diff = |kk: usize, (a, b): (usize, usize)| null[kk][a] - null[kk][b];
    let mut unknowns = Vec::new();
    for i in 0..n_null {
        for j in i..n_null {
            unknowns.push((i, j));
        }
    }
    if unknowns.len() > pairs.len() {
        return None;
    }
    let mut l = DMatrix::<f64>::zeros(pairs.len(), unknowns.len());
    for (r, &pair) in pairs.iter().enumerate() {
        for (c, &(i, j)) in unknowns.iter().enumerate() {
            let d = diff(i, pair).dot(&diff(j, pair));
            l[(r, c)] = if i == j { d } else { 2.0 * d };
        }
    }
    let rho = DVector::from_column_slice(dist2);
    let b = lstsq(&l, &rho)?;
    let b11 = b[0];
    let mut beta = vec![0.0; n_null];
    beta[0] = b11.abs().sqrt();
    for k in 1..n_null {
        let diag = unknowns.iter().position(|&u| u == (k, k))?;
        let cross = unknowns.iter().position(|&u| u == (0, k))?;
        beta[k] = b[diag].abs().sqrt() * b[cross].signum() * b11.signum();
    }

    // Gauss–Newton on the distance residuals.
    let residuals = |beta: &[f64]| -> Vec<f64> {
        pairs
            .iter()
            .zip(dist2)
            .map(|(&pair, d2)| {
                let v: Vector3<f64> = (0..n_null).map(|kk| diff(kk, pair) * beta[kk]).sum();
                v.norm_squared() - d2
            })
            .collect()
    };
    let sq = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut res = residuals(&beta);
    for _ in 0..10 {
        let mut j = DMatrix::<f64>::zeros(pairs.len(), n_null);
        for (r, &pair) in pairs.iter().enumerate() {
            let v: Vector3<f64> = (0..n_null).map(|kk| diff(kk, pair) * beta[kk]).sum();
            for kk in 0..n_null {
                j[(r, kk)] = 2.0 * v.dot(&diff(kk, pair));
            }
        }
        let Some(step) = lstsq(&j, &(-DVector::from_column_slice(&res))) else {
            break;
        };
        let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
        let cand_res = residuals(&cand);
        if sq(&cand_res) < sq(&res) {
            beta = cand;
            res = cand_res;
        } else {
            break;
        }
    }
    Some(beta)
}

/// EPnP: pose mapping reference-frame points into the camera that observed
/// them, refined by damped Gauss–Newton on pixel reprojection error.
pub fn epnp_solve(corr: &[Correspondence3D2D], k: &Intrinsics) -> Result<PoseSE3> {
    k.validate()?;
    if corr.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: corr.len(),
        });
    }
    if corr
        .iter()
        .any(|c| !c.x.iter().chain(c.p.iter()).all(|v| v.is_finite()))
    {
        return Err(Error::InvalidInput("correspondences must be finite".into()));
    }
    let world: Vec<Vector3<f64>> = corr.iter().map(|c| c.x).collect();
    let frame = control_frame(&world)?;
    let m = frame.ctrl.len();

    let mut mm = DMatrix::<f64>::zeros(2 * corr.len(), 3 * m);
    for (i, (c, a)) in corr.iter().zip(&frame.alphas).enumerate() {
        let ray = k.ray(c.p.x, c.p.y);
        for j in 0..m {
            mm[(2 * i, 3 * j)] = a[j];
            mm[(2 * i, 3 * j + 2)] = -a[j] * ray.x;
            mm[(2 * i + 1, 3 * j + 1)] = a[j];
            mm[(2 * i + 1, 3 * j + 2)] = -a[j] * ray.y;
        }
    }
    let mtm = mm.transpose() * &mm;
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..3 * m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let null: Vec<Vec<Vector3<f64>>> = order
        .iter()
        .take(4)
        .map(|&col| {
            let v = eig.eigenvectors.column(col);
            (0..m)
                .map(|j| Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]))
                .collect()
        })
        .collect();

    let mut pairs = Vec::new();
    let mut dist2 = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            pairs.push((a, b));
            dist2.push((frame.ctrl[a] - frame.ctrl[b]).norm_squared());
        }
    }

    let mut best: Option<(f64, PoseSE3)> = None;
    for n_null in 1..=3 {
        let Some(beta) = betas_for(&null, &pairs, &dist2, n_null) else {
            continue;
        };
        let mut ctrl_cam: Vec<Vector3<f64>> = (0..m)
            .map(|j| (0..n_null).map(|kk| null[kk][j] * beta[kk]).sum())
            .collect();
        let mut cam: Vec<Vector3<f64>> = frame
            .alphas
            .iter()
            .map(|a| (0..m).map(|j| ctrl_cam[j] * a[j]).sum())
            .collect();
        if cam.iter().map(|p| p.z).sum::<f64>() < 0.0 {
            ctrl_cam.iter_mut().for_each(|c| *c = -*c);
            cam.iter_mut().for_each(|c| *c = -*c);
        }
        let pose = align(&world, &cam);
        let cost = reprojection_cost(&pose, corr, k);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, pose));
        }
    }
    let (_, pose) = best.ok_or_else(|| Error::RankDeficient("no EPnP hypothesis".into()))?;
    let mut pose = refine(pose, corr, k);
    pose.rotation = orthonormalize(&pose.rotation);

    let in_front = corr.iter().filter(|c| pose.transform(&c.x).z > 0.0).count();
    if 2 * in_front < corr.len() {
        return Err(Error::Cheirality);
    }
    Ok(pose)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PnpRansacConfig {
    pub iterations: usize,
    /// Reprojection threshold in pixels.
    pub inlier_px: f64,
    pub rng_seed: u64,
}

impl Default for PnpRansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_px: 2.0,
            rng_seed: 0,
        }
    }
}

impl PnpRansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.inlier_px > 0.0) {
            return Err(Error::Config(
                "pnp ransac needs iterations >= 1 and inlier_px > 0".into(),
            ));
        }
        Ok(())
    }
}

fn inliers(pose: &PoseSE3, corr: &[Correspondence3D2D], k: &Intrinsics, px: f64) -> Vec<bool> {
    corr.iter()
        .map(|c| reprojection_error(pose, c, k) < px)
        .collect()
}

/// EPnP inside RANSAC over 4-point samples, refitted on the best consensus set.
/// Returns the pose and the inlier flags of the final pose.
pub fn epnp_ransac(
    corr: &[Correspondence3D2D],
    k: &Intrinsics,
    cfg: &PnpRansacConfig,
) -> Result<(PoseSE3, Vec<bool>)> {
    cfg.validate()?;
    if corr.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: corr.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(usize, PoseSE3)> = None;
    let mut last_err = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, corr.len(), 4).into_vec();
        let subset: Vec<_> = idx.iter().map(|&i| corr[i]).collect();
        let pose = match epnp_solve(&subset, k) {
            Ok(p) => p,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let count = inliers(&pose, corr, k, cfg.inlier_px)
            .iter()
            .filter(|b| **b)
            .count();
        if best.as_ref().is_none_or(|(n, _)| count > *n) {
            best = Some((count, pose));
        }
        if count == corr.len() {
            break;
        }
    }
    let Some((count, mut pose)) = best else {
        return Err(last_err.unwrap_or_else(|| Error::RankDeficient("no valid EPnP sample".into())));
    };
    let mut mask = inliers(&pose, corr, k, cfg.inlier_px);
    if count >= 4 {
        let consensus: Vec<_> = corr
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(c, _)| *c)
            .collect();
        if let Ok(refit) = epnp_solve(&consensus, k) {
            let refit_mask = inliers(&refit, corr, k, cfg.inlier_px);
            if refit_mask.iter().filter(|b| **b).count() >= count {
                pose = refit;
                mask = refit_mask;
            }
        }
    }
    Ok((pose, mask))
}

/// Oracle flow and the pose it was composed from.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFlow {
    pub flow: FlowField,
    /// Pixels whose transformed point lies in front of the source camera.
    pub valid: ValidityMask,
    pub pose: PoseSE3,
    pub inliers: usize,
    pub used_seeds: usize,
}

/// Lifts seeds through the target depth, solves the pose robustly and
/// composes the rigid flow of the whole depth map.
///
/// Seeds on pixels flagged invalid in `depth_valid` are dropped.
pub fn gt_rigid_flow(
    depth_t: &DepthMap,
    depth_valid: Option<&ValidityMask>,
    seeds: &SeedSet,
    k: &Intrinsics,
    cfg: &PnpRansacConfig,
) -> Result<OracleFlow> {
    if depth_t.dims() != seeds.dims() {
        return Err(Error::dims(depth_t.dims(), seeds.dims()));
    }
    if let Some(m) = depth_valid {
        if m.dims() != depth_t.dims() {
            return Err(Error::dims(depth_t.dims(), m.dims()));
        }
    }
    let corr: Vec<Correspondence3D2D> = seeds
        .entries()
        .iter()
        .filter(|s| depth_valid.is_none_or(|m| m.get(s.x, s.y)))
        .map(|s| {
            let (x, y) = (s.x as f64, s.y as f64);
            Correspondence3D2D {
                x: k.ray(x, y) * depth_t.get(s.x, s.y),
                p: Vector2::new(x + s.flow[0], y + s.flow[1]),
            }
        })
        .collect();
    if corr.len() < 4 {
        return Err(Error::InsufficientSeeds {
            needed: 4,
            got: corr.len(),
        });
    }
    let (pose, mask) = epnp_ransac(&corr, k, cfg)?;
    let (flow, valid) = rigid_flow(depth_t, &pose, k);
    Ok(OracleFlow {
        flow,
        valid,
        pose,
        inliers: mask.iter().filter(|b| **b).count(),
        used_seeds: corr.len(),
    })
}

/// Mean endpoint error over masked pixels.
pub fn flow_epe(predicted: &FlowField, gt: &FlowField, mask: &ValidityMask) -> Result<f64> {
    if predicted.dims() != gt.dims() {
        return Err(Error::dims(gt.dims(), predicted.dims()));
    }
    if mask.dims() != gt.dims() {
        return Err(Error::dims(gt.dims(), mask.dims()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, g), &m) in predicted.data().iter().zip(gt.data()).zip(mask.data()) {
        if m {
            sum += (p[0] - g[0]).hypot(p[1] - g[1]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("EPE over an empty mask".into()));
    }
    Ok(sum / n as f64)
}
