//! Per-instance depth and pose reconstruction supervised by optical flow.
//!
//! Depth is `1 / softplus(z)` per pixel, each source pose is an axis-angle
//! rotation plus a translation. The objective is
//! `λ1·L_flow + λ2·L_ph + λ3·L_s_depth + λ4·L_s_normal`, where `L_flow` is the
//! berHu distance between the rigid flow of the current estimate and the
//! supervision flow (averaged over sources) and `L_ph` is the per-pixel
//! minimum photometric error over sources. After every step depth is
//! divided by its spatial mean and translations by the same factor; every
//! term is invariant under that rescaling.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{flow_at, rigid_flow, so3_exp, so3_left_jacobian, Intrinsics, PoseSE3};
use crate::losses::{
    berhu_threshold, depth_smoothness, normal_smoothness, photometric_loss, rigid_flow_loss,
    synthesized_key, BerhuThreshold, LossWeights, KEY_DEPTH, KEY_PREDICTED,
};
use crate::optim::{Adam, EarlyStop};
use crate::raster::{DepthMap, FlowField, Image, ValidityMask};
use crate::warp::{warp_gradient, warp_image};

/// Largest normalized translation (mean depth 1) reported as no motion.
pub const DEGENERATE_BASELINE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub depth_lr: f64,
    pub pose_lr: f64,
    pub iterations: usize,
    /// Learning rates decay geometrically to this fraction by the last iteration.
    pub final_lr_ratio: f64,
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    pub berhu: BerhuThreshold,
    pub init_depth: f64,
    /// Relative depth variance below which the solution counts as collapsed.
    pub collapse_tol: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            depth_lr: 0.05,
            pose_lr: 0.005,
            iterations: 400,
            final_lr_ratio: 0.05,
            early_stop_window: 100,
            early_stop_tol: 1e-9,
            berhu: BerhuThreshold::Adaptive,
            init_depth: 1.0,
            collapse_tol: 1e-6,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.depth_lr,
            self.pose_lr,
            self.init_depth,
            self.collapse_tol,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(
                "recon learning rates, init_depth and collapse_tol must be > 0".into(),
            ));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::Config(
                "recon final_lr_ratio must lie in (0, 1]".into(),
            ));
        }
        if self.iterations == 0 || self.early_stop_window == 0 {
            return Err(Error::Config(
                "recon iterations and early_stop_window must be >= 1".into(),
            ));
        }
        if let BerhuThreshold::Fixed(c) = self.berhu {
            if !(c > 0.0) {
                return Err(Error::Config("fixed berHu threshold must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// One target view, its sources, and one supervision flow per source.
#[derive(Debug, Clone)]
pub struct ReconProblem {
    pub target: Image,
    pub sources: Vec<Image>,
    pub supervision: Vec<FlowField>,
    /// Pixels of each supervision flow that take part in `L_flow`.
    pub supervision_valid: Vec<ValidityMask>,
    pub intrinsics: Intrinsics,
    pub weights: LossWeights,
    pub config: ReconConfig,
}

impl ReconProblem {
    /// Builds a problem that trusts every supervision pixel.
    pub fn new(
        target: Image,
        sources: Vec<Image>,
        supervision: Vec<FlowField>,
        intrinsics: Intrinsics,
        weights: LossWeights,
        config: ReconConfig,
    ) -> Result<Self> {
        let (w, h) = target.dims();
        let supervision_valid = vec![ValidityMask::filled(w, h, true); supervision.len()];
        let p = Self {
            target,
            sources,
            supervision,
            supervision_valid,
            intrinsics,
            weights,
            config,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_supervision_masks(mut self, masks: Vec<ValidityMask>) -> Result<Self> {
        self.supervision_valid = masks;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidInput(
                "reconstruction needs at least one source".into(),
            ));
        }
        if self.supervision.len() != self.sources.len()
            || self.supervision_valid.len() != self.sources.len()
        {
            return Err(Error::InvalidInput(format!(
                "{} sources but {} supervision flows and {} masks",
                self.sources.len(),
                self.supervision.len(),
                self.supervision_valid.len()
            )));
        }
        let dims = self.target.dims();
        for s in &self.sources {
            self.target.check_same_dims(s)?;
        }
        for f in &self.supervision {
            if f.dims() != dims {
                return Err(Error::dims(dims, f.dims()));
            }
        }
        for m in &self.supervision_valid {
            if m.dims() != dims {
                return Err(Error::dims(dims, m.dims()));
            }
        }
        self.intrinsics.validate()?;
        self.weights.validate()?;
        self.config.validate()
    }

    fn pixels(&self) -> usize {
        self.target.width() * self.target.height()
    }

    /// Length of the flat parameter vector `[z (N) | (ω, t) per source]`.
    pub fn param_len(&self) -> usize {
        self.pixels() + 6 * self.sources.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconSolution {
    pub depth: DepthMap,
    pub poses: Vec<PoseSE3>,
    pub loss_trace: Vec<f64>,
    pub best_loss: f64,
    /// Relative depth variance fell below the collapse tolerance.
    pub collapsed: bool,
    /// Every normalized translation is below [`DEGENERATE_BASELINE`], so
    /// depth is unobservable.
    pub degenerate: bool,
}

// ── Parameterization ────────────────────────────────────────────────────

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Depth of parameter `z`.
pub fn depth_of(z: f64) -> f64 {
    1.0 / softplus(z)
}

/// Parameter whose depth is `d`.
pub fn param_of_depth(d: f64) -> f64 {
    softplus_inv(1.0 / d)
}

fn pose_of(p: &[f64]) -> PoseSE3 {
    PoseSE3::from_axis_angle(
        Vector3::new(p[0], p[1], p[2]),
        Vector3::new(p[3], p[4], p[5]),
    )
}

fn write_pose(p: &mut [f64], pose: &PoseSE3) {
    let w = pose.axis_angle();
    p[..3].copy_from_slice(w.as_slice());
    p[3..6].copy_from_slice(pose.translation.as_slice());
}

/// Flat parameters for a depth map and source poses.
pub fn pack_params(depth: &DepthMap, poses: &[PoseSE3]) -> Vec<f64> {
    let mut p: Vec<f64> = depth.data().iter().map(|&d| param_of_depth(d)).collect();
    for pose in poses {
        let mut six = [0.0; 6];
        write_pose(&mut six, pose);
        p.extend_from_slice(&six);
    }
    p
}

/// Depth map and poses of flat parameters.
pub fn unpack_params(problem: &ReconProblem, params: &[f64]) -> Result<(DepthMap, Vec<PoseSE3>)> {
    if params.len() != problem.param_len() {
        return Err(Error::InvalidInput(format!(
            "expected {} parameters, got {}",
            problem.param_len(),
            params.len()
        )));
    }
    let (w, h) = problem.target.dims();
    let n = w * h;
    let depth = DepthMap::new(w, h, params[..n].iter().map(|&z| depth_of(z)).collect())?;
    let poses = params[n..].chunks(6).map(pose_of).collect();
    Ok((depth, poses))
}

/// Rescales depth to unit spatial mean and translations by the same factor.
pub fn normalize_scale(params: &mut [f64], pixels: usize) {
    let mean = params[..pixels].iter().map(|&z| depth_of(z)).sum::<f64>() / pixels as f64;
    if !(mean.is_finite() && mean > 0.0) {
        return;
    }
    for z in &mut params[..pixels] {
        *z = softplus_inv(softplus(*z) * mean);
    }
    for pose in params[pixels..].chunks_mut(6) {
        for t in &mut pose[3..] {
            *t /= mean;
        }
    }
}

// ── Objective ───────────────────────────────────────────────────────────

/// Objective value and its gradient w.r.t. the flat parameters.
pub fn recon_objective(problem: &ReconProblem, params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (depth, poses) = unpack_params(problem, params)?;
    let k = &problem.intrinsics;
    let wts = &problem.weights;
    let (w, h) = depth.dims();
    let n = w * h;
    let sources = problem.sources.len();

    let rigid: Vec<(FlowField, ValidityMask)> =
        poses.iter().map(|p| rigid_flow(&depth, p, k)).collect();
    let mut flow_grads = vec![vec![0.0; 2 * n]; sources];
    let mut grad_depth = vec![0.0; n];
    let mut value = 0.0;

    if wts.lambda1 > 0.0 {
        let scale = wts.lambda1 / sources as f64;
        for (j, (flow, valid)) in rigid.iter().enumerate() {
            let mask = valid.and(&problem.supervision_valid[j])?;
            let res = rigid_flow_loss(flow, &problem.supervision[j], &mask, problem.config.berhu)?;
            value += scale * res.value;
            if let Some(g) = res.gradient(KEY_PREDICTED) {
                flow_grads[j]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += scale * b);
            }
        }
    }

    if wts.lambda2 > 0.0 {
        let mut synthesized = Vec::with_capacity(sources);
        for (j, (flow, valid)) in rigid.iter().enumerate() {
            let (img, mask) = warp_image(&problem.sources[j], flow)?;
            synthesized.push((img, mask.and(valid)?));
        }
        let res = photometric_loss(&problem.target, &synthesized, wts)?;
        value += wts.lambda2 * res.value;
        for (j, (flow, _)) in rigid.iter().enumerate() {
            let Some(up) = res.gradient(&synthesized_key(j)) else {
                continue;
            };
            let up: Vec<f64> = up.iter().map(|g| wts.lambda2 * g).collect();
            let g = warp_gradient(&problem.sources[j], flow, &up)?;
            flow_grads[j]
                .iter_mut()
                .zip(g.as_flat())
                .for_each(|(a, b)| *a += b);
        }
    }

    for (lambda, res) in [
        (
            wts.lambda3,
            (wts.lambda3 > 0.0).then(|| depth_smoothness(&depth, &problem.target)),
        ),
        (
            wts.lambda4,
            (wts.lambda4 > 0.0).then(|| normal_smoothness(&depth, k, &problem.target)),
        ),
    ] {
        let Some(res) = res.transpose()? else {
            continue;
        };
        value += lambda * res.value;
        if let Some(g) = res.gradient(KEY_DEPTH) {
            grad_depth
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += lambda * b);
        }
    }

    let mut grad = vec![0.0; params.len()];
    for (j, pose) in poses.iter().enumerate() {
        let omega = pose.axis_angle();
        let jl_t = so3_left_jacobian(&omega).transpose();
        let (mut g_omega, mut g_t) = (Vector3::zeros(), Vector3::zeros());
        let (_, valid) = &rigid[j];
        let fg = &flow_grads[j];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !valid.data()[i] || (fg[2 * i] == 0.0 && fg[2 * i + 1] == 0.0) {
                    continue;
                }
                let ray = k.ray(x as f64, y as f64);
                let r_ray = pose.rotation * ray;
                let rx = r_ray * depth.data()[i];
                let jp = k.projection_jacobian(&(rx + pose.translation));
                let g = jp[0] * fg[2 * i] + jp[1] * fg[2 * i + 1];
                grad_depth[i] += g.dot(&r_ray);
                g_t += g;
                g_omega += rx.cross(&g);
            }
        }
        let base = n + 6 * j;
        grad[base..base + 3].copy_from_slice((jl_t * g_omega).as_slice());
        grad[base + 3..base + 6].copy_from_slice(g_t.as_slice());
    }
    for i in 0..n {
        let z = params[i];
        let s = softplus(z);
        grad[i] = grad_depth[i] * (-sigmoid(z) / (s * s));
    }
    Ok((value, grad))
}

// ── Solver ──────────────────────────────────────────────────────────────

fn relative_variance(depth: &DepthMap) -> f64 {
    let d = depth.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
    var / (mean * mean)
}

/// Starting depth and poses.
///
/// With `λ1 = 0` the run sees no flow: constant depth and identity poses.
/// Otherwise poses come from [`pose_from_flow`] at constant depth, or at the
/// depth triangulated from a linear two-view fit of a supervision flow when
/// that explains the supervision better. The second candidate resolves the
/// lateral-translation / rotation ambiguity that constant depth invites.
pub fn initialize(problem: &ReconProblem) -> Result<(DepthMap, Vec<PoseSE3>)> {
    let (w, h) = problem.target.dims();
    let constant = DepthMap::constant(w, h, problem.config.init_depth)?;
    if problem.weights.lambda1 == 0.0 {
        return Ok((constant, vec![PoseSE3::identity(); problem.sources.len()]));
    }
    let k = &problem.intrinsics;
    let fit = |depth: &DepthMap| -> Result<(Vec<PoseSE3>, f64)> {
        let mut poses = Vec::with_capacity(problem.sources.len());
        let mut cost = 0.0;
        for (f, m) in problem.supervision.iter().zip(&problem.supervision_valid) {
            // Unobservable motion leaves the identity as the starting point.
            let pose = match pose_from_flow_masked(f, Some(m), depth, k) {
                Ok(fit) => fit.pose,
                Err(Error::DegenerateMotion(_)) | Err(Error::InsufficientData { .. }) => {
                    PoseSE3::identity()
                }
                Err(e) => return Err(e),
            };
            cost += mean_flow_residual(f, m, depth, &pose, k);
            poses.push(pose);
        }
        Ok((poses, cost))
    };
    let (poses, cost) = fit(&constant)?;
    let mut best = (constant, poses, cost);
    for (f, m) in problem.supervision.iter().zip(&problem.supervision_valid) {
        let Some(depth) = two_view_depth(f, m, k) else {
            continue;
        };
        let (poses, cost) = fit(&depth)?;
        if cost < best.2 {
            best = (depth, poses, cost);
        }
    }
    Ok((best.0, best.1))
}

/// Mean endpoint distance between `flow` and the rigid flow of `(depth, pose)`
/// over `mask`; pixels that leave the camera count as infinitely wrong.
fn mean_flow_residual(
    flow: &FlowField,
    mask: &ValidityMask,
    depth: &DepthMap,
    pose: &PoseSE3,
    k: &Intrinsics,
) -> f64 {
    let (w, _) = depth.dims();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, f) in flow.data().iter().enumerate() {
        if !mask.data()[i] {
            continue;
        }
        let ray = k.ray((i % w) as f64, (i / w) as f64);
        match flow_at(k, &ray, depth.data()[i], pose) {
            Some((r, _)) => sum += (r[0] - f[0]).hypot(r[1] - f[1]),
            None => return f64::INFINITY,
        }
        count += 1;
    }
    if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    }
}

/// Depth triangulated from the essential matrix fitted linearly to the
/// correspondences `(p, p + flow(p))` over `mask`, scaled to unit mean.
/// `None` when fewer than 8 correspondences exist or fewer than half of
/// them triangulate in front of both cameras.
fn two_view_depth(
    flow: &FlowField,
    mask: &ValidityMask,
    k: &Intrinsics,
) -> Option<DepthMap> {
    let (w, h) = flow.dims();
    let mut idx = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, f) in flow.data().iter().enumerate() {
        if mask.data()[i] {
            let (px, py) = ((i % w) as f64, (i / w) as f64);
            idx.push(i);
            xs.push(k.ray(px, py));
            ys.push(k.ray(px + f[0], py + f[1]));
        }
    }
    if idx.len() < 8 {
        return None;
    }
    let essential = fit_essential(&xs, &ys)?;
    let svd = essential.svd(true, true);
    let (mut u, mut v_t) = (svd.u?, svd.v_t?);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let wm = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let mut best: Option<(usize, Vec<Option<f64>>)> = None;
    for r in [u * wm * v_t, u * wm.transpose() * v_t] {
        for t in [t, -t] {
            let depths: Vec<Option<f64>> = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| {
                    let rx = r * x;
                    let a = y.cross(&rx);
                    let b = y.cross(&t);
                    let aa = a.norm_squared();
                    if aa < 1e-18 {
                        return None;
                    }
                    let d = -a.dot(&b) / aa;
                    (d > 0.0 && d * rx.z + t.z > 0.0).then_some(d)
                })
                .collect();
            let count = depths.iter().flatten().count();
            if best.as_ref().is_none_or(|b| count > b.0) {
                best = Some((count, depths));
            }
        }
    }
    let (count, depths) = best?;
    if 2 * count < idx.len() {
        return None;
    }
    let mut known = vec![None; w * h];
    for (&i, d) in idx.iter().zip(&depths) {
        known[i] = *d;
    }
    let mut data = fill_nearest(&known, w, h)?;
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    data.iter_mut().for_each(|d| *d /= mean);
    DepthMap::new(w, h, data).ok()
}

/// Essential matrix fitted to ray pairs by Sampson-weighted IRLS with Huber
/// weights, projected onto the essential manifold every round.
fn fit_essential(xs: &[Vector3<f64>], ys: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    let t1 = hartley(xs);
    let t2 = hartley(ys);
    let mut weights = vec![1.0; xs.len()];
    let mut essential = Matrix3::zeros();
    for round in 0..=ESSENTIAL_IRLS_ROUNDS {
        let mut ata = nalgebra::SMatrix::<f64, 9, 9>::zeros();
        for ((x, y), wt) in xs.iter().zip(ys).zip(&weights) {
            let (a, b) = (t1 * x, t2 * y);
            let row = nalgebra::SVector::<f64, 9>::from_row_slice(&[
                b.x * a.x,
                b.x * a.y,
                b.x,
                b.y * a.x,
                b.y * a.y,
                b.y,
                a.x,
                a.y,
                1.0,
            ]);
            ata += *wt * row * row.transpose();
        }
        let eig = ata.symmetric_eigen();
        let (min_i, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))?;
        let e = eig.eigenvectors.column(min_i);
        let en = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
        // Project onto the essential manifold: two equal singular values.
        let svd = (t2.transpose() * en * t1).svd(true, true);
        let sv = svd.singular_values;
        let m = 0.5 * (sv[0] + sv[1]);
        essential = svd.u? * Matrix3::from_diagonal(&Vector3::new(m, m, 0.0)) * svd.v_t?;
        if round == ESSENTIAL_IRLS_ROUNDS {
            break;
        }
        // Sampson distances in focal-length units, reweighted by Huber at
        // 1.5 robust standard deviations.
        let sampson: Vec<(f64, f64)> = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let ex = essential * x;
                let ety = essential.transpose() * y;
                let den = ex.x * ex.x + ex.y * ex.y + ety.x * ety.x + ety.y * ety.y;
                let den = den.max(1e-300);
                ((y.dot(&ex)).abs() / den.sqrt(), den)
            })
            .collect();
        let scale = 1.4826 * median(sampson.iter().map(|s| s.0).collect());
        let c = (1.5 * scale).max(1e-12);
        // The algebraic rows of the normalized system carry the factor
        // den·|T|²; dividing by den turns their squares into Sampson errors.
        for (wt, (dist, den)) in weights.iter_mut().zip(&sampson) {
            let huber = if *dist <= c { 1.0 } else { c / dist };
            *wt = huber / den;
        }
    }
    Some(essential)
}

const ESSENTIAL_IRLS_ROUNDS: usize = 10;

/// Replaces every `None` by the value of the 4-connected nearest `Some`
/// (ties resolved in scan order). `None` when nothing is known.
fn fill_nearest(known: &[Option<f64>], w: usize, h: usize) -> Option<Vec<f64>> {
    let mut out: Vec<Option<f64>> = known.to_vec();
    let mut queue: std::collections::VecDeque<usize> =
        (0..w * h).filter(|&i| known[i].is_some()).collect();
    if queue.is_empty() {
        return None;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let neighbors = [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ];
        for j in neighbors.into_iter().flatten() {
            if out[j].is_none() {
                out[j] = out[i];
                queue.push_back(j);
            }
        }
    }
    out.into_iter().collect()
}

/// Similarity moving the points' centroid to the origin with mean distance √2.
fn hartley(points: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (cx, cy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (cx, cy) = (cx / n, cy / n);
    let spread = points
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / n;
    let s = if spread > 0.0 {
        std::f64::consts::SQRT_2 / spread
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Minimizes the reconstruction objective from the starting point of
/// [`initialize`]. Returns the best iterate seen.
pub fn solve(problem: &ReconProblem) -> Result<ReconSolution> {
    problem.validate()?;
    let cfg = &problem.config;
    let (w, h) = problem.target.dims();
    let n = w * h;
    let (init_depth, poses) = initialize(problem)?;
    let mut params = pack_params(&init_depth, &poses);
    normalize_scale(&mut params, n);

    let mut adam_depth = Adam::new(n, cfg.depth_lr);
    let mut adam_pose = Adam::new(params.len() - n, cfg.pose_lr);
    let mut stop = EarlyStop::new(cfg.early_stop_window, cfg.early_stop_tol);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best = (f64::INFINITY, params.clone());
    for it in 0..cfg.iterations {
        let (value, grad) = recon_objective(problem, &params)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure {
                iteration: it,
                message: format!("reconstruction objective became {value}"),
                iterate: best.1,
            });
        }
        trace.push(value);
        if value < best.0 {
            best = (value, params.clone());
        }
        if stop.update(best.0) {
            break;
        }
        let decay = cfg.final_lr_ratio.powf(it as f64 / cfg.iterations as f64);
        adam_depth.lr = cfg.depth_lr * decay;
        adam_pose.lr = cfg.pose_lr * decay;
        let (pz, pp) = params.split_at_mut(n);
        adam_depth.step(pz, &grad[..n]);
        adam_pose.step(pp, &grad[n..]);
        normalize_scale(&mut params, n);
    }
    let (depth, poses) = unpack_params(problem, &best.1)?;
    let collapsed = relative_variance(&depth) < cfg.collapse_tol;
    let mean = depth.mean();
    let degenerate = poses
        .iter()
        .all(|p| p.translation.norm() / mean < DEGENERATE_BASELINE);
    Ok(ReconSolution {
        depth,
        poses,
        loss_trace: trace,
        best_loss: best.0,
        collapsed,
        degenerate,
    })
}

// ── Pose from flow ──────────────────────────────────────────────────────

pub const POSE_FROM_FLOW_ITERATIONS: usize = 20;

/// Normal-equation eigenvalue ratio below which the fit is rank deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowPose {
    pub pose: PoseSE3,
    /// The fitted translation is below [`DEGENERATE_BASELINE`] of the mean
    /// depth: the flow is explained by rotation alone.
    pub weak_translation: bool,
}

/// Pose whose rigid flow at fixed `depth` best matches `flow` under berHu.
pub fn pose_from_flow(flow: &FlowField, depth: &DepthMap, k: &Intrinsics) -> Result<FlowPose> {
    pose_from_flow_masked(flow, None, depth, k)
}

/// [`pose_from_flow`] restricted to the pixels of `mask`.
///
/// Gauss–Newton over a left perturbation of the pose, reweighted each
/// iteration so that the weighted squares follow berHu.
pub fn pose_from_flow_masked(
    flow: &FlowField,
    mask: Option<&ValidityMask>,
    depth: &DepthMap,
    k: &Intrinsics,
) -> Result<FlowPose> {
    k.validate()?;
    if flow.dims() != depth.dims() {
        return Err(Error::dims(depth.dims(), flow.dims()));
    }
    if let Some(m) = mask {
        if m.dims() != depth.dims() {
            return Err(Error::dims(depth.dims(), m.dims()));
        }
    }
    let (w, h) = depth.dims();
    let pixels: Vec<usize> = (0..w * h)
        .filter(|&i| mask.is_none_or(|m| m.data()[i]))
        .collect();
    if pixels.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: pixels.len(),
        });
    }
    let mut pose = PoseSE3::identity();
    for _ in 0..POSE_FROM_FLOW_ITERATIONS {
        let mut rows = Vec::with_capacity(2 * pixels.len());
        for &i in &pixels {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let ray = k.ray(x, y);
            let Some((f, q)) = flow_at(k, &ray, depth.data()[i], &pose) else {
                continue;
            };
            let jp = k.projection_jacobian(&q);
            let target = flow.data()[i];
            for c in 0..2 {
                // d q / d(δω, δt) = [−[q]× | I].
                let jw = q.cross(&jp[c]);
                let row = Vector6::new(jw.x, jw.y, jw.z, jp[c].x, jp[c].y, jp[c].z);
                rows.push((row, f[c] - target[c]));
            }
        }
        if rows.len() < 6 {
            return Err(Error::InsufficientData {
                needed: 6,
                got: rows.len(),
            });
        }
        let residuals: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let c = berhu_threshold(&residuals);
        let (mut hess, mut grad) = (Matrix6::zeros(), Vector6::zeros());
        for (row, r) in &rows {
            let weight = if r.abs() <= c {
                1.0 / r.abs().max(1e-3 * c)
            } else {
                1.0 / c
            };
            hess += row * row.transpose() * weight;
            grad += row * (r * weight);
        }
        let eig = hess.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo <= RANK_TOL * hi {
            return Err(Error::DegenerateMotion(format!(
                "pose normal equations are rank deficient (eigenvalues {lo:e} .. {hi:e})"
            )));
        }
        let Some(step) = hess.cholesky().map(|ch| -ch.solve(&grad)) else {
            return Err(Error::DegenerateMotion(
                "pose normal equations are not positive definite".into(),
            ));
        };
        let dr = so3_exp(&Vector3::new(step[0], step[1], step[2]));
        pose = PoseSE3 {
            rotation: dr * pose.rotation,
            translation: dr * pose.translation + Vector3::new(step[3], step[4], step[5]),
        };
        if step.norm() < 1e-14 {
            break;
        }
    }
    Ok(FlowPose {
        pose,
        weak_translation: pose.translation.norm() < DEGENERATE_BASELINE * depth.mean(),
    })
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// Depth accuracy and error metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub sq_rel: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "d1,d2,d3,rel,log10,rms";

    /// `d1,d2,d3,rel,log10,rms` in shortest round-trip notation.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.d1, self.d2, self.d3, self.rel, self.log10, self.rms
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Metrics of `predicted` against `gt` over all pixels.
pub fn depth_metrics(
    predicted: &DepthMap,
    gt: &DepthMap,
    median_scale: bool,
) -> Result<DepthMetrics> {
    depth_metrics_masked(predicted, gt, None, median_scale)
}

/// Metrics over the pixels of `mask`. With `median_scale` the prediction is
/// first multiplied by `median(gt) / median(predicted)`. `δk` counts pixels
/// with `max(d/d*, d*/d) < 1.25^k`.
pub fn depth_metrics_masked(
    predicted: &DepthMap,
    gt: &DepthMap,
    mask: Option<&ValidityMask>,
    median_scale: bool,
) -> Result<DepthMetrics> {
    if predicted.dims() != gt.dims() {
        return Err(Error::dims(gt.dims(), predicted.dims()));
    }
    if let Some(m) = mask {
        if m.dims() != gt.dims() {
            return Err(Error::dims(gt.dims(), m.dims()));
        }
    }
    let pairs: Vec<(f64, f64)> = predicted
        .data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .filter(|(i, (_, g))| mask.is_none_or(|m| m.data()[*i]) && **g > 0.0)
        .map(|(_, (p, g))| (*p, *g))
        .collect();
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric(
            "depth metrics over an empty mask".into(),
        ));
    }
    let scale = if median_scale {
        median(pairs.iter().map(|p| p.1).collect()) / median(pairs.iter().map(|p| p.0).collect())
    } else {
        1.0
    };
    let n = pairs.len() as f64;
    let mut m = DepthMetrics {
        d1: 0.0,
        d2: 0.0,
        d3: 0.0,
        rel: 0.0,
        log10: 0.0,
        rms: 0.0,
        sq_rel: 0.0,
    };
    let (t1, t2, t3) = (1.25, 1.25f64.powi(2), 1.25f64.powi(3));
    for (p, g) in pairs {
        let p = p * scale;
        let ratio = (p / g).max(g / p);
        m.d1 += (ratio < t1) as u8 as f64;
        m.d2 += (ratio < t2) as u8 as f64;
        m.d3 += (ratio < t3) as u8 as f64;
        m.rel += (p - g).abs() / g;
        m.log10 += (p.log10() - g.log10()).abs();
        m.rms += (p - g).powi(2);
        m.sq_rel += (p - g).powi(2) / g;
    }
    m.d1 /= n;
    m.d2 /= n;
    m.d3 /= n;
    m.rel /= n;
    m.log10 /= n;
    m.rms = (m.rms / n).sqrt();
    m.sq_rel /= n;
    Ok(m)
}
