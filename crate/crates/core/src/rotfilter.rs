//! Pure-rotation detection: a single homography explains the flow of a
//! rotation-only (or static) pair, so pairs whose best homography leaves
//! fewer than `min_outlier_ratio` outliers are discarded.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Vector2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::io::read_flo;
use crate::raster::FlowField;

/// Relative singular-value gap below which a DLT system is rank-deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Symmetric transfer error threshold in pixels. The default suits
    /// 80-pixel-wide frames, where a 5% baseline leaves only a few pixels
    /// of parallax for a homography to miss.
    pub inlier_px: f64,
    pub min_outlier_ratio: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_px: 0.5,
            min_outlier_ratio: 0.20,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("ransac iterations must be >= 1".into()));
        }
        if !(self.inlier_px > 0.0) {
            return Err(Error::Config("ransac inlier_px must be > 0".into()));
        }
        if !(self.min_outlier_ratio > 0.0 && self.min_outlier_ratio < 1.0) {
            return Err(Error::Config("min_outlier_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVerdict {
    pub is_pure_rotation: bool,
    pub outlier_ratio: f64,
    pub best_h: Homography,
}

/// Similarity transform taking the points to zero mean and mean distance √2.
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 {
        std::f64::consts::SQRT_2 / spread
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

fn apply(m: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = m * p.push(1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Normalized DLT homography mapping `src[i]` to `dst[i]`.
pub fn dlt_homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput(format!(
            "{} source points but {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: src.len(),
        });
    }
    let (ts, td) = (hartley(src), hartley(dst));
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let p = apply(&ts, p);
        let q = apply(&td, q);
        let r0 = [-p.x, -p.y, -1.0, 0.0, 0.0, 0.0, q.x * p.x, q.x * p.y, q.x];
        let r1 = [0.0, 0.0, 0.0, -p.x, -p.y, -1.0, q.y * p.x, q.y * p.y, q.y];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::RankDeficient("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    if sv(7) <= RANK_TOL * sv(0) {
        return Err(Error::RankDeficient(
            "homography is not uniquely determined".into(),
        ));
    }
    let h = v_t.row(order[8]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("degenerate normalization".into()))?;
    Homography::new(td_inv * hn * ts)
        .map_err(|_| Error::RankDeficient("fitted homography is singular".into()))
}

/// `sqrt(‖Hp − q‖² + ‖H⁻¹q − p‖²)`, infinite when either mapping fails.
pub fn symmetric_transfer_error(
    h: &Homography,
    h_inv: &Homography,
    p: &Vector2<f64>,
    q: &Vector2<f64>,
) -> f64 {
    match (h.apply(*p), h_inv.apply(*q)) {
        (Some(hp), Some(hq)) => ((hp - q).norm_squared() + (hq - p).norm_squared()).sqrt(),
        _ => f64::INFINITY,
    }
}

/// `(p, p + flow(p))` on the grid `stride/2 + k·stride` in both axes.
pub fn grid_correspondences(flow: &FlowField, stride: usize) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    let stride = stride.max(1);
    let (w, h) = flow.dims();
    let mut out = Vec::new();
    for y in (stride / 2..h).step_by(stride) {
        for x in (stride / 2..w).step_by(stride) {
            let f = flow.get(x, y);
            let p = Vector2::new(x as f64, y as f64);
            out.push((p, p + Vector2::new(f[0], f[1])));
        }
    }
    out
}

fn area2(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    ((b - a).perp(&(c - a))).abs()
}

fn has_collinear_triple(pts: &[Vector2<f64>; 4]) -> bool {
    const MIN_AREA2: f64 = 1e-6;
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        .iter()
        .any(|&(i, j, k)| area2(&pts[i], &pts[j], &pts[k]) < MIN_AREA2)
}

/// RANSAC over minimal 4-point DLT fits on the flow's grid correspondences.
///
/// The reported homography is the best minimal-sample hypothesis with no
/// refit, so the hypothesis set does not depend on `inlier_px`.
pub fn ransac_homography(
    flow: &FlowField,
    sample_stride: usize,
    cfg: &RansacConfig,
) -> Result<RotationVerdict> {
    cfg.validate()?;
    let corr = grid_correspondences(flow, sample_stride);
    if corr.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: corr.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(usize, Homography)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, corr.len(), 4).into_vec();
        let src: [Vector2<f64>; 4] = std::array::from_fn(|k| corr[idx[k]].0);
        let dst: [Vector2<f64>; 4] = std::array::from_fn(|k| corr[idx[k]].1);
        if has_collinear_triple(&src) || has_collinear_triple(&dst) {
            continue;
        }
        let Ok(h) = dlt_homography(&src, &dst) else {
            continue;
        };
        let Some(h_inv) = h.inverse() else {
            continue;
        };
        let inliers = corr
            .iter()
            .filter(|(p, q)| symmetric_transfer_error(&h, &h_inv, p, q) < cfg.inlier_px)
            .count();
        if best.as_ref().is_none_or(|(n, _)| inliers > *n) {
            best = Some((inliers, h));
        }
    }
    let (inliers, best_h) =
        best.ok_or_else(|| Error::RankDeficient("every RANSAC sample was degenerate".into()))?;
    let outlier_ratio = 1.0 - inliers as f64 / corr.len() as f64;
    Ok(RotationVerdict {
        is_pure_rotation: outlier_ratio < cfg.min_outlier_ratio,
        outlier_ratio,
        best_h,
    })
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterEntry {
    pub pair_id: String,
    pub flow_path: PathBuf,
    /// Verdict, or the error message when the flow could not be classified.
    pub outcome: std::result::Result<RotationVerdict, String>,
}

impl FilterEntry {
    pub fn discarded(&self) -> bool {
        matches!(&self.outcome, Ok(v) if v.is_pure_rotation)
    }
}

/// Reads and classifies one flow file; failures are recorded, not raised.
pub fn classify_flow_file(
    pair_id: &str,
    flow_path: &Path,
    stride: usize,
    cfg: &RansacConfig,
) -> FilterEntry {
    let outcome = read_flo(flow_path)
        .and_then(|f| ransac_homography(&f, stride, cfg))
        .map_err(|e| format!("{}: {e}", e.kind()));
    FilterEntry {
        pair_id: pair_id.to_string(),
        flow_path: flow_path.to_path_buf(),
        outcome,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterReport {
    pub entries: Vec<FilterEntry>,
}

impl FilterReport {
    /// Fraction of successfully classified pairs that were discarded; `None`
    /// when nothing was classified.
    pub fn discard_fraction(&self) -> Option<f64> {
        let ok = self.entries.iter().filter(|e| e.outcome.is_ok()).count();
        (ok > 0).then(|| self.entries.iter().filter(|e| e.discarded()).count() as f64 / ok as f64)
    }

    pub fn kept(&self) -> impl Iterator<Item = &FilterEntry> {
        self.entries
            .iter()
            .filter(|e| matches!(&e.outcome, Ok(v) if !v.is_pure_rotation))
    }

    /// CSV with header `pair_id,flow_path,outlier_ratio,verdict`; verdict is
    /// `keep`, `discard` or `error`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["pair_id", "flow_path", "outlier_ratio", "verdict"])
            .map_err(csv_err)?;
        for e in &self.entries {
            let (ratio, verdict) = match &e.outcome {
                Ok(v) => (
                    v.outlier_ratio.to_string(),
                    if v.is_pure_rotation {
                        "discard"
                    } else {
                        "keep"
                    },
                ),
                Err(_) => (String::new(), "error"),
            };
            w.write_record([
                e.pair_id.as_str(),
                &e.flow_path.to_string_lossy(),
                &ratio,
                verdict,
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Classifies every `(pair_id, flow_path)` in order.
pub fn filter_sequence(
    manifest: &[(String, PathBuf)],
    stride: usize,
    cfg: &RansacConfig,
) -> FilterReport {
    FilterReport {
        entries: manifest
            .iter()
            .map(|(id, path)| classify_flow_file(id, path, stride, cfg))
            .collect(),
    }
}
