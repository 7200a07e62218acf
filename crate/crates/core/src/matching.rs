//! Sparse correspondences: Harris corners matched by zero-normalized
//! cross-correlation, refined to subpixel precision and cross-checked.

use std::collections::HashSet;

use nalgebra::{Matrix2, Vector2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{FlowField, Image, ValidityMask};
use crate::warp::sample_bilinear;

/// Harris sensitivity constant.
pub const HARRIS_K: f64 = 0.04;

/// A seeded pixel and its displacement into the other image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seed {
    pub x: usize,
    pub y: usize,
    pub flow: [f64; 2],
}

/// Sparse flow seeds over a `width × height` image pair.
///
/// Entries are unique per pixel and both endpoints lie inside the image.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSet {
    width: usize,
    height: usize,
    entries: Vec<Seed>,
}

impl SeedSet {
    pub fn new(width: usize, height: usize, entries: Vec<Seed>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for s in &entries {
            if s.x >= width || s.y >= height {
                return Err(Error::InvalidInput(format!(
                    "seed ({}, {}) outside {width}x{height}",
                    s.x, s.y
                )));
            }
            let tx = s.x as f64 + s.flow[0];
            let ty = s.y as f64 + s.flow[1];
            if !(tx >= 0.0 && tx <= (width - 1) as f64 && ty >= 0.0 && ty <= (height - 1) as f64) {
                return Err(Error::InvalidInput(format!(
                    "seed ({}, {}) with flow {:?} leaves the image",
                    s.x, s.y, s.flow
                )));
            }
            if !seen.insert((s.x, s.y)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate seed at ({}, {})",
                    s.x, s.y
                )));
            }
        }
        Ok(Self {
            width,
            height,
            entries,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            entries: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn entries(&self) -> &[Seed] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indicator of seeded pixels.
    pub fn mask(&self) -> ValidityMask {
        let mut m = ValidityMask::filled(self.width, self.height, false);
        for s in &self.entries {
            m.set(s.x, s.y, true);
        }
        m
    }

    /// Sparse flow with empty positions filled with zero.
    pub fn sparse_flow(&self) -> FlowField {
        let mut f = FlowField::zeros(self.width, self.height);
        for s in &self.entries {
            f.set(s.x, s.y, s.flow);
        }
        f
    }

    /// Keeps only the seeds for which `keep` returns true.
    pub fn filtered(&self, keep: impl Fn(&Seed) -> bool) -> SeedSet {
        SeedSet {
            width: self.width,
            height: self.height,
            entries: self.entries.iter().copied().filter(|s| keep(s)).collect(),
        }
    }
}

/// Tunables of [`detect_corners`] and [`match_seeds`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub max_corners: usize,
    pub quality: f64,
    pub nms_radius: usize,
    pub patch: usize,
    pub search_radius: usize,
    pub min_score: f64,
    pub min_margin: f64,
    /// Largest distance between a corner and the end of its backward match.
    /// Negative disables the check.
    pub max_cross_check: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_corners: 400,
            quality: 0.01,
            nms_radius: 5,
            patch: 7,
            search_radius: 14,
            min_score: 0.8,
            min_margin: 0.05,
            max_cross_check: 1.0,
        }
    }
}

/// Sobel structure tensor `(Σgx², Σgy², Σgx·gy)` over a 3×3 window; zero
/// within 2 px of the border.
fn structure_tensor(img: &Image) -> Vec<[f64; 3]> {
    let g = img.to_gray();
    let (w, h) = g.dims();
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let p = |dx: isize, dy: isize| {
                g.get((x as isize + dx) as usize, (y as isize + dy) as usize, 0)
            };
            ix[y * w + x] = ((p(1, -1) + 2.0 * p(1, 0) + p(1, 1))
                - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1)))
                / 8.0;
            iy[y * w + x] = ((p(-1, 1) + 2.0 * p(0, 1) + p(1, 1))
                - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1)))
                / 8.0;
        }
    }
    let mut t = vec![[0.0; 3]; w * h];
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            let mut acc = [0.0; 3];
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    let (gx, gy) = (ix[yy * w + xx], iy[yy * w + xx]);
                    acc[0] += gx * gx;
                    acc[1] += gy * gy;
                    acc[2] += gx * gy;
                }
            }
            t[y * w + x] = acc;
        }
    }
    t
}

/// Harris response with 3×3 Sobel gradients and a 3×3 box-summed structure
/// tensor. Pixels within two of the border get zero response.
pub fn harris_response(img: &Image) -> Vec<f64> {
    structure_tensor(img)
        .iter()
        .map(|[sxx, syy, sxy]| {
            let tr = sxx + syy;
            sxx * syy - sxy * sxy - HARRIS_K * tr * tr
        })
        .collect()
}

/// Harris corners after non-maximum suppression, strongest first.
///
/// A corner must be the maximum of its `(2·nms_radius+1)²` neighborhood
/// (plateaus resolve to the first pixel in raster order) and have response
/// at least `quality` times the image maximum.
pub fn detect_corners_with(
    img: &Image,
    max_count: usize,
    quality: f64,
    nms_radius: usize,
) -> Vec<(usize, usize)> {
    let (w, h) = img.dims();
    let r = harris_response(img);
    let max = r.iter().cloned().fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let threshold = quality * max;
    let mut found: Vec<(f64, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = r[i];
            if !(v > 0.0 && v >= threshold) {
                continue;
            }
            let mut is_max = true;
            'nbhd: for yy in y.saturating_sub(nms_radius)..=(y + nms_radius).min(h - 1) {
                for xx in x.saturating_sub(nms_radius)..=(x + nms_radius).min(w - 1) {
                    let j = yy * w + xx;
                    if r[j] > v || (r[j] == v && j < i) {
                        is_max = false;
                        break 'nbhd;
                    }
                }
            }
            if is_max {
                found.push((v, i));
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    found.truncate(max_count);
    found.into_iter().map(|(_, i)| (i % w, i / w)).collect()
}

/// [`detect_corners_with`] using the default suppression radius of 5 px.
pub fn detect_corners(img: &Image, max_count: usize, quality: f64) -> Vec<(usize, usize)> {
    detect_corners_with(img, max_count, quality, 5)
}

struct Patch {
    values: Vec<f64>,
    norm: f64,
}

fn centered_patch(img: &Image, cx: usize, cy: usize, half: usize) -> Option<Patch> {
    let mut values = Vec::with_capacity((2 * half + 1).pow(2));
    for y in cy - half..=cy + half {
        for x in cx - half..=cx + half {
            values.push(img.get(x, y, 0));
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    Some(Patch { values, norm })
}

struct Scored {
    best: f64,
    second: f64,
    dx: isize,
    dy: isize,
}

/// Exhaustive ZNCC search of the patch of `a` at `(cx, cy)` over `b`.
fn search(
    a: &Image,
    b: &Image,
    cx: usize,
    cy: usize,
    half: usize,
    radius: isize,
) -> Option<Scored> {
    let (w, h) = a.dims();
    let inside = |x: isize, y: isize| {
        x >= half as isize
            && y >= half as isize
            && x + (half as isize) < w as isize
            && y + (half as isize) < h as isize
    };
    if !inside(cx as isize, cy as isize) {
        return None;
    }
    let pa = centered_patch(a, cx, cy, half)?;
    let side = 2 * radius + 1;
    let mut grid = vec![None; (side * side) as usize];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (bx, by) = (cx as isize + dx, cy as isize + dy);
            if !inside(bx, by) {
                continue;
            }
            let Some(pb) = centered_patch(b, bx as usize, by as usize, half) else {
                continue;
            };
            let dot: f64 = pa.values.iter().zip(&pb.values).map(|(u, v)| u * v).sum();
            grid[((dy + radius) * side + dx + radius) as usize] = Some(dot / (pa.norm * pb.norm));
        }
    }
    let at = |dx: isize, dy: isize| -> Option<f64> {
        if dx.abs() > radius || dy.abs() > radius {
            return None;
        }
        grid[((dy + radius) * side + dx + radius) as usize]
    };
    let mut top: Option<(f64, isize, isize)> = None;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if let Some(v) = at(dx, dy) {
                if top.is_none_or(|t| v > t.0) {
                    top = Some((v, dx, dy));
                }
            }
        }
    }
    let (best, bdx, bdy) = top?;
    let mut second = f64::NEG_INFINITY;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if (dx - bdx).abs() > 1 || (dy - bdy).abs() > 1 {
                if let Some(v) = at(dx, dy) {
                    second = second.max(v);
                }
            }
        }
    }
    Some(Scored {
        best,
        second,
        dx: bdx,
        dy: bdy,
    })
}

/// Lucas–Kanade refinement of an integer displacement `(dx, dy)` of the
/// patch of `a` at `(cx, cy)`, minimizing the patch SSD against bilinear
/// samples of `b`. Returns the integer displacement when the refinement
/// leaves its ±1 px neighborhood or samples outside `b`.
fn refine(
    a: &Image,
    b: &Image,
    cx: usize,
    cy: usize,
    half: usize,
    dx: isize,
    dy: isize,
) -> [f64; 2] {
    let start = [dx as f64, dy as f64];
    let mut d = start;
    for _ in 0..10 {
        let (mut jtj, mut jtr) = (Matrix2::zeros(), Vector2::zeros());
        for y in cy - half..=cy + half {
            for x in cx - half..=cx + half {
                let q = Vector2::new(x as f64 + d[0], y as f64 + d[1]);
                let at = |ox: f64, oy: f64| sample_bilinear(b, q + Vector2::new(ox, oy));
                let samples = [
                    at(0.0, 0.0),
                    at(0.5, 0.0),
                    at(-0.5, 0.0),
                    at(0.0, 0.5),
                    at(0.0, -0.5),
                ];
                if samples.iter().any(|(_, inside)| !inside) {
                    return start;
                }
                let [value, xp, xm, yp, ym] = samples.map(|(v, _)| v[0]);
                let g = Vector2::new(xp - xm, yp - ym);
                jtj += g * g.transpose();
                jtr += g * (value - a.get(x, y, 0));
            }
        }
        let Some(inv) = jtj.try_inverse() else {
            return start;
        };
        let step = -(inv * jtr);
        d = [d[0] + step.x, d[1] + step.y];
        if (d[0] - start[0]).abs() > 1.0 || (d[1] - start[1]).abs() > 1.0 {
            return start;
        }
        if step.norm() < 1e-6 {
            break;
        }
    }
    d
}

/// Matches each corner of `a` into `b` by exhaustive ZNCC search.
///
/// A match is kept when its score reaches `min_score`, beats the best score
/// outside the winner's 8-neighborhood by at least `min_margin`, and the
/// backward search from the winner lands within `max_cross_check` of the
/// corner. The winner is refined to subpixel precision by Lucas–Kanade.
pub fn match_seeds_with(
    a: &Image,
    b: &Image,
    corners: &[(usize, usize)],
    cfg: &MatchConfig,
) -> Result<SeedSet> {
    a.check_same_dims(b)?;
    if cfg.patch < 5 || cfg.patch % 2 == 0 {
        return Err(Error::InvalidInput(format!(
            "patch must be odd and >= 5, got {}",
            cfg.patch
        )));
    }
    let (ga, gb) = (a.to_gray(), b.to_gray());
    let (w, h) = a.dims();
    let half = cfg.patch / 2;
    let radius = cfg.search_radius as isize;

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for &(cx, cy) in corners {
        if !seen.insert((cx, cy)) {
            continue;
        }
        let Some(m) = search(&ga, &gb, cx, cy, half, radius) else {
            continue;
        };
        if m.best < cfg.min_score || m.best - m.second < cfg.min_margin {
            continue;
        }
        let (bx, by) = ((cx as isize + m.dx) as usize, (cy as isize + m.dy) as usize);
        if cfg.max_cross_check >= 0.0 {
            let Some(back) = search(&gb, &ga, bx, by, half, radius) else {
                continue;
            };
            let (ex, ey) = ((m.dx + back.dx) as f64, (m.dy + back.dy) as f64);
            if ex.hypot(ey) > cfg.max_cross_check {
                continue;
            }
        }
        let flow = refine(&ga, &gb, cx, cy, half, m.dx, m.dy);
        let (tx, ty) = (cx as f64 + flow[0], cy as f64 + flow[1]);
        if !(0.0..=(w - 1) as f64).contains(&tx) || !(0.0..=(h - 1) as f64).contains(&ty) {
            continue;
        }
        entries.push(Seed { x: cx, y: cy, flow });
    }
    SeedSet::new(w, h, entries)
}

/// [`match_seeds_with`] using default thresholds and the given window sizes.
pub fn match_seeds(
    a: &Image,
    b: &Image,
    corners: &[(usize, usize)],
    patch: usize,
    search_radius: usize,
) -> Result<SeedSet> {
    let cfg = MatchConfig {
        patch,
        search_radius,
        ..MatchConfig::default()
    };
    match_seeds_with(a, b, corners, &cfg)
}

/// Corner detection followed by matching.
pub fn find_seeds(a: &Image, b: &Image, cfg: &MatchConfig) -> Result<SeedSet> {
    let corners = detect_corners_with(a, cfg.max_corners, cfg.quality, cfg.nms_radius);
    match_seeds_with(a, b, &corners, cfg)
}

/// Corrupts `⌈fraction·N⌉` seeds with uniform offsets in `[−magnitude, magnitude]²`.
///
/// Corrupted endpoints are clamped into the image so the set stays valid.
pub fn inject_outliers(
    seeds: &SeedSet,
    fraction: f64,
    magnitude: f64,
    rng_seed: u64,
) -> Result<SeedSet> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::InvalidInput(format!(
            "outlier fraction must lie in [0, 0.5], got {fraction}"
        )));
    }
    let n = seeds.len();
    let count = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut entries = seeds.entries.clone();
    if count == 0 {
        return Ok(seeds.clone());
    }
    let (max_x, max_y) = ((seeds.width - 1) as f64, (seeds.height - 1) as f64);
    for i in sample(&mut rng, n, count.min(n)).into_vec() {
        let s = &mut entries[i];
        let du = rng.random_range(-magnitude..=magnitude);
        let dv = rng.random_range(-magnitude..=magnitude);
        let tx = (s.x as f64 + s.flow[0] + du).clamp(0.0, max_x);
        let ty = (s.y as f64 + s.flow[1] + dv).clamp(0.0, max_y);
        s.flow = [tx - s.x as f64, ty - s.y as f64];
    }
    SeedSet::new(seeds.width, seeds.height, entries)
}
