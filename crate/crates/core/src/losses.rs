//! Loss functions with value-and-gradient evaluation.
//!
//! Every loss returns a [`LossResult`] whose gradients are keyed by the name
//! of the differentiable input and laid out exactly like that input's flat
//! buffer. Reductions are means over valid terms, so values do not depend on
//! resolution.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::raster::{DepthMap, FlowField, Image, ValidityMask};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 3;

/// Gradient key of [`rigid_flow_loss`].
pub const KEY_PREDICTED: &str = "predicted";
/// Gradient key of [`berhu`].
pub const KEY_RESIDUAL: &str = "residual";
/// Gradient key of [`edge_aware_smoothness`].
pub const KEY_FIELD: &str = "field";
/// Gradient key of [`normal_smoothness`] and [`depth_smoothness`].
pub const KEY_DEPTH: &str = "depth";

/// Gradient key for the `i`-th synthesized image of [`photometric_loss`].
pub fn synthesized_key(i: usize) -> String {
    format!("synthesized.{i}")
}

/// Term weights. For the depth objective `lambda1..lambda4` weight the flow,
/// photometric, depth-smoothness and normal-smoothness terms; for the flow
/// objective `lambda1` and `lambda2` weight photometric and smoothness.
/// `alpha` balances SSIM against L1 in the photometric cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub alpha: f64,
}

/// Keys present in a partial weights table.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsPatch {
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    lambda3: Option<f64>,
    lambda4: Option<f64>,
    alpha: Option<f64>,
}

fn patched<'de, D: serde::Deserializer<'de>>(
    d: D,
    base: LossWeights,
) -> std::result::Result<LossWeights, D::Error> {
    let p = WeightsPatch::deserialize(d)?;
    Ok(LossWeights {
        lambda1: p.lambda1.unwrap_or(base.lambda1),
        lambda2: p.lambda2.unwrap_or(base.lambda2),
        lambda3: p.lambda3.unwrap_or(base.lambda3),
        lambda4: p.lambda4.unwrap_or(base.lambda4),
        alpha: p.alpha.unwrap_or(base.alpha),
    })
}

/// `deserialize_with` target: missing keys take [`LossWeights::depth_defaults`].
pub fn deserialize_depth_weights<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<LossWeights, D::Error> {
    patched(d, LossWeights::depth_defaults())
}

/// `deserialize_with` target: missing keys take [`LossWeights::flow_defaults`].
pub fn deserialize_flow_weights<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<LossWeights, D::Error> {
    patched(d, LossWeights::flow_defaults())
}

impl LossWeights {
    pub fn depth_defaults() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            lambda4: 0.05,
            alpha: 0.5,
        }
    }

    pub fn flow_defaults() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.0,
            lambda4: 0.0,
            alpha: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if ls.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "loss weights must be >= 0: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidInput(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Scalar loss value plus gradients w.r.t. each named input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub gradients: BTreeMap<String, Vec<f64>>,
}

impl LossResult {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            gradients: BTreeMap::new(),
        }
    }

    pub fn with_gradient(mut self, key: impl Into<String>, grad: Vec<f64>) -> Self {
        self.gradients.insert(key.into(), grad);
        self
    }

    pub fn gradient(&self, key: &str) -> Option<&[f64]> {
        self.gradients.get(key).map(Vec::as_slice)
    }

    /// `Σ wᵢ·Lᵢ`, with gradients of matching keys summed.
    pub fn weighted_sum(terms: &[(f64, &LossResult)]) -> LossResult {
        let mut out = LossResult::new(0.0);
        for (w, term) in terms {
            out.value += w * term.value;
            for (key, grad) in &term.gradients {
                match out.gradients.get_mut(key) {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grad) {
                            *a += w * g;
                        }
                    }
                    None => {
                        out.gradients
                            .insert(key.clone(), grad.iter().map(|g| w * g).collect());
                    }
                }
            }
        }
        out
    }
}

/// A multi-channel real raster, the common view of flow, depth and normal
/// fields for the smoothness terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn from_flow(flow: &FlowField) -> Self {
        Self {
            width: flow.width(),
            height: flow.height(),
            channels: 2,
            data: flow.as_flat(),
        }
    }

    pub fn from_depth(depth: &DepthMap) -> Self {
        Self {
            width: depth.width(),
            height: depth.height(),
            channels: 1,
            data: depth.data().to_vec(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ── SSIM ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct SsimStats {
    n: f64,
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

impl SsimStats {
    fn value(&self) -> f64 {
        let a1 = 2.0 * self.mu_a * self.mu_b + SSIM_C1;
        let a2 = 2.0 * self.cov + SSIM_C2;
        let b1 = self.mu_a * self.mu_a + self.mu_b * self.mu_b + SSIM_C1;
        let b2 = self.var_a + self.var_b + SSIM_C2;
        (a1 * a2) / (b1 * b2)
    }

    /// Partials of SSIM w.r.t. `(μ_b, σ_b², σ_ab)`.
    fn partials_b(&self) -> [f64; 3] {
        let a1 = 2.0 * self.mu_a * self.mu_b + SSIM_C1;
        let a2 = 2.0 * self.cov + SSIM_C2;
        let b1 = self.mu_a * self.mu_a + self.mu_b * self.mu_b + SSIM_C1;
        let b2 = self.var_a + self.var_b + SSIM_C2;
        let den = b1 * b2;
        let s = a1 * a2 / den;
        let d_mu = (2.0 * self.mu_a * a2) / den - s * (2.0 * self.mu_b * b2) / den;
        let d_var = -s / b2;
        let d_cov = 2.0 * a1 / den;
        [d_mu, d_var, d_cov]
    }
}

fn window_bounds(center: usize, half: usize, n: usize) -> (usize, usize) {
    (center.saturating_sub(half), (center + half).min(n - 1))
}

fn ssim_stats(a: &Image, b: &Image, half: usize, x: usize, y: usize, c: usize) -> SsimStats {
    let (x0, x1) = window_bounds(x, half, a.width());
    let (y0, y1) = window_bounds(y, half, a.height());
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let va = a.get(xx, yy, c);
            let vb = b.get(xx, yy, c);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let n = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    let (mu_a, mu_b) = (sa / n, sb / n);
    SsimStats {
        n,
        mu_a,
        mu_b,
        var_a: saa / n - mu_a * mu_a,
        var_b: sbb / n - mu_b * mu_b,
        cov: sab / n - mu_a * mu_b,
    }
}

fn check_window(window: usize) -> Result<usize> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidInput(format!(
            "SSIM window must be odd and >= 3, got {window}"
        )));
    }
    Ok(window / 2)
}

/// Per-pixel, per-channel SSIM with a uniform `window × window` kernel.
/// Windows are clipped at the image border.
pub fn ssim(a: &Image, b: &Image, window: usize) -> Result<Image> {
    a.check_same_dims(b)?;
    let half = check_window(window)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let mut out = Image::constant(w, h, ch, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                out.set(x, y, c, ssim_stats(a, b, half, x, y, c).value());
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`ssim`] w.r.t. its second argument: given `∂L/∂SSIM`
/// (laid out like the map) returns `∂L/∂b`.
pub fn ssim_backward(a: &Image, b: &Image, window: usize, upstream: &[f64]) -> Result<Vec<f64>> {
    a.check_same_dims(b)?;
    let half = check_window(window)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if upstream.len() != w * h * ch {
        return Err(Error::InvalidInput(
            "SSIM adjoint has the wrong length".into(),
        ));
    }
    let mut grad = vec![0.0; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let up = upstream[(y * w + x) * ch + c];
                if up == 0.0 {
                    continue;
                }
                let st = ssim_stats(a, b, half, x, y, c);
                let [d_mu, d_var, d_cov] = st.partials_b();
                let (x0, x1) = window_bounds(x, half, w);
                let (y0, y1) = window_bounds(y, half, h);
                let inv_n = 1.0 / st.n;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let va = a.get(xx, yy, c);
                        let vb = b.get(xx, yy, c);
                        let g = d_mu * inv_n
                            + d_var * 2.0 * (vb - st.mu_b) * inv_n
                            + d_cov * (va - st.mu_a) * inv_n;
                        grad[(yy * w + xx) * ch + c] += up * g;
                    }
                }
            }
        }
    }
    Ok(grad)
}

// ── Photometric ─────────────────────────────────────────────────────────

/// Per-pixel minimum photometric cost and the source that attains it
/// (`None` where no source is valid).
pub fn photometric_cost_map(
    target: &Image,
    synthesized: &[(Image, ValidityMask)],
    alpha: f64,
) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    if synthesized.is_empty() {
        return Err(Error::InvalidInput(
            "photometric loss needs at least one source".into(),
        ));
    }
    let (w, h, ch) = (target.width(), target.height(), target.channels());
    let mut best = vec![f64::INFINITY; w * h];
    let mut arg = vec![None; w * h];
    for (s, (img, mask)) in synthesized.iter().enumerate() {
        target.check_same_dims(img)?;
        if mask.dims() != target.dims() {
            return Err(Error::dims(target.dims(), mask.dims()));
        }
        let ss = ssim(target, img, SSIM_WINDOW)?;
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) {
                    continue;
                }
                let mut cost = 0.0;
                for c in 0..ch {
                    let l1 = (target.get(x, y, c) - img.get(x, y, c)).abs();
                    cost += alpha * (1.0 - ss.get(x, y, c)) * 0.5 + (1.0 - alpha) * l1;
                }
                cost /= ch as f64;
                let i = y * w + x;
                if cost < best[i] {
                    best[i] = cost;
                    arg[i] = Some(s);
                }
            }
        }
    }
    for (b, a) in best.iter_mut().zip(&arg) {
        if a.is_none() {
            *b = 0.0;
        }
    }
    Ok((best, arg))
}

/// Per-pixel-minimum SSIM + L1 reconstruction loss.
///
/// Gradients are returned for every synthesized image under
/// [`synthesized_key`]; only the argmin source of each pixel receives
/// gradient from that pixel. Pixels invalid in every source are excluded.
pub fn photometric_loss(
    target: &Image,
    synthesized: &[(Image, ValidityMask)],
    weights: &LossWeights,
) -> Result<LossResult> {
    let alpha = weights.alpha;
    let (cost, arg) = photometric_cost_map(target, synthesized, alpha)?;
    let (w, h, ch) = (target.width(), target.height(), target.channels());
    let count = arg.iter().filter(|a| a.is_some()).count();
    let mut result = LossResult::new(0.0);
    if count == 0 {
        for i in 0..synthesized.len() {
            result
                .gradients
                .insert(synthesized_key(i), vec![0.0; w * h * ch]);
        }
        return Ok(result);
    }
    result.value = cost.iter().sum::<f64>() / count as f64;
    let scale = 1.0 / (count as f64 * ch as f64);
    for (s, (img, _)) in synthesized.iter().enumerate() {
        let mut grad = vec![0.0; w * h * ch];
        let mut ssim_up = vec![0.0; w * h * ch];
        for y in 0..h {
            for x in 0..w {
                if arg[y * w + x] != Some(s) {
                    continue;
                }
                for c in 0..ch {
                    let i = (y * w + x) * ch + c;
                    let diff = img.get(x, y, c) - target.get(x, y, c);
                    grad[i] += (1.0 - alpha) * sign(diff) * scale;
                    ssim_up[i] = -0.5 * alpha * scale;
                }
            }
        }
        if alpha > 0.0 {
            let g = ssim_backward(target, img, SSIM_WINDOW, &ssim_up)?;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        result.gradients.insert(synthesized_key(s), grad);
    }
    Ok(result)
}

// ── Smoothness ──────────────────────────────────────────────────────────

fn guide_weights(guide: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h, ch) = (guide.width(), guide.height(), guide.channels());
    let mut wx = vec![0.0; w * h];
    let mut wy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                let g: f64 = (0..ch)
                    .map(|c| (guide.get(x + 1, y, c) - guide.get(x, y, c)).abs())
                    .sum::<f64>()
                    / ch as f64;
                wx[y * w + x] = (-g).exp();
            }
            if y + 1 < h {
                let g: f64 = (0..ch)
                    .map(|c| (guide.get(x, y + 1, c) - guide.get(x, y, c)).abs())
                    .sum::<f64>()
                    / ch as f64;
                wy[y * w + x] = (-g).exp();
            }
        }
    }
    (wx, wy)
}

/// Edge-aware first-order smoothness, optionally restricted to a mask: a
/// forward difference counts only when both of its pixels are valid.
pub fn edge_aware_smoothness_masked(
    field: &Field,
    guide: &Image,
    mask: Option<&ValidityMask>,
) -> Result<LossResult> {
    let (w, h, ch) = (field.width, field.height, field.channels);
    if guide.dims() != (w, h) {
        return Err(Error::dims((w, h), guide.dims()));
    }
    if let Some(m) = mask {
        if m.dims() != (w, h) {
            return Err(Error::dims((w, h), m.dims()));
        }
    }
    let valid = |x: usize, y: usize| mask.is_none_or(|m| m.get(x, y));
    let (wx, wy) = guide_weights(guide);

    let (mut nx, mut ny) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !valid(x, y) {
                continue;
            }
            if x + 1 < w && valid(x + 1, y) {
                nx += 1;
            }
            if y + 1 < h && valid(x, y + 1) {
                ny += 1;
            }
        }
    }
    let inv_x = if nx > 0 { 1.0 / nx as f64 } else { 0.0 };
    let inv_y = if ny > 0 { 1.0 / ny as f64 } else { 0.0 };

    let mut value = 0.0;
    let mut grad = vec![0.0; field.data.len()];
    for y in 0..h {
        for x in 0..w {
            if !valid(x, y) {
                continue;
            }
            let i = y * w + x;
            if x + 1 < w && valid(x + 1, y) {
                let j = i + 1;
                for c in 0..ch {
                    let d = field.at(x + 1, y, c) - field.at(x, y, c);
                    value += d.abs() * wx[i] * inv_x;
                    let g = sign(d) * wx[i] * inv_x;
                    grad[j * ch + c] += g;
                    grad[i * ch + c] -= g;
                }
            }
            if y + 1 < h && valid(x, y + 1) {
                let j = i + w;
                for c in 0..ch {
                    let d = field.at(x, y + 1, c) - field.at(x, y, c);
                    value += d.abs() * wy[i] * inv_y;
                    let g = sign(d) * wy[i] * inv_y;
                    grad[j * ch + c] += g;
                    grad[i * ch + c] -= g;
                }
            }
        }
    }
    Ok(LossResult::new(value).with_gradient(KEY_FIELD, grad))
}

/// `mean |∇F| · exp(−|∇I|)` with forward differences, summed over channels.
pub fn edge_aware_smoothness(field: &Field, guide: &Image) -> Result<LossResult> {
    edge_aware_smoothness_masked(field, guide, None)
}

/// Edge-aware smoothness of the mean-normalized inverse depth; gradient
/// under [`KEY_DEPTH`] is w.r.t. the depth values.
pub fn depth_smoothness(depth: &DepthMap, guide: &Image) -> Result<LossResult> {
    let inv: Vec<f64> = depth.data().iter().map(|d| 1.0 / d).collect();
    let n = inv.len() as f64;
    let mean = inv.iter().sum::<f64>() / n;
    let field = Field {
        width: depth.width(),
        height: depth.height(),
        channels: 1,
        data: inv.iter().map(|v| v / mean).collect(),
    };
    let res = edge_aware_smoothness(&field, guide)?;
    let gf = res.gradient(KEY_FIELD).unwrap_or_default();
    let dot: f64 = gf.iter().zip(&inv).map(|(g, v)| g * v).sum();
    let grad: Vec<f64> = gf
        .iter()
        .zip(&inv)
        .map(|(g, v)| {
            let g_inv = g / mean - dot / (n * mean * mean);
            -g_inv * v * v
        })
        .collect();
    Ok(LossResult::new(res.value).with_gradient(KEY_DEPTH, grad))
}

/// Unit surface normals from backprojected forward-difference tangents,
/// oriented toward the camera. The last row and column, and pixels whose
/// tangents are parallel, are invalid.
pub fn surface_normals(depth: &DepthMap, k: &Intrinsics) -> (Field, ValidityMask) {
    let (w, h) = depth.dims();
    let mut data = vec![0.0; w * h * 3];
    let mut mask = ValidityMask::filled(w, h, false);
    let point = |x: usize, y: usize| k.ray(x as f64, y as f64) * depth.get(x, y);
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let p = point(x, y);
            let tx = point(x + 1, y) - p;
            let ty = point(x, y + 1) - p;
            let v = ty.cross(&tx);
            let norm = v.norm();
            if !(norm > 1e-12) {
                continue;
            }
            let n = v / norm;
            let i = (y * w + x) * 3;
            data[i..i + 3].copy_from_slice(n.as_slice());
            mask.set(x, y, true);
        }
    }
    (
        Field {
            width: w,
            height: h,
            channels: 3,
            data,
        },
        mask,
    )
}

/// Edge-aware smoothness of the surface-normal field; gradient under
/// [`KEY_DEPTH`] is w.r.t. the depth values.
pub fn normal_smoothness(depth: &DepthMap, k: &Intrinsics, guide: &Image) -> Result<LossResult> {
    let (w, h) = depth.dims();
    if guide.dims() != (w, h) {
        return Err(Error::dims((w, h), guide.dims()));
    }
    let (normals, mask) = surface_normals(depth, k);
    let res = edge_aware_smoothness_masked(&normals, guide, Some(&mask))?;
    let gn = res.gradient(KEY_FIELD).unwrap_or_default();
    let ray = |x: usize, y: usize| k.ray(x as f64, y as f64);
    let mut grad = vec![0.0; w * h];
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            if !mask.get(x, y) {
                continue;
            }
            let i = (y * w + x) * 3;
            let g = Vector3::new(gn[i], gn[i + 1], gn[i + 2]);
            if g == Vector3::zeros() {
                continue;
            }
            let (r0, rx, ry) = (ray(x, y), ray(x + 1, y), ray(x, y + 1));
            let p = r0 * depth.get(x, y);
            let tx = rx * depth.get(x + 1, y) - p;
            let ty = ry * depth.get(x, y + 1) - p;
            let v = ty.cross(&tx);
            let norm = v.norm();
            let n = v / norm;
            let gv = (g - n * n.dot(&g)) / norm;
            let g_tx = gv.cross(&ty);
            let g_ty = tx.cross(&gv);
            grad[y * w + x + 1] += g_tx.dot(&rx);
            grad[(y + 1) * w + x] += g_ty.dot(&ry);
            grad[y * w + x] -= (g_tx + g_ty).dot(&r0);
        }
    }
    Ok(LossResult::new(res.value).with_gradient(KEY_DEPTH, grad))
}

// ── berHu ───────────────────────────────────────────────────────────────

/// How the berHu threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BerhuThreshold {
    Fixed(f64),
    /// `0.2 · max |residual|`, floored at 1e-6 and treated as a constant
    /// for differentiation.
    Adaptive,
}

pub const BERHU_MIN_THRESHOLD: f64 = 1e-6;

/// Adaptive berHu threshold for a set of residual components.
pub fn berhu_threshold(residuals: &[f64]) -> f64 {
    let max = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    (0.2 * max).max(BERHU_MIN_THRESHOLD)
}

#[inline]
pub(crate) fn berhu_scalar(x: f64, c: f64) -> (f64, f64) {
    let a = x.abs();
    if a <= c {
        (a, sign(x))
    } else {
        ((x * x + c * c) / (2.0 * c), x / c)
    }
}

/// Mean reversed-Huber penalty of the residual components.
pub fn berhu(residual: &[f64], c: f64) -> Result<LossResult> {
    if !(c > 0.0) {
        return Err(Error::InvalidInput(format!(
            "berHu threshold must be > 0, got {c}"
        )));
    }
    if residual.is_empty() {
        return Ok(LossResult::new(0.0).with_gradient(KEY_RESIDUAL, Vec::new()));
    }
    let inv = 1.0 / residual.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(residual.len());
    for &r in residual {
        let (v, g) = berhu_scalar(r, c);
        value += v * inv;
        grad.push(g * inv);
    }
    Ok(LossResult::new(value).with_gradient(KEY_RESIDUAL, grad))
}

/// berHu of `predicted − supervision` over masked pixels, averaged over both
/// flow components. Gradient under [`KEY_PREDICTED`] uses the flow's flat layout.
pub fn rigid_flow_loss(
    predicted: &FlowField,
    supervision: &FlowField,
    mask: &ValidityMask,
    threshold: BerhuThreshold,
) -> Result<LossResult> {
    if predicted.dims() != supervision.dims() {
        return Err(Error::dims(predicted.dims(), supervision.dims()));
    }
    if predicted.dims() != mask.dims() {
        return Err(Error::dims(predicted.dims(), mask.dims()));
    }
    let n = predicted.width() * predicted.height();
    let mut residual = Vec::with_capacity(2 * n);
    let mut index = Vec::with_capacity(n);
    for (i, (p, s)) in predicted.data().iter().zip(supervision.data()).enumerate() {
        if mask.data()[i] {
            residual.push(p[0] - s[0]);
            residual.push(p[1] - s[1]);
            index.push(i);
        }
    }
    let c = match threshold {
        BerhuThreshold::Fixed(c) => c,
        BerhuThreshold::Adaptive => berhu_threshold(&residual),
    };
    let res = berhu(&residual, c)?;
    let gr = res.gradient(KEY_RESIDUAL).unwrap_or_default();
    let mut grad = vec![0.0; 2 * n];
    for (k, &i) in index.iter().enumerate() {
        grad[2 * i] = gr[2 * k];
        grad[2 * i + 1] = gr[2 * k + 1];
    }
    Ok(LossResult::new(res.value).with_gradient(KEY_PREDICTED, grad))
}

// ── Totals ──────────────────────────────────────────────────────────────

/// `λ1·L_ph + λ2·L_smooth`.
pub fn total_sfnet_loss(
    photometric: &LossResult,
    smooth: &LossResult,
    weights: &LossWeights,
) -> LossResult {
    LossResult::weighted_sum(&[(weights.lambda1, photometric), (weights.lambda2, smooth)])
}

/// `λ1·L_flow + λ2·L_ph + λ3·L_s_depth + λ4·L_s_normal`.
pub fn total_depth_loss(
    flow: &LossResult,
    photometric: &LossResult,
    depth_smooth: &LossResult,
    normal_smooth: &LossResult,
    weights: &LossWeights,
) -> LossResult {
    LossResult::weighted_sum(&[
        (weights.lambda1, flow),
        (weights.lambda2, photometric),
        (weights.lambda3, depth_smooth),
        (weights.lambda4, normal_smooth),
    ])
}
