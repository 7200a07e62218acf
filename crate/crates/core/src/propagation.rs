//! Sparse-to-dense flow propagation with per-pixel 3×3 affinity kernels,
//! and a direct optimizer for the coarse flow and kernels.
//!
//! One step computes `F'(x, y) = Σ_{(a,b)} K_{x,y}(a,b) · F(x − a, y − b)`
//! per flow channel, with out-of-bounds neighbors replaced by the center
//! value. Seeded pixels are overwritten with their seed flow before the first
//! step and after every step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    edge_aware_smoothness, photometric_loss, synthesized_key, Field, LossWeights, KEY_FIELD,
};
use crate::matching::SeedSet;
use crate::optim::{Adam, EarlyStop};
use crate::raster::{FlowField, Image};
use crate::warp::{warp_gradient, warp_image};

/// Neighbor offsets `(a, b)` of a 3×3 kernel, center excluded, raster order.
pub const OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Default number of propagation steps.
pub const DEFAULT_STEPS: usize = 16;

/// Raw, unnormalized affinities for the 8 neighbors of every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    width: usize,
    height: usize,
    raw: Vec<[f64; 8]>,
}

impl KernelField {
    pub fn new(width: usize, height: usize, raw: Vec<[f64; 8]>) -> Result<Self> {
        if raw.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "kernel field has {} pixels, expected {}",
                raw.len(),
                width * height
            )));
        }
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "kernel affinities must be finite".into(),
            ));
        }
        Ok(Self { width, height, raw })
    }

    /// All affinities equal to one: plain 8-neighbor averaging.
    pub fn uniform(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            raw: vec![[1.0; 8]; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn raw(&self) -> &[[f64; 8]] {
        &self.raw
    }

    pub fn as_flat(&self) -> Vec<f64> {
        self.raw.iter().flatten().copied().collect()
    }

    pub fn from_flat(width: usize, height: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 8 * width * height {
            return Err(Error::InvalidInput(format!(
                "flat kernel buffer has {} values, expected {}",
                flat.len(),
                8 * width * height
            )));
        }
        let raw = flat
            .chunks_exact(8)
            .map(|c| <[f64; 8]>::try_from(c).expect("chunk of 8"))
            .collect();
        Self::new(width, height, raw)
    }

    pub fn normalized(&self) -> NormalizedKernels {
        let mut degenerate = 0;
        let kernels = self
            .raw
            .iter()
            .map(|r| {
                let (k, flagged) = normalize_kernel(r);
                degenerate += flagged as usize;
                k
            })
            .collect();
        NormalizedKernels {
            width: self.width,
            height: self.height,
            kernels,
            degenerate,
        }
    }
}

/// Normalized 3×3 weights; `center + Σ neighbors = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedKernel {
    pub neighbors: [f64; 8],
    pub center: f64,
}

impl NormalizedKernel {
    pub const IDENTITY: NormalizedKernel = NormalizedKernel {
        neighbors: [0.0; 8],
        center: 1.0,
    };

    pub fn sum(&self) -> f64 {
        self.center + self.neighbors.iter().sum::<f64>()
    }
}

/// `K(a,b) = K̂(a,b) / Σ|K̂|` and `K(0,0) = 1 − Σ K(a,b)`.
///
/// An all-zero raw kernel yields the identity kernel and `true`.
pub fn normalize_kernel(raw: &[f64; 8]) -> (NormalizedKernel, bool) {
    let s: f64 = raw.iter().map(|v| v.abs()).sum();
    if s == 0.0 {
        return (NormalizedKernel::IDENTITY, true);
    }
    let neighbors = raw.map(|v| v / s);
    let center = 1.0 - neighbors.iter().sum::<f64>();
    (NormalizedKernel { neighbors, center }, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedKernels {
    width: usize,
    height: usize,
    kernels: Vec<NormalizedKernel>,
    degenerate: usize,
}

impl NormalizedKernels {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn kernels(&self) -> &[NormalizedKernel] {
        &self.kernels
    }

    /// Pixels whose raw kernel was all zero.
    pub fn degenerate_count(&self) -> usize {
        self.degenerate
    }
}

/// Flat index of the neighbor at offset `(a, b)` from `(x, y)`, or `None`
/// when it falls outside the image.
#[inline]
fn neighbor(x: usize, y: usize, w: usize, h: usize, (a, b): (isize, isize)) -> Option<usize> {
    let nx = x as isize - a;
    let ny = y as isize - b;
    (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
        .then(|| ny as usize * w + nx as usize)
}

fn step_into(src: &[[f64; 2]], dst: &mut [[f64; 2]], k: &NormalizedKernels) {
    let (w, h) = (k.width, k.height);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let kern = &k.kernels[i];
            let mut acc = [kern.center * src[i][0], kern.center * src[i][1]];
            for (o, &off) in OFFSETS.iter().enumerate() {
                let j = neighbor(x, y, w, h, off).unwrap_or(i);
                acc[0] += kern.neighbors[o] * src[j][0];
                acc[1] += kern.neighbors[o] * src[j][1];
            }
            dst[i] = acc;
        }
    }
}

fn fix_seeds(flow: &mut [[f64; 2]], seeds: &SeedSet) {
    let w = seeds.width();
    for s in seeds.entries() {
        flow[s.y * w + s.x] = s.flow;
    }
}

/// Flow being propagated plus the seeds it is pinned to.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationState {
    pub flow: FlowField,
    pub seeds: SeedSet,
    pub step: usize,
}

impl PropagationState {
    /// Starts at step 0 with the seeds already written into `f0`.
    pub fn new(f0: FlowField, seeds: SeedSet) -> Result<Self> {
        if f0.dims() != seeds.dims() {
            return Err(Error::dims(f0.dims(), seeds.dims()));
        }
        let mut flow = f0;
        fix_seeds(flow.data_mut(), &seeds);
        Ok(Self {
            flow,
            seeds,
            step: 0,
        })
    }
}

/// One diffusion step followed by seed replacement.
pub fn propagate_step(
    state: &PropagationState,
    kernels: &NormalizedKernels,
) -> Result<PropagationState> {
    if state.flow.dims() != kernels.dims() {
        return Err(Error::dims(state.flow.dims(), kernels.dims()));
    }
    let (w, h) = state.flow.dims();
    let mut next = vec![[0.0; 2]; w * h];
    step_into(state.flow.data(), &mut next, kernels);
    fix_seeds(&mut next, &state.seeds);
    Ok(PropagationState {
        flow: FlowField::new(w, h, next)?,
        seeds: state.seeds.clone(),
        step: state.step + 1,
    })
}

fn check_inputs(
    f0: &FlowField,
    kernels: &KernelField,
    seeds: &SeedSet,
    steps: usize,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidInput(
            "propagation needs at least one step".into(),
        ));
    }
    if f0.dims() != kernels.dims() {
        return Err(Error::dims(f0.dims(), kernels.dims()));
    }
    if f0.dims() != seeds.dims() {
        return Err(Error::dims(f0.dims(), seeds.dims()));
    }
    Ok(())
}

/// `steps` propagation steps from `f0`.
pub fn propagate(
    f0: &FlowField,
    kernels: &KernelField,
    seeds: &SeedSet,
    steps: usize,
) -> Result<FlowField> {
    Ok(propagate_recorded(f0, kernels, seeds, steps)?.0)
}

/// Intermediate flows of one forward propagation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PropagationTape {
    width: usize,
    height: usize,
    raw: Vec<[f64; 8]>,
    kernels: NormalizedKernels,
    seeded: Vec<bool>,
    /// Seed-fixed inputs to each step.
    history: Vec<Vec<[f64; 2]>>,
}

/// [`propagate`], also returning the tape needed for [`PropagationTape::backward`].
pub fn propagate_recorded(
    f0: &FlowField,
    kernels: &KernelField,
    seeds: &SeedSet,
    steps: usize,
) -> Result<(FlowField, PropagationTape)> {
    check_inputs(f0, kernels, seeds, steps)?;
    let (w, h) = f0.dims();
    let norm = kernels.normalized();
    let mut cur = f0.data().to_vec();
    fix_seeds(&mut cur, seeds);
    let mut history = Vec::with_capacity(steps);
    let mut next = vec![[0.0; 2]; w * h];
    for _ in 0..steps {
        step_into(&cur, &mut next, &norm);
        fix_seeds(&mut next, seeds);
        history.push(std::mem::replace(&mut cur, next.clone()));
    }
    let seeded = seeds.mask().data().to_vec();
    let out = FlowField::new(w, h, cur)?;
    Ok((
        out,
        PropagationTape {
            width: w,
            height: h,
            raw: kernels.raw().to_vec(),
            kernels: norm,
            seeded,
            history,
        },
    ))
}

impl PropagationTape {
    /// Pulls `∂L/∂output` (flat flow layout) back to `(∂L/∂f0, ∂L/∂raw)`.
    ///
    /// Seeded pixels of `f0` receive zero gradient. Raw kernels that
    /// normalized to the identity receive zero gradient.
    pub fn backward(&self, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        if upstream.len() != 2 * n {
            return Err(Error::InvalidInput(format!(
                "upstream adjoint has {} values, expected {}",
                upstream.len(),
                2 * n
            )));
        }
        let mut g: Vec<[f64; 2]> = upstream.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let mut g_neighbors = vec![[0.0; 8]; n];
        let mut g_center = vec![0.0; n];
        let mut g_prev = vec![[0.0; 2]; n];
        for src in self.history.iter().rev() {
            for (gi, &s) in g.iter_mut().zip(&self.seeded) {
                if s {
                    *gi = [0.0, 0.0];
                }
            }
            g_prev.iter_mut().for_each(|v| *v = [0.0, 0.0]);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let gi = g[i];
                    if gi == [0.0, 0.0] {
                        continue;
                    }
                    let kern = &self.kernels.kernels[i];
                    g_center[i] += gi[0] * src[i][0] + gi[1] * src[i][1];
                    g_prev[i][0] += kern.center * gi[0];
                    g_prev[i][1] += kern.center * gi[1];
                    for (o, &off) in OFFSETS.iter().enumerate() {
                        let j = neighbor(x, y, w, h, off).unwrap_or(i);
                        g_neighbors[i][o] += gi[0] * src[j][0] + gi[1] * src[j][1];
                        g_prev[j][0] += kern.neighbors[o] * gi[0];
                        g_prev[j][1] += kern.neighbors[o] * gi[1];
                    }
                }
            }
            std::mem::swap(&mut g, &mut g_prev);
        }
        for (gi, &s) in g.iter_mut().zip(&self.seeded) {
            if s {
                *gi = [0.0, 0.0];
            }
        }
        let g_f0 = g.iter().flatten().copied().collect();

        let mut g_raw = vec![0.0; 8 * n];
        for i in 0..n {
            let r = &self.raw[i];
            let s: f64 = r.iter().map(|v| v.abs()).sum();
            if s == 0.0 {
                continue;
            }
            // The center weight is 1 − Σ neighbors.
            let eff: [f64; 8] = std::array::from_fn(|o| g_neighbors[i][o] - g_center[i]);
            let dot: f64 = eff.iter().zip(r).map(|(e, v)| e * v).sum();
            for o in 0..8 {
                let sgn = if r[o] > 0.0 {
                    1.0
                } else if r[o] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g_raw[8 * i + o] = eff[o] / s - sgn * dot / (s * s);
            }
        }
        Ok((g_f0, g_raw))
    }
}

/// Inverse-distance-weighted interpolation of the seed flows.
///
/// Each pixel averages its `neighbors` nearest seeds with weights
/// `1/d^power`; seeded pixels take their seed value.
pub fn idw_init(seeds: &SeedSet, neighbors: usize, power: f64) -> FlowField {
    let (w, h) = seeds.dims();
    let entries = seeds.entries();
    if entries.is_empty() {
        return FlowField::zeros(w, h);
    }
    let k = neighbors.max(1).min(entries.len());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(entries.len());
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            dists.clear();
            for (i, s) in entries.iter().enumerate() {
                let dx = s.x as f64 - x as f64;
                let dy = s.y as f64 - y as f64;
                dists.push((dx * dx + dy * dy, i));
            }
            let by_distance =
                |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            dists.select_nth_unstable_by(k - 1, by_distance);
            let nearest = &mut dists[..k];
            nearest.sort_by(by_distance);
            if nearest[0].0 == 0.0 {
                out.set(x, y, entries[nearest[0].1].flow);
                continue;
            }
            let (mut acc, mut wsum) = ([0.0, 0.0], 0.0);
            for &(d2, i) in nearest.iter() {
                let wt = d2.powf(-power / 2.0);
                acc[0] += wt * entries[i].flow[0];
                acc[1] += wt * entries[i].flow[1];
                wsum += wt;
            }
            out.set(x, y, [acc[0] / wsum, acc[1] / wsum]);
        }
    }
    out
}

/// Settings of [`solve_flow`] and [`solve_flow_baseline`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSolverConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    pub steps: usize,
    pub idw_neighbors: usize,
    pub idw_power: f64,
    /// Coarse-to-fine stages. Stage `s` (counting down to 0) compares images
    /// blurred with σ = 2^(s−1) px, and the last stage uses the originals.
    pub blur_levels: usize,
    #[serde(deserialize_with = "crate::losses::deserialize_flow_weights")]
    pub weights: LossWeights,
}

impl Default for FlowSolverConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            iterations: 300,
            early_stop_window: 20,
            early_stop_tol: 1e-7,
            steps: DEFAULT_STEPS,
            idw_neighbors: 8,
            idw_power: 2.0,
            blur_levels: 3,
            weights: LossWeights::flow_defaults(),
        }
    }
}

impl FlowSolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate > 0.0)
            || self.iterations == 0
            || self.steps == 0
            || self.blur_levels == 0
        {
            return Err(Error::Config(
                "flow solver needs learning_rate > 0 and iterations, steps, blur_levels >= 1"
                    .into(),
            ));
        }
        if !(self.idw_power > 0.0) || self.idw_neighbors == 0 {
            return Err(Error::Config(
                "idw_power must be > 0 and idw_neighbors >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of a flow optimization.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    /// Flow at the lowest-loss iterate.
    pub flow: FlowField,
    pub best_loss: f64,
    pub loss_trace: Vec<f64>,
}

/// `λ1·L_ph(a, warp(b, flow)) + λ2·L_smooth(flow, a)` and its gradient
/// w.r.t. the flat flow.
pub fn sfnet_objective(
    a: &Image,
    b: &Image,
    flow: &FlowField,
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let (synth, mask) = warp_image(b, flow)?;
    let ph = photometric_loss(a, &[(synth, mask)], weights)?;
    let g_img = ph.gradient(&synthesized_key(0)).unwrap_or_default();
    let g_warp = warp_gradient(b, flow, g_img)?.as_flat();
    let sm = edge_aware_smoothness(&Field::from_flow(flow), a)?;
    let g_sm = sm.gradient(KEY_FIELD).unwrap_or_default();
    let value = weights.lambda1 * ph.value + weights.lambda2 * sm.value;
    let grad = g_warp
        .iter()
        .zip(g_sm)
        .map(|(p, s)| weights.lambda1 * p + weights.lambda2 * s)
        .collect();
    Ok((value, grad))
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    a.check_same_dims(b)?;
    if a.channels() != b.channels() {
        return Err(Error::InvalidInput(format!(
            "channel mismatch: {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    Ok(())
}

/// Jointly optimizes the coarse flow and raw kernels so that the propagated
/// flow minimizes [`sfnet_objective`].
pub fn solve_flow(
    a: &Image,
    b: &Image,
    seeds: &SeedSet,
    cfg: &FlowSolverConfig,
) -> Result<FlowSolution> {
    check_pair(a, b)?;
    cfg.validate()?;
    if seeds.len() < 4 {
        return Err(Error::InsufficientSeeds {
            needed: 4,
            got: seeds.len(),
        });
    }
    if seeds.dims() != a.dims() {
        return Err(Error::dims(a.dims(), seeds.dims()));
    }
    let (w, h) = a.dims();
    let n = w * h;
    let mut params = idw_init(seeds, cfg.idw_neighbors, cfg.idw_power).as_flat();
    params.extend(KernelField::uniform(w, h).as_flat());
    coarse_to_fine(a, b, cfg, params, |a, b, params, it| {
        let f0 = FlowField::from_flat(w, h, &params[..2 * n]);
        let kernels = KernelField::from_flat(w, h, &params[2 * n..]);
        let (f0, kernels) = match (f0, kernels) {
            (Ok(f), Ok(k)) => (f, k),
            _ => return Err(numerical_failure(it, "non-finite parameters", params)),
        };
        let (flow, tape) = propagate_recorded(&f0, &kernels, seeds, cfg.steps)?;
        let (value, g_flow) = sfnet_objective(a, b, &flow, &cfg.weights)?;
        if !value.is_finite() || g_flow.iter().any(|g| !g.is_finite()) {
            return Err(numerical_failure(it, "loss is not finite", params));
        }
        let (mut grad, g_raw) = tape.backward(&g_flow)?;
        grad.extend(g_raw);
        Ok((value, flow, grad))
    })
}

/// Photometric baseline: optimizes the dense flow directly from zero,
/// ignoring seeds and propagation, on the same blur schedule.
pub fn solve_flow_baseline(a: &Image, b: &Image, cfg: &FlowSolverConfig) -> Result<FlowSolution> {
    check_pair(a, b)?;
    cfg.validate()?;
    let (w, h) = a.dims();
    coarse_to_fine(a, b, cfg, vec![0.0; 2 * w * h], |a, b, params, it| {
        let flow = FlowField::from_flat(w, h, params)
            .map_err(|_| numerical_failure(it, "non-finite parameters", params))?;
        let (value, grad) = sfnet_objective(a, b, &flow, &cfg.weights)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(numerical_failure(it, "loss is not finite", params));
        }
        Ok((value, flow, grad))
    })
}

/// Adam over `params`, once per blur level from coarsest to finest. Each
/// level restarts from the best iterate of the previous one. `eval` maps the
/// blurred pair and the parameters to `(loss, flow, ∂loss/∂params)`.
fn coarse_to_fine(
    a: &Image,
    b: &Image,
    cfg: &FlowSolverConfig,
    mut params: Vec<f64>,
    mut eval: impl FnMut(&Image, &Image, &[f64], usize) -> Result<(f64, FlowField, Vec<f64>)>,
) -> Result<FlowSolution> {
    let mut trace = Vec::with_capacity(cfg.iterations * cfg.blur_levels);
    let mut best: Option<(f64, FlowField)> = None;
    for level in (0..cfg.blur_levels).rev() {
        let sigma = if level == 0 {
            0.0
        } else {
            (2.0f64).powi(level as i32 - 1)
        };
        let (a, b) = (a.gaussian_blur(sigma), b.gaussian_blur(sigma));
        // Losses of different blur levels are not comparable.
        best = None;
        let mut opt = Adam::new(params.len(), cfg.learning_rate);
        let mut stop = EarlyStop::new(cfg.early_stop_window, cfg.early_stop_tol);
        let mut best_params = params.clone();
        for it in 0..cfg.iterations {
            let (value, flow, grad) = eval(&a, &b, &params, it)?;
            trace.push(value);
            if best.as_ref().is_none_or(|(v, _)| value < *v) {
                best = Some((value, flow));
                best_params.copy_from_slice(&params);
            }
            let best_value = best.as_ref().map(|b| b.0).unwrap_or(value);
            if stop.update(best_value) {
                break;
            }
            opt.step(&mut params, &grad);
        }
        params = best_params;
    }
    let (best_loss, flow) = best.expect("at least one iteration");
    Ok(FlowSolution {
        flow,
        best_loss,
        loss_trace: trace,
    })
}

fn numerical_failure(iteration: usize, message: &str, params: &[f64]) -> Error {
    Error::NumericalFailure {
        iteration,
        message: message.into(),
        iterate: params.to_vec(),
    }
}
