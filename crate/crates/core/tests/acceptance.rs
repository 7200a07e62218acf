//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 5 9`.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfdepth::geometry::{rigid_flow, so3_exp};
use sfdepth::io;
use sfdepth::losses::{
    berhu, depth_smoothness, edge_aware_smoothness, normal_smoothness, photometric_loss,
    rigid_flow_loss, synthesized_key, BerhuThreshold, Field, LossWeights, KEY_DEPTH, KEY_FIELD,
    KEY_PREDICTED, KEY_RESIDUAL,
};
use sfdepth::matching::{find_seeds, MatchConfig, Seed, SeedSet};
use sfdepth::pnp::{epnp_solve, flow_epe, gt_rigid_flow, Correspondence3D2D, PnpRansacConfig};
use sfdepth::propagation::{
    normalize_kernel, propagate, propagate_recorded, propagate_step, sfnet_objective, solve_flow,
    solve_flow_baseline, FlowSolverConfig, KernelField, PropagationState,
};
use sfdepth::recon::{
    depth_metrics, depth_metrics_masked, depth_of, normalize_scale, pack_params,
    recon_objective, solve, DepthMetrics, ReconConfig, ReconProblem,
};
use sfdepth::rotfilter::{filter_sequence, RansacConfig};
use sfdepth::synth::{
    corpus_sample, random_room, random_two_planes, render, sample_rng, scene_with, Motion,
    Preset,
};
use sfdepth::warp::{warp_gradient, warp_image};
use sfdepth::{DepthMap, FlowField, Image, Intrinsics, PoseSE3, ValidityMask};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

const fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

const CRITERIA: [Criterion; 12] = [
    Criterion { name: "gradient suite", budget: minutes(1), run: gradient_suite },
    Criterion { name: "harmonic oracle", budget: Some(Duration::from_secs(10)), run: harmonic_oracle },
    Criterion { name: "kernel normalization", budget: None, run: kernel_normalization },
    Criterion { name: "seed fixing", budget: None, run: seed_fixing },
    Criterion { name: "non-texture flow", budget: minutes(10), run: non_texture_flow },
    Criterion { name: "rotation filter", budget: minutes(2), run: rotation_filter },
    Criterion { name: "EPnP oracle", budget: minutes(1), run: epnp_oracle },
    Criterion { name: "reconstruction oracle", budget: minutes(5), run: reconstruction_oracle },
    Criterion { name: "ablation direction", budget: None, run: ablation_direction },
    Criterion { name: "scale gauge", budget: None, run: scale_gauge },
    Criterion { name: "format round-trips", budget: None, run: format_round_trips },
    Criterion { name: "metric definitions", budget: None, run: metric_definitions },
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, c) in CRITERIA.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = (c.run)();
        let elapsed = start.elapsed();
        let in_time = c.budget.is_none_or(|b| elapsed <= b);
        let pass = out.pass && in_time;
        failed += !pass as usize;
        let budget = c
            .budget
            .map(|b| format!(", budget {}s", b.as_secs()))
            .unwrap_or_default();
        println!(
            "{} {id:>2} {}: {} [{:.1}s{budget}{}]",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            out.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" },
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ── helpers ─────────────────────────────────────────────────────────────

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(r: &mut ChaCha8Rng, w: usize, h: usize, ch: usize) -> Image {
    Image::new(w, h, ch, (0..w * h * ch).map(|_| r.random_range(0.05..0.95)).collect()).unwrap()
}

fn random_mask(r: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> ValidityMask {
    ValidityMask::new(w, h, (0..w * h).map(|_| r.random_bool(p)).collect()).unwrap()
}

/// A value in `lo..hi` at least `gap` away from any integer, so bilinear
/// samples never sit on a cell boundary where the warp is not differentiable.
fn off_grid(r: &mut ChaCha8Rng, lo: f64, hi: f64, gap: f64) -> f64 {
    loop {
        let v: f64 = r.random_range(lo..hi);
        let frac = v - v.floor();
        if frac > gap && frac < 1.0 - gap {
            return v;
        }
    }
}

/// Flow whose endpoints land strictly inside the image and off the pixel grid.
fn interior_flow(r: &mut ChaCha8Rng, w: usize, h: usize) -> FlowField {
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let tx = off_grid(r, 0.2, w as f64 - 1.2, 0.05);
            let ty = off_grid(r, 0.2, h as f64 - 1.2, 0.05);
            data.push([tx - x as f64, ty - y as f64]);
        }
    }
    FlowField::new(w, h, data).unwrap()
}

fn small_k(w: usize, h: usize) -> Intrinsics {
    Intrinsics::new(10.0, 11.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap()
}

/// Central differences of `f` at `x`.
fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            let orig = p[i];
            p[i] = orig + h;
            let fp = f(&p);
            p[i] = orig - h;
            let fm = f(&p);
            p[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

// ── 1. gradients ────────────────────────────────────────────────────────

const GRADIENT_INSTANCES: usize = 50;
const GRADIENT_TOL: f64 = 1e-4;

type GradientCase = fn(&mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>);

fn photometric_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (w, h, ch) = (r.random_range(3..7), r.random_range(3..6), [1, 3][r.random_range(0..2)]);
    let weights = LossWeights {
        alpha: r.random_range(0.0..1.0),
        ..LossWeights::depth_defaults()
    };
    let target = random_image(r, w, h, ch);
    let synth: Vec<(Image, ValidityMask)> = (0..r.random_range(1..4))
        .map(|_| (random_image(r, w, h, ch), random_mask(r, w, h, 0.8)))
        .collect();
    let i = r.random_range(0..synth.len());
    let res = photometric_loss(&target, &synth, &weights).unwrap();
    let analytic = res.gradient(&synthesized_key(i)).unwrap().to_vec();
    let f = |x: &[f64]| {
        let mut s = synth.clone();
        s[i].0 = Image::new(w, h, ch, x.to_vec()).unwrap();
        photometric_loss(&target, &s, &weights).unwrap().value
    };
    (analytic, numeric_gradient(f, synth[i].0.data()))
}

fn edge_aware_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (w, h, ch) = (r.random_range(3..8), r.random_range(3..7), r.random_range(1..4));
    let gc = [1, 3][r.random_range(0..2)];
    let guide = random_image(r, w, h, gc);
    let field = Field {
        width: w,
        height: h,
        channels: ch,
        data: (0..w * h * ch).map(|_| r.random_range(-2.0..2.0)).collect(),
    };
    let analytic = edge_aware_smoothness(&field, &guide)
        .unwrap()
        .gradient(KEY_FIELD)
        .unwrap()
        .to_vec();
    let f = |x: &[f64]| {
        let g = Field {
            data: x.to_vec(),
            ..field.clone()
        };
        edge_aware_smoothness(&g, &guide).unwrap().value
    };
    (analytic, numeric_gradient(f, &field.data))
}

fn random_depth(r: &mut ChaCha8Rng, w: usize, h: usize) -> DepthMap {
    DepthMap::new(w, h, (0..w * h).map(|_| r.random_range(1.0..3.0)).collect()).unwrap()
}

fn depth_smoothness_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (r.random_range(3..8), r.random_range(3..7));
    let guide = random_image(r, w, h, 1);
    let depth = random_depth(r, w, h);
    let analytic = depth_smoothness(&depth, &guide)
        .unwrap()
        .gradient(KEY_DEPTH)
        .unwrap()
        .to_vec();
    let f = |x: &[f64]| {
        depth_smoothness(&DepthMap::new(w, h, x.to_vec()).unwrap(), &guide)
            .unwrap()
            .value
    };
    (analytic, numeric_gradient(f, depth.data()))
}

fn normal_smoothness_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (r.random_range(3..8), r.random_range(3..7));
    let k = small_k(w, h);
    let guide = random_image(r, w, h, 1);
    let depth = random_depth(r, w, h);
    let analytic = normal_smoothness(&depth, &k, &guide)
        .unwrap()
        .gradient(KEY_DEPTH)
        .unwrap()
        .to_vec();
    let f = |x: &[f64]| {
        normal_smoothness(&DepthMap::new(w, h, x.to_vec()).unwrap(), &k, &guide)
            .unwrap()
            .value
    };
    (analytic, numeric_gradient(f, depth.data()))
}

/// Residual in `-3c..3c` at least `0.01c` away from the branch point `±c`.
fn berhu_residual(r: &mut ChaCha8Rng, c: f64) -> f64 {
    loop {
        let v: f64 = r.random_range(-3.0 * c..3.0 * c);
        if (v.abs() - c).abs() > 0.01 * c && v.abs() > 1e-3 * c {
            return v;
        }
    }
}

fn berhu_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let c = r.random_range(0.1..2.0);
    let res: Vec<f64> = (0..r.random_range(1..40)).map(|_| berhu_residual(r, c)).collect();
    let analytic = berhu(&res, c).unwrap().gradient(KEY_RESIDUAL).unwrap().to_vec();
    (analytic, numeric_gradient(|x| berhu(x, c).unwrap().value, &res))
}

fn rigid_flow_loss_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (r.random_range(2..7), r.random_range(2..6));
    let c = r.random_range(0.2..1.5);
    let sup = FlowField::new(
        w,
        h,
        (0..w * h).map(|_| [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]).collect(),
    )
    .unwrap();
    let pred = FlowField::new(
        w,
        h,
        sup.data()
            .iter()
            .map(|s| [s[0] + berhu_residual(r, c), s[1] + berhu_residual(r, c)])
            .collect(),
    )
    .unwrap();
    let mask = random_mask(r, w, h, 0.7);
    let t = BerhuThreshold::Fixed(c);
    let analytic = rigid_flow_loss(&pred, &sup, &mask, t)
        .unwrap()
        .gradient(KEY_PREDICTED)
        .unwrap()
        .to_vec();
    let f = |x: &[f64]| {
        rigid_flow_loss(&FlowField::from_flat(w, h, x).unwrap(), &sup, &mask, t)
            .unwrap()
            .value
    };
    (analytic, numeric_gradient(f, &pred.as_flat()))
}

fn warp_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (w, h, ch) = (r.random_range(3..8), r.random_range(3..7), [1, 3][r.random_range(0..2)]);
    let src = random_image(r, w, h, ch);
    let flow = interior_flow(r, w, h);
    let up: Vec<f64> = (0..w * h * ch).map(|_| r.random_range(-1.0..1.0)).collect();
    let analytic = warp_gradient(&src, &flow, &up).unwrap().as_flat();
    let f = |x: &[f64]| {
        let (out, _) = warp_image(&src, &FlowField::from_flat(w, h, x).unwrap()).unwrap();
        out.data().iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    (analytic, numeric_gradient(f, &flow.as_flat()))
}

fn sfnet_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (r.random_range(3..7), r.random_range(3..6));
    let (a, b) = (random_image(r, w, h, 1), random_image(r, w, h, 1));
    let weights = LossWeights {
        lambda1: r.random_range(0.5..1.5),
        lambda2: r.random_range(0.0..1.0),
        alpha: r.random_range(0.0..1.0),
        ..LossWeights::flow_defaults()
    };
    let flow = interior_flow(r, w, h);
    let (_, analytic) = sfnet_objective(&a, &b, &flow, &weights).unwrap();
    let f = |x: &[f64]| {
        sfnet_objective(&a, &b, &FlowField::from_flat(w, h, x).unwrap(), &weights)
            .unwrap()
            .0
    };
    (analytic, numeric_gradient(f, &flow.as_flat()))
}

fn random_seeds(r: &mut ChaCha8Rng, w: usize, h: usize, n: usize) -> SeedSet {
    let mut cells: Vec<usize> = (0..w * h).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, r.random_range(0..=i));
    }
    let entries = cells[..n]
        .iter()
        .map(|&c| {
            let (x, y) = (c % w, c / w);
            let tx: f64 = r.random_range(0.0..(w - 1) as f64);
            let ty: f64 = r.random_range(0.0..(h - 1) as f64);
            Seed {
                x,
                y,
                flow: [tx - x as f64, ty - y as f64],
            }
        })
        .collect();
    SeedSet::new(w, h, entries).unwrap()
}

fn random_raw_kernels(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 8]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| off_grid(r, -1.0, 1.0, 0.02)))
        .collect()
}

fn propagation_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (r.random_range(3..6), r.random_range(3..6));
    let n = r.random_range(1..4);
    let seeds = random_seeds(r, w, h, n);
    let steps = r.random_range(1..6);
    let f0: Vec<f64> = (0..2 * w * h).map(|_| r.random_range(-2.0..2.0)).collect();
    let raw = random_raw_kernels(r, w * h);
    let up: Vec<f64> = (0..2 * w * h).map(|_| r.random_range(-1.0..1.0)).collect();
    let kernels = KernelField::new(w, h, raw.clone()).unwrap();
    let (_, tape) =
        propagate_recorded(&FlowField::from_flat(w, h, &f0).unwrap(), &kernels, &seeds, steps)
            .unwrap();
    let (g0, graw) = tape.backward(&up).unwrap();
    let n0 = f0.len();
    let x: Vec<f64> = f0.iter().copied().chain(raw.iter().flatten().copied()).collect();
    let f = |x: &[f64]| {
        let out = propagate(
            &FlowField::from_flat(w, h, &x[..n0]).unwrap(),
            &KernelField::from_flat(w, h, &x[n0..]).unwrap(),
            &seeds,
            steps,
        )
        .unwrap();
        out.as_flat().iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    (g0.into_iter().chain(graw).collect(), numeric_gradient(f, &x))
}

fn recon_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (8, 8);
    let k = small_k(w, h);
    let depth = random_depth(r, w, h);
    let sources = r.random_range(1..3);
    let poses: Vec<PoseSE3> = (0..sources)
        .map(|_| {
            PoseSE3::from_axis_angle(
                Vector3::from_fn(|_, _| r.random_range(-0.03..0.03)),
                Vector3::from_fn(|_, _| r.random_range(-0.2..0.2)),
            )
        })
        .collect();
    let supervision: Vec<FlowField> = poses
        .iter()
        .map(|p| {
            let (f, _) = rigid_flow(&depth, p, &k);
            FlowField::new(
                w,
                h,
                f.data()
                    .iter()
                    .map(|v| [v[0] + r.random_range(-0.8..0.8), v[1] + r.random_range(-0.8..0.8)])
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let weights = LossWeights {
        lambda1: r.random_range(0.5..1.5),
        lambda2: r.random_range(0.0..1.0),
        lambda3: r.random_range(0.0..0.5),
        lambda4: r.random_range(0.0..0.5),
        alpha: r.random_range(0.0..1.0),
    };
    let problem = ReconProblem::new(
        random_image(r, w, h, 1),
        (0..sources).map(|_| random_image(r, w, h, 1)).collect(),
        supervision,
        k,
        weights,
        ReconConfig {
            berhu: BerhuThreshold::Fixed(0.5),
            ..ReconConfig::default()
        },
    )
    .unwrap();
    let est = random_depth(r, w, h);
    let est_poses: Vec<PoseSE3> = poses
        .iter()
        .map(|p| {
            p.compose(&PoseSE3::from_axis_angle(
                Vector3::from_fn(|_, _| r.random_range(-0.02..0.02)),
                Vector3::from_fn(|_, _| r.random_range(-0.05..0.05)),
            ))
        })
        .collect();
    let params = pack_params(&est, &est_poses);
    let (_, analytic) = recon_objective(&problem, &params).unwrap();
    let numeric = numeric_gradient(|x| recon_objective(&problem, x).unwrap().0, &params);
    (analytic, numeric)
}

fn gradient_suite() -> Outcome {
    let cases: [(&str, GradientCase); 10] = [
        ("photometric", photometric_case),
        ("edge-aware smoothness", edge_aware_case),
        ("depth smoothness", depth_smoothness_case),
        ("normal smoothness", normal_smoothness_case),
        ("berhu", berhu_case),
        ("rigid-flow loss", rigid_flow_loss_case),
        ("warp", warp_case),
        ("flow objective", sfnet_case),
        ("propagation", propagation_case),
        ("depth objective", recon_case),
    ];
    let mut worst = Vec::new();
    let mut pass = true;
    for (j, (name, case)) in cases.iter().enumerate() {
        let mut r = rng(100 + j as u64);
        let max = (0..GRADIENT_INSTANCES)
            .map(|_| {
                let (a, n) = case(&mut r);
                relative_error(&a, &n)
            })
            .fold(0.0, f64::max);
        pass &= max < GRADIENT_TOL;
        worst.push(format!("{name} {max:.1e}"));
    }
    Outcome::new(
        pass,
        format!("max relative error over {GRADIENT_INSTANCES} instances: {}", worst.join(", ")),
    )
}

// ── 2. harmonic oracle ──────────────────────────────────────────────────

/// Dense solve of the 8-neighbor discrete Laplace equation with the border
/// pinned to `boundary`.
fn harmonic_solution(w: usize, h: usize, boundary: &dyn Fn(usize, usize) -> f64) -> Vec<f64> {
    let border = |x: usize, y: usize| x == 0 || y == 0 || x == w - 1 || y == h - 1;
    let mut index = vec![usize::MAX; w * h];
    let mut m = 0;
    for y in 0..h {
        for x in 0..w {
            if !border(x, y) {
                index[y * w + x] = m;
                m += 1;
            }
        }
    }
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let row = index[y * w + x];
            a[(row, row)] = 8.0;
            for ny in y - 1..=y + 1 {
                for nx in x - 1..=x + 1 {
                    if (nx, ny) == (x, y) {
                        continue;
                    }
                    if border(nx, ny) {
                        rhs[row] += boundary(nx, ny);
                    } else {
                        a[(row, index[ny * w + nx])] -= 1.0;
                    }
                }
            }
        }
    }
    let sol = a.lu().solve(&rhs).expect("Laplacian is nonsingular");
    (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if border(x, y) {
                boundary(x, y)
            } else {
                sol[index[i]]
            }
        })
        .collect()
}

fn harmonic_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for (w, h, steps) in [(17, 17, 1500), (24, 18, 3000)] {
        // Seed endpoints stay inside both grids.
        let bu = move |x: usize, y: usize| {
            -0.4 * x as f64 + 0.2 * y as f64 + 0.5 * ((x as f64) * 0.3).sin()
        };
        let bv = move |x: usize, y: usize| {
            -0.4 * y as f64 + ((x * x) as f64 - (y * y) as f64) / 100.0 + 0.01 * (x * y) as f64
        };
        let entries = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| x == 0 || y == 0 || x == w - 1 || y == h - 1)
            .map(|(x, y)| Seed {
                x,
                y,
                flow: [bu(x, y), bv(x, y)],
            })
            .collect();
        let seeds = SeedSet::new(w, h, entries).unwrap();
        let out = propagate(
            &FlowField::zeros(w, h),
            &KernelField::uniform(w, h),
            &seeds,
            steps,
        )
        .unwrap();
        let (ou, ov) = (harmonic_solution(w, h, &bu), harmonic_solution(w, h, &bv));
        for (i, v) in out.data().iter().enumerate() {
            worst = worst.max((v[0] - ou[i]).abs()).max((v[1] - ov[i]).abs());
        }
    }
    Outcome::new(worst < 1e-3, format!("max error {worst:.2e} (tol 1e-3)"))
}

// ── 3. kernel normalization ─────────────────────────────────────────────

fn kernel_normalization() -> Outcome {
    let mut r = rng(3);
    let mut raws: Vec<[f64; 8]> = Vec::with_capacity(1000);
    for i in 0..1000 {
        let raw: [f64; 8] = match i % 4 {
            // signed
            0 => std::array::from_fn(|_| r.random_range(-5.0..5.0)),
            // single nonzero, either sign
            1 => {
                let mut k = [0.0; 8];
                k[r.random_range(0..8)] = r.random_range(-3.0..3.0);
                k
            }
            // nonnegative over many magnitudes
            2 => std::array::from_fn(|_| r.random_range(0.0..1.0) * 10f64.powi(r.random_range(-6..7))),
            // all negative
            _ => std::array::from_fn(|_| -r.random_range(0.01..2.0)),
        };
        raws.push(raw);
    }
    let worst_single = raws
        .iter()
        .map(|raw| (normalize_kernel(raw).0.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let field = KernelField::new(40, 25, raws).unwrap().normalized();
    let worst_field = field
        .kernels()
        .iter()
        .map(|k| (k.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let worst = worst_single.max(worst_field);
    Outcome::new(
        worst <= 1e-12,
        format!("max |sum - 1| = {worst:.1e} over 1000 kernels (tol 1e-12)"),
    )
}

// ── 4. seed fixing ──────────────────────────────────────────────────────

fn seed_fixing() -> Outcome {
    let mut r = rng(4);
    let (mut checked, mut violations) = (0usize, 0usize);
    for _ in 0..20 {
        let (w, h) = (r.random_range(4..16), r.random_range(4..12));
        let n = r.random_range(1..w * h / 2);
        let seeds = random_seeds(&mut r, w, h, n);
        let f0 = FlowField::new(
            w,
            h,
            (0..w * h).map(|_| [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]).collect(),
        )
        .unwrap();
        let kernels = KernelField::new(w, h, random_raw_kernels(&mut r, w * h))
            .unwrap()
            .normalized();
        let mut state = PropagationState::new(f0, seeds.clone()).unwrap();
        for _ in 0..32 {
            state = propagate_step(&state, &kernels).unwrap();
            for s in seeds.entries() {
                checked += 1;
                violations += (state.flow.get(s.x, s.y) != s.flow) as usize;
            }
        }
    }
    Outcome::new(
        violations == 0,
        format!("{violations} mismatches in {checked} seed checks after each step"),
    )
}

// ── 5. flow in blank regions ────────────────────────────────────────────

const CORPUS_SIZE: usize = 20;

fn non_texture_flow() -> Outcome {
    let cfg = FlowSolverConfig::default();
    let (mut ours, mut base, mut used) = (0.0, 0.0, 0);
    let mut skipped = Vec::new();
    for i in 0..CORPUS_SIZE {
        let (pair, _) = corpus_sample(Preset::LowTexture40, i, CORPUS_SIZE, 0).unwrap();
        let seeds = find_seeds(&pair.target, &pair.source, &MatchConfig::default()).unwrap();
        let Ok(flow) = solve_flow(&pair.target, &pair.source, &seeds, &cfg) else {
            skipped.push(i);
            continue;
        };
        let baseline = solve_flow_baseline(&pair.target, &pair.source, &cfg).unwrap();
        let blank = pair.blank.and(&pair.valid).unwrap();
        ours += flow_epe(&flow.flow, &pair.flow, &blank).unwrap();
        base += flow_epe(&baseline.flow, &pair.flow, &blank).unwrap();
        used += 1;
    }
    if used == 0 {
        return Outcome::new(false, "no sample had enough seeds");
    }
    let (ours, base) = (ours / used as f64, base / used as f64);
    Outcome::new(
        ours < 1.0 && ours <= 0.5 * base,
        format!(
            "blank-region EPE {ours:.3} px vs baseline {base:.3} px, ratio {:.2} over {used} samples, skipped {skipped:?}",
            ours / base
        ),
    )
}

// ── 6. rotation filter ──────────────────────────────────────────────────

fn rotation_filter() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = Vec::new();
    let mut is_rotation = Vec::new();
    for i in 0..40 {
        let motion = if i < 20 { Motion::Rotation } else { Motion::Translation };
        let mut r = sample_rng(6, i);
        let room = random_room(&mut r);
        let pair = render(&scene_with(&mut r, room, motion).unwrap()).unwrap();
        let path = dir.path().join(format!("{i}.flo"));
        io::write_flo(&path, &pair.flow).unwrap();
        manifest.push((format!("pair_{i}"), path));
        is_rotation.push(motion == Motion::Rotation);
    }
    let report = filter_sequence(&manifest, 8, &RansacConfig::default());
    let errors = report.entries.iter().filter(|e| e.outcome.is_err()).count();
    let (mut rot_discarded, mut trans_kept) = (0, 0);
    for (e, rot) in report.entries.iter().zip(&is_rotation) {
        match (rot, e.discarded()) {
            (true, true) => rot_discarded += 1,
            (false, false) if e.outcome.is_ok() => trans_kept += 1,
            _ => {}
        }
    }
    Outcome::new(
        errors == 0 && rot_discarded == 20 && trans_kept >= 18,
        format!("rotations discarded {rot_discarded}/20, translations kept {trans_kept}/20, errors {errors}"),
    )
}

// ── 7. EPnP ─────────────────────────────────────────────────────────────

fn random_pose(r: &mut ChaCha8Rng, angle: f64, baseline: f64) -> PoseSE3 {
    PoseSE3::from_axis_angle(
        Vector3::from_fn(|_, _| r.random_range(-angle..angle)),
        Vector3::from_fn(|_, _| r.random_range(-baseline..baseline)),
    )
}

/// Flow of pixel `(x, y)` at depth `d` under `pose`, composed directly.
fn analytic_flow(k: &Intrinsics, pose: &PoseSE3, x: f64, y: f64, d: f64) -> Option<[f64; 2]> {
    let ray = Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
    let q = pose.rotation * (ray * d) + pose.translation;
    (q.z > 0.0).then(|| [k.fx * q.x / q.z + k.cx - x, k.fy * q.y / q.z + k.cy - y])
}

fn epnp_oracle() -> Outcome {
    let mut r = rng(7);
    let k = Intrinsics::new(500.0, 480.0, 320.0, 240.0).unwrap();
    let (mut rot_err, mut trans_err, mut solved) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let pose = random_pose(&mut r, 0.5, 1.0);
        let n = r.random_range(6..40);
        let mut corr = Vec::with_capacity(n);
        while corr.len() < n {
            let x = Vector3::new(
                r.random_range(-2.0..2.0),
                r.random_range(-2.0..2.0),
                r.random_range(3.0..8.0),
            );
            let c = pose.transform(&x);
            if c.z > 0.5 {
                corr.push(Correspondence3D2D {
                    x,
                    p: k.project(&c).unwrap(),
                });
            }
        }
        let Ok(est) = epnp_solve(&corr, &k) else {
            continue;
        };
        solved += 1;
        rot_err = rot_err.max(est.rotation_distance(&pose));
        trans_err = trans_err.max((est.translation - pose.translation).norm());
    }

    // Oracle flow from exact seeds against per-pixel flow composed here.
    let (w, h) = (32, 24);
    let small = Intrinsics::new(30.0, 30.0, 15.5, 11.5).unwrap();
    let mut epe: f64 = 0.0;
    for _ in 0..20 {
        let plane = (r.random_range(-0.02..0.02), r.random_range(-0.02..0.02));
        let depth = DepthMap::from_fn(w, h, |x, y| {
            3.0 + plane.0 * x as f64 + plane.1 * y as f64 + 0.3 * ((x * 7 + y * 3) % 5) as f64
        })
        .unwrap();
        let pose = random_pose(&mut r, 0.02, 0.2);
        let entries: Vec<Seed> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|(x, y)| (x + 2 * y) % 7 == 0)
            .filter_map(|(x, y)| {
                let f = analytic_flow(&small, &pose, x as f64, y as f64, depth.get(x, y))?;
                let (tx, ty) = (x as f64 + f[0], y as f64 + f[1]);
                (tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64)
                    .then_some(Seed { x, y, flow: f })
            })
            .collect();
        let seeds = SeedSet::new(w, h, entries).unwrap();
        let oracle = gt_rigid_flow(&depth, None, &seeds, &small, &PnpRansacConfig::default()).unwrap();
        let mut expected = FlowField::zeros(w, h);
        let mut valid = ValidityMask::filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                if let Some(f) = analytic_flow(&small, &pose, x as f64, y as f64, depth.get(x, y)) {
                    expected.set(x, y, f);
                    valid.set(x, y, true);
                }
            }
        }
        epe = epe.max(flow_epe(&oracle.flow, &expected, &valid).unwrap());
    }
    Outcome::new(
        solved == 1000 && rot_err < 1e-6 && trans_err < 1e-6 && epe < 1e-6,
        format!(
            "{solved}/1000 solved, max rotation error {rot_err:.1e} rad, max translation error {trans_err:.1e}, max oracle flow EPE {epe:.1e} px"
        ),
    )
}

// ── 8. two-plane reconstruction ─────────────────────────────────────────

fn reconstruction_oracle() -> Outcome {
    // Pure flow supervision; the photometric and smoothness terms are off.
    let weights = LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        alpha: 0.5,
    };
    let (mut worst_rel, mut worst_d1) = (0.0f64, 1.0f64);
    for i in 0..10 {
        let mut r = sample_rng(8, i);
        let planes = random_two_planes(&mut r);
        let pair = render(&scene_with(&mut r, planes, Motion::Translation).unwrap()).unwrap();
        let problem = ReconProblem::new(
            pair.target.clone(),
            vec![pair.source.clone()],
            vec![pair.flow.clone()],
            pair.intrinsics,
            weights,
            ReconConfig::default(),
        )
        .unwrap()
        .with_supervision_masks(vec![pair.valid.clone()])
        .unwrap();
        let sol = solve(&problem).unwrap();
        let m = depth_metrics(&sol.depth, &pair.depth_target, true).unwrap();
        worst_rel = worst_rel.max(m.rel);
        worst_d1 = worst_d1.min(m.d1);
    }
    Outcome::new(
        worst_rel < 0.03 && worst_d1 > 0.99,
        format!("10 scenes: worst rel {worst_rel:.4}, worst d1 {worst_d1:.4}"),
    )
}

// ── 9. ablation ─────────────────────────────────────────────────────────

fn ablation_direction() -> Outcome {
    let cfg = ReconConfig::default();
    let supervised = LossWeights::depth_defaults();
    let photometric_only = LossWeights {
        lambda1: 0.0,
        ..supervised
    };
    let (mut rel_flow, mut rel_photo, mut used) = (0.0, 0.0, 0);
    let (mut collapsed, mut violations) = (0, Vec::new());
    let mut skipped = Vec::new();
    for i in 0..CORPUS_SIZE {
        let (pair, _) = corpus_sample(Preset::LowTexture70, i, CORPUS_SIZE, 0).unwrap();
        let seeds = find_seeds(&pair.target, &pair.source, &MatchConfig::default()).unwrap();
        let Ok(flow) = solve_flow(&pair.target, &pair.source, &seeds, &FlowSolverConfig::default())
        else {
            skipped.push(i);
            continue;
        };
        let run = |w: LossWeights| {
            let p = ReconProblem::new(
                pair.target.clone(),
                vec![pair.source.clone()],
                vec![flow.flow.clone()],
                pair.intrinsics,
                w,
                cfg,
            )
            .unwrap();
            let s = solve(&p).unwrap();
            (depth_metrics(&s.depth, &pair.depth_target, true).unwrap().rel, s.collapsed)
        };
        let (f, _) = run(supervised);
        let (p, c) = run(photometric_only);
        rel_flow += f;
        rel_photo += p;
        used += 1;
        collapsed += c as usize;
        if !(c || p > f) {
            violations.push(i);
        }
    }
    if used == 0 {
        return Outcome::new(false, "no sample had enough seeds");
    }
    let (rf, rp) = (rel_flow / used as f64, rel_photo / used as f64);
    Outcome::new(
        rf < rp && violations.is_empty(),
        format!(
            "mean rel flow-supervised {rf:.3} vs photometric-only {rp:.3} over {used} samples; \
             photometric-only collapsed {collapsed}, neither worse nor collapsed {violations:?}, skipped {skipped:?}"
        ),
    )
}

// ── 10. scale gauge ─────────────────────────────────────────────────────

fn scale_gauge() -> Outcome {
    let mut r = rng(10);
    let (w, h) = (20, 15);
    let k = small_k(w, h);
    let (mut flow_diff, mut mean_err, mut renorm_diff) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let depth = random_depth(&mut r, w, h);
        let pose = random_pose(&mut r, 0.05, 0.3);
        let (base, valid) = rigid_flow(&depth, &pose, &k);
        for s in [0.1, 10.0] {
            let (scaled, _) = rigid_flow(&depth.scaled(s).unwrap(), &pose.with_scaled_translation(s), &k);
            for (i, (a, b)) in base.data().iter().zip(scaled.data()).enumerate() {
                if valid.data()[i] {
                    flow_diff = flow_diff.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
                }
            }
        }
        let mut params = pack_params(&depth, &[pose]);
        normalize_scale(&mut params, w * h);
        let d: Vec<f64> = params[..w * h].iter().map(|&z| depth_of(z)).collect();
        mean_err = mean_err.max((d.iter().sum::<f64>() / (w * h) as f64 - 1.0).abs());
        let t = Vector3::new(params[w * h + 3], params[w * h + 4], params[w * h + 5]);
        let normalized = PoseSE3::new(pose.rotation, t).unwrap();
        let (after, _) = rigid_flow(&DepthMap::new(w, h, d).unwrap(), &normalized, &k);
        for (i, (a, b)) in base.data().iter().zip(after.data()).enumerate() {
            if valid.data()[i] {
                renorm_diff = renorm_diff.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
            }
        }
    }
    Outcome::new(
        flow_diff < 1e-9 && mean_err < 1e-9 && renorm_diff < 1e-9,
        format!(
            "max flow change {flow_diff:.1e} px for s in {{0.1, 10}}, normalized mean error {mean_err:.1e}, flow change after normalization {renorm_diff:.1e} px"
        ),
    )
}

// ── 11. formats ─────────────────────────────────────────────────────────

fn f32_value(r: &mut ChaCha8Rng, lo: f32, hi: f32) -> f64 {
    r.random_range(lo..hi) as f64
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);
    let mut r = rng(11);
    let mut failures = Vec::new();
    for trial in 0..20 {
        let (w, h) = (r.random_range(1..40), r.random_range(1..30));

        let flow = FlowField::new(
            w,
            h,
            (0..w * h).map(|_| [f32_value(&mut r, -50.0, 50.0), f32_value(&mut r, -50.0, 50.0)]).collect(),
        )
        .unwrap();
        io::write_flo(path("f.flo"), &flow).unwrap();
        if io::read_flo(path("f.flo")).unwrap() != flow {
            failures.push(format!("flo #{trial}"));
        }

        let depth = DepthMap::new(w, h, (0..w * h).map(|_| f32_value(&mut r, 0.01, 100.0)).collect()).unwrap();
        io::write_depth_pfm(path("d.pfm"), &depth).unwrap();
        if io::read_depth_pfm(path("d.pfm")).unwrap() != depth {
            failures.push(format!("pfm #{trial}"));
        }
        let rgb: Vec<f64> = (0..w * h * 3).map(|_| f32_value(&mut r, -10.0, 10.0)).collect();
        let bytes = io::encode_pfm(w, h, 3, &rgb).unwrap();
        if io::decode_pfm(&bytes).unwrap() != (w, h, 3, rgb) {
            failures.push(format!("color pfm #{trial}"));
        }

        for (ch, maxval, name) in [(1, 255u16, "i.pgm"), (3, 255, "i.ppm"), (1, 65535, "i16.pgm")] {
            let img = Image::new(
                w,
                h,
                ch,
                (0..w * h * ch)
                    .map(|_| r.random_range(0..=maxval) as f64 / maxval as f64)
                    .collect(),
            )
            .unwrap();
            std::fs::write(path(name), io::encode_pnm(&img, maxval).unwrap()).unwrap();
            if io::read_image(path(name)).unwrap() != img {
                failures.push(format!("{name} #{trial}"));
            }
        }

        let poses: Vec<PoseSE3> = (0..r.random_range(1..5))
            .map(|_| {
                let omega = Vector3::from_fn(|_, _| r.random_range(-3.0..3.0));
                PoseSE3::new(so3_exp(&omega), Vector3::from_fn(|_, _| r.random_range(-1e3..1e3))).unwrap()
            })
            .collect();
        io::write_poses(path("p.txt"), &poses).unwrap();
        if io::read_poses(path("p.txt")).unwrap() != poses {
            failures.push(format!("poses #{trial}"));
        }

        let (sw, sh) = (w.max(2), h.max(2));
        let n = r.random_range(0..(sw * sh).min(30));
        let seeds = random_seeds(&mut r, sw, sh, n);
        io::write_seeds(path("s.txt"), &seeds).unwrap();
        if io::read_seeds(path("s.txt"), None).unwrap() != seeds {
            failures.push(format!("seeds #{trial}"));
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "flo, PFM, PGM/PPM (8 and 16 bit), poses and seeds bit-exact over 20 random payloads each".into()
        } else {
            format!("mismatches: {failures:?}")
        },
    )
}

// ── 12. metrics ─────────────────────────────────────────────────────────

/// 1000 pixels of unit ground truth whose predictions fall in the four
/// accuracy buckets with the given counts. The first three buckets predict
/// `1/1.05`, `1/1.3` and `1/1.6`; the last bucket's ratio is solved so the
/// mean relative error equals `rel`.
fn bucketed(counts: [usize; 4], rel: f64) -> (DepthMap, DepthMap) {
    assert_eq!(counts.iter().sum::<usize>(), 1000);
    let inner = [1.0 / 1.05, 1.0 / 1.3, 1.0 / 1.6];
    let inner_err: f64 = inner.iter().zip(counts).map(|(p, n)| n as f64 * (1.0 - p)).sum();
    let last = 1.0 + (1000.0 * rel - inner_err) / counts[3] as f64;
    assert!(last >= 1.25f64.powi(3), "last bucket ratio {last} is not in the tail");
    let pred: Vec<f64> = (0..4)
        .flat_map(|b| std::iter::repeat_n(if b < 3 { inner[b] } else { last }, counts[b]))
        .collect();
    (
        DepthMap::new(40, 25, pred).unwrap(),
        DepthMap::constant(40, 25, 1.0).unwrap(),
    )
}

fn metric_definitions() -> Outcome {
    let mut failures = Vec::new();
    let gt = DepthMap::from_fn(16, 8, |x, y| 2f64.powi((x + y) as i32 % 5 - 2)).unwrap();

    let m = depth_metrics(&gt, &gt, false).unwrap();
    if m.csv_row() != "1,1,1,0,0,0" {
        failures.push(format!("identity row {}", m.csv_row()));
    }
    if DepthMetrics::CSV_HEADER != "d1,d2,d3,rel,log10,rms" {
        failures.push(format!("header {}", DepthMetrics::CSV_HEADER));
    }

    // 1.25 and powers of two are exact, so the ratio sits on the strict threshold.
    let m = depth_metrics(&gt.scaled(1.25).unwrap(), &gt, false).unwrap();
    if !(m.d1 == 0.0 && m.d2 == 1.0 && m.d3 == 1.0 && (m.rel - 0.25).abs() < 1e-15) {
        failures.push(format!("threshold boundary {m:?}"));
    }
    // Median scaling removes a global factor.
    let m = depth_metrics(&gt.scaled(3.7).unwrap(), &gt, true).unwrap();
    if !(m.d1 == 1.0 && m.rel < 1e-15 && m.rms < 1e-15) {
        failures.push(format!("median scaling {m:?}"));
    }
    // Only masked pixels count; an empty mask is an error.
    let mask = ValidityMask::filled(16, 8, false);
    if depth_metrics_masked(&gt, &gt, Some(&mask), false).is_ok() {
        failures.push("empty mask accepted".into());
    }

    // Published (d1, d2, d3, rel) rows reproduced from matching data.
    for (counts, expected) in [
        ([828, 137, 27, 8], [0.828, 0.965, 0.992, 0.115]),
        ([674, 226, 68, 32], [0.674, 0.900, 0.968, 0.208]),
        ([511, 268, 125, 96], [0.511, 0.779, 0.904, 0.331]),
    ] {
        let (pred, gt) = bucketed(counts, expected[3]);
        let m = depth_metrics(&pred, &gt, false).unwrap();
        let got = [m.d1, m.d2, m.d3, m.rel];
        if got.iter().zip(expected).any(|(g, e)| (g - e).abs() > 1e-12) {
            failures.push(format!("row {expected:?} gave {got:?}"));
        }
    }

    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "identity, 1.25 boundary, median scaling, empty mask, column order and three reference rows".into()
        } else {
            format!("{failures:?}")
        },
    )
}
