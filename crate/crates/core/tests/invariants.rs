use nalgebra::{Matrix3, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfdepth::geometry::{homography_from_rotation, rigid_flow, so3_exp};
use sfdepth::losses::{
    berhu, edge_aware_smoothness, photometric_cost_map, photometric_loss, ssim, Field,
    LossWeights, SSIM_WINDOW,
};
use sfdepth::matching::{find_seeds, MatchConfig};
use sfdepth::pnp::{epnp_solve, gt_rigid_flow, Correspondence3D2D, PnpRansacConfig};
use sfdepth::propagation::{propagate_step, KernelField, PropagationState};
use sfdepth::recon::{solve, ReconConfig, ReconProblem};
use sfdepth::rotfilter::{dlt_homography, ransac_homography, RansacConfig};
use sfdepth::synth::{corpus_sample, Preset};
use sfdepth::warp::{sample_bilinear, warp_image};
use sfdepth::{DepthMap, FlowField, Homography, Image, Intrinsics, PoseSE3, ValidityMask};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn image(r: &mut ChaCha8Rng, w: usize, h: usize, ch: usize) -> Image {
    Image::new(w, h, ch, (0..w * h * ch).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn depth(r: &mut ChaCha8Rng, w: usize, h: usize) -> DepthMap {
    DepthMap::new(w, h, (0..w * h).map(|_| r.random_range(0.5..5.0)).collect()).unwrap()
}

fn pose(r: &mut ChaCha8Rng, angle: f64, baseline: f64) -> PoseSE3 {
    PoseSE3::from_axis_angle(
        Vector3::from_fn(|_, _| r.random_range(-angle..angle)),
        Vector3::from_fn(|_, _| r.random_range(-baseline..baseline)),
    )
}

fn intrinsics(w: usize, h: usize) -> Intrinsics {
    Intrinsics::new(40.0, 38.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap()
}

fn max_abs_diff(a: &FlowField, b: &FlowField, mask: &ValidityMask) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .zip(mask.data())
        .filter(|(_, m)| **m)
        .map(|((p, q), _)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max)
}

// ── geometry ────────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn project_inverts_backproject(x in 0usize..64, y in 0usize..48, d in 0.1f64..50.0) {
        let k = intrinsics(64, 48);
        let p = Vector2::new(x as f64, y as f64);
        let q = k.project(&k.backproject(p, d).unwrap()).unwrap();
        prop_assert!((q - p).norm() < 1e-9);
    }

    #[test]
    fn rotation_flow_ignores_depth_and_matches_homography(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (w, h) = (24, 18);
        let k = intrinsics(w, h);
        let rot = PoseSE3::from_rotation(so3_exp(&Vector3::from_fn(|_, _| r.random_range(-0.1..0.1))));
        let (a, va) = rigid_flow(&depth(&mut r, w, h), &rot, &k);
        let (b, vb) = rigid_flow(&depth(&mut r, w, h), &rot, &k);
        let both = va.and(&vb).unwrap();
        prop_assert!(max_abs_diff(&a, &b, &both) < 1e-9);
        let hm = homography_from_rotation(&rot.rotation, &k);
        for y in 0..h {
            for x in 0..w {
                if both.get(x, y) {
                    let p = Vector2::new(x as f64, y as f64);
                    let q = hm.apply(p).unwrap();
                    let f = a.get(x, y);
                    prop_assert!((q.x - p.x - f[0]).abs() < 1e-9 && (q.y - p.y - f[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identity_pose_gives_exactly_zero_flow(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (flow, valid) = rigid_flow(&depth(&mut r, 9, 7), &PoseSE3::identity(), &intrinsics(9, 7));
        prop_assert!(flow.data().iter().all(|v| *v == [0.0, 0.0]));
        prop_assert_eq!(valid.count(), 63);
    }

    #[test]
    fn pose_group_laws(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b, c) = (pose(&mut r, 3.0, 5.0), pose(&mut r, 3.0, 5.0), pose(&mut r, 3.0, 5.0));
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        prop_assert!((left.rotation - right.rotation).norm() < 1e-12);
        prop_assert!((left.translation - right.translation).norm() < 1e-12 * 25.0);
        let id = a.compose(&a.inverse());
        prop_assert!((id.rotation - Matrix3::identity()).norm() < 1e-12);
        prop_assert!(id.translation.norm() < 1e-12 * 10.0);
    }
}

// ── warp ────────────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn zero_flow_warp_is_identity(seed in any::<u64>(), w in 1usize..12, h in 1usize..10) {
        let mut r = rng(seed);
        let img = image(&mut r, w, h, 3);
        let (out, valid) = warp_image(&img, &FlowField::zeros(w, h)).unwrap();
        prop_assert_eq!(valid.count(), w * h);
        prop_assert_eq!(out, img);
    }

    #[test]
    fn samples_depend_only_on_four_neighbors(
        seed in any::<u64>(),
        qx in 0.0f64..9.0,
        qy in 0.0f64..7.0,
        px in 0usize..10,
        py in 0usize..8,
    ) {
        let mut r = rng(seed);
        let img = image(&mut r, 10, 8, 1);
        let q = Vector2::new(qx, qy);
        let near = |v: usize, c: f64| (v as f64 - c.floor()) >= 0.0 && (v as f64 - c.floor()) <= 1.0;
        prop_assume!(!(near(px, qx) && near(py, qy)));
        let mut changed = img.clone();
        changed.set(px, py, 0, img.get(px, py, 0) + 7.0);
        prop_assert_eq!(sample_bilinear(&img, q), sample_bilinear(&changed, q));
    }

    #[test]
    fn valid_pixels_sample_inside_the_source(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (w, h) = (8, 6);
        let img = image(&mut r, w, h, 1);
        let flow = FlowField::new(
            w,
            h,
            (0..w * h).map(|_| [r.random_range(-9.0..9.0), r.random_range(-7.0..7.0)]).collect(),
        )
        .unwrap();
        let (_, valid) = warp_image(&img, &flow).unwrap();
        for y in 0..h {
            for x in 0..w {
                let f = flow.get(x, y);
                let (tx, ty) = (x as f64 + f[0], y as f64 + f[1]);
                let inside = tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64;
                prop_assert_eq!(valid.get(x, y), inside);
            }
        }
    }
}

// ── losses ──────────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn losses_are_nonnegative_and_zero_at_trivial_minimizers(seed in any::<u64>(), alpha in 0.0f64..1.0) {
        let mut r = rng(seed);
        let (w, h) = (6, 5);
        let weights = LossWeights { alpha, ..LossWeights::depth_defaults() };
        let (a, b) = (image(&mut r, w, h, 1), image(&mut r, w, h, 1));
        let all = ValidityMask::filled(w, h, true);
        prop_assert!(photometric_loss(&a, &[(b.clone(), all.clone())], &weights).unwrap().value >= 0.0);
        prop_assert!(photometric_loss(&a, &[(a.clone(), all)], &weights).unwrap().value.abs() < 1e-12);
        let field = Field { width: w, height: h, channels: 2, data: (0..2 * w * h).map(|_| r.random_range(-3.0..3.0)).collect() };
        prop_assert!(edge_aware_smoothness(&field, &a).unwrap().value >= 0.0);
        let flat = Field { data: vec![1.5; 2 * w * h], ..field };
        prop_assert_eq!(edge_aware_smoothness(&flat, &a).unwrap().value, 0.0);
        let res: Vec<f64> = (0..20).map(|_| r.random_range(-4.0..4.0)).collect();
        prop_assert!(berhu(&res, 1.0).unwrap().value >= 0.0);
        prop_assert_eq!(berhu(&[0.0; 5], 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn extra_source_never_raises_pixel_cost(seed in any::<u64>(), alpha in 0.0f64..1.0) {
        let mut r = rng(seed);
        let (w, h) = (7, 5);
        let target = image(&mut r, w, h, 1);
        let mask = |r: &mut ChaCha8Rng| ValidityMask::new(w, h, (0..w * h).map(|_| r.random_bool(0.8)).collect()).unwrap();
        let base = vec![(image(&mut r, w, h, 1), mask(&mut r)), (image(&mut r, w, h, 1), mask(&mut r))];
        let mut more = base.clone();
        more.push((image(&mut r, w, h, 1), mask(&mut r)));
        let (c0, arg0) = photometric_cost_map(&target, &base, alpha).unwrap();
        let (c1, _) = photometric_cost_map(&target, &more, alpha).unwrap();
        for i in 0..w * h {
            if arg0[i].is_some() {
                prop_assert!(c1[i] <= c0[i]);
            }
        }
    }

    #[test]
    fn berhu_is_continuous_at_threshold(c in 0.01f64..10.0) {
        let eps = 1e-9 * c;
        let lo = berhu(&[c - eps], c).unwrap().value;
        let hi = berhu(&[c + eps], c).unwrap().value;
        prop_assert!((lo - hi).abs() < 1e-8 * c.max(1.0));
    }

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>(), w in 1usize..10, h in 1usize..8) {
        let mut r = rng(seed);
        let (a, b) = (image(&mut r, w, h, 3), image(&mut r, w, h, 3));
        let (ab, ba) = (ssim(&a, &b, SSIM_WINDOW).unwrap(), ssim(&b, &a, SSIM_WINDOW).unwrap());
        for (x, y) in ab.data().iter().zip(ba.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

// ── matching ────────────────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn seeds_are_unique_in_bounds_and_deterministic(index in 0usize..6, rng_seed in 0u64..4) {
        let (pair, _) = corpus_sample(Preset::TextureRich, index, 6, rng_seed).unwrap();
        let cfg = MatchConfig::default();
        let seeds = find_seeds(&pair.target, &pair.source, &cfg).unwrap();
        let (w, h) = seeds.dims();
        let mut seen = std::collections::HashSet::new();
        for s in seeds.entries() {
            prop_assert!(seen.insert((s.x, s.y)));
            let (tx, ty) = (s.x as f64 + s.flow[0], s.y as f64 + s.flow[1]);
            prop_assert!(tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64);
        }
        prop_assert_eq!(find_seeds(&pair.target, &pair.source, &cfg).unwrap(), seeds);
    }
}

// ── propagation ─────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn nonnegative_kernels_give_convex_combinations(seed in any::<u64>(), w in 2usize..9, h in 2usize..9) {
        let mut r = rng(seed);
        let raw: Vec<[f64; 8]> = (0..w * h).map(|_| std::array::from_fn(|_| r.random_range(0.0..1.0))).collect();
        let kernels = KernelField::new(w, h, raw).unwrap().normalized();
        let f0 = FlowField::new(w, h, (0..w * h).map(|_| [r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)]).collect()).unwrap();
        let x0 = r.random_range(0..w);
        let y0 = r.random_range(0..h);
        let seeds = sfdepth::matching::SeedSet::new(w, h, vec![sfdepth::matching::Seed { x: x0, y: y0, flow: [0.0, 0.0] }]).unwrap();
        let mut state = PropagationState::new(f0, seeds).unwrap();
        for _ in 0..5 {
            let next = propagate_step(&state, &kernels).unwrap();
            for c in 0..2 {
                let vals = state.flow.data().iter().map(|v| v[c]);
                let (lo, hi) = vals.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
                for v in next.flow.data() {
                    prop_assert!(v[c] >= lo - 1e-12 && v[c] <= hi + 1e-12);
                }
            }
            state = next;
        }
    }
}

// ── homography filter ───────────────────────────────────────────────────

fn random_homography(r: &mut ChaCha8Rng) -> Homography {
    let m = Matrix3::identity()
        + Matrix3::from_fn(|i, _| if i < 2 { r.random_range(-0.2..0.2) } else { r.random_range(-1e-3..1e-3) });
    let mut m = m;
    m[(0, 2)] = r.random_range(-5.0..5.0);
    m[(1, 2)] = r.random_range(-5.0..5.0);
    Homography::new(m).unwrap()
}

proptest! {
    #[test]
    fn dlt_recovers_exact_homographies(seed in any::<u64>()) {
        let mut r = rng(seed);
        let hm = random_homography(&mut r);
        let src: Vec<Vector2<f64>> = (0..4).map(|_| Vector2::new(r.random_range(0.0..80.0), r.random_range(0.0..64.0))).collect();
        let area = |a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>| ((b - a).perp(&(c - a))).abs();
        prop_assume!((0..4).all(|i| area(src[i], src[(i + 1) % 4], src[(i + 2) % 4]) > 50.0));
        let dst: Vec<Vector2<f64>> = src.iter().map(|p| hm.apply(*p).unwrap()).collect();
        let est = dlt_homography(&src, &dst).unwrap();
        for _ in 0..20 {
            let p = Vector2::new(r.random_range(0.0..80.0), r.random_range(0.0..64.0));
            prop_assert!((est.apply(p).unwrap() - hm.apply(p).unwrap()).norm() < 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ransac_is_deterministic_and_monotone_in_threshold(seed in any::<u64>(), rng_seed in any::<u64>()) {
        let mut r = rng(seed);
        let (w, h) = (40, 32);
        let k = intrinsics(w, h);
        let (flow, _) = rigid_flow(&depth(&mut r, w, h), &pose(&mut r, 0.03, 0.3), &k);
        let cfg = RansacConfig { rng_seed, iterations: 100, ..RansacConfig::default() };
        let a = ransac_homography(&flow, 4, &cfg).unwrap();
        prop_assert_eq!(a, ransac_homography(&flow, 4, &cfg).unwrap());
        let mut last = f64::INFINITY;
        for px in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let v = ransac_homography(&flow, 4, &RansacConfig { inlier_px: px, ..cfg }).unwrap();
            prop_assert!(v.outlier_ratio <= last);
            last = v.outlier_ratio;
        }
    }
}

// ── EPnP ────────────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn coplanar_points_are_solved(seed in any::<u64>()) {
        let mut r = rng(seed);
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let truth = pose(&mut r, 0.3, 0.5);
        let normal = Vector3::new(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), 1.0).normalize();
        let corr: Vec<Correspondence3D2D> = (0..12)
            .map(|_| {
                let (u, v) = (r.random_range(-1.5..1.5), r.random_range(-1.5..1.5));
                let e1 = normal.cross(&Vector3::x()).normalize();
                let e2 = normal.cross(&e1);
                let x = Vector3::new(0.0, 0.0, 5.0) + e1 * u + e2 * v;
                Correspondence3D2D { x, p: k.project(&truth.transform(&x)).unwrap() }
            })
            .collect();
        let est = epnp_solve(&corr, &k).unwrap();
        prop_assert!(est.rotation_distance(&truth) < 1e-5);
    }

    #[test]
    fn oracle_pose_reproduces_its_seeds(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (w, h) = (32, 24);
        let k = intrinsics(w, h);
        let d = DepthMap::from_fn(w, h, |x, y| 3.0 + 0.02 * x as f64 + 0.3 * ((x * 3 + y * 5) % 4) as f64).unwrap();
        let truth = pose(&mut r, 0.02, 0.2);
        let (flow, valid) = rigid_flow(&d, &truth, &k);
        let entries: Vec<_> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| (x * 5 + y * 3) % 11 == 0 && valid.get(x, y))
            .filter_map(|(x, y)| {
                let f = flow.get(x, y);
                let (tx, ty) = (x as f64 + f[0], y as f64 + f[1]);
                (tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64)
                    .then_some(sfdepth::matching::Seed { x, y, flow: f })
            })
            .collect();
        let seeds = sfdepth::matching::SeedSet::new(w, h, entries).unwrap();
        let oracle = gt_rigid_flow(&d, None, &seeds, &k, &PnpRansacConfig::default()).unwrap();
        for s in seeds.entries() {
            let f = oracle.flow.get(s.x, s.y);
            prop_assert!((f[0] - s.flow[0]).hypot(f[1] - s.flow[1]) < 1e-6);
        }
    }
}

// ── reconstruction ──────────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn best_loss_never_exceeds_initial_loss(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (w, h) = (12, 10);
        let k = intrinsics(w, h);
        let truth = depth(&mut r, w, h);
        let motion = PoseSE3::from_axis_angle(Vector3::zeros(), Vector3::new(0.3, 0.05, 0.1));
        let (flow, _) = rigid_flow(&truth, &motion, &k);
        let problem = ReconProblem::new(
            image(&mut r, w, h, 1),
            vec![image(&mut r, w, h, 1)],
            vec![flow],
            k,
            LossWeights::depth_defaults(),
            ReconConfig { iterations: 40, ..ReconConfig::default() },
        )
        .unwrap();
        let sol = solve(&problem).unwrap();
        prop_assert!(sol.best_loss <= sol.loss_trace[0]);
        let best = sol.loss_trace.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(sol.best_loss, best);
    }
}

// ── synthetic data ──────────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rendered_flow_matches_geometry_and_is_deterministic(index in 0usize..10, rng_seed in 0u64..3) {
        let (pair, row) = corpus_sample(Preset::Mixed, index, 10, rng_seed).unwrap();
        let (flow, _) = rigid_flow(&pair.depth_target, &pair.pose, &pair.intrinsics);
        prop_assert!(max_abs_diff(&flow, &pair.flow, &pair.valid) < 1e-9);
        let (again, row_again) = corpus_sample(Preset::Mixed, index, 10, rng_seed).unwrap();
        prop_assert_eq!(again, pair);
        prop_assert_eq!(row_again, row);
    }
}
