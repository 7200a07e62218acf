//! Synthetic indoor scenes with exact depth, pose and flow labels.
//!
//! The world frame is the target camera frame. A scene is a set of infinite
//! planes and axis-aligned boxes rendered by nearest-hit ray casting. Shading
//! is Lambertian with no lighting, so a surface point has the same intensity
//! in both views.
//!
//! Blank regions are whole surfaces with [`Texture::Blank`], so they shade
//! identically in both views and each one covers a single plane.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_exp, Intrinsics, PoseSE3};
use crate::io;
use crate::raster::{DepthMap, FlowField, Image, ValidityMask};

pub const DEFAULT_WIDTH: usize = 80;
pub const DEFAULT_HEIGHT: usize = 64;

/// Default camera for [`DEFAULT_WIDTH`] × [`DEFAULT_HEIGHT`] renders.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 70.0,
        fy: 70.0,
        cx: 39.5,
        cy: 31.5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    /// Two-octave value noise with the given cell size in scene units.
    Noise {
        cell: f64,
        seed: u64,
    },
    Checker {
        period: f64,
    },
    Blank,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub texture: Texture,
    /// Mean intensity, also the intensity of blank shading.
    pub albedo: f64,
    /// Peak-to-peak texture amplitude.
    pub contrast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    /// Points with `normal · X = offset`; `normal` has unit length.
    Plane {
        normal: Vector3<f64>,
        offset: f64,
        material: Material,
    },
    /// Axis-aligned box.
    Box {
        center: Vector3<f64>,
        half: Vector3<f64>,
        material: Material,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub surfaces: Vec<Surface>,
    /// Maps target-camera points into the source camera.
    pub pose: PoseSE3,
}

/// A rendered target/source pair with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPair {
    pub target: Image,
    pub source: Image,
    pub depth_target: DepthMap,
    pub depth_source: DepthMap,
    pub pose: PoseSE3,
    pub intrinsics: Intrinsics,
    /// Target-to-source flow of every target pixel.
    pub flow: FlowField,
    /// Target pixels whose surface point is visible in the source view.
    pub valid: ValidityMask,
    /// Target pixels shaded blank.
    pub blank: ValidityMask,
}

impl RenderedPair {
    pub fn blank_fraction(&self) -> f64 {
        self.blank.count() as f64 / (self.blank.width() * self.blank.height()) as f64
    }
}

// ── Ray casting ─────────────────────────────────────────────────────────

const MIN_HIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
struct Hit {
    lambda: f64,
    surface: usize,
    /// Box face axis; unused for planes.
    axis: usize,
}

fn intersect(surface: &Surface, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
    match surface {
        Surface::Plane { normal, offset, .. } => {
            let den = normal.dot(d);
            if den == 0.0 {
                return None;
            }
            let lambda = (offset - normal.dot(o)) / den;
            (lambda > MIN_HIT).then_some((lambda, 0))
        }
        Surface::Box { center, half, .. } => {
            let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
            for a in 0..3 {
                let (lo, hi) = (center[a] - half[a], center[a] + half[a]);
                if d[a] == 0.0 {
                    if o[a] < lo || o[a] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis = a;
                }
                t1 = t1.min(tb);
            }
            (t0 <= t1 && t0 > MIN_HIT).then_some((t0, axis))
        }
    }
}

fn cast(surfaces: &[Surface], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, s) in surfaces.iter().enumerate() {
        if let Some((lambda, axis)) = intersect(s, o, d) {
            if best.is_none_or(|b| lambda < b.lambda) {
                best = Some(Hit {
                    lambda,
                    surface: i,
                    axis,
                });
            }
        }
    }
    best
}

// ── Texturing ───────────────────────────────────────────────────────────

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (i, j) = (fu as i64, fv as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (su, sv) = (smooth(u - fu), smooth(v - fv));
    let a = lattice(seed, i, j);
    let b = lattice(seed, i + 1, j);
    let c = lattice(seed, i, j + 1);
    let d = lattice(seed, i + 1, j + 1);
    let top = a + su * (b - a);
    let bottom = c + su * (d - c);
    top + sv * (bottom - top)
}

fn texture_coords(surface: &Surface, axis: usize, x: &Vector3<f64>) -> (f64, f64) {
    match surface {
        Surface::Plane { normal, .. } => {
            let helper = if normal.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            let e1 = normal.cross(&helper).normalize();
            let e2 = normal.cross(&e1);
            (x.dot(&e1), x.dot(&e2))
        }
        Surface::Box { .. } => {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            // Offset per face so opposite faces do not share a pattern.
            (x[a] + 17.0 * axis as f64, x[b])
        }
    }
}

fn material(surface: &Surface) -> &Material {
    match surface {
        Surface::Plane { material, .. } | Surface::Box { material, .. } => material,
    }
}

fn shade(surface: &Surface, axis: usize, x: &Vector3<f64>) -> f64 {
    let m = material(surface);
    let value = match m.texture {
        Texture::Blank => m.albedo,
        Texture::Noise { cell, seed } => {
            let (u, v) = texture_coords(surface, axis, x);
            let fine = cell / 2.3;
            let n = 0.65 * value_noise(seed, u / cell, v / cell)
                + 0.35 * value_noise(seed ^ 0x5bd1, u / fine, v / fine);
            m.albedo + m.contrast * (n - 0.5)
        }
        Texture::Checker { period } => {
            let (u, v) = texture_coords(surface, axis, x);
            let parity = ((u / period).floor() + (v / period).floor()).rem_euclid(2.0);
            m.albedo + m.contrast * (parity - 0.5)
        }
    };
    value.clamp(0.0, 1.0)
}

// ── Rendering ───────────────────────────────────────────────────────────

struct View {
    image: Image,
    depth: DepthMap,
    blank: ValidityMask,
}

fn render_view(spec: &SceneSpec, pose: &PoseSE3) -> Result<View> {
    let (w, h) = (spec.width, spec.height);
    let k = &spec.intrinsics;
    let rt = pose.rotation.transpose();
    let origin = -(rt * pose.translation);
    let mut pixels = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    let mut blank = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let dir = rt * k.ray(x as f64, y as f64);
            let hit = cast(&spec.surfaces, &origin, &dir).ok_or_else(|| {
                Error::Scene(format!("ray through pixel ({x}, {y}) hits no surface"))
            })?;
            let point = origin + dir * hit.lambda;
            let surface = &spec.surfaces[hit.surface];
            let i = y * w + x;
            pixels[i] = shade(surface, hit.axis, &point);
            blank[i] = matches!(material(surface).texture, Texture::Blank);
            depth[i] = hit.lambda;
        }
    }
    Ok(View {
        image: Image::new(w, h, 1, pixels)?,
        depth: DepthMap::new(w, h, depth)?,
        blank: ValidityMask::new(w, h, blank)?,
    })
}

/// Relative depth tolerance of the occlusion test.
const OCCLUSION_TOL: f64 = 1e-7;

/// Renders both views and the analytic flow and visibility labels.
pub fn render(spec: &SceneSpec) -> Result<RenderedPair> {
    spec.intrinsics.validate()?;
    spec.pose.validate()?;
    if spec.width < 2 || spec.height < 2 {
        return Err(Error::Scene("image must be at least 2x2".into()));
    }
    for s in &spec.surfaces {
        if let Surface::Box { center, .. } = s {
            if center.z <= 0.0 || spec.pose.transform(center).z <= 0.0 {
                return Err(Error::Scene("box center behind a camera".into()));
            }
        }
    }
    let target = render_view(spec, &PoseSE3::identity())?;
    let source = render_view(spec, &spec.pose)?;
    let (w, h) = (spec.width, spec.height);
    let k = &spec.intrinsics;
    let rt = spec.pose.rotation.transpose();
    let src_origin = -(rt * spec.pose.translation);
    let mut flow = vec![[0.0; 2]; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let xw = k.ray(x as f64, y as f64) * target.depth.data()[i];
            let xs = spec.pose.transform(&xw);
            if xs.z <= 0.0 {
                continue;
            }
            let ps = k.project_unchecked(&xs);
            flow[i] = [ps.x - x as f64, ps.y - y as f64];
            let in_view =
                ps.x >= 0.0 && ps.x <= (w - 1) as f64 && ps.y >= 0.0 && ps.y <= (h - 1) as f64;
            if !in_view {
                continue;
            }
            let dir = rt * k.ray(ps.x, ps.y);
            let visible = cast(&spec.surfaces, &src_origin, &dir)
                .is_some_and(|hit| hit.lambda >= xs.z * (1.0 - OCCLUSION_TOL));
            valid[i] = visible;
        }
    }
    Ok(RenderedPair {
        target: target.image,
        source: source.image,
        depth_target: target.depth,
        depth_source: source.depth,
        pose: spec.pose,
        intrinsics: *k,
        flow: FlowField::new(w, h, flow)?,
        valid: ValidityMask::new(w, h, valid)?,
        blank: target.blank,
    })
}

// ── Scene families ──────────────────────────────────────────────────────

fn plane(normal: Vector3<f64>, offset: f64, material: Material) -> Surface {
    let n = normal.norm();
    Surface::Plane {
        normal: normal / n,
        offset: offset / n,
        material,
    }
}

fn noise_material(rng: &mut ChaCha8Rng) -> Material {
    Material {
        texture: Texture::Noise {
            cell: rng.random_range(0.18..0.3),
            seed: rng.random(),
        },
        albedo: rng.random_range(0.35..0.65),
        contrast: rng.random_range(0.6..0.8),
    }
}

/// A box-shaped room (back wall, side walls, floor, ceiling) with one or two
/// boxes standing on the floor.
pub fn random_room(rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let back = rng.random_range(4.0..5.0);
    let left = rng.random_range(1.8..2.4);
    let right = rng.random_range(1.8..2.4);
    let floor = rng.random_range(1.0..1.3);
    let ceiling = rng.random_range(1.2..1.6);
    let mut s = vec![
        plane(Vector3::z(), back, noise_material(rng)),
        plane(Vector3::x(), -left, noise_material(rng)),
        plane(Vector3::x(), right, noise_material(rng)),
        plane(Vector3::y(), floor, noise_material(rng)),
        plane(Vector3::y(), -ceiling, noise_material(rng)),
    ];
    for _ in 0..rng.random_range(1..=2) {
        let half = Vector3::new(
            rng.random_range(0.2..0.45),
            rng.random_range(0.25..0.6),
            rng.random_range(0.2..0.45),
        );
        let center = Vector3::new(
            rng.random_range(-1.0..1.0),
            floor - half.y,
            rng.random_range(1.6..3.0),
        );
        s.push(Surface::Box {
            center,
            half,
            material: noise_material(rng),
        });
    }
    s
}

/// Two textured planes meeting in a vertical ridge that points at the camera.
pub fn random_two_planes(rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let apex_x = rng.random_range(-0.5..0.5);
    let apex_z = rng.random_range(2.0..2.6);
    let slope_l = rng.random_range(0.6..1.2);
    let slope_r = rng.random_range(0.6..1.2);
    // z = apex_z + slope·(x − apex_x) on the left, mirrored on the right.
    vec![
        plane(
            Vector3::new(-slope_l, 0.0, 1.0),
            apex_z - slope_l * apex_x,
            noise_material(rng),
        ),
        plane(
            Vector3::new(slope_r, 0.0, 1.0),
            apex_z + slope_r * apex_x,
            noise_material(rng),
        ),
    ]
}

/// Blanks the subset of planes whose target-view pixel share is closest to
/// `fraction`. Returns the achieved share, or `None` when it misses
/// `fraction` by more than `tol`. Boxes stay textured.
pub fn assign_blank(
    surfaces: &mut [Surface],
    width: usize,
    height: usize,
    k: &Intrinsics,
    fraction: f64,
    tol: f64,
) -> Result<Option<f64>> {
    if fraction <= 0.0 {
        return Ok(Some(0.0));
    }
    let mut counts = vec![0usize; surfaces.len()];
    for y in 0..height {
        for x in 0..width {
            let hit = cast(surfaces, &Vector3::zeros(), &k.ray(x as f64, y as f64))
                .ok_or_else(|| Error::Scene("ray hits no surface".into()))?;
            counts[hit.surface] += 1;
        }
    }
    let planes: Vec<usize> = (0..surfaces.len())
        .filter(|&i| matches!(surfaces[i], Surface::Plane { .. }))
        .collect();
    if planes.len() > 16 {
        return Err(Error::Scene("too many planes to choose blank ones".into()));
    }
    let total = (width * height) as f64;
    let (subset, share) = (0u32..1 << planes.len())
        .map(|bits| {
            let px: usize = (0..planes.len())
                .filter(|j| bits >> j & 1 == 1)
                .map(|j| counts[planes[j]])
                .sum();
            (bits, px as f64 / total)
        })
        .min_by(|a, b| (a.1 - fraction).abs().total_cmp(&(b.1 - fraction).abs()))
        .expect("the empty subset exists");
    if (share - fraction).abs() > tol {
        return Ok(None);
    }
    for (j, &i) in planes.iter().enumerate() {
        if subset >> j & 1 == 1 {
            if let Surface::Plane { material, .. } = &mut surfaces[i] {
                material.texture = Texture::Blank;
            }
        }
    }
    Ok(Some(share))
}

/// Camera motion families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Translation,
    Rotation,
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Motion::Translation => "translation",
            Motion::Rotation => "rotation",
        })
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(Motion::Translation),
            "rotation" => Ok(Motion::Rotation),
            _ => Err(Error::Parse(format!("unknown motion {s:?}"))),
        }
    }
}

/// Random motion. Translations have a baseline of 5.5–8% of `mean_depth`
/// plus a small rotation; rotations turn 0.02–0.05 rad about a random axis.
pub fn random_motion(rng: &mut ChaCha8Rng, motion: Motion, mean_depth: f64) -> PoseSE3 {
    match motion {
        Motion::Translation => {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.6..0.6),
            );
            let dir = if dir.norm() < 0.3 {
                Vector3::x()
            } else {
                dir.normalize()
            };
            let baseline = rng.random_range(0.055..0.08) * mean_depth;
            let omega = Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01));
            PoseSE3::from_axis_angle(omega, dir * baseline)
        }
        Motion::Rotation => {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
            );
            let axis = if axis.norm() < 0.2 {
                Vector3::y()
            } else {
                axis.normalize()
            };
            PoseSE3::from_rotation(so3_exp(&(axis * rng.random_range(0.02..0.05))))
        }
    }
}

fn mean_target_depth(
    surfaces: &[Surface],
    width: usize,
    height: usize,
    k: &Intrinsics,
) -> Result<f64> {
    let mut sum = 0.0;
    for y in 0..height {
        for x in 0..width {
            let hit = cast(surfaces, &Vector3::zeros(), &k.ray(x as f64, y as f64))
                .ok_or_else(|| Error::Scene("ray hits no surface".into()))?;
            sum += hit.lambda;
        }
    }
    Ok(sum / (width * height) as f64)
}

/// Corpus presets: blank coverage plus motion family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    TextureRich,
    LowTexture40,
    LowTexture70,
    PureRotation,
    /// Texture-rich scenes, 30% of them pure rotations.
    Mixed,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::TextureRich,
        Preset::LowTexture40,
        Preset::LowTexture70,
        Preset::PureRotation,
        Preset::Mixed,
    ];

    pub fn blank_fraction(self) -> f64 {
        match self {
            Preset::LowTexture40 => 0.4,
            Preset::LowTexture70 => 0.7,
            _ => 0.0,
        }
    }

    /// Motion of sample `index` in a corpus of `n` generated with `rng_seed`.
    pub fn motion(self, index: usize, n: usize, rng_seed: u64) -> Motion {
        match self {
            Preset::PureRotation => Motion::Rotation,
            Preset::Mixed => {
                let rotations = (0.3 * n as f64).round() as usize;
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x6d69_7865_64);
                for i in (1..n).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                if order[..rotations].contains(&index) {
                    Motion::Rotation
                } else {
                    Motion::Translation
                }
            }
            _ => Motion::Translation,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::TextureRich => "texture-rich",
            Preset::LowTexture40 => "low-texture-40",
            Preset::LowTexture70 => "low-texture-70",
            Preset::PureRotation => "pure-rotation",
            Preset::Mixed => "mixed",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unknown preset {s:?}")))
    }
}

/// Per-sample generator, independent of other samples.
pub fn sample_rng(rng_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(index as u64);
    rng
}

/// Largest gap between a preset's blank share and the rendered one.
pub const BLANK_TOLERANCE: f64 = 0.04;

/// Rooms drawn per sample before giving up on the blank share.
const ROOM_ATTEMPTS: usize = 500;

/// Scene description of one corpus sample at the default size.
pub fn preset_scene(preset: Preset, index: usize, n: usize, rng_seed: u64) -> Result<SceneSpec> {
    let motion = preset.motion(index, n, rng_seed);
    let mut rng = sample_rng(rng_seed, index);
    let k = default_intrinsics();
    for _ in 0..ROOM_ATTEMPTS {
        let mut room = random_room(&mut rng);
        let share = assign_blank(
            &mut room,
            DEFAULT_WIDTH,
            DEFAULT_HEIGHT,
            &k,
            preset.blank_fraction(),
            BLANK_TOLERANCE,
        )?;
        if share.is_some() {
            return scene_with(&mut rng, room, motion);
        }
    }
    Err(Error::Scene(format!(
        "no room matched a blank share of {} in {ROOM_ATTEMPTS} draws",
        preset.blank_fraction()
    )))
}

/// Builds a default-size scene for `surfaces` with a random motion.
pub fn scene_with(
    rng: &mut ChaCha8Rng,
    surfaces: Vec<Surface>,
    motion: Motion,
) -> Result<SceneSpec> {
    let k = default_intrinsics();
    let (w, h) = (DEFAULT_WIDTH, DEFAULT_HEIGHT);
    let mean = mean_target_depth(&surfaces, w, h, &k)?;
    let pose = random_motion(rng, motion, mean);
    Ok(SceneSpec {
        width: w,
        height: h,
        intrinsics: k,
        surfaces,
        pose,
    })
}

// ── Corpus on disk ──────────────────────────────────────────────────────

pub const TARGET_FILE: &str = "target.pgm";
pub const SOURCE_FILE: &str = "source.pgm";
pub const DEPTH_TARGET_FILE: &str = "depth_target.pfm";
pub const DEPTH_SOURCE_FILE: &str = "depth_source.pfm";
pub const FLOW_FILE: &str = "flow_gt.flo";
pub const VALID_FILE: &str = "valid.pgm";
pub const BLANK_FILE: &str = "blank.pgm";
pub const POSE_FILE: &str = "pose.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";

fn mask_image(mask: &ValidityMask) -> Image {
    Image::from_fn_gray(mask.width(), mask.height(), |x, y| {
        mask.get(x, y) as u8 as f64
    })
}

fn image_mask(img: &Image) -> Result<ValidityMask> {
    ValidityMask::new(
        img.width(),
        img.height(),
        img.data().iter().map(|v| *v > 0.5).collect(),
    )
}

/// Writes a sample directory. Images are 16-bit PGM.
pub fn write_sample(dir: impl AsRef<Path>, pair: &RenderedPair) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(TARGET_FILE), io::encode_pnm(&pair.target, 65535)?)?;
    std::fs::write(dir.join(SOURCE_FILE), io::encode_pnm(&pair.source, 65535)?)?;
    io::write_depth_pfm(dir.join(DEPTH_TARGET_FILE), &pair.depth_target)?;
    io::write_depth_pfm(dir.join(DEPTH_SOURCE_FILE), &pair.depth_source)?;
    io::write_flo(dir.join(FLOW_FILE), &pair.flow)?;
    io::write_image(dir.join(VALID_FILE), &mask_image(&pair.valid))?;
    io::write_image(dir.join(BLANK_FILE), &mask_image(&pair.blank))?;
    io::write_poses(dir.join(POSE_FILE), &[pair.pose])?;
    io::write_intrinsics(dir.join(INTRINSICS_FILE), &pair.intrinsics)?;
    Ok(())
}

/// Reads a directory written by [`write_sample`].
///
/// Depth and flow pass through `f32` on disk.
pub fn read_sample(dir: impl AsRef<Path>) -> Result<RenderedPair> {
    let dir = dir.as_ref();
    let poses = io::read_poses(dir.join(POSE_FILE))?;
    let pose = *poses
        .first()
        .ok_or_else(|| Error::Parse(format!("{}: no pose", dir.join(POSE_FILE).display())))?;
    Ok(RenderedPair {
        target: io::read_image(dir.join(TARGET_FILE))?,
        source: io::read_image(dir.join(SOURCE_FILE))?,
        depth_target: io::read_depth_pfm(dir.join(DEPTH_TARGET_FILE))?,
        depth_source: io::read_depth_pfm(dir.join(DEPTH_SOURCE_FILE))?,
        pose,
        intrinsics: io::read_intrinsics(dir.join(INTRINSICS_FILE))?,
        flow: io::read_flo(dir.join(FLOW_FILE))?,
        valid: image_mask(&io::read_image(dir.join(VALID_FILE))?)?,
        blank: image_mask(&io::read_image(dir.join(BLANK_FILE))?)?,
    })
}

/// One row of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    /// Sample directory relative to the manifest.
    pub dir: PathBuf,
    pub preset: String,
    pub motion: Motion,
    pub blank_fraction: f64,
    pub baseline: f64,
    pub rotation_angle: f64,
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:04}")
}

/// Renders sample `index` of a preset corpus and its manifest row.
pub fn corpus_sample(
    preset: Preset,
    index: usize,
    n: usize,
    rng_seed: u64,
) -> Result<(RenderedPair, ManifestRow)> {
    let spec = preset_scene(preset, index, n, rng_seed)?;
    let pair = render(&spec)?;
    let id = sample_id(index);
    let row = ManifestRow {
        dir: PathBuf::from(&id),
        sample_id: id,
        preset: preset.to_string(),
        motion: preset.motion(index, n, rng_seed),
        blank_fraction: pair.blank_fraction(),
        baseline: pair.pose.translation.norm(),
        rotation_angle: pair.pose.angle(),
    };
    Ok((pair, row))
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(|e| Error::Parse(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("manifest: {e}"))))
        .collect()
}

/// Writes `n` samples of a preset under `out_dir` plus `manifest.csv`.
pub fn corpus(
    preset: Preset,
    n: usize,
    rng_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestRow>> {
    if n == 0 {
        return Err(Error::InvalidInput("corpus size must be >= 1".into()));
    }
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let (pair, row) = corpus_sample(preset, i, n, rng_seed)?;
        write_sample(out.join(&row.dir), &pair)?;
        rows.push(row);
    }
    write_manifest(out.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}
