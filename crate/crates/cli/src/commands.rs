//! One function per subcommand. Each reads its inputs from disk, calls the
//! library and writes its outputs under `out`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sfdepth::io;
use sfdepth::matching::{find_seeds, SeedSet};
use sfdepth::pnp::{flow_epe, gt_rigid_flow};
use sfdepth::propagation::{solve_flow, FlowSolution};
use sfdepth::recon::{depth_metrics_masked, solve, DepthMetrics, ReconProblem, ReconSolution};
use sfdepth::rotfilter::{filter_sequence, FilterReport};
use sfdepth::synth::{self, ManifestRow, Preset};
use sfdepth::{DepthMap, Error, FlowField, Image, Intrinsics, Result, ValidityMask};

use crate::config::{PipelineConfig, Supervision};

pub const SEEDS_FILE: &str = "seeds.txt";
pub const FLOW_FILE: &str = "flow.flo";
pub const ORACLE_FILE: &str = "oracle.flo";
pub const FILTER_FILE: &str = "filter.csv";
pub const DEPTH_FILE: &str = "depth.pfm";
pub const POSES_FILE: &str = "pose.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const INTRINSICS_FILE: &str = synth::INTRINSICS_FILE;

/// What [`cmd_eval`] compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    Depth,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalOutput {
    Depth(DepthMetrics),
    /// Mean end-point error in pixels.
    Flow(f64),
}

impl EvalOutput {
    /// Header plus one data row.
    pub fn to_csv(&self) -> String {
        match self {
            EvalOutput::Depth(m) => format!("{}\n{}\n", DepthMetrics::CSV_HEADER, m.csv_row()),
            EvalOutput::Flow(epe) => format!("epe\n{epe}\n"),
        }
    }
}

/// Process exit code for a failed command; 0 and clap's usage code 2 are
/// never used.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 10,
        Error::Parse(_) => 11,
        Error::Config(_) => 12,
        Error::InvalidInput(_) => 13,
        Error::DimensionMismatch { .. } => 14,
        Error::BehindCamera { .. } => 15,
        Error::InsufficientSeeds { .. } => 16,
        Error::InsufficientData { .. } => 17,
        Error::RankDeficient(_) => 18,
        Error::Cheirality => 19,
        Error::DegenerateMotion(_) => 20,
        Error::NumericalFailure { .. } => 21,
        Error::UndefinedMetric(_) => 22,
        Error::Scene(_) => 23,
    }
}

/// Single-line, `key=value` description of a failure for stderr.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error kind={} code={} message={msg:?}", e.kind(), exit_code(e))
}

fn create_dir(out: &Path) -> Result<()> {
    Ok(std::fs::create_dir_all(out)?)
}

/// Depth from a PFM file, or from a 16-bit millimetre PGM/PNM whose zeros
/// are invalid.
pub fn read_depth_any(path: &Path) -> Result<(DepthMap, Option<ValidityMask>)> {
    let is_pfm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        Ok((io::read_depth_pfm(path)?, None))
    } else {
        let (d, m) = io::read_depth_mm(path)?;
        Ok((d, Some(m)))
    }
}

fn read_pair(a: &Path, b: &Path) -> Result<(Image, Image)> {
    let (ia, ib) = (io::read_image(a)?, io::read_image(b)?);
    if ia.dims() != ib.dims() {
        return Err(Error::DimensionMismatch {
            expected: ia.dims(),
            got: ib.dims(),
        });
    }
    Ok((ia, ib))
}

pub fn cmd_synth(preset: Preset, n: usize, seed: u64, out: &Path) -> Result<Vec<ManifestRow>> {
    let start = Instant::now();
    let rows = synth::corpus(preset, n, seed, out)?;
    let mean_blank = rows.iter().map(|r| r.blank_fraction).sum::<f64>() / rows.len() as f64;
    log::info!(
        "stage=synth preset={preset} n={n} wall_ms={} mean_blank={mean_blank:.3}",
        start.elapsed().as_millis()
    );
    Ok(rows)
}

pub fn cmd_match(a: &Path, b: &Path, cfg: &PipelineConfig, out: &Path) -> Result<SeedSet> {
    let start = Instant::now();
    let (ia, ib) = read_pair(a, b)?;
    let seeds = find_seeds(&ia, &ib, &cfg.matching)?;
    create_dir(out)?;
    io::write_seeds(out.join(SEEDS_FILE), &seeds)?;
    log::info!(
        "stage=match wall_ms={} seeds={}",
        start.elapsed().as_millis(),
        seeds.len()
    );
    Ok(seeds)
}

pub fn cmd_flow(
    a: &Path,
    b: &Path,
    seeds: &Path,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<FlowSolution> {
    let start = Instant::now();
    let (ia, ib) = read_pair(a, b)?;
    let seeds = io::read_seeds(seeds, Some(ia.dims()))?;
    let sol = solve_flow(&ia, &ib, &seeds, &cfg.flow)?;
    create_dir(out)?;
    io::write_flo(out.join(FLOW_FILE), &sol.flow)?;
    log::info!(
        "stage=flow wall_ms={} iterations={} loss={}",
        start.elapsed().as_millis(),
        sol.loss_trace.len(),
        sol.best_loss
    );
    Ok(sol)
}

/// Reads a `pair_id,flow_path` CSV with the paths as written.
pub fn read_flow_manifest(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    #[derive(serde::Deserialize)]
    struct Row {
        pair_id: String,
        flow_path: PathBuf,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    reader
        .deserialize()
        .map(|r| {
            let r: Row = r.map_err(|e| Error::Parse(format!("flow manifest: {e}")))?;
            Ok((r.pair_id, r.flow_path))
        })
        .collect()
}

pub fn write_flow_manifest(path: &Path, rows: &[(String, PathBuf)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["pair_id", "flow_path"]).map_err(csv_err)?;
    for (id, p) in rows {
        w.write_record([id.as_str(), &p.to_string_lossy()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_filter(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> Result<FilterReport> {
    let start = Instant::now();
    let rows = read_flow_manifest(manifest)?;
    // Relative paths resolve against the manifest's directory; the report
    // keeps them as written so it does not depend on the working directory.
    let base = manifest.parent().unwrap_or(Path::new(""));
    let resolved: Vec<_> = rows
        .iter()
        .map(|(id, p)| (id.clone(), base.join(p)))
        .collect();
    let mut report = filter_sequence(&resolved, cfg.filter.stride, &cfg.filter.ransac);
    for (e, (_, raw)) in report.entries.iter_mut().zip(&rows) {
        e.flow_path.clone_from(raw);
    }
    create_dir(out)?;
    std::fs::write(out.join(FILTER_FILE), report.to_csv()?)?;
    log::info!(
        "stage=filter wall_ms={} pairs={} discarded={} errors={}",
        start.elapsed().as_millis(),
        report.entries.len(),
        report.entries.iter().filter(|e| e.discarded()).count(),
        report.entries.iter().filter(|e| e.outcome.is_err()).count()
    );
    Ok(report)
}

/// Intrinsics from `explicit`, else from `intrinsics.txt` beside `near`.
pub fn locate_intrinsics(explicit: Option<&Path>, near: &Path) -> Result<Intrinsics> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => near
            .parent()
            .unwrap_or(Path::new(""))
            .join(INTRINSICS_FILE),
    };
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "no intrinsics: {} does not exist",
            path.display()
        )));
    }
    io::read_intrinsics(path)
}

pub fn cmd_oracle(
    a: &Path,
    b: &Path,
    depth: &Path,
    seeds: &Path,
    intrinsics: Option<&Path>,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<FlowField> {
    let start = Instant::now();
    let (ia, _) = read_pair(a, b)?;
    let (d, mask) = read_depth_any(depth)?;
    if d.dims() != ia.dims() {
        return Err(Error::DimensionMismatch {
            expected: ia.dims(),
            got: d.dims(),
        });
    }
    let k = locate_intrinsics(intrinsics, depth)?;
    let seeds = io::read_seeds(seeds, Some(ia.dims()))?;
    let oracle = gt_rigid_flow(&d, mask.as_ref(), &seeds, &k, &cfg.oracle)?;
    create_dir(out)?;
    io::write_flo(out.join(ORACLE_FILE), &oracle.flow)?;
    log::info!(
        "stage=oracle wall_ms={} inliers={} seeds={}",
        start.elapsed().as_millis(),
        oracle.inliers,
        oracle.used_seeds
    );
    Ok(oracle.flow)
}

/// Supervision flow for a sample directory per `cfg.recon.supervision`.
fn supervision_flow(
    dir: &Path,
    target: &Image,
    source: &Image,
    k: &Intrinsics,
    cfg: &PipelineConfig,
) -> Result<FlowField> {
    let seeds = find_seeds(target, source, &cfg.matching)?;
    match cfg.recon.supervision {
        Supervision::Sfnet => Ok(solve_flow(target, source, &seeds, &cfg.flow)?.flow),
        Supervision::Oracle => {
            let depth = io::read_depth_pfm(dir.join(synth::DEPTH_TARGET_FILE))?;
            Ok(gt_rigid_flow(&depth, None, &seeds, k, &cfg.oracle)?.flow)
        }
    }
}

/// Reconstructs the target depth of a sample directory. Supervision comes
/// from `flow` when given, otherwise it is computed per the config.
pub fn cmd_recon(
    dir: &Path,
    flow: Option<&Path>,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<ReconSolution> {
    let start = Instant::now();
    let (target, source) = read_pair(&dir.join(synth::TARGET_FILE), &dir.join(synth::SOURCE_FILE))?;
    let k = io::read_intrinsics(dir.join(INTRINSICS_FILE))?;
    let supervision = match flow {
        Some(p) => io::read_flo(p)?,
        None => supervision_flow(dir, &target, &source, &k, cfg)?,
    };
    let problem = ReconProblem::new(
        target,
        vec![source],
        vec![supervision],
        k,
        cfg.recon.weights,
        cfg.recon.solver,
    )?;
    let sol = solve(&problem)?;
    create_dir(out)?;
    io::write_depth_pfm(out.join(DEPTH_FILE), &sol.depth)?;
    io::write_poses(out.join(POSES_FILE), &sol.poses)?;
    log::info!(
        "stage=recon wall_ms={} iterations={} loss={} collapsed={} degenerate={}",
        start.elapsed().as_millis(),
        sol.loss_trace.len(),
        sol.best_loss,
        sol.collapsed,
        sol.degenerate
    );
    Ok(sol)
}

/// Compares `pred` with `gt` and writes the metrics CSV.
///
/// `mask` restricts the comparison to its set pixels.
pub fn cmd_eval(
    pred: &Path,
    gt: &Path,
    kind: EvalKind,
    mask: Option<&Path>,
    median_scale: bool,
    out: &Path,
) -> Result<EvalOutput> {
    let start = Instant::now();
    let mask = mask
        .map(|p| io::read_image(p).and_then(|img| image_mask(&img)))
        .transpose()?;
    let result = match kind {
        EvalKind::Depth => {
            let (p, pm) = read_depth_any(pred)?;
            let (g, gm) = read_depth_any(gt)?;
            let mut m = mask;
            for extra in [pm, gm].into_iter().flatten() {
                m = Some(match m {
                    Some(m) => m.and(&extra)?,
                    None => extra,
                });
            }
            EvalOutput::Depth(depth_metrics_masked(&p, &g, m.as_ref(), median_scale)?)
        }
        EvalKind::Flow => {
            let (p, g) = (io::read_flo(pred)?, io::read_flo(gt)?);
            let m = mask.unwrap_or_else(|| {
                let (w, h) = g.dims();
                ValidityMask::filled(w, h, true)
            });
            EvalOutput::Flow(flow_epe(&p, &g, &m)?)
        }
    };
    let csv = result.to_csv();
    create_dir(out)?;
    std::fs::write(out.join(METRICS_FILE), &csv)?;
    log::info!(
        "stage=eval kind={kind:?} wall_ms={} row={}",
        start.elapsed().as_millis(),
        csv.lines().nth(1).unwrap_or_default()
    );
    Ok(result)
}

/// Nonzero pixels of a mask image.
pub fn image_mask(img: &Image) -> Result<ValidityMask> {
    let (w, h) = img.dims();
    let g = img.to_gray();
    ValidityMask::new(w, h, g.data().iter().map(|v| *v > 0.0).collect())
}
