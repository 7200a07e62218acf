//! match → flow → filter → recon → eval over a synthetic dataset directory.
//!
//! Every stage reads its inputs from disk and writes its outputs under
//! `out/<sample_id>/`, so any stage can be rerun alone. Per-sample stages run
//! on a bounded pool; aggregate files are written in manifest order, so the
//! artifacts do not depend on the pool size.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sfdepth::recon::DepthMetrics;
use sfdepth::synth::{self, ManifestRow};
use sfdepth::{Error, Result};

use crate::commands::{self, EvalKind, EvalOutput};
use crate::config::PipelineConfig;

pub const FLOW_MANIFEST_FILE: &str = "flows.csv";
pub const STATUS_FILE: &str = "status.csv";
pub const DEPTH_METRICS_FILE: &str = "depth_metrics.csv";
pub const FLOW_METRICS_FILE: &str = "flow_metrics.csv";

/// Outcome of one stage for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StageStatus {
    pub sample_id: String,
    pub stage: &'static str,
    /// `ok`, `skipped`, or the error kind.
    pub status: String,
    pub message: String,
}

impl StageStatus {
    fn ok(id: &str, stage: &'static str) -> Self {
        Self::new(id, stage, "ok", String::new())
    }

    fn new(id: &str, stage: &'static str, status: &str, message: String) -> Self {
        Self {
            sample_id: id.to_string(),
            stage,
            status: status.to_string(),
            message,
        }
    }

    fn from_result<T>(id: &str, stage: &'static str, r: &Result<T>) -> Self {
        match r {
            Ok(_) => Self::ok(id, stage),
            Err(e) => Self::new(id, stage, e.kind(), e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineReport {
    pub statuses: Vec<StageStatus>,
    /// Sample ids the rotation filter discarded.
    pub discarded: Vec<String>,
    /// Sample ids that were reconstructed.
    pub reconstructed: Vec<String>,
    pub depth_metrics: Vec<(String, DepthMetrics)>,
    pub flow_epe: Vec<(String, f64)>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every stage on the dataset at `dataset` (a `manifest.csv` plus one
/// directory per sample) and writes all artifacts under `out`.
pub fn run(dataset: &Path, cfg: &PipelineConfig, out: &Path) -> Result<PipelineReport> {
    let rows = synth::read_manifest(dataset.join(synth::MANIFEST_FILE))?;
    std::fs::create_dir_all(out)?;
    let workers = pool(cfg.jobs)?;
    let sample_dir = |r: &ManifestRow| dataset.join(&r.dir);
    let out_dir = |r: &ManifestRow| out.join(&r.sample_id);
    let mut report = PipelineReport::default();

    // match + flow
    let start = Instant::now();
    let flow_status: Vec<(StageStatus, StageStatus)> = workers.install(|| {
        rows.par_iter()
            .map(|r| {
                let (src, dst) = (sample_dir(r), out_dir(r));
                let (a, b) = (src.join(synth::TARGET_FILE), src.join(synth::SOURCE_FILE));
                let m = commands::cmd_match(&a, &b, cfg, &dst);
                let ms = StageStatus::from_result(&r.sample_id, "match", &m);
                let fs = match m {
                    Ok(_) => {
                        let f = commands::cmd_flow(&a, &b, &dst.join(commands::SEEDS_FILE), cfg, &dst);
                        StageStatus::from_result(&r.sample_id, "flow", &f)
                    }
                    Err(_) => StageStatus::new(&r.sample_id, "flow", "skipped", String::new()),
                };
                (ms, fs)
            })
            .collect()
    });
    let mut flows = Vec::new();
    for (r, (ms, fs)) in rows.iter().zip(flow_status) {
        if fs.status == "ok" {
            flows.push((
                r.sample_id.clone(),
                PathBuf::from(&r.sample_id).join(commands::FLOW_FILE),
            ));
        }
        report.statuses.push(ms);
        report.statuses.push(fs);
    }
    log::info!(
        "stage=pipeline-flow wall_ms={} samples={} flows={}",
        start.elapsed().as_millis(),
        rows.len(),
        flows.len()
    );

    // filter
    let manifest = out.join(FLOW_MANIFEST_FILE);
    commands::write_flow_manifest(&manifest, &flows)?;
    let filtered = commands::cmd_filter(&manifest, cfg, out)?;
    for e in &filtered.entries {
        let status = match &e.outcome {
            Ok(_) => StageStatus::ok(&e.pair_id, "filter"),
            Err(msg) => StageStatus::new(&e.pair_id, "filter", "error", msg.clone()),
        };
        report.statuses.push(status);
        if e.discarded() {
            report.discarded.push(e.pair_id.clone());
        }
    }
    let kept: Vec<&ManifestRow> = filtered
        .kept()
        .filter_map(|e| rows.iter().find(|r| r.sample_id == e.pair_id))
        .collect();

    // recon + eval
    let start = Instant::now();
    type Evaluated = (StageStatus, StageStatus, Option<DepthMetrics>, Option<f64>);
    let evaluated: Vec<Evaluated> = workers.install(|| {
        kept.par_iter()
            .map(|r| {
                let (src, dst) = (sample_dir(r), out_dir(r));
                let flow = dst.join(commands::FLOW_FILE);
                let rec = commands::cmd_recon(&src, Some(&flow), cfg, &dst);
                let rs = StageStatus::from_result(&r.sample_id, "recon", &rec);
                let flow_epe = commands::cmd_eval(
                    &flow,
                    &src.join(synth::FLOW_FILE),
                    EvalKind::Flow,
                    Some(&src.join(synth::VALID_FILE)),
                    false,
                    &dst.join("flow_eval"),
                )
                .ok()
                .and_then(|e| match e {
                    EvalOutput::Flow(epe) => Some(epe),
                    EvalOutput::Depth(_) => None,
                });
                if rec.is_err() {
                    let es = StageStatus::new(&r.sample_id, "eval", "skipped", String::new());
                    return (rs, es, None, flow_epe);
                }
                let ev = commands::cmd_eval(
                    &dst.join(commands::DEPTH_FILE),
                    &src.join(synth::DEPTH_TARGET_FILE),
                    EvalKind::Depth,
                    None,
                    true,
                    &dst,
                )
                .map(|e| match e {
                    EvalOutput::Depth(m) => m,
                    EvalOutput::Flow(_) => unreachable!("depth evaluation"),
                });
                let es = StageStatus::from_result(&r.sample_id, "eval", &ev);
                (rs, es, ev.ok(), flow_epe)
            })
            .collect()
    });
    for (r, (rs, es, dm, epe)) in kept.iter().zip(evaluated) {
        if rs.status == "ok" {
            report.reconstructed.push(r.sample_id.clone());
        }
        report.statuses.push(rs);
        report.statuses.push(es);
        if let Some(m) = dm {
            report.depth_metrics.push((r.sample_id.clone(), m));
        }
        if let Some(e) = epe {
            report.flow_epe.push((r.sample_id.clone(), e));
        }
    }
    log::info!(
        "stage=pipeline-recon wall_ms={} kept={} reconstructed={}",
        start.elapsed().as_millis(),
        kept.len(),
        report.reconstructed.len()
    );

    write_csv(
        &out.join(STATUS_FILE),
        &["sample_id", "stage", "status", "message"],
        &report
            .statuses
            .iter()
            .map(|s| {
                vec![
                    s.sample_id.clone(),
                    s.stage.to_string(),
                    s.status.clone(),
                    s.message.clone(),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    let mut depth_header = vec!["sample_id"];
    depth_header.extend(DepthMetrics::CSV_HEADER.split(','));
    write_csv(
        &out.join(DEPTH_METRICS_FILE),
        &depth_header,
        &report
            .depth_metrics
            .iter()
            .map(|(id, m)| {
                let mut row = vec![id.clone()];
                row.extend(m.csv_row().split(',').map(str::to_string));
                row
            })
            .collect::<Vec<_>>(),
    )?;
    write_csv(
        &out.join(FLOW_METRICS_FILE),
        &["sample_id", "epe"],
        &report
            .flow_epe
            .iter()
            .map(|(id, e)| vec![id.clone(), e.to_string()])
            .collect::<Vec<_>>(),
    )?;
    Ok(report)
}
