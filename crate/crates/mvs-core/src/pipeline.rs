//! End-to-end reconstruction driver and artifact I/O.
//!
//! Two outer rounds per scene: the first estimates every view from
//! photometry alone, the second re-runs the sweeps with the geometric
//! consistency term fed by the first round's neighbor maps. Maps are then
//! speckle-filtered and gap-filled, and fused into a point cloud.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::RunConfig;
use crate::depthmap::DepthNormalMap;
use crate::fusion::{self, FusionOutcome, FusionParams};
use crate::patchmatch::{PatchmatchError, ViewEstimator};
use crate::prior::TexturenessMap;
use crate::refine;
use crate::scene::ply::CloudPoint;
use crate::scene::{pfm, ply, SceneBundle, SceneError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Patchmatch(#[from] PatchmatchError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("scene has no views")]
    EmptyScene,
}

/// Everything a reconstruction run produces in memory.
pub struct ReconstructionOutput {
    /// Final per-view depth/normal maps (refined when enabled).
    pub maps: BTreeMap<u32, DepthNormalMap>,
    pub textureness: BTreeMap<u32, TexturenessMap>,
    pub cloud: Vec<CloudPoint>,
    pub consumed_per_view: BTreeMap<u32, usize>,
    /// Wall-clock milliseconds per stage.
    pub timings_ms: BTreeMap<String, f64>,
}

fn fusion_params(cfg: &RunConfig) -> FusionParams {
    FusionParams {
        max_reproj_error: cfg.fusion.max_reproj_error,
        max_normal_error_deg: cfg.fusion.max_normal_error_deg,
        max_depth_error: cfg.fusion.max_depth_error,
        min_consistent_views: cfg.fusion.min_consistent_views,
    }
}

/// Runs the full pipeline. `jobs = 0` uses all cores; results are
/// bit-identical for a fixed seed regardless of `jobs`.
pub fn reconstruct(
    scene: &SceneBundle,
    cfg: &RunConfig,
    jobs: usize,
) -> Result<ReconstructionOutput, PipelineError> {
    cfg.validate()?;
    if scene.views.is_empty() {
        return Err(PipelineError::EmptyScene);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    pool.install(|| reconstruct_inner(scene, cfg))
}

fn reconstruct_inner(
    scene: &SceneBundle,
    cfg: &RunConfig,
) -> Result<ReconstructionOutput, PipelineError> {
    let mut timings = BTreeMap::new();

    let t0 = Instant::now();
    let estimators: Vec<ViewEstimator> = scene
        .views
        .iter()
        .map(|ref_view| {
            let sources: Vec<_> = scene
                .views
                .iter()
                .filter(|v| v.view_id != ref_view.view_id)
                .collect();
            ViewEstimator::new(ref_view, sources, cfg, scene.depth_range, scene.scene_size)
        })
        .collect::<Result<_, _>>()?;
    timings.insert("setup".into(), t0.elapsed().as_secs_f64() * 1000.0);

    // round 1: photometric only
    let t1 = Instant::now();
    let empty = BTreeMap::new();
    let round1: BTreeMap<u32, DepthNormalMap> = estimators
        .par_iter()
        .zip(scene.views.par_iter())
        .map(|(est, view)| (view.view_id, est.run(0, None, &empty).0))
        .collect();
    timings.insert("round1_photometric".into(), t1.elapsed().as_secs_f64() * 1000.0);

    // round 2: geometric consistency against the round-1 neighbor maps
    let t2 = Instant::now();
    let round2: BTreeMap<u32, DepthNormalMap> = estimators
        .par_iter()
        .zip(scene.views.par_iter())
        .map(|(est, view)| {
            let init = &round1[&view.view_id];
            (view.view_id, est.run(1, Some(init), &round1).0)
        })
        .collect();
    timings.insert("round2_geometric".into(), t2.elapsed().as_secs_f64() * 1000.0);

    // refinement
    let t3 = Instant::now();
    let maps: BTreeMap<u32, DepthNormalMap> = if cfg.refine.enable {
        let win = cfg.match_window();
        let speckle = cfg.speckle();
        scene
            .views
            .par_iter()
            .map(|view| {
                let filtered =
                    refine::speckle_filter(&round2[&view.view_id], &speckle, scene.scene_size);
                let filled = refine::median_fill(
                    &filtered,
                    view,
                    &win,
                    cfg.refine.window_radius,
                    cfg.refine.k_min,
                );
                (view.view_id, filled)
            })
            .collect()
    } else {
        round2
    };
    timings.insert("refinement".into(), t3.elapsed().as_secs_f64() * 1000.0);

    // fusion
    let t4 = Instant::now();
    let view_refs: Vec<_> = scene.views.iter().collect();
    let FusionOutcome {
        points,
        consumed_per_view,
    } = fusion::fuse(&view_refs, &maps, &fusion_params(cfg));
    timings.insert("fusion".into(), t4.elapsed().as_secs_f64() * 1000.0);

    let textureness = estimators
        .iter()
        .zip(&scene.views)
        .map(|(est, view)| (view.view_id, est.textureness().clone()))
        .collect();

    Ok(ReconstructionOutput {
        maps,
        textureness,
        cloud: points,
        consumed_per_view,
        timings_ms: timings,
    })
}

/// The named ablation variants: the full configuration followed by each
/// single-toggle removal.
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut variants = vec![("full", base.clone())];
    let mut no_tw = base.clone();
    no_tw.patchmatch.enable_texture_weighting = false;
    variants.push(("no-tw", no_tw));
    let mut no_cs = base.clone();
    no_cs.prior.enable_coarse = false;
    variants.push(("no-cs", no_cs));
    let mut no_fs = base.clone();
    no_fs.prior.enable_fine = false;
    variants.push(("no-fs", no_fs));
    let mut no_dr = base.clone();
    no_dr.refine.enable = false;
    variants.push(("no-dr", no_dr));
    variants
}

/// `run.json` contents: full config echo plus run facts.
#[derive(Serialize)]
pub struct RunRecord<'a> {
    pub scene_dir: &'a str,
    pub seed: u64,
    pub jobs: usize,
    pub ablation: crate::config::AblationFlags,
    pub config: &'a RunConfig,
    pub timings_ms: &'a BTreeMap<String, f64>,
    pub fused_points: usize,
    pub consumed_per_view: &'a BTreeMap<u32, usize>,
}

/// Writes `depth_<id>.pfm`, `normal_<id>.pfm`, `textureness_<id>.pfm`,
/// `fused.ply` and `run.json` into `out_dir`.
pub fn write_artifacts(
    out_dir: &Path,
    scene_dir: &str,
    cfg: &RunConfig,
    jobs: usize,
    output: &ReconstructionOutput,
) -> Result<(), SceneError> {
    std::fs::create_dir_all(out_dir)?;
    for (id, map) in &output.maps {
        pfm::write_depth_map(
            map,
            &out_dir.join(format!("depth_{id}.pfm")),
            &out_dir.join(format!("normal_{id}.pfm")),
        )?;
    }
    for (id, tex) in &output.textureness {
        pfm::write_pfm(
            &out_dir.join(format!("textureness_{id}.pfm")),
            tex.width(),
            tex.height(),
            1,
            tex.values(),
        )?;
    }
    ply::write_ply(&out_dir.join("fused.ply"), &output.cloud)?;
    let record = RunRecord {
        scene_dir,
        seed: cfg.seed,
        jobs,
        ablation: cfg.ablation(),
        config: cfg,
        timings_ms: &output.timings_ms,
        fused_points: output.cloud.len(),
        consumed_per_view: &output.consumed_per_view,
    };
    std::fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&record).expect("record serializes"),
    )?;
    Ok(())
}

/// Reads the per-view maps back from a reconstruction output directory.
pub fn read_artifacts(
    out_dir: &Path,
    view_ids: &[u32],
) -> Result<(BTreeMap<u32, DepthNormalMap>, BTreeMap<u32, (usize, usize, Vec<f32>)>), SceneError> {
    let mut maps = BTreeMap::new();
    let mut tex = BTreeMap::new();
    for &id in view_ids {
        let dp = out_dir.join(format!("depth_{id}.pfm"));
        let np = out_dir.join(format!("normal_{id}.pfm"));
        if !dp.is_file() {
            return Err(SceneError::MissingFile(dp));
        }
        maps.insert(id, pfm::read_depth_map(&dp, &np)?);
        let tp = out_dir.join(format!("textureness_{id}.pfm"));
        if tp.is_file() {
            tex.insert(id, pfm::read_scalar_map(&tp)?);
        }
    }
    Ok((maps, tex))
}

/// Writes the accuracy/completeness/F1 table as TSV
/// (`tau accuracy completeness f1`) and JSON.
pub fn write_eval_reports(
    dir: &Path,
    report: &fusion::EvalReport,
    depth_report: Option<&fusion::DepthErrorReport>,
) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir)?;
    let mut tsv = String::from("tau\taccuracy\tcompleteness\tf1\n");
    for row in &report.rows {
        tsv.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\n",
            row.tau, row.accuracy, row.completeness, row.f1
        ));
    }
    std::fs::write(dir.join("report.tsv"), tsv)?;
    #[derive(Serialize)]
    struct FullReport<'a> {
        cloud: &'a fusion::EvalReport,
        depth: Option<&'a fusion::DepthErrorReport>,
    }
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&FullReport {
            cloud: report,
            depth: depth_report,
        })
        .expect("report serializes"),
    )?;
    if let Some(dr) = depth_report {
        let mut tsv = String::from("threshold\tpct_below\n");
        for (t, p) in dr.thresholds.iter().zip(&dr.cdf) {
            tsv.push_str(&format!("{t}\t{p:.4}\n"));
        }
        std::fs::write(dir.join("depth_error_cdf.tsv"), tsv)?;
        let mut tsv = String::from("cutoff\tthreshold\tpct_below\n");
        for (c, row) in dr.textureness_cutoffs.iter().zip(&dr.binned) {
            for (t, p) in dr.thresholds.iter().zip(row) {
                tsv.push_str(&format!("{c}\t{t}\t{p:.4}\n"));
            }
        }
        std::fs::write(dir.join("textureness_error.tsv"), tsv)?;
    }
    Ok(())
}

/// Five-stop color ramp for visualizations (dark blue through red).
fn colormap(t: f64) -> [u8; 3] {
    let stops: [(f64, [f64; 3]); 5] = [
        (0.0, [15.0, 25.0, 90.0]),
        (0.25, [40.0, 160.0, 220.0]),
        (0.5, [60.0, 200.0, 90.0]),
        (0.75, [245.0, 220.0, 50.0]),
        (1.0, [220.0, 40.0, 30.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let mut lo = stops[0];
    for pair in stops.windows(2) {
        if t >= pair[0].0 && t <= pair[1].0 {
            lo = pair[0];
            let hi = pair[1];
            let f = if hi.0 > lo.0 { (t - lo.0) / (hi.0 - lo.0) } else { 0.0 };
            return [
                (lo.1[0] + (hi.1[0] - lo.1[0]) * f) as u8,
                (lo.1[1] + (hi.1[1] - lo.1[1]) * f) as u8,
                (lo.1[2] + (hi.1[2] - lo.1[2]) * f) as u8,
            ];
        }
    }
    [
        lo.1[0] as u8,
        lo.1[1] as u8,
        lo.1[2] as u8,
    ]
}

/// Colormapped depth image; invalid pixels render black.
pub fn depth_to_png(
    map: &DepthNormalMap,
    depth_range: (f64, f64),
    path: &Path,
) -> Result<(), SceneError> {
    let mut img = image::RgbImage::new(map.width() as u32, map.height() as u32);
    let span = (depth_range.1 - depth_range.0).max(1e-12);
    for y in 0..map.height() {
        for x in 0..map.width() {
            let px = if map.is_valid(x, y) {
                colormap((map.depth_at(x, y) as f64 - depth_range.0) / span)
            } else {
                [0, 0, 0]
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Depth-error heatmap against ground truth; missing estimates render black.
pub fn error_to_png(
    est: &DepthNormalMap,
    gt: &DepthNormalMap,
    max_err: f64,
    path: &Path,
) -> Result<(), SceneError> {
    if est.width() != gt.width() || est.height() != gt.height() {
        return Err(SceneError::DimensionMismatch(format!(
            "error map: est {}x{} vs gt {}x{}",
            est.width(),
            est.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut img = image::RgbImage::new(est.width() as u32, est.height() as u32);
    for y in 0..est.height() {
        for x in 0..est.width() {
            let px = if gt.is_valid(x, y) && est.is_valid(x, y) {
                let err = (est.depth_at(x, y) - gt.depth_at(x, y)).abs() as f64;
                colormap(err / max_err)
            } else {
                [0, 0, 0]
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}
