//! `mvs` — reconstruct depth maps and point clouds from calibrated images,
//! evaluate them against ground truth, and generate synthetic test scenes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use mvs_core::config::RunConfig;
use mvs_core::fusion;
use mvs_core::pipeline;
use mvs_core::prior;
use mvs_core::scene::{self, synth, SceneError};

#[derive(Parser)]
#[command(name = "mvs", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct AblationArgs {
    /// Disable texture weighting (TW).
    #[arg(long)]
    no_tw: bool,
    /// Disable coarse superpixel hypotheses (CS).
    #[arg(long)]
    no_cs: bool,
    /// Disable fine superpixel hypotheses (FS).
    #[arg(long)]
    no_fs: bool,
    /// Disable depth refinement (DR).
    #[arg(long)]
    no_dr: bool,
}

impl AblationArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.no_tw {
            cfg.patchmatch.enable_texture_weighting = false;
        }
        if self.no_cs {
            cfg.prior.enable_coarse = false;
        }
        if self.no_fs {
            cfg.prior.enable_fine = false;
        }
        if self.no_dr {
            cfg.refine.enable = false;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a scene directory.
    Reconstruct {
        /// Scene directory (cameras.txt, scene.toml, images/).
        scene: PathBuf,
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: config output_dir, else "<scene>/out").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[command(flatten)]
        ablation: AblationArgs,
        /// "all" runs the full configuration plus the four single-toggle
        /// ablations and writes a comparison table.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Evaluate reconstruction artifacts against a scene's ground truth.
    Eval {
        /// Output directory of a previous reconstruct run.
        output: PathBuf,
        /// Scene directory holding gt/ (as written by `mvs synth`).
        scene: PathBuf,
        /// Distance thresholds in scene units (default: 0.5%, 1%, 2%, 5% of
        /// the scene size).
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
    },
    /// Render a synthetic calibrated scene with exact ground truth.
    Synth {
        /// Scene spec TOML.
        spec: PathBuf,
        /// Target directory (default: spec file name without extension).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write preview PNG renders only, no scene files.
        #[arg(long)]
        preview: bool,
    },
}

enum AppError {
    /// Bad invocation or input spec: exit 2.
    Usage(String),
    /// Pipeline failure: exit 1.
    Failure(anyhow::Error),
}

impl From<anyhow::Error> for AppError {
    fn from(e: anyhow::Error) -> Self {
        AppError::Failure(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Failure(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Reconstruct {
            scene,
            config,
            out,
            seed,
            jobs,
            ablation,
            ablate,
        } => cmd_reconstruct(&scene, config.as_deref(), out, seed, jobs, &ablation, ablate),
        Command::Eval {
            output,
            scene,
            taus,
        } => cmd_eval(&output, &scene, &taus),
        Command::Synth { spec, out, preview } => cmd_synth(&spec, out, preview),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, AppError> {
    match path {
        Some(p) => RunConfig::load(p)
            .map_err(|e| AppError::Usage(format!("config {}: {e}", p.display()))),
        None => Ok(RunConfig::default()),
    }
}

fn default_taus(scene_size: f64) -> Vec<f64> {
    [0.005, 0.01, 0.02, 0.05]
        .iter()
        .map(|f| f * scene_size)
        .collect()
}

fn cmd_reconstruct(
    scene_dir: &Path,
    config: Option<&Path>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    jobs: usize,
    ablation: &AblationArgs,
    ablate: Option<String>,
) -> Result<(), AppError> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    ablation.apply(&mut cfg);
    let out_dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| scene_dir.join("out"));
    let scene = scene::load_scene(scene_dir)
        .with_context(|| format!("loading scene {}", scene_dir.display()))?;

    match ablate.as_deref() {
        None => {
            let output = pipeline::reconstruct(&scene, &cfg, jobs)
                .map_err(|e| AppError::Failure(anyhow!(e)))?;
            pipeline::write_artifacts(&out_dir, &scene_dir.to_string_lossy(), &cfg, jobs, &output)
                .context("writing artifacts")?;
            println!(
                "reconstructed {} views, fused {} points -> {}",
                scene.views.len(),
                output.cloud.len(),
                out_dir.display()
            );
            Ok(())
        }
        Some("all") => {
            let gt = scene::load_ground_truth(scene_dir, &view_ids(&scene))
                .context("loading ground truth")?;
            let gt_cloud: Option<Vec<[f64; 3]>> = gt
                .cloud
                .as_ref()
                .map(|c| c.iter().map(|p| p.position).collect());
            let tau = 0.01 * scene.scene_size;
            let mut table = String::from("variant\ttau\taccuracy\tcompleteness\tf1\n");
            for (name, variant_cfg) in pipeline::ablation_variants(&cfg) {
                let output = pipeline::reconstruct(&scene, &variant_cfg, jobs)
                    .map_err(|e| AppError::Failure(anyhow!(e)))?;
                let variant_dir = out_dir.join(name);
                pipeline::write_artifacts(
                    &variant_dir,
                    &scene_dir.to_string_lossy(),
                    &variant_cfg,
                    jobs,
                    &output,
                )
                .context("writing artifacts")?;
                if let Some(gt_cloud) = &gt_cloud {
                    let model: Vec<[f64; 3]> =
                        output.cloud.iter().map(|p| p.position).collect();
                    let row = match fusion::evaluate(&model, gt_cloud, &[tau]) {
                        Ok(report) => report.rows[0],
                        Err(_) => fusion::EvalRow {
                            tau,
                            accuracy: 0.0,
                            completeness: 0.0,
                            f1: 0.0,
                        },
                    };
                    table.push_str(&format!(
                        "{name}\t{tau}\t{:.4}\t{:.4}\t{:.4}\n",
                        row.accuracy, row.completeness, row.f1
                    ));
                } else {
                    table.push_str(&format!("{name}\t{tau}\t-\t-\t-\n"));
                }
            }
            std::fs::create_dir_all(&out_dir).context("creating output dir")?;
            std::fs::write(out_dir.join("ablation.tsv"), &table)
                .context("writing ablation table")?;
            print!("{table}");
            Ok(())
        }
        Some(other) => Err(AppError::Usage(format!(
            "--ablate takes \"all\", got {other:?}"
        ))),
    }
}

fn view_ids(scene: &scene::SceneBundle) -> Vec<u32> {
    scene.views.iter().map(|v| v.view_id).collect()
}

fn cmd_eval(output: &Path, scene_dir: &Path, taus: &[f64]) -> Result<(), AppError> {
    let scene = scene::load_scene(scene_dir)
        .with_context(|| format!("loading scene {}", scene_dir.display()))?;
    let ids = view_ids(&scene);
    let gt = scene::load_ground_truth(scene_dir, &ids).context("loading ground truth")?;
    let (maps, tex_raw) = pipeline::read_artifacts(output, &ids).map_err(|e| match e {
        SceneError::MissingFile(p) => {
            AppError::Usage(format!("missing artifact: {}", p.display()))
        }
        other => AppError::Failure(anyhow!(other)),
    })?;
    let fused = scene::ply::read_ply(&output.join("fused.ply")).map_err(|e| match e {
        SceneError::Io(_) => AppError::Usage(format!(
            "missing artifact: {}",
            output.join("fused.ply").display()
        )),
        other => AppError::Failure(anyhow!(other)),
    })?;

    let taus = if taus.is_empty() {
        default_taus(scene.scene_size)
    } else {
        taus.to_vec()
    };
    let gt_cloud = gt
        .cloud
        .as_ref()
        .ok_or_else(|| AppError::Usage("scene has no gt/cloud.ply".into()))?;
    let model: Vec<[f64; 3]> = fused.iter().map(|p| p.position).collect();
    let gt_pts: Vec<[f64; 3]> = gt_cloud.iter().map(|p| p.position).collect();
    let report = fusion::evaluate(&model, &gt_pts, &taus)
        .map_err(|e| AppError::Failure(anyhow!(e)))?;

    // per-pixel depth errors where ground-truth maps exist
    let mut tex_maps = BTreeMap::new();
    for (id, (w, h, data)) in tex_raw {
        tex_maps.insert(id, prior_from_raw(w, h, data));
    }
    let mut triples = Vec::new();
    for &id in &ids {
        if let (Some(est), Some(gt_map), Some(tex)) =
            (maps.get(&id), gt.depth.get(&id), tex_maps.get(&id))
        {
            triples.push((est, gt_map, tex));
        }
    }
    let depth_report = if triples.is_empty() {
        None
    } else {
        let thresholds: Vec<f64> = [0.001, 0.0025, 0.005, 0.01, 0.02, 0.05]
            .iter()
            .map(|f| f * scene.scene_size)
            .collect();
        let cutoffs = [0.6, 0.7, 0.8, 0.9, 1.01];
        Some(
            fusion::depth_error_report(&triples, &thresholds, &cutoffs)
                .map_err(|e| AppError::Failure(anyhow!(e)))?,
        )
    };

    let eval_dir = output.join("eval");
    pipeline::write_eval_reports(&eval_dir, &report, depth_report.as_ref())
        .context("writing eval reports")?;
    for &id in &ids {
        if let Some(map) = maps.get(&id) {
            pipeline::depth_to_png(
                map,
                scene.depth_range,
                &eval_dir.join(format!("depth_{id}.png")),
            )
            .context("depth png")?;
        }
        if let (Some(est), Some(gt_map)) = (maps.get(&id), gt.depth.get(&id)) {
            pipeline::error_to_png(
                est,
                gt_map,
                0.02 * scene.scene_size,
                &eval_dir.join(format!("error_{id}.png")),
            )
            .context("error png")?;
        }
    }
    for row in &report.rows {
        println!(
            "tau {:.5}: accuracy {:.2}% completeness {:.2}% f1 {:.2}%",
            row.tau, row.accuracy, row.completeness, row.f1
        );
    }
    println!("reports -> {}", eval_dir.display());
    Ok(())
}

/// Rebuilds a textureness map from raw PFM data.
fn prior_from_raw(w: usize, h: usize, data: Vec<f32>) -> prior::TexturenessMap {
    prior::TexturenessMap::from_parts(w, h, data)
}

fn cmd_synth(spec_path: &Path, out: Option<PathBuf>, preview: bool) -> Result<(), AppError> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| AppError::Usage(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: synth::SyntheticSpec = toml::from_str(&text)
        .map_err(|e| AppError::Usage(format!("bad scene spec: {e}")))?;
    let (scene, gt) = synth::generate_synthetic_scene(&spec).map_err(|e| match e {
        SceneError::MalformedScene(msg) => AppError::Usage(msg),
        other => AppError::Failure(anyhow!(other)),
    })?;
    let out_dir = out.unwrap_or_else(|| {
        spec_path
            .with_extension("")
            .file_name()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("scene"))
    });
    if preview {
        std::fs::create_dir_all(&out_dir).context("creating preview dir")?;
        for view in &scene.views {
            scene::save_view_png(view, &out_dir.join(format!("preview_{}.png", view.view_id)))
                .map_err(|e| AppError::Failure(anyhow!(e)))?;
        }
        println!("previews -> {}", out_dir.display());
        return Ok(());
    }
    scene::save_scene(&scene, &out_dir).context("writing scene")?;
    scene::save_ground_truth(&gt, &out_dir).context("writing ground truth")?;
    println!(
        "scene with {} views -> {}",
        scene.views.len(),
        out_dir.display()
    );
    Ok(())
}
