//! Command-level smoke tests driving the `mvs` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn mvs() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvs"))
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

/// Small synthetic scene spec for fast end-to-end runs.
fn tiny_scene_spec(dir: &Path) -> PathBuf {
    let spec = r#"
image_width = 96
image_height = 72
fov_deg = 60.0
noise_sigma = 0.005
seed = 3
depth_min = 2.0
depth_max = 10.0

[cameras]
count = 3
ring_center = [0.0, 0.0, 0.0]
radius = 0.5
look_at = [0.0, 0.0, 5.0]

[[planes]]
center = [0.0, 0.0, 5.0]
normal = [0.0, 0.0, -1.0]
extent_u = 4.5
extent_v = 4.0

[planes.texture]
kind = "noise"
scale = 0.35
base = [0.5, 0.5, 0.5]
amp = 0.42
"#;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, spec).unwrap();
    path
}

fn fast_config(dir: &Path) -> PathBuf {
    let cfg = "[patchmatch]\niterations = 3\n[fusion]\nmin_consistent_views = 2\n";
    let path = dir.join("fast.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn synth_bundled_wall_spec_is_loadable() {
    let tmp = tempdir();
    let out = tmp.join("wall");
    let status = mvs()
        .arg("synth")
        .arg(workspace_root().join("scenes/wall.toml"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let scene = mvs_core::scene::load_scene(&out).unwrap();
    assert_eq!(scene.views.len(), 4);
    assert!(out.join("gt/cloud.ply").is_file());
    assert!(out.join("gt/depth_0.pfm").is_file());
}

#[test]
fn synth_preview_writes_pngs_only() {
    let tmp = tempdir();
    let spec = tiny_scene_spec(&tmp);
    let out = tmp.join("preview");
    let status = mvs()
        .arg("synth")
        .arg(&spec)
        .arg("--out")
        .arg(&out)
        .arg("--preview")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("preview_0.png").is_file());
    assert!(!out.join("cameras.txt").exists());
}

#[test]
fn synth_zero_cameras_is_usage_error() {
    let tmp = tempdir();
    let bad = tmp.join("bad.toml");
    let spec = std::fs::read_to_string(tiny_scene_spec(&tmp)).unwrap();
    std::fs::write(&bad, spec.replace("count = 3", "count = 0")).unwrap();
    let status = mvs().arg("synth").arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn reconstruct_writes_all_artifacts_and_honors_no_dr() {
    let tmp = tempdir();
    let spec = tiny_scene_spec(&tmp);
    let scene_dir = tmp.join("scene");
    assert!(mvs()
        .arg("synth")
        .arg(&spec)
        .arg("--out")
        .arg(&scene_dir)
        .status()
        .unwrap()
        .success());
    let cfg = fast_config(&tmp);
    let out = tmp.join("out");
    let status = mvs()
        .arg("reconstruct")
        .arg(&scene_dir)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--seed")
        .arg("9")
        .arg("--no-dr")
        .status()
        .unwrap();
    assert!(status.success());
    for f in [
        "depth_0.pfm",
        "depth_1.pfm",
        "depth_2.pfm",
        "normal_0.pfm",
        "textureness_0.pfm",
        "fused.ply",
        "run.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["ablation"]["depth_refinement"], false);
    assert_eq!(run["config"]["refine"]["enable"], false);
    assert_eq!(run["seed"], 9);
}

#[test]
fn eval_of_ground_truth_artifacts_scores_100() {
    let tmp = tempdir();
    let spec = tiny_scene_spec(&tmp);
    let scene_dir = tmp.join("scene");
    assert!(mvs()
        .arg("synth")
        .arg(&spec)
        .arg("--out")
        .arg(&scene_dir)
        .status()
        .unwrap()
        .success());
    // hand-build an output directory from the ground truth itself
    let scene = mvs_core::scene::load_scene(&scene_dir).unwrap();
    let ids: Vec<u32> = scene.views.iter().map(|v| v.view_id).collect();
    let gt = mvs_core::scene::load_ground_truth(&scene_dir, &ids).unwrap();
    let out = tmp.join("gt_as_output");
    std::fs::create_dir_all(&out).unwrap();
    for (id, map) in &gt.depth {
        mvs_core::scene::pfm::write_depth_map(
            map,
            &out.join(format!("depth_{id}.pfm")),
            &out.join(format!("normal_{id}.pfm")),
        )
        .unwrap();
        let view = scene.view_by_id(*id).unwrap();
        let tex = mvs_core::prior::compute_textureness(view);
        mvs_core::scene::pfm::write_pfm(
            &out.join(format!("textureness_{id}.pfm")),
            tex.width(),
            tex.height(),
            1,
            tex.values(),
        )
        .unwrap();
    }
    mvs_core::scene::ply::write_ply(&out.join("fused.ply"), gt.cloud.as_ref().unwrap()).unwrap();

    let status = mvs()
        .arg("eval")
        .arg(&out)
        .arg(&scene_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let tsv = std::fs::read_to_string(out.join("eval/report.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap(), "tau\taccuracy\tcompleteness\tf1");
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 4);
        for v in &cols[1..] {
            let x: f64 = v.parse().unwrap();
            assert!(
                x > 99.0,
                "ground truth as input should score ~100, got {line}"
            );
        }
    }
    assert!(out.join("eval/report.json").is_file());
    assert!(out.join("eval/depth_0.png").is_file());
    assert!(out.join("eval/error_0.png").is_file());
}

#[test]
fn eval_missing_artifacts_is_usage_error() {
    let tmp = tempdir();
    let spec = tiny_scene_spec(&tmp);
    let scene_dir = tmp.join("scene");
    assert!(mvs()
        .arg("synth")
        .arg(&spec)
        .arg("--out")
        .arg(&scene_dir)
        .status()
        .unwrap()
        .success());
    let empty = tmp.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let status = mvs().arg("eval").arg(&empty).arg(&scene_dir).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn changed_seed_changes_maps_but_stays_accurate() {
    let tmp = tempdir();
    let spec = tiny_scene_spec(&tmp);
    let scene_dir = tmp.join("scene");
    assert!(mvs()
        .arg("synth")
        .arg(&spec)
        .arg("--out")
        .arg(&scene_dir)
        .status()
        .unwrap()
        .success());
    let cfg = fast_config(&tmp);
    let mut accs = Vec::new();
    let mut first_bytes: Option<Vec<u8>> = None;
    for seed in [5u64, 6] {
        let out = tmp.join(format!("out{seed}"));
        assert!(mvs()
            .arg("reconstruct")
            .arg(&scene_dir)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .arg("--seed")
            .arg(seed.to_string())
            .status()
            .unwrap()
            .success());
        let bytes = std::fs::read(out.join("depth_0.pfm")).unwrap();
        if let Some(first) = &first_bytes {
            assert_ne!(first, &bytes, "different seeds should differ somewhere");
        } else {
            first_bytes = Some(bytes);
        }
        // accuracy at 2% of the depth range against ground truth
        let scene = mvs_core::scene::load_scene(&scene_dir).unwrap();
        let ids: Vec<u32> = scene.views.iter().map(|v| v.view_id).collect();
        let gt = mvs_core::scene::load_ground_truth(&scene_dir, &ids).unwrap();
        let (maps, _) = mvs_core::pipeline::read_artifacts(&out, &ids).unwrap();
        let range = scene.depth_range.1 - scene.depth_range.0;
        let (mut good, mut total) = (0usize, 0usize);
        for (id, gt_map) in &gt.depth {
            let est = &maps[id];
            for y in 0..est.height() {
                for x in 0..est.width() {
                    if !gt_map.is_valid(x, y) {
                        continue;
                    }
                    total += 1;
                    if est.is_valid(x, y)
                        && ((est.depth_at(x, y) - gt_map.depth_at(x, y)).abs() as f64)
                            <= 0.02 * range
                    {
                        good += 1;
                    }
                }
            }
        }
        accs.push(100.0 * good as f64 / total as f64);
    }
    for acc in &accs {
        assert!(*acc >= 75.0, "seed run accuracy {acc:.1}% too low: {accs:?}");
    }
    assert!(
        (accs[0] - accs[1]).abs() <= 15.0,
        "seed instability: {accs:?}"
    );
}

fn tempdir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "mvs-cli-test-{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
