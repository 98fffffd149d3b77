use mvs_core::config::RunConfig;
use mvs_core::fusion;
use mvs_core::pipeline;
use mvs_core::scene::synth::{self, CameraRing, FlatPatch, PlaneSpec, SyntheticSpec, Texture};

// mirror of the acceptance wall scene
fn wall_spec() -> SyntheticSpec {
    SyntheticSpec {
        image_width: 320, image_height: 240, fov_deg: 60.0,
        noise_sigma: 0.002, seed: 1, depth_min: 2.0, depth_max: 10.0,
        background: [0.0; 3], gt_cloud_step: 2, supersample: 3,
        cameras: CameraRing { count: 4, ring_center: [0.0, 0.0, 0.0], radius: 0.5, look_at: [0.0, 0.0, 5.0], up_hint: [0.0, -1.0, 0.0] },
        planes: vec![
            PlaneSpec {
                center: [0.0, 0.0, 5.0], normal: [0.0, 0.0, -1.0], extent_u: 4.0, extent_v: 3.2,
                texture: Texture::Checkerboard { period: 0.2, color_a: [0.9, 0.88, 0.86], color_b: [0.14, 0.12, 0.12] },
                tex_rotation_deg: 33.0,
                flat_center: Some(FlatPatch { half_u_frac: 0.51, half_v_frac: 0.478, color: [0.55, 0.55, 0.55], micro_amp: 0.0017, micro_scale: 0.1 }),
            },
            PlaneSpec {
                center: [0.0, 1.8, 4.0], normal: [0.0, -1.0, 0.0], extent_u: 6.0, extent_v: 6.0,
                texture: Texture::Checkerboard { period: 0.16, color_a: [0.72, 0.55, 0.35], color_b: [0.3, 0.22, 0.15] },
                tex_rotation_deg: 14.0, flat_center: None,
            },
        ],
    }
}

fn main() {
    let (scene, gt) = synth::generate_synthetic_scene(&wall_spec()).unwrap();
    let gt_pts: Vec<[f64;3]> = gt.cloud.as_ref().unwrap().iter().map(|p| p.position).collect();
    let tau = 0.01 * scene.scene_size;
    for seed in [61u64, 62] {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        for (name, c) in pipeline::ablation_variants(&cfg) {
            let out = pipeline::reconstruct(&scene, &c, 0).unwrap();
            let model: Vec<[f64;3]> = out.cloud.iter().map(|p| p.position).collect();
            let row = fusion::evaluate(&model, &gt_pts, &[tau]).map(|r| r.rows[0]).unwrap();
            println!("seed={seed} {name}: acc {:.2}% comp {:.2}% f1 {:.3}%", row.accuracy, row.completeness, row.f1);
        }
    }
}
