//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! Every knob has a default, so an empty file is a valid full configuration;
//! the ablation toggles (`[patchmatch] enable_texture_weighting`,
//! `[prior] enable_fine/enable_coarse`, `[refine] enable`) live in their
//! stage sections and are echoed into `run.json` on every reconstruction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::photo::MatchWindow;
use crate::prior::{NeighborWeighting, PriorStageConfig, RansacConfig};
use crate::refine::SpeckleConfig;
use crate::views::SourcePriors;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotoSection {
    pub half_size: usize,
    pub sigma_spatial: f64,
    pub sigma_color: f64,
    pub sigma_rho: f64,
    pub psi_max: f64,
}

impl Default for PhotoSection {
    fn default() -> Self {
        Self {
            half_size: 5,
            sigma_spatial: 3.0,
            sigma_color: 0.12,
            sigma_rho: 0.6,
            psi_max: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewsSection {
    pub gamma: f64,
    pub subset_size: usize,
    pub parallax_peak_deg: f64,
    pub parallax_sigma_deg: f64,
    pub u_anchor_rho: f64,
}

impl Default for ViewsSection {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            subset_size: 4,
            parallax_peak_deg: 15.0,
            parallax_sigma_deg: 10.0,
            u_anchor_rho: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchmatchSection {
    pub iterations: usize,
    pub lambda_geom: f64,
    pub perturb_depth_frac: f64,
    pub perturb_normal_deg: f64,
    /// Table-style "TW" toggle.
    pub enable_texture_weighting: bool,
}

impl Default for PatchmatchSection {
    fn default() -> Self {
        Self {
            iterations: 5,
            lambda_geom: 0.2,
            perturb_depth_frac: 0.025,
            perturb_normal_deg: 5.0,
            enable_texture_weighting: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Threshold given in scene units.
    Absolute,
    /// Threshold given as a fraction of the scene size.
    SceneFraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub fine_divisor: usize,
    pub coarse_divisor: usize,
    pub ransac_threshold: f64,
    pub ransac_threshold_mode: ThresholdMode,
    pub ransac_iters: usize,
    pub hist_bins: usize,
    pub neighbor_weighting: NeighborWeighting,
    /// "FS" toggle: fine-level superpixel hypotheses.
    pub enable_fine: bool,
    /// "CS" toggle: coarse-level superpixel hypotheses.
    pub enable_coarse: bool,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            fine_divisor: 20,
            coarse_divisor: 30,
            ransac_threshold: 0.10,
            ransac_threshold_mode: ThresholdMode::Absolute,
            ransac_iters: 1000,
            hist_bins: 8,
            neighbor_weighting: NeighborWeighting::Similarity,
            enable_fine: true,
            enable_coarse: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    /// "DR" toggle: speckle filter + median fill after estimation.
    pub enable: bool,
    pub window_radius: usize,
    pub k_min: usize,
    pub max_area_fraction: f64,
    pub continuity_fraction: f64,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            enable: true,
            window_radius: 7,
            k_min: 5,
            max_area_fraction: 1.0 / 5000.0,
            continuity_fraction: 0.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub max_reproj_error: f64,
    pub max_normal_error_deg: f64,
    pub max_depth_error: f64,
    pub min_consistent_views: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            max_reproj_error: 1.0,
            max_normal_error_deg: 20.0,
            max_depth_error: 0.01,
            min_consistent_views: 3,
        }
    }
}

/// The four ablation toggles, in one place for reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub texture_weighting: bool,
    pub coarse_superpixels: bool,
    pub fine_superpixels: bool,
    pub depth_refinement: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub photo: PhotoSection,
    pub views: ViewsSection,
    pub patchmatch: PatchmatchSection,
    pub prior: PriorSection,
    pub refine: RefineSection,
    pub fusion: FusionSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.match_window()
            .validate()
            .map_err(ConfigError::Invalid)?;
        let checks: [(&str, bool); 12] = [
            ("patchmatch.iterations >= 1", self.patchmatch.iterations >= 1),
            ("patchmatch.lambda_geom >= 0", self.patchmatch.lambda_geom >= 0.0),
            (
                "patchmatch.perturb_depth_frac in (0, 1)",
                self.patchmatch.perturb_depth_frac > 0.0 && self.patchmatch.perturb_depth_frac < 1.0,
            ),
            ("views.gamma in (0, 1)", self.views.gamma > 0.0 && self.views.gamma < 1.0),
            ("views.subset_size >= 1", self.views.subset_size >= 1),
            (
                "views.u_anchor_rho in [-1, 1]",
                (-1.0..=1.0).contains(&self.views.u_anchor_rho),
            ),
            ("prior.fine_divisor >= 1", self.prior.fine_divisor >= 1),
            ("prior.coarse_divisor >= 1", self.prior.coarse_divisor >= 1),
            ("prior.ransac_threshold > 0", self.prior.ransac_threshold > 0.0),
            (
                "refine fractions in (0, 1)",
                self.refine.max_area_fraction > 0.0
                    && self.refine.max_area_fraction < 1.0
                    && self.refine.continuity_fraction > 0.0
                    && self.refine.continuity_fraction < 1.0,
            ),
            (
                "fusion.min_consistent_views >= 2",
                self.fusion.min_consistent_views >= 2,
            ),
            (
                "fusion errors positive",
                self.fusion.max_reproj_error > 0.0
                    && self.fusion.max_normal_error_deg > 0.0
                    && self.fusion.max_depth_error > 0.0,
            ),
        ];
        for (what, ok) in checks {
            if !ok {
                return Err(ConfigError::Invalid(what.to_string()));
            }
        }
        Ok(())
    }

    pub fn ablation(&self) -> AblationFlags {
        AblationFlags {
            texture_weighting: self.patchmatch.enable_texture_weighting,
            coarse_superpixels: self.prior.enable_coarse,
            fine_superpixels: self.prior.enable_fine,
            depth_refinement: self.refine.enable,
        }
    }

    /// True when either superpixel level contributes hypotheses.
    pub fn planar_priors_enabled(&self) -> bool {
        self.prior.enable_fine || self.prior.enable_coarse
    }

    pub fn match_window(&self) -> MatchWindow {
        MatchWindow {
            half_size: self.photo.half_size,
            sigma_spatial: self.photo.sigma_spatial,
            sigma_color: self.photo.sigma_color,
            sigma_rho: self.photo.sigma_rho,
        }
    }

    pub fn speckle(&self) -> SpeckleConfig {
        SpeckleConfig {
            max_area_fraction: self.refine.max_area_fraction,
            continuity_fraction: self.refine.continuity_fraction,
        }
    }

    pub fn source_priors(&self) -> SourcePriors {
        SourcePriors {
            parallax_peak_deg: self.views.parallax_peak_deg,
            parallax_sigma_deg: self.views.parallax_sigma_deg,
        }
    }

    /// Resolves the prior stage settings against a concrete scene scale.
    pub fn prior_stage(&self, scene_size: f64) -> PriorStageConfig {
        let threshold = match self.prior.ransac_threshold_mode {
            ThresholdMode::Absolute => self.prior.ransac_threshold,
            ThresholdMode::SceneFraction => self.prior.ransac_threshold * scene_size,
        };
        PriorStageConfig {
            fine_divisor: self.prior.fine_divisor,
            coarse_divisor: self.prior.coarse_divisor,
            hist_bins: self.prior.hist_bins,
            ransac: RansacConfig {
                threshold,
                max_iters: self.prior.ransac_iters,
                confidence: 0.99,
            },
            weighting: self.prior.neighbor_weighting,
            enable_fine: self.prior.enable_fine,
            enable_coarse: self.prior.enable_coarse,
            speckle: self.speckle(),
        }
    }
}
