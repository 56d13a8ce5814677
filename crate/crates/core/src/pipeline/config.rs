use std::path::Path;
use std::str::FromStr;

use crate::dataio::KeyValues;
use crate::error::{Result, SlamError};
use crate::fusion::FusionParams;
use crate::pose_graph::{MuMode, PgoParams};
use crate::registration::LoopRegistrationParams;
use crate::submap::DensityParams;
use crate::tracking::TrackerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Poses from frame-to-model tracking.
    Full,
    /// Poses from the sequence's odometry trajectory; tracking is bypassed.
    Backend,
}

impl FromStr for Mode {
    type Err = SlamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "backend" => Ok(Mode::Backend),
            other => Err(SlamError::InvalidInput(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopParams {
    pub enabled: bool,
    /// Loop candidates taken from the place-recognition query.
    pub top_k: usize,
    /// Apply the fitness and translation-spread prefilter.
    pub prefilter: bool,
    pub sigma_min: f64,
    pub f_min: f64,
    /// Minimum submap-id distance between a query and its candidates.
    pub min_loop_distance: usize,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            enabled: true,
            top_k: 1,
            prefilter: true,
            sigma_min: 0.15,
            f_min: 0.1,
            min_loop_distance: 2,
        }
    }
}

/// Synthetic loop edges with random constraints added next to the genuine
/// ones, for robustness experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierInjection {
    /// Injected edges per genuine loop edge, rounded up; 0 disables.
    pub ratio: f64,
    pub min_rotation_deg: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
}

impl Default for OutlierInjection {
    fn default() -> Self {
        Self {
            ratio: 0.0,
            min_rotation_deg: 20.0,
            max_rotation_deg: 180.0,
            max_translation: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub tracker: TrackerConfig,
    pub pgo: PgoParams,
    pub loops: LoopParams,
    pub fusion: FusionParams,
    pub registration: LoopRegistrationParams,
    pub density: DensityParams,
    /// Every n-th frame of a submap is mapped and fused.
    pub map_every: usize,
    /// Pixels sampled per mapped frame.
    pub mapping_samples: usize,
    /// Leading frames whose words fix the vocabulary's document frequencies.
    pub idf_training_frames: usize,
    pub outliers: OutlierInjection,
    pub seed: u64,
    /// F-score distance threshold, meters.
    pub tau: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Backend,
            tracker: TrackerConfig::default(),
            pgo: PgoParams::default(),
            loops: LoopParams::default(),
            fusion: FusionParams::default(),
            registration: LoopRegistrationParams::default(),
            density: DensityParams::default(),
            map_every: 5,
            mapping_samples: 4000,
            idf_training_frames: 50,
            outliers: OutlierInjection::default(),
            seed: 0,
            tau: crate::metrics::DEFAULT_TAU,
        }
    }
}

impl PipelineConfig {
    /// Settings for the synthetic loop sequences: the translation trigger is
    /// scaled to the 4 m camera path so that one loop spans eight submaps.
    pub fn synthetic_harness() -> Self {
        let mut c = Self::default();
        c.tracker.translation_trigger = 0.52;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.pgo.validate()?;
        if self.map_every == 0 || self.mapping_samples == 0 || self.loops.top_k == 0 {
            return Err(SlamError::InvalidInput("map_every, mapping_samples and top_k must be positive".into()));
        }
        if self.loops.min_loop_distance < 2 {
            return Err(SlamError::InvalidInput("loop edges must join non-adjacent submaps".into()));
        }
        let d = &self.density;
        if !(d.rho_min > 0.0 && d.rho_min <= d.rho_max && d.depth_gate > 0.0) {
            return Err(SlamError::InvalidInput("invalid point density bounds".into()));
        }
        let o = &self.outliers;
        if !(o.ratio >= 0.0 && o.min_rotation_deg <= o.max_rotation_deg && o.max_rotation_deg <= 180.0 && o.max_translation >= 0.0) {
            return Err(SlamError::InvalidInput("invalid outlier injection settings".into()));
        }
        if !(self.fusion.voxel_size > 0.0 && self.fusion.truncation > 0.0 && self.tau > 0.0) {
            return Err(SlamError::InvalidInput("voxel size, truncation and tau must be positive".into()));
        }
        Ok(())
    }

    /// Parses the flat key/value form. `preset = harness` starts from
    /// [`PipelineConfig::synthetic_harness`]; other keys override fields.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut c = match kv.take_str("preset").as_deref() {
            None | Some("default") => Self::default(),
            Some("harness") => Self::synthetic_harness(),
            Some(other) => return Err(SlamError::InvalidInput(format!("unknown preset `{other}`"))),
        };
        kv.take_into("mode", &mut c.mode)?;
        let t = &mut c.tracker;
        kv.take_into("translation_trigger", &mut t.translation_trigger)?;
        kv.take_into("rotation_trigger_deg", &mut t.rotation_trigger_deg)?;
        kv.take_into("tracker_max_corr_dist", &mut t.max_corr_dist)?;
        kv.take_into("tracker_iterations", &mut t.max_iterations)?;
        kv.take_into("huber_delta", &mut t.huber_delta)?;
        kv.take_into("tracking_samples", &mut t.samples)?;
        let p = &mut c.pgo;
        kv.take_into("lambda", &mut p.lambda)?;
        kv.take_into("mu_factor", &mut p.mu_factor)?;
        if let Some(m) = kv.take_str("mu_mode") {
            p.mu_mode = match m.as_str() {
                "per_edge" => MuMode::PerEdge,
                "global_mean" => MuMode::GlobalMean,
                other => return Err(SlamError::InvalidInput(format!("unknown mu_mode `{other}`"))),
            };
        }
        kv.take_into("epsilon", &mut p.epsilon)?;
        kv.take_into("l_min", &mut p.l_min)?;
        kv.take_into("lm_damping", &mut p.initial_damping)?;
        kv.take_into("pgo_iterations", &mut p.max_iterations)?;
        let l = &mut c.loops;
        kv.take_into("loop_closure", &mut l.enabled)?;
        kv.take_into("top_k", &mut l.top_k)?;
        kv.take_into("prefilter", &mut l.prefilter)?;
        kv.take_into("sigma_min", &mut l.sigma_min)?;
        kv.take_into("f_min", &mut l.f_min)?;
        kv.take_into("min_loop_distance", &mut l.min_loop_distance)?;
        kv.take_into("voxel_size", &mut c.fusion.voxel_size)?;
        kv.take_into("truncation", &mut c.fusion.truncation)?;
        kv.take_into("surface_samples", &mut c.fusion.surface_samples)?;
        kv.take_into("ransac_iterations", &mut c.registration.ransac.max_iterations)?;
        kv.take_into("ransac_confidence", &mut c.registration.ransac.confidence)?;
        kv.take_into("icp_max_corr_dist", &mut c.registration.icp.max_corr_dist)?;
        kv.take_into("rho_min", &mut c.density.rho_min)?;
        kv.take_into("rho_max", &mut c.density.rho_max)?;
        kv.take_into("depth_gate", &mut c.density.depth_gate)?;
        kv.take_into("map_every", &mut c.map_every)?;
        kv.take_into("mapping_samples", &mut c.mapping_samples)?;
        kv.take_into("idf_training_frames", &mut c.idf_training_frames)?;
        kv.take_into("outlier_ratio", &mut c.outliers.ratio)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.take_into("tau", &mut c.tau)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(KeyValues::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_override_the_preset() {
        let kv = KeyValues::parse("preset = harness\nmode = full\nl_min = 0.1\nmu_mode = global_mean\nloop_closure = false\n").unwrap();
        let c = PipelineConfig::from_key_values(kv).unwrap();
        assert_eq!(c.mode, Mode::Full);
        assert_eq!(c.tracker.translation_trigger, 0.52);
        assert_eq!(c.pgo.l_min, 0.1);
        assert_eq!(c.pgo.mu_mode, MuMode::GlobalMean);
        assert!(!c.loops.enabled);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(PipelineConfig::from_key_values(KeyValues::parse("colour = red\n").unwrap()).is_err());
        assert!(PipelineConfig::from_key_values(KeyValues::parse("mode = sideways\n").unwrap()).is_err());
        assert!(PipelineConfig::from_key_values(KeyValues::parse("l_min = 1.5\n").unwrap()).is_err());
        assert!(PipelineConfig::from_key_values(KeyValues::parse("min_loop_distance = 1\n").unwrap()).is_err());
    }
}
