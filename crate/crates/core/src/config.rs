//! Run configuration, read from and snapshotted as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{file_error, Error, Result};
use crate::losses::{MixedLossConfig, TverskyParams};
use crate::perturb::PerturbConfig;
use crate::views::{ArchitectureTag, ModelConfig};

/// Overrides `output_root` when set.
pub const RUN_DIR_ENV: &str = "TRISEG_RUN_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub stage1_epochs: usize,
    /// Total epochs per view across all stage-2 iterations.
    pub stage2_epochs: usize,
    pub stage2_iterations: usize,
    pub stage3_epochs_max: usize,
    pub stage3_tolerance: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            stage1_epochs: 150,
            stage2_epochs: 100,
            stage2_iterations: 5,
            stage3_epochs_max: 150,
            stage3_tolerance: 0.005,
            learning_rate: 2e-4,
            batch_size: 16,
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("plan.learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("plan.batch_size must be positive".into()));
        }
        if self.stage2_epochs > 0 && self.stage2_iterations == 0 {
            return Err(Error::Config("plan.stage2_iterations must be positive".into()));
        }
        if !(self.stage3_tolerance >= 0.0) {
            return Err(Error::Config("plan.stage3_tolerance must be non-negative".into()));
        }
        Ok(())
    }

    /// Stage-2 epochs per view in each outer iteration.
    pub fn epochs_per_iteration(&self) -> usize {
        if self.stage2_iterations == 0 {
            0
        } else {
            self.stage2_epochs.div_ceil(self.stage2_iterations)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoTarget {
    /// Voted map hardened at 0.5.
    #[default]
    Hard,
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelProcessing {
    /// Off disables perturbation, low-confidence removal and weighted voting.
    pub enabled: bool,
    /// Fixed disagreement level instead of the per-epoch pool mean.
    pub zeta_override: Option<f64>,
    pub pseudo_target: PseudoTarget,
}

impl Default for LabelProcessing {
    fn default() -> Self {
        Self {
            enabled: true,
            zeta_override: None,
            pseudo_target: PseudoTarget::Hard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        count: usize,
        #[serde(default = "default_sigma")]
        noise_sigma: f64,
        #[serde(default = "default_min_extent")]
        min_extent: f64,
        #[serde(default = "default_max_extent")]
        max_extent: f64,
    },
    Directory {
        path: PathBuf,
    },
}

fn default_sigma() -> f64 {
    SynthConfig::default().noise_sigma
}

fn default_min_extent() -> f64 {
    SynthConfig::default().min_extent
}

fn default_max_extent() -> f64 {
    SynthConfig::default().max_extent
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            count: 500,
            noise_sigma: default_sigma(),
            min_extent: default_min_extent(),
            max_extent: default_max_extent(),
        }
    }
}

/// View layouts of the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    A3,
    B3,
    C3,
    Abc,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A3" => Ok(Self::A3),
            "B3" => Ok(Self::B3),
            "C3" => Ok(Self::C3),
            "ABC" => Ok(Self::Abc),
            _ => Err(Error::Config(format!("unknown ablation {s:?}; expected A3, B3, C3 or ABC"))),
        }
    }

    pub fn architectures(self) -> [ArchitectureTag; 3] {
        use ArchitectureTag::*;
        match self {
            Self::A3 => [SkipConnection; 3],
            Self::B3 => [SpatialBypass; 3],
            Self::C3 => [MultiScalePyramid; 3],
            Self::Abc => [SkipConnection, SpatialBypass, MultiScalePyramid],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub labelled_fraction: f64,
    /// `[height, width]`; both multiples of 16.
    pub image_size: [usize; 2],
    pub output_root: PathBuf,
    pub run_name: String,
    /// Stage 2 and 3 use the boundary + overlap loss; off falls back to
    /// focal Tversky.
    pub dual_loss: bool,
    /// Train view A on labelled data only and skip stages 2 and 3.
    pub supervised_only: bool,
    /// Also archive hardened pseudo-labels with every pool snapshot.
    pub pool_masks: bool,
    pub pretrained_stem: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub plan: StagePlan,
    pub perturb: PerturbConfig,
    pub tversky: TverskyParams,
    pub mixed_loss: MixedLossConfig,
    pub label_processing: LabelProcessing,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            labelled_fraction: 0.05,
            image_size: [64, 64],
            output_root: PathBuf::from("runs"),
            run_name: "run".into(),
            dual_loss: true,
            supervised_only: false,
            pool_masks: true,
            pretrained_stem: None,
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            plan: StagePlan::default(),
            perturb: PerturbConfig::default(),
            tversky: TverskyParams::default(),
            mixed_loss: MixedLossConfig::default(),
            label_processing: LabelProcessing::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| file_error(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Hex SHA-256 of the TOML snapshot.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if !(self.labelled_fraction > 0.0 && self.labelled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labelled_fraction = {} must lie in (0, 1]",
                self.labelled_fraction
            )));
        }
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!("image_size = [{h}, {w}] must be positive multiples of 16")));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config("run_name must be a plain, non-empty directory name".into()));
        }
        if let DatasetSource::Synthetic { count, .. } = self.dataset {
            if count == 0 {
                return Err(Error::Config("dataset.count must be positive".into()));
            }
        }
        if let Some(z) = self.label_processing.zeta_override {
            if !(0.0..1.0).contains(&z) {
                return Err(Error::Config(format!("label_processing.zeta_override = {z} must lie in [0, 1)")));
            }
        }
        self.model.validate().map_err(cfg)?;
        self.plan.validate()?;
        self.perturb.validate().map_err(cfg)?;
        self.tversky.validate().map_err(cfg)?;
        Ok(())
    }

    pub fn synth_config(&self) -> Option<SynthConfig> {
        match self.dataset {
            DatasetSource::Synthetic {
                noise_sigma,
                min_extent,
                max_extent,
                ..
            } => Some(SynthConfig {
                noise_sigma,
                min_extent,
                max_extent,
            }),
            DatasetSource::Directory { .. } => None,
        }
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        self.model.architectures = ablation.architectures();
    }

    /// Output root after applying the environment override.
    pub fn resolved_output_root(&self) -> PathBuf {
        match std::env::var_os(RUN_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_root.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolved_output_root().join(&self.run_name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrip() {
        let mut c = RunConfig::default();
        c.label_processing.zeta_override = Some(0.25);
        c.dataset = DatasetSource::Directory { path: "data/x".into() };
        c.apply_ablation(Ablation::A3);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("seed = 1\nbogus = 2\n").is_err());
        let e = RunConfig::from_toml_str("[plan]\nstage1_epoch = 3\n").unwrap_err();
        assert!(e.to_string().contains("stage1_epoch"));
        let e = RunConfig::from_toml_str("[dataset]\nkind = \"synthetic\"\ncount = 3\nsigma = 1\n");
        assert!(e.is_err());
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml_str("seed = 9\n[dataset]\nkind = \"synthetic\"\ncount = 40\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.plan, StagePlan::default());
        assert_eq!(c.synth_config().unwrap(), SynthConfig::default());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("labelled_fraction = 0.0\n").is_err());
        assert!(RunConfig::from_toml_str("image_size = [60, 64]\n").is_err());
        assert!(RunConfig::from_toml_str("[plan]\nlearning_rate = 0.0\n").is_err());
    }

    #[test]
    fn epochs_per_iteration_rounds_up() {
        let p = StagePlan {
            stage2_epochs: 10,
            stage2_iterations: 3,
            ..StagePlan::default()
        };
        assert_eq!(p.epochs_per_iteration(), 4);
        assert_eq!(StagePlan::default().epochs_per_iteration(), 20);
    }
}
