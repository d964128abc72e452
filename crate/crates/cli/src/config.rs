use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cilseg::data::{SceneSpec, StagePlan};
use cilseg::training::ProtocolConfig;
use serde::{Deserialize, Serialize};

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { scene: SceneSpec, plan: StagePlan },
    Directory { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            scene: SceneSpec::default(),
            plan: StagePlan::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Score every intermediate snapshot, not only the last one.
    pub every_stage: bool,
    /// Images per inference batch.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every_stage: true,
            batch_size: 8,
        }
    }
}

/// The JSON document read by `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub protocol: ProtocolConfig,
    pub eval: EvalConfig,
    /// Output directory, overridden by `--out`.
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `--seed` replaces the protocol seed and, for synthetic data, the
    /// generator seed.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(seed) = seed {
            self.protocol.seed = seed;
            if let DatasetSource::Synthetic { plan, .. } = &mut self.dataset {
                plan.seed = seed;
            }
        }
    }

    /// Checks every section against the others without touching the disk
    /// beyond reading a directory dataset's plan.
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        if self.eval.batch_size == 0 {
            bail!("eval batch size must be at least 1");
        }
        match &self.dataset {
            DatasetSource::Synthetic { scene, plan } => {
                scene.validate()?;
                plan.validate_for(scene)?;
                self.check_extent(scene.height, scene.width)?;
            }
            DatasetSource::Directory { path } => {
                let plan_path = path.join("plan.json");
                let text = std::fs::read_to_string(&plan_path)
                    .with_context(|| format!("reading {}", plan_path.display()))?;
                let plan: StagePlan = serde_json::from_str(&text)?;
                plan.validate()?;
            }
        }
        Ok(())
    }

    fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let net = &self.protocol.net;
        let (h, w) = match &self.protocol.stage.augment {
            Some(a) => {
                if a.crop_height > height || a.crop_width > width {
                    bail!(
                        "crop {}×{} larger than the {height}×{width} scenes",
                        a.crop_height,
                        a.crop_width
                    );
                }
                (a.crop_height, a.crop_width)
            }
            None => (height, width),
        };
        let unit = 1usize << net.depth;
        if h % unit != 0 || w % unit != 0 || !height.is_multiple_of(unit) || !width.is_multiple_of(unit) {
            bail!("image and crop extents must be divisible by 2^depth = {unit}");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"protocol": {"stage": {"epochs": 2}}}"#).unwrap();
        assert_eq!(c.protocol.stage.epochs, 2);
        assert_eq!(c.protocol.stage.batch_size, 6);
    }

    #[test]
    fn seed_override_reaches_plan() {
        let mut c = RunConfig::default();
        c.apply_seed(Some(9));
        assert_eq!(c.protocol.seed, 9);
        let DatasetSource::Synthetic { plan, .. } = &c.dataset else { unreachable!() };
        assert_eq!(plan.seed, 9);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let mut c = RunConfig::default();
        if let DatasetSource::Synthetic { scene, .. } = &mut c.dataset {
            scene.height = 60;
        }
        c.protocol.stage.augment = None;
        assert!(c.validate().is_err());
    }
}
