use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossKind, Stage};
use crate::optim::OptimizerConfig;
use crate::volume::Axis;

/// Hyper-parameters of one training stage.
///
/// `patch_size` is `[h, w]` for video pre-training. For the MR stages it is
/// `[a, b, c]`: an `a x b` in-plane crop and `c` low-resolution slices along
/// the interpolated axis (so the high-resolution crop spans `c * n` slices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_halving_period: usize,
    pub batch_size: usize,
    pub downsample_factor: usize,
    pub patch_size: Vec<usize>,
    pub patches_per_subject: usize,
    /// Defaults to the dataset size (sequences or volumes); ignored by the
    /// self-supervised stage, which makes one pass over its patches per epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations_per_epoch: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossKind,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Validate every this many epochs; 0 validates only at the end.
    pub validate_every: usize,
    /// In-plane axis decimated to build self-supervised pairs.
    pub selfsup_axis: Axis,
    /// Blur with a Gaussian slice profile before decimating.
    pub simulate_slice_profile: bool,
    /// Accept a starting checkpoint from an unexpected stage.
    #[serde(default)]
    pub allow_stage_override: bool,
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let base = Self {
            stage,
            epochs: 1000,
            initial_lr: 1e-4,
            lr_halving_period: 200,
            batch_size: 16,
            downsample_factor: 4,
            patch_size: vec![64, 64, 16],
            patches_per_subject: 100,
            iterations_per_epoch: None,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossKind::L1,
            checkpoint_every: 50,
            validate_every: 10,
            selfsup_axis: Axis::X,
            simulate_slice_profile: true,
            allow_stage_override: false,
        };
        match stage {
            Stage::VideoPretrain => Self {
                patch_size: vec![64, 64],
                simulate_slice_profile: false,
                ..base
            },
            Stage::MrFinetune => base,
            Stage::Selfsup => Self {
                epochs: 5,
                batch_size: 8,
                checkpoint_every: 0,
                validate_every: 0,
                simulate_slice_profile: false,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.downsample_factor < 2 {
            return bad(format!("downsample_factor must be at least 2, got {}", self.downsample_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let dims = if self.stage == Stage::VideoPretrain { 2 } else { 3 };
        if self.patch_size.len() != dims || self.patch_size.contains(&0) {
            return bad(format!(
                "patch_size for {} needs {dims} positive extents, got {:?}",
                self.stage, self.patch_size
            ));
        }
        if dims == 3 && self.patch_size[2] < 2 {
            return bad("patch_size[2] must span at least two low-resolution slices".into());
        }
        if self.stage == Stage::Selfsup && self.patches_per_subject == 0 {
            return bad("patches_per_subject must be at least 1".into());
        }
        if self.selfsup_axis == Axis::Z {
            return bad("selfsup_axis must be x or y".into());
        }
        if self.iterations_per_epoch == Some(0) {
            return bad("iterations_per_epoch must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for s in [Stage::VideoPretrain, Stage::MrFinetune, Stage::Selfsup] {
            StageConfig::for_stage(s).validate().unwrap();
        }
        let ssf = StageConfig::for_stage(Stage::Selfsup);
        assert_eq!((ssf.patches_per_subject, ssf.epochs, ssf.batch_size), (100, 5, 8));
    }

    #[test]
    fn invariants_rejected() {
        let ok = StageConfig::for_stage(Stage::MrFinetune);
        for broken in [
            StageConfig { initial_lr: 0.0, ..ok.clone() },
            StageConfig { epochs: 0, ..ok.clone() },
            StageConfig { downsample_factor: 1, ..ok.clone() },
            StageConfig { patch_size: vec![64, 64], ..ok.clone() },
            StageConfig { selfsup_axis: Axis::Z, ..ok.clone() },
        ] {
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_fields() {
        let c = StageConfig::for_stage(Stage::VideoPretrain);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<StageConfig>(&text).unwrap(), c);
        let bad = format!("learning_rate = 3.0\n{text}");
        assert!(toml::from_str::<StageConfig>(&bad).is_err());
        let text = toml::to_string(&StageConfig::for_stage(Stage::MrFinetune)).unwrap();
        let nested = text.replace("[loss]\nkind = \"l1\"", "[loss]\nkind = \"charbonnier\"\neps = 0.01\nfoo = 1");
        assert_ne!(nested, text);
        assert!(toml::from_str::<StageConfig>(&nested).is_err());
    }
}
