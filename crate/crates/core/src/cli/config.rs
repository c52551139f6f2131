//! Training configuration files.
//!
//! A config file has up to five parts; every omitted key takes the stage
//! default, and the fully resolved document is what lands in the run
//! directory:
//!
//! ```toml
//! init = "runs/vp/final.params"     # parameters from the previous stage
//! resume = "runs/sf/checkpoints/epoch_00050.ckpt"
//!
//! [data]
//! videos = "videos"                 # one sub-directory of PNG frames per sequence
//! frame_size = [90, 160]
//! train = "hr/train"                # high-resolution volumes
//! validation = "hr/val"
//! subject = "lr/subject01.nii.gz"   # the low-resolution volume to adapt to
//!
//! [model]                           # only for fresh starts
//! encoder_channels = [64, 128, 256, 256]
//!
//! [train]
//! epochs = 1000
//! initial_lr = 1e-4
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::model::{ModelConfig, Stage};
use crate::train::StageConfig;

/// Environment variable naming the directory that relative data paths
/// resolve against. Without it they resolve against the config file.
pub const DATA_ROOT_ENV: &str = "SLICESR_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub videos: Option<PathBuf>,
    /// Frames are converted to gray and resized to `[height, width]`.
    pub frame_size: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            videos: None,
            frame_size: [90, 160],
            train: None,
            validation: None,
            subject: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: StageConfig,
}

impl RunConfig {
    pub fn defaults(stage: Stage) -> Self {
        Self {
            init: None,
            resume: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: StageConfig::for_stage(stage),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// A resolved config plus what the user wrote explicitly.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    /// Whether the file had a `[model]` table (otherwise the model comes
    /// from the starting parameters when there are any).
    pub explicit_model: bool,
    /// Top-level `[train]` keys the user set.
    pub explicit_train: Vec<String>,
}

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `text` for `stage`, fills in defaults and validates everything.
pub fn resolve_text(text: &str, stage: Stage) -> Result<Resolved, CliError> {
    let user: toml::Table = text.parse().map_err(|e| usage(format!("invalid TOML: {e}")))?;
    let explicit_model = user.contains_key("model");
    let explicit_train: Vec<String> = match user.get("train") {
        Some(toml::Value::Table(t)) => t.keys().cloned().collect(),
        Some(_) => return Err(usage("`train` must be a table")),
        None => Vec::new(),
    };
    if let Some(s) = user.get("train").and_then(|t| t.get("stage")) {
        let declared: Stage = s
            .clone()
            .try_into()
            .map_err(|e| usage(format!("train.stage: {e}")))?;
        if declared != stage {
            return Err(usage(format!(
                "train.stage is {declared} but this command runs {stage}"
            )));
        }
    }
    let mut merged = toml::Table::try_from(RunConfig::defaults(stage)).expect("defaults serialize");
    merge(&mut merged, user);
    // round-trip through text so errors carry a line and the offending key
    let doc = toml::to_string(&merged).map_err(|e| usage(format!("invalid config: {e}")))?;
    let config: RunConfig = toml::from_str(&doc).map_err(|e| usage(format!("invalid config: {e}")))?;
    config
        .train
        .validate()
        .map_err(|e| usage(format!("[train]: {e}")))?;
    config
        .model
        .validate()
        .map_err(|e| usage(format!("[model]: {e}")))?;
    if config.data.frame_size.contains(&0) {
        return Err(usage("data.frame_size must be positive"));
    }
    Ok(Resolved {
        config,
        explicit_model,
        explicit_train,
    })
}

/// Reads a config file and resolves its relative paths.
pub fn resolve_file(path: &Path, stage: Stage) -> Result<Resolved, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut r = resolve_text(&text, stage).map_err(|e| match e {
        CliError::Usage(m) => usage(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let base = data_root().unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    r.config.resolve_paths(&base);
    Ok(r)
}

pub fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn absolutize(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(x) = p.as_mut() {
        if x.is_relative() {
            *x = base.join(&*x);
        }
    }
}

impl RunConfig {
    pub fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.init);
        absolutize(base, &mut self.resume);
        absolutize(base, &mut self.data.videos);
        absolutize(base, &mut self.data.train);
        absolutize(base, &mut self.data.validation);
        absolutize(base, &mut self.data.subject);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let r = resolve_text("", Stage::Selfsup).unwrap();
        assert_eq!(r.config, RunConfig::defaults(Stage::Selfsup));
        assert!(!r.explicit_model);
        let back: RunConfig = toml::from_str(&r.config.to_toml()).unwrap();
        assert_eq!(back, r.config);
    }

    #[test]
    fn partial_tables_merge() {
        let r = resolve_text(
            "[train]\nepochs = 3\n[train.optimizer]\nname = \"sgd\"\n[model]\nfeature_dim = 8\nencoder_channels = [8]\ndecoder_widths = [16, 1]\ncoord_frequencies = 2\n",
            Stage::MrFinetune,
        )
        .unwrap();
        assert_eq!(r.config.train.epochs, 3);
        assert_eq!(r.config.train.patch_size, vec![64, 64, 16]);
        assert_eq!(r.config.model.feature_dim, 8);
        assert_eq!(r.config.train.optimizer.name, "sgd");
        assert_eq!(r.config.train.optimizer.beta2, 0.999);
        assert!(r.explicit_model);
        assert_eq!(r.explicit_train, vec!["epochs".to_string(), "optimizer".to_string()]);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = |text: &str| match resolve_text(text, Stage::VideoPretrain) {
            Err(CliError::Usage(m)) => m,
            other => panic!("expected a usage error, got {other:?}"),
        };
        assert!(err("[train]\nlearning_rate = 0.1\n").contains("learning_rate"));
        assert!(err("[data]\nvideo = \"x\"\n").contains("video"));
        assert!(err("seeds = 3\n").contains("seeds"));
        assert!(err("[train]\nepochs = \"many\"\n").contains("epochs"));
        assert!(err("[train]\ninitial_lr = -1.0\n").contains("initial_lr"));
        assert!(err("[train]\nstage = \"selfsup\"\n").contains("stage"));
    }

    #[test]
    fn relative_paths_follow_base() {
        let mut c = RunConfig::defaults(Stage::Selfsup);
        c.data.subject = Some("a/b.nii".into());
        c.init = Some("/abs/p.params".into());
        c.resolve_paths(Path::new("/root/data"));
        assert_eq!(c.data.subject.unwrap(), Path::new("/root/data/a/b.nii"));
        assert_eq!(c.init.unwrap(), Path::new("/abs/p.params"));
    }
}
