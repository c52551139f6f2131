//! Run directories: resolved config, manifest, loss log, checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Checkpoint, EpochRecord, IterationRecord, TrainObserver};
use crate::error::{Error, Result};
use crate::model::archive::sha256_hex;
use crate::model::Stage;

pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const LOG_FILE: &str = "log.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const FINAL_PARAMS: &str = "final.params";
pub const BEST_PARAMS: &str = "best.params";

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub stage: Option<Stage>,
    pub seed: u64,
    pub config_hash: String,
    pub epoch: usize,
    pub epochs: usize,
    pub loss_history: Vec<EpochRecord>,
    pub checkpoints: Vec<String>,
    #[serde(default)]
    pub lineage: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_params: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_params: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

/// An output directory for one command invocation. Existing non-empty
/// directories are refused unless `force` is set.
pub struct RunDir {
    root: PathBuf,
    log: BufWriter<File>,
    loss: Option<BufWriter<File>>,
    pub manifest: Manifest,
    checkpoint_every: usize,
}

impl RunDir {
    pub fn create(root: &Path, force: bool, command: &str, config_text: &str, seed: u64) -> Result<Self> {
        if root.exists() {
            let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
            if non_empty && !force {
                return Err(Error::InvalidArgument(format!(
                    "run directory {} already exists; choose a new one or pass --force",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let cfg = root.join(CONFIG_FILE);
        fs::write(&cfg, config_text).map_err(|e| Error::io(&cfg, e))?;
        let log_path = root.join(LOG_FILE);
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let hash = config_hash(config_text);
        let mut run = Self {
            root: root.to_path_buf(),
            log: BufWriter::new(log),
            loss: None,
            manifest: Manifest {
                command: command.into(),
                stage: None,
                seed,
                config_hash: hash.clone(),
                epoch: 0,
                epochs: 0,
                loss_history: Vec::new(),
                checkpoints: Vec::new(),
                lineage: Vec::new(),
                final_params: None,
                best_params: None,
                wall_clock_s: None,
                outputs: Vec::new(),
            },
            checkpoint_every: 0,
        };
        run.message(&format!("{command}: seed {seed}, config hash {hash}"));
        run.write_manifest()?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Starts the loss log and remembers the checkpoint cadence.
    pub fn begin_training(&mut self, stage: Stage, epochs: usize, checkpoint_every: usize) -> Result<()> {
        let p = self.path(LOSS_FILE);
        let exists = p.exists();
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        let mut w = BufWriter::new(f);
        if !exists {
            writeln!(w, "stage,epoch,iteration,step,lr,loss").map_err(|e| Error::io(&p, e))?;
        }
        self.loss = Some(w);
        self.manifest.stage = Some(stage);
        self.manifest.epochs = epochs;
        self.checkpoint_every = checkpoint_every;
        self.write_manifest()
    }

    pub fn write_manifest(&self) -> Result<()> {
        let p = self.path(MANIFEST_FILE);
        fs::write(&p, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&p, e))
    }

    pub fn message(&mut self, msg: &str) {
        log::info!("{msg}");
        let _ = writeln!(self.log, "{msg}");
        let _ = self.log.flush();
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.manifest.outputs.push(self.relative(path));
        self.write_manifest()
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }

    /// Writes the final checkpoint and bare parameters and updates the manifest.
    pub fn finish_training(&mut self, ck: &Checkpoint, wall_clock_s: f64) -> Result<()> {
        let ckp = self.path(FINAL_CHECKPOINT);
        ck.save(&ckp)?;
        let pp = self.path(FINAL_PARAMS);
        ck.params.save(&pp)?;
        self.manifest.checkpoints.push(FINAL_CHECKPOINT.into());
        self.manifest.final_params = Some(FINAL_PARAMS.into());
        self.manifest.lineage = ck.params.meta.lineage.clone();
        self.manifest.wall_clock_s = Some(wall_clock_s);
        if let Some(w) = self.loss.as_mut() {
            w.flush().map_err(|e| Error::io(&self.root, e))?;
        }
        self.write_manifest()
    }
}

impl TrainObserver for RunDir {
    fn iteration(&mut self, rec: &IterationRecord) -> Result<()> {
        if let Some(w) = self.loss.as_mut() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                rec.stage.tag(),
                rec.epoch,
                rec.iteration,
                rec.step,
                rec.lr,
                rec.loss
            )
            .map_err(|e| Error::io(&self.root, e))?;
        }
        Ok(())
    }

    fn epoch_end(&mut self, rec: &EpochRecord, checkpoint: &dyn Fn() -> Checkpoint) -> Result<Option<PathBuf>> {
        if let Some(w) = self.loss.as_mut() {
            w.flush().map_err(|e| Error::io(&self.root, e))?;
        }
        self.manifest.epoch = rec.epoch + 1;
        self.manifest.loss_history.push(rec.clone());
        let mut saved = None;
        if self.checkpoint_every > 0 && (rec.epoch + 1) % self.checkpoint_every == 0 {
            let name = format!("checkpoints/epoch_{:05}.ckpt", rec.epoch + 1);
            let p = self.path(&name);
            checkpoint().save(&p)?;
            self.manifest.checkpoints.push(name);
            saved = Some(p);
        }
        self.write_manifest()?;
        Ok(saved)
    }

    fn best(&mut self, epoch: usize, psnr: f64, params: &crate::model::ModelParams) -> Result<()> {
        params.save(&self.path(BEST_PARAMS))?;
        self.manifest.best_params = Some(BEST_PARAMS.into());
        self.message(&format!("new best validation PSNR {psnr:.3} dB at epoch {}", epoch + 1));
        Ok(())
    }

    fn message(&mut self, msg: &str) {
        RunDir::message(self, msg)
    }
}
