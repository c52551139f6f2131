//! The three training stages and the loop they share.
//!
//! Every epoch draws its randomness from a generator seeded by
//! `(seed, epoch)`, and checkpoints are taken at epoch boundaries, so a run
//! resumed from a checkpoint continues on exactly the trajectory it would
//! have followed uninterrupted.

mod checkpoint;
mod config;
pub mod run;
pub mod sources;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, EpochRecord};
pub use config::StageConfig;
pub use run::{Manifest, RunDir};
pub use sources::{FixedSource, SampleSource, SelfsupSampler, VideoSampler, VolumeSampler};

use crate::degrade::{decimate, DegradeSpec};
use crate::error::{Error, Result};
use crate::infer::{resolve_with, LinearInterpolator, ModelInterpolator, TileOptions};
use crate::metrics::psnr_volume;
use crate::model::{ModelParams, Stage};
use crate::optim::{Optimizer, OptimizerRegistry};
use crate::volume::{Axis, Frame, FrameSequence, Volume};

/// Mean absolute per-pixel difference.
pub fn l1_loss(pred: &Frame, target: &Frame) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.dim(), target.dim())));
    }
    let mut acc = 0.0;
    Zip::from(&pred.pixels())
        .and(&target.pixels())
        .for_each(|&a, &b| acc += (a as f64 - b as f64).abs());
    Ok(acc / (pred.height() * pred.width()) as f64)
}

/// Step decay: `initial_lr * 0.5^floor(epoch / period)`; a zero period never decays.
pub fn lr_schedule(epoch: usize, cfg: &StageConfig) -> f64 {
    if cfg.lr_halving_period == 0 {
        return cfg.initial_lr;
    }
    cfg.initial_lr * 0.5f64.powi((epoch / cfg.lr_halving_period) as i32)
}

/// Generator for one epoch of one stage.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub iteration: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Receives progress; the run directory implements this to persist it.
pub trait TrainObserver {
    fn iteration(&mut self, _rec: &IterationRecord) -> Result<()> {
        Ok(())
    }

    /// Returns the path of a checkpoint if one was written.
    fn epoch_end(&mut self, _rec: &EpochRecord, _checkpoint: &dyn Fn() -> Checkpoint) -> Result<Option<PathBuf>> {
        Ok(None)
    }

    fn best(&mut self, _epoch: usize, _psnr: f64, _params: &ModelParams) -> Result<()> {
        Ok(())
    }

    fn message(&mut self, msg: &str) {
        log::info!("{msg}");
    }
}

/// Discards everything except log lines.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Collects iteration losses and messages in memory.
#[derive(Default)]
pub struct Recorder {
    pub iterations: Vec<IterationRecord>,
    pub messages: Vec<String>,
}

impl TrainObserver for Recorder {
    fn iteration(&mut self, rec: &IterationRecord) -> Result<()> {
        self.iterations.push(*rec);
        Ok(())
    }

    fn message(&mut self, msg: &str) {
        log::info!("{msg}");
        self.messages.push(msg.into());
    }
}

/// Result of a stage.
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    /// Parameters with the best validation PSNR, when validation ran.
    pub best: Option<(usize, f64, ModelParams)>,
    pub wall_clock_s: f64,
}

/// Scores a model on held-out data after each validation interval.
pub type Validator<'a> = dyn Fn(&ModelParams) -> Result<f64> + 'a;

/// Decides whether `start` is resumed or used as the initialization.
fn prepare(stage: Stage, cfg: &StageConfig, start: Checkpoint) -> Result<(Checkpoint, Box<dyn Optimizer>)> {
    let registry = OptimizerRegistry::default();
    let resuming = start.stage() == Some(stage) && !start.is_complete() && start.optimizer.is_some();
    if resuming {
        if start.target_epochs != cfg.epochs {
            log::warn!(
                "resuming a {}-epoch run with epochs = {}",
                start.target_epochs,
                cfg.epochs
            );
        }
        let mut opt = registry.build(&cfg.optimizer, &start.params)?;
        opt.load_state(start.optimizer.clone().expect("checked"))?;
        let ck = Checkpoint {
            target_epochs: cfg.epochs,
            ..start
        };
        return Ok((ck, opt));
    }
    let expected = stage.previous();
    if start.stage() != expected && !cfg.allow_stage_override {
        return Err(Error::StageMismatch {
            found: start.stage().map_or("untrained".into(), |s| s.tag().to_string()),
            expected: expected.map_or("untrained".into(), |s| s.tag().to_string()),
        });
    }
    let mut params = start.params;
    params.meta.stage = Some(stage);
    params.meta.lineage.push(stage);
    let opt = registry.build(&cfg.optimizer, &params)?;
    Ok((
        Checkpoint {
            params,
            optimizer: None,
            epoch: 0,
            target_epochs: cfg.epochs,
            history: Vec::new(),
        },
        opt,
    ))
}

/// The shared loop: `cfg.epochs` epochs over `source`, with optional
/// validation and best-model tracking.
pub fn train_with_source(
    cfg: &StageConfig,
    start: Checkpoint,
    source: &mut dyn SampleSource,
    observer: &mut dyn TrainObserver,
    validator: Option<&Validator<'_>>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let stage = cfg.stage;
    let clock = Instant::now();
    let (mut ck, mut opt) = prepare(stage, cfg, start)?;
    let mut last_good: Option<PathBuf> = None;
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let iterations = source.epoch_len();
    if iterations == 0 {
        return Err(Error::InvalidArgument("an epoch has no iterations".into()));
    }
    while ck.epoch < cfg.epochs {
        let epoch = ck.epoch;
        let lr = lr_schedule(epoch, cfg);
        let mut rng = epoch_rng(cfg.seed, epoch as u64);
        source.begin_epoch(&mut rng);
        let mut sum = 0.0;
        for it in 0..iterations {
            let batch = source.batch(it, cfg.batch_size, &mut rng)?;
            let (loss, grads) = ck.params.batch_loss_and_grad(&batch, cfg.loss)?;
            if !loss.is_finite() || !grads.is_finite() {
                observer.message(&format!(
                    "non-finite loss {loss} at epoch {} iteration {it}; stopping",
                    epoch + 1
                ));
                return Err(Error::Diverged {
                    epoch,
                    iteration: it,
                    loss,
                    last_good,
                });
            }
            opt.step(&mut ck.params, &grads, lr);
            ck.params.meta.step += 1;
            sum += loss;
            observer.iteration(&IterationRecord {
                stage,
                epoch,
                iteration: it,
                step: ck.params.meta.step,
                lr,
                loss,
            })?;
        }
        let validate_now = validator.is_some()
            && ((cfg.validate_every > 0 && (epoch + 1) % cfg.validate_every == 0) || epoch + 1 == cfg.epochs);
        let val_psnr = match (validate_now, validator) {
            (true, Some(v)) => Some(v(&ck.params)?),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            iterations,
            lr,
            mean_loss: sum / iterations as f64,
            val_psnr,
        };
        observer.message(&format!(
            "{} epoch {}/{}: loss {:.6}, lr {:.3e}{}",
            stage.short(),
            epoch + 1,
            cfg.epochs,
            rec.mean_loss,
            lr,
            val_psnr.map_or(String::new(), |p| format!(", validation PSNR {p:.3} dB"))
        ));
        if let Some(p) = val_psnr {
            if best.as_ref().is_none_or(|b| p > b.1) {
                observer.best(epoch, p, &ck.params)?;
                best = Some((epoch, p, ck.params.clone()));
            }
        }
        ck.history.push(rec.clone());
        ck.epoch += 1;
        let snapshot = || Checkpoint {
            optimizer: Some(opt.state()),
            ..ck.clone()
        };
        if let Some(p) = observer.epoch_end(&rec, &snapshot)? {
            last_good = Some(p);
        }
    }
    ck.optimizer = Some(opt.state());
    Ok(StageOutcome {
        checkpoint: ck,
        best,
        wall_clock_s: clock.elapsed().as_secs_f64(),
    })
}

/// Video pre-training.
pub fn train_stage1(
    seqs: &[FrameSequence],
    cfg: &StageConfig,
    start: Checkpoint,
    observer: &mut dyn TrainObserver,
) -> Result<StageOutcome> {
    check_stage(cfg, Stage::VideoPretrain)?;
    let patch = [cfg.patch_size[0], cfg.patch_size[1]];
    let mut source = VideoSampler::new(seqs, cfg.downsample_factor, patch, cfg.iterations_per_epoch)?;
    observer.message(&format!(
        "video pre-training on {} sequences, {} iterations per epoch",
        seqs.len(),
        source.epoch_len()
    ));
    train_with_source(cfg, start, &mut source, observer, None)
}

/// Trims a volume to the largest z-extent of the form `(m - 1) n + 1`.
pub fn trim_to_grid(hr: &Volume, n: usize) -> Result<Volume> {
    use crate::degrade::Patchable;
    let [x, y, z] = hr.dim();
    if z < n + 1 {
        return Err(Error::VolumeTooSmall {
            extents: [x, y, z],
            required: [1, 1, n + 1],
        });
    }
    let m = (z - 1) / n;
    hr.crop_at([0, 0, 0], [x, y, m * n + 1])
}

/// Simulated low-resolution version of a high-resolution volume.
pub fn simulate_lr(hr: &Volume, n: usize, simulate_profile: bool) -> Result<Volume> {
    let profile = sources::lr_profile(simulate_profile, n, hr.spacing()[2]);
    decimate(hr, &DegradeSpec::new(Axis::Z, n, profile)?)
}

/// Mean PSNR of model-based (or, without params, linear) upsampling of
/// simulated LR versions of `hr`.
pub fn validation_psnr(
    params: Option<&ModelParams>,
    hr: &[Volume],
    n: usize,
    simulate_profile: bool,
) -> Result<f64> {
    if hr.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let model = params.map(|p| ModelInterpolator::new(Arc::new(p.clone())));
    let mut total = 0.0;
    for v in hr {
        let truth = trim_to_grid(v, n)?;
        let lr = simulate_lr(&truth, n, simulate_profile)?;
        let sr = match &model {
            Some(m) => resolve_with(&lr, m, n, TileOptions::default())?,
            None => resolve_with(&lr, &LinearInterpolator, n, TileOptions::default())?,
        };
        total += psnr_volume(&truth, &sr)?;
    }
    Ok(total / hr.len() as f64)
}

/// Supervised fine-tuning on high-resolution MR volumes.
pub fn train_stage2(
    hr: &[Volume],
    validation: &[Volume],
    cfg: &StageConfig,
    start: Checkpoint,
    observer: &mut dyn TrainObserver,
) -> Result<StageOutcome> {
    check_stage(cfg, Stage::MrFinetune)?;
    let patch = [cfg.patch_size[0], cfg.patch_size[1], cfg.patch_size[2]];
    let n = cfg.downsample_factor;
    let mut source = VolumeSampler::new(hr, n, patch, cfg.simulate_slice_profile, cfg.iterations_per_epoch)?;
    observer.message(&format!(
        "MR fine-tuning on {} volumes ({} held out), HR patch {}x{}x{}, LR patch {}x{}x{}",
        hr.len(),
        validation.len(),
        patch[0],
        patch[1],
        patch[2] * n,
        patch[0],
        patch[1],
        patch[2]
    ));
    let profile = cfg.simulate_slice_profile;
    let validator = |p: &ModelParams| validation_psnr(Some(p), validation, n, profile);
    if !validation.is_empty() {
        let base = validation_psnr(None, validation, n, profile)?;
        observer.message(&format!("trilinear validation PSNR {base:.3} dB"));
    }
    let v: Option<&Validator<'_>> = if validation.is_empty() { None } else { Some(&validator) };
    train_with_source(cfg, start, &mut source, observer, v)
}

/// Subject-specific self-supervised fine-tuning.
pub fn train_stage3(
    subject_lr: &Volume,
    cfg: &StageConfig,
    start: Checkpoint,
    observer: &mut dyn TrainObserver,
) -> Result<StageOutcome> {
    check_stage(cfg, Stage::Selfsup)?;
    cfg.validate()?;
    let patch = [cfg.patch_size[0], cfg.patch_size[1], cfg.patch_size[2]];
    // patches come from their own stream so resuming re-extracts the same set
    let mut rng = epoch_rng(cfg.seed, u64::MAX);
    let mut source = SelfsupSampler::new(
        subject_lr,
        cfg.downsample_factor,
        cfg.selfsup_axis,
        patch,
        cfg.patches_per_subject,
        cfg.simulate_slice_profile,
        cfg.batch_size,
        &mut rng,
    )?;
    if let Some(w) = &source.warning {
        observer.message(&format!("warning: {w}"));
    }
    observer.message(&format!(
        "extracted {} patches of {}x{}x{} from subject {} (decimated x{} along {})",
        source.patches().len(),
        patch[0],
        patch[1],
        patch[2],
        subject_lr.subject_id(),
        cfg.downsample_factor,
        cfg.selfsup_axis
    ));
    observer.message(&format!(
        "fine-tuning for {} epochs of {} iterations",
        cfg.epochs,
        source.epoch_len()
    ));
    let out = train_with_source(cfg, start, &mut source, observer, None)?;
    observer.message(&format!("self-supervised fine-tuning took {:.2} s", out.wall_clock_s));
    Ok(out)
}

fn check_stage(cfg: &StageConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::InvalidArgument(format!(
            "config is for stage {}, not {}",
            cfg.stage, stage
        )));
    }
    Ok(())
}

/// Convenience for callers holding bare parameters.
pub fn start_from(params: ModelParams) -> Checkpoint {
    Checkpoint::fresh(params)
}

/// Linear interpolation frame between the bounding frames of a sample, as a
/// loss reference.
pub fn linear_baseline_loss(sample: &crate::volume::InterpolationSample) -> Result<f64> {
    let pred = crate::degrade::lerp_planes(&sample.left, &sample.right, sample.coord.t())?;
    let target = sample
        .target
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("sample has no target".into()))?;
    l1_loss(&pred, target)
}
