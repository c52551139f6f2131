use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{resolve_file, resolve_text, Resolved};
use super::{
    CliError, DegradeArgs, EvaluateArgs, InferArgs, Method, ProfileKind, SynthCommand, TrainArgs, EVALUATION_FILE,
    LINEAGE_SUFFIX,
};
use crate::degrade::{decimate, DegradeSpec, SliceProfile};
use crate::error::Error;
use crate::infer::{resolve_continuous_with, resolve_with, InterpolatorRegistry, TileOptions};
use crate::io::{list_volumes, load_frame_sequence, load_volume, save_frame_sequence, save_volume};
use crate::metrics::{error_map, evaluate_dataset, save_error_maps, MetricReport};
use crate::model::{ModelParams, Stage};
use crate::synth::SynthRegistry;
use crate::train::{self, Checkpoint, RunDir};
use crate::volume::{Axis, FrameSequence, Volume};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Library errors that stem from bad flag values rather than the data.
fn flag_error(e: Error) -> CliError {
    match e {
        Error::InvalidArgument(_) | Error::UnknownStrategy { .. } => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn synth(cmd: SynthCommand) -> Result<(), CliError> {
    let reg = SynthRegistry::default();
    match cmd {
        SynthCommand::List => {
            println!("video: {}", reg.video_names().join(", "));
            println!("phantom: {}", reg.phantom_names().join(", "));
        }
        SynthCommand::Video(a) => {
            reg.video(&a.kind).map_err(flag_error)?;
            for seed in a.seed..a.seed + a.count {
                let seq = reg
                    .make_video(&a.kind, a.frames, (a.size[0], a.size[1]), seed)
                    .map_err(flag_error)?;
                let dir = a.out.join(seq.source_id());
                save_frame_sequence(&dir, &seq)?;
                println!("{}", dir.display());
            }
        }
        SynthCommand::Phantom(a) => {
            reg.phantom(&a.kind).map_err(flag_error)?;
            for seed in a.seed..a.seed + a.count {
                let v = reg
                    .make_phantom_volume(&a.kind, a.size, a.spacing, seed)
                    .map_err(flag_error)?;
                let p = a.out.join(format!("{}.{}", v.subject_id(), a.format.suffix()));
                save_volume(&p, &v)?;
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

pub fn degrade(a: DegradeArgs) -> Result<(), CliError> {
    let axis: Axis = a.axis.into();
    let v = load_volume(&a.input)?;
    let profile = match a.profile {
        ProfileKind::None => SliceProfile::None,
        ProfileKind::Gaussian => SliceProfile::Gaussian {
            fwhm_mm: a.fwhm.unwrap_or(v.spacing()[axis.index()] * a.factor as f64),
        },
    };
    let spec = DegradeSpec::new(axis, a.factor, profile).map_err(flag_error)?;
    let lr = decimate(&v, &spec)?;
    save_volume(&a.out, &lr)?;
    log::info!(
        "{} {:?} -> {} {:?}, spacing {:?}",
        a.input.display(),
        v.dim(),
        a.out.display(),
        lr.dim(),
        lr.spacing()
    );
    Ok(())
}

pub fn train(stage: Stage, a: TrainArgs) -> Result<(), CliError> {
    if a.print_config {
        print!("{}", super::RunConfig::defaults(stage).to_toml());
        return Ok(());
    }
    let (Some(config), Some(run)) = (a.config, a.run) else {
        return Err(usage("--config and --run are required"));
    };
    let mut r = resolve_file(&config, stage)?;
    if let Some(p) = a.resume {
        r.config.resume = Some(std::path::absolute(&p).unwrap_or(p));
    }
    if let Some(s) = a.seed {
        r.config.train.seed = s;
    }
    let params = run_training(stage, r, &run, a.force)?;
    println!("{}", run.join(train::run::FINAL_PARAMS).display());
    log::info!("lineage: {:?}", params.meta.lineage);
    Ok(())
}

/// Where a stage starts: a checkpoint to resume, parameters from the
/// previous stage, or (stage 1 or with the override) a fresh model.
fn starting_point(stage: Stage, r: &mut Resolved) -> Result<Checkpoint, CliError> {
    let cfg = &mut r.config;
    let from = cfg.resume.as_ref().or(cfg.init.as_ref());
    let ck = match from {
        Some(p) => Checkpoint::load(p)?,
        None if stage == Stage::VideoPretrain || cfg.train.allow_stage_override => {
            return Ok(Checkpoint::fresh(ModelParams::init(cfg.model.clone(), cfg.train.seed)?));
        }
        None => {
            return Err(usage(format!(
                "{stage} starts from the parameters of the previous stage: set `init`, or set \
                 train.allow_stage_override = true to start from scratch"
            )))
        }
    };
    if r.explicit_model && ck.params.config() != &cfg.model {
        return Err(usage(format!(
            "[model] (fingerprint {}) does not match the starting parameters (fingerprint {}); \
             drop the [model] table to use theirs",
            cfg.model.fingerprint(),
            ck.params.fingerprint()
        )));
    }
    cfg.model = ck.params.config().clone();
    let resuming = ck.stage() == Some(stage) && !ck.is_complete() && ck.optimizer.is_some();
    if !resuming && ck.stage() != stage.previous() && !cfg.train.allow_stage_override {
        return Err(CliError::Usage(
            Error::StageMismatch {
                found: ck.stage().map_or("untrained".into(), |s| s.tag().to_string()),
                expected: stage.previous().map_or("untrained".into(), |s| s.tag().to_string()),
            }
            .to_string(),
        ));
    }
    Ok(ck)
}

/// Sub-directories of `dir` holding frames, or `dir` itself when it holds them directly.
fn load_videos(dir: &Path, size: [usize; 2]) -> Result<Vec<FrameSequence>, CliError> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        subdirs.push(dir.to_path_buf());
    }
    let seqs = subdirs
        .iter()
        .map(|d| load_frame_sequence(d, (size[0], size[1])))
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(seqs)
}

fn load_dir(dir: &Path) -> Result<Vec<Volume>, CliError> {
    let files = list_volumes(dir)?;
    if files.is_empty() {
        return Err(CliError::Runtime(Error::InvalidArgument(format!(
            "no volumes in {}",
            dir.display()
        ))));
    }
    Ok(files.iter().map(|p| load_volume(p)).collect::<crate::Result<_>>()?)
}

enum StageData {
    Videos(Vec<FrameSequence>),
    Volumes(Vec<Volume>, Vec<Volume>),
    Subject(Volume),
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str, stage: Stage) -> Result<&'a PathBuf, CliError> {
    p.as_ref()
        .ok_or_else(|| usage(format!("{stage} needs data.{key} in the config")))
}

/// Runs one stage into `run_path` and returns the final parameters.
pub(crate) fn run_training(stage: Stage, mut r: Resolved, run_path: &Path, force: bool) -> Result<ModelParams, CliError> {
    let data = r.config.data.clone();
    match stage {
        Stage::VideoPretrain => {
            required(&data.videos, "videos", stage)?;
        }
        Stage::MrFinetune => {
            required(&data.train, "train", stage)?;
        }
        Stage::Selfsup => {
            required(&data.subject, "subject", stage)?;
        }
    }
    let start = starting_point(stage, &mut r)?;
    let cfg = r.config;
    let text = cfg.to_toml();
    let mut run = RunDir::create(run_path, force, stage.tag(), &text, cfg.train.seed).map_err(flag_error)?;
    let result = (|| -> Result<train::StageOutcome, CliError> {
        let loaded = match stage {
            Stage::VideoPretrain => StageData::Videos(load_videos(data.videos.as_ref().unwrap(), data.frame_size)?),
            Stage::MrFinetune => StageData::Volumes(
                load_dir(data.train.as_ref().unwrap())?,
                match &data.validation {
                    Some(d) => load_dir(d)?,
                    None => Vec::new(),
                },
            ),
            Stage::Selfsup => StageData::Subject(load_volume(data.subject.as_ref().unwrap())?),
        };
        run.begin_training(stage, cfg.train.epochs, cfg.train.checkpoint_every)?;
        let out = match &loaded {
            StageData::Videos(seqs) => train::train_stage1(seqs, &cfg.train, start, &mut run)?,
            StageData::Volumes(hr, val) => train::train_stage2(hr, val, &cfg.train, start, &mut run)?,
            StageData::Subject(v) => train::train_stage3(v, &cfg.train, start, &mut run)?,
        };
        Ok(out)
    })();
    let out = match result {
        Ok(o) => o,
        Err(e) => {
            run.message(&format!("error: {e}"));
            return Err(e);
        }
    };
    run.finish_training(&out.checkpoint, out.wall_clock_s)?;
    run.message(&format!(
        "finished {stage} after {} epochs in {:.2} s, lineage {}",
        out.checkpoint.epoch,
        out.wall_clock_s,
        lineage_string(&out.checkpoint.params.meta.lineage)
    ));
    Ok(out.checkpoint.params)
}

fn lineage_string(l: &[Stage]) -> String {
    if l.is_empty() {
        "none".into()
    } else {
        l.iter().map(|s| s.short()).collect::<Vec<_>>().join("+")
    }
}

/// Provenance written next to every `infer` output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferRecord {
    pub input: PathBuf,
    pub params: Option<PathBuf>,
    pub fingerprint: Option<String>,
    /// Training stages behind the output; empty for linear interpolation.
    pub lineage: Vec<Stage>,
    pub method: String,
    pub factor: Option<usize>,
    pub target_spacing: Option<f64>,
    pub tile: TileOptions,
    pub selfsup_run: Option<PathBuf>,
    pub output_dim: [usize; 3],
    pub output_spacing: [f64; 3],
    pub wall_clock_s: f64,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(LINEAGE_SUFFIX);
    PathBuf::from(s)
}

pub fn infer(a: InferArgs) -> Result<(), CliError> {
    let clock = Instant::now();
    let opts = TileOptions {
        tile: a.tile,
        overlap: a.overlap,
    };
    opts.validate().map_err(flag_error)?;
    if a.factor.is_some_and(|n| n < 2) {
        return Err(usage("--factor must be at least 2"));
    }
    if a.target_spacing.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
        return Err(usage("--target-spacing must be positive"));
    }
    let selfsup = a.selfsup && !a.no_selfsup;
    if selfsup && a.method == Method::Linear {
        return Err(usage("--selfsup needs --method model"));
    }
    if a.method == Method::Model && a.params.is_none() {
        return Err(usage("--params is required for --method model"));
    }
    let lr = load_volume(&a.input)?;
    let mut selfsup_run = None;
    let params = match (&a.method, &a.params) {
        (Method::Linear, _) => None,
        (Method::Model, None) => unreachable!("checked above"),
        (Method::Model, Some(p)) if selfsup => {
            let mut r = match &a.selfsup_config {
                Some(c) => resolve_file(c, Stage::Selfsup)?,
                None => resolve_text("", Stage::Selfsup)?,
            };
            let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
            r.config.data.subject = Some(abs(&a.input));
            r.config.init = Some(abs(p));
            r.config.resume = None;
            if !r.explicit_train.iter().any(|k| k == "downsample_factor") {
                let n = match (a.factor, a.target_spacing) {
                    (Some(n), _) => n,
                    (None, Some(t)) => (lr.spacing()[2] / t).round().max(2.0) as usize,
                    (None, None) => unreachable!("clap requires one of them"),
                };
                r.config.train.downsample_factor = n;
            }
            let run = a.run.clone().unwrap_or_else(|| {
                let mut s = a.out.as_os_str().to_owned();
                s.push(".selfsup");
                PathBuf::from(s)
            });
            let params = run_training(Stage::Selfsup, r, &run, a.force)?;
            selfsup_run = Some(run);
            Some(params)
        }
        (Method::Model, Some(p)) => Some(ModelParams::load(p)?),
    };
    let method = match a.method {
        Method::Model => "model",
        Method::Linear => "linear",
    };
    let lineage = params.as_ref().map(|p| p.meta.lineage.clone()).unwrap_or_default();
    let fingerprint = params.as_ref().map(ModelParams::fingerprint);
    let interp = InterpolatorRegistry::default()
        .build(method, params.map(Arc::new))
        .map_err(flag_error)?;
    let sr = match (a.factor, a.target_spacing) {
        (Some(n), _) => resolve_with(&lr, interp.as_ref(), n, opts)?,
        (None, Some(t)) => resolve_continuous_with(&lr, interp.as_ref(), t, opts).map_err(flag_error)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    save_volume(&a.out, &sr)?;
    let record = InferRecord {
        input: a.input.clone(),
        params: a.params.clone(),
        fingerprint,
        lineage,
        method: method.into(),
        factor: a.factor,
        target_spacing: a.target_spacing,
        tile: opts,
        selfsup_run,
        output_dim: sr.dim(),
        output_spacing: sr.spacing(),
        wall_clock_s: clock.elapsed().as_secs_f64(),
    };
    write_json(&sidecar_path(&a.out), &record)?;
    log::info!(
        "{} {:?} -> {} {:?} ({method}, lineage {}) in {:.2} s",
        a.input.display(),
        lr.dim(),
        a.out.display(),
        sr.dim(),
        lineage_string(&record.lineage),
        record.wall_clock_s
    );
    println!("{}", a.out.display());
    Ok(())
}

/// What `evaluate` leaves next to its CSV for `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub label: String,
    /// Stages behind the evaluated volumes, when their sidecars agree.
    pub lineage: Option<Vec<Stage>>,
    pub ref_dir: PathBuf,
    pub test_dir: PathBuf,
    pub report: MetricReport,
}

fn subject_key(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".raw"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name
}

/// Drops trailing reference slices beyond the upsampled grid (a volume of
/// `z` slices degraded by `n` comes back with `(ceil(z / n) - 1) n + 1`).
fn align_reference(reference: Volume, test: &Volume) -> crate::Result<Volume> {
    use crate::degrade::Patchable;
    let [x, y, z] = reference.dim();
    let [tx, ty, tz] = test.dim();
    if (x, y) == (tx, ty) && tz < z {
        log::info!("{}: comparing the first {tz} of {z} reference slices", reference.subject_id());
        return reference.crop_at([0, 0, 0], [x, y, tz]);
    }
    Ok(reference)
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let refs = list_volumes(&a.ref_dir)?;
    if refs.is_empty() {
        return Err(CliError::Runtime(Error::InvalidArgument(format!(
            "no volumes in {}",
            a.ref_dir.display()
        ))));
    }
    let tests: BTreeMap<String, PathBuf> = list_volumes(&a.test_dir)?
        .into_iter()
        .map(|p| (subject_key(&p), p))
        .collect();
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    let mut lineages = Vec::new();
    for rp in &refs {
        let key = subject_key(rp);
        let Some(tp) = tests.get(&key) else {
            log::warn!("no test volume for {key}");
            missing.push((key, "no matching test volume".to_string()));
            continue;
        };
        let test = load_volume(tp)?.with_subject_id(key.clone());
        let reference = align_reference(load_volume(rp)?.with_subject_id(key), &test)?;
        let side = sidecar_path(tp);
        lineages.push(if side.exists() {
            let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            let rec: InferRecord = serde_json::from_str(&text).map_err(Error::from)?;
            Some(rec.lineage)
        } else {
            None
        });
        pairs.push((reference, test));
    }
    if pairs.is_empty() {
        return Err(CliError::Runtime(Error::InvalidArgument(
            "no reference volume has a matching test volume".into(),
        )));
    }
    let mut report = evaluate_dataset(&pairs)?;
    report.failures.extend(missing);
    if let Some(dir) = &a.error_maps {
        for (r, t) in &pairs {
            let Ok(map) = error_map(r, t) else { continue };
            let z = map.dim().2 / 2;
            let files = save_error_maps(&map, &[z], a.vmax, &dir.join(r.subject_id()))?;
            log::debug!("wrote {:?}", files);
        }
    }
    if let Some(parent) = a.out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    report.save_csv(&a.out_csv)?;
    if let Some(md) = &a.report_md {
        fs::write(md, report.to_markdown()).map_err(|e| Error::io(md, e))?;
    }
    let lineage = match lineages.split_first() {
        Some((first @ Some(_), rest)) if rest.iter().all(|l| l == first) => first.clone(),
        _ => {
            if lineages.iter().any(Option::is_some) {
                log::warn!("test volumes have missing or differing lineage sidecars");
            }
            None
        }
    };
    let label = a.label.clone().unwrap_or_else(|| {
        a.test_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "test".into())
    });
    let record = EvaluationRecord {
        label,
        lineage,
        ref_dir: a.ref_dir.clone(),
        test_dir: a.test_dir.clone(),
        report,
    };
    let json = a
        .out_csv
        .parent()
        .map(|p| p.join(EVALUATION_FILE))
        .unwrap_or_else(|| PathBuf::from(EVALUATION_FILE));
    write_json(&json, &record)?;
    let agg = &record.report.aggregate;
    println!(
        "{}: PSNR {:.2} ± {:.2} dB, SSIM {:.4} ± {:.4} over {} subjects",
        record.label, agg.psnr.mean, agg.psnr.sd, agg.ssim.mean, agg.ssim.sd, agg.n
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_keys_strip_volume_extensions() {
        assert_eq!(subject_key(Path::new("/a/s01.nii.gz")), "s01");
        assert_eq!(subject_key(Path::new("s01.raw")), "s01");
        assert_eq!(sidecar_path(Path::new("o/s01.nii.gz")), Path::new("o/s01.nii.gz.lineage.json"));
    }

    #[test]
    fn reference_is_trimmed_to_the_upsampled_grid() {
        let r = Volume::new(ndarray::Array3::zeros((4, 4, 10)), [1.0; 3], "r").unwrap();
        let t = Volume::new(ndarray::Array3::zeros((4, 4, 9)), [1.0; 3], "r").unwrap();
        assert_eq!(align_reference(r.clone(), &t).unwrap().dim(), [4, 4, 9]);
        let other = Volume::new(ndarray::Array3::zeros((5, 4, 9)), [1.0; 3], "r").unwrap();
        assert_eq!(align_reference(r, &other).unwrap().dim(), [4, 4, 10]);
    }
}
