//! Markdown tables and figures from `evaluate` outputs.

use std::fs;
use std::path::{Path, PathBuf};

use super::commands::EvaluationRecord;
use super::{CliError, ReportArgs, EVALUATION_FILE};
use crate::error::Error;
use crate::io::load_volume;
use crate::metrics::{comparison_grid, fmt_fixed, Aggregate};
use crate::model::Stage;

pub fn load_evaluation(path: &Path) -> crate::Result<EvaluationRecord> {
    let file = if path.is_dir() { path.join(EVALUATION_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn metric_cells(a: &Aggregate) -> String {
    format!(
        "{} | {} | {} | {}",
        fmt_fixed(a.psnr.mean, 2),
        fmt_fixed(a.psnr.sd, 2),
        fmt_fixed(a.ssim.mean, 4),
        fmt_fixed(a.ssim.sd, 4)
    )
}

fn notes(rows: &[EvaluationRecord]) -> String {
    let mut s = String::new();
    for r in rows {
        let a = &r.report.aggregate;
        if a.degenerate {
            s += &format!("\n{}: fewer than two subjects, SD reported as 0.\n", r.label);
        }
        if !r.report.failures.is_empty() {
            s += &format!("\n{}: {} subject(s) skipped.\n", r.label, r.report.failures.len());
        }
    }
    s
}

/// One row per run with a check mark for each training stage it went through.
pub fn ablation_table(rows: &[EvaluationRecord]) -> String {
    let mut s = String::from(
        "| VP | SF | SSF | PSNR Mean | PSNR SD | SSIM Mean | SSIM SD |\n\
         |:--:|:--:|:---:|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let mark = |stage: Stage| match &r.lineage {
            Some(l) if l.contains(&stage) => "✓",
            Some(_) => "",
            None => "?",
        };
        s += &format!(
            "| {} | {} | {} | {} |\n",
            mark(Stage::VideoPretrain),
            mark(Stage::MrFinetune),
            mark(Stage::Selfsup),
            metric_cells(&r.report.aggregate)
        );
    }
    s + &notes(rows)
}

/// One row per method, labelled by the evaluation's label.
pub fn methods_table(rows: &[EvaluationRecord]) -> String {
    let mut s = String::from(
        "| Method | PSNR Mean | PSNR SD | SSIM Mean | SSIM SD |\n\
         |---|---:|---:|---:|---:|\n",
    );
    for r in rows {
        s += &format!("| {} | {} |\n", r.label, metric_cells(&r.report.aggregate));
    }
    s + &notes(rows)
}

fn parse_labelled(spec: &str) -> Result<(String, PathBuf), CliError> {
    match spec.split_once('=') {
        Some((l, p)) if !l.is_empty() && !p.is_empty() => Ok((l.to_string(), PathBuf::from(p))),
        _ => Err(CliError::Usage(format!("--test expects LABEL=PATH, got '{spec}'"))),
    }
}

fn figure(a: &ReportArgs, out: &Path) -> Result<(), CliError> {
    let reference = load_volume(a.reference.as_ref().expect("clap requires --ref"))?;
    let tests = a
        .test
        .iter()
        .map(|s| parse_labelled(s))
        .collect::<Result<Vec<_>, _>>()?;
    let vols = tests
        .iter()
        .map(|(_, p)| load_volume(p))
        .collect::<crate::Result<Vec<_>>>()?;
    let z = a.slice.unwrap_or(reference.dim()[2] / 2);
    let refs: Vec<_> = vols.iter().collect();
    let img = comparison_grid(&reference, &refs, z, a.vmax)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(out).map_err(Error::from)?;
    let labels: Vec<&str> = tests.iter().map(|t| t.0.as_str()).collect();
    log::info!(
        "columns: reference, {}; top row slices, bottom row |error| up to {}",
        labels.join(", "),
        a.vmax
    );
    println!("{}", out.display());
    Ok(())
}

pub fn run(a: ReportArgs) -> Result<(), CliError> {
    if let Some(out) = &a.figure {
        return figure(&a, out);
    }
    let (paths, render): (&[PathBuf], fn(&[EvaluationRecord]) -> String) = if !a.ablation.is_empty() {
        (&a.ablation, ablation_table)
    } else {
        (&a.methods, methods_table)
    };
    let rows = paths
        .iter()
        .map(|p| load_evaluation(p))
        .collect::<crate::Result<Vec<_>>>()?;
    let md = render(&rows);
    match &a.out {
        Some(p) => fs::write(p, &md).map_err(|e| Error::io(p, e))?,
        None => print!("{md}"),
    }
    Ok(())
}
