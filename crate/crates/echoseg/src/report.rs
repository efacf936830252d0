//! Result tables and figures from evaluation CSVs and loss logs.
//!
//! The comparison table mirrors the layout used for the clinical study
//! this pipeline is modeled on: one sub-table per echo, rows are runs,
//! columns are Dice / IoU / Acc / NSD (all in %) and HD (in mm).

use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::Dataset;
use crate::metrics::MetricReport;
use crate::{Error, Result};

/// Reference values reported for the original clinical cohort at TE5
/// (Dice in percent, HD in millimeters). The cohort is private and the
/// phantom is synthetic, so these are context only and are explicitly
/// NOT reproducible by this artifact.
pub const CLINICAL_REFERENCE_TE5_DICE_PCT: f64 = 90.1;
pub const CLINICAL_REFERENCE_TE5_HD_MM: f64 = 17.250;

pub struct NamedReport {
    pub name: String,
    pub report: MetricReport,
}

/// Render the per-echo comparison table as plain text.
pub fn comparison_table(reports: &[NamedReport]) -> String {
    let mut echoes: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.report.records.iter().map(|x| x.echo))
        .collect();
    echoes.sort_unstable();
    echoes.dedup();

    let mut out = String::new();
    for echo in echoes {
        let _ = writeln!(out, "TE{} (echo index {echo})", echo + 1);
        let _ = writeln!(out, "{:<24} {:>8} {:>8} {:>8} {:>8} {:>10}", "Run", "Dice", "IoU", "Acc", "NSD", "HD");
        for r in reports {
            let aggs = r.report.aggregates();
            if let Some(a) = aggs.iter().find(|a| a.echo == echo) {
                let hd = if a.hd_mm.is_nan() {
                    format!("{:>10}", "inf*")
                } else if a.hd_infinite_count > 0 {
                    format!("{:>9.3}*", a.hd_mm)
                } else {
                    format!("{:>10.3}", a.hd_mm)
                };
                let _ = writeln!(
                    out,
                    "{:<24} {:>7.1}% {:>7.1}% {:>7.1}% {:>7.1}% {hd}",
                    r.name,
                    a.dice * 100.0,
                    a.iou * 100.0,
                    a.acc * 100.0,
                    a.nsd * 100.0,
                );
            }
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "Reference (original clinical study, TE5): Dice {CLINICAL_REFERENCE_TE5_DICE_PCT:.1}%, HD {CLINICAL_REFERENCE_TE5_HD_MM:.3} mm."
    );
    let _ = writeln!(
        out,
        "That cohort is private clinical data; results on this synthetic phantom are NOT comparable and do not reproduce it."
    );
    let _ = writeln!(out, "* at least one slice had an empty surface; its HD is excluded from the mean.");
    out
}

/// Aggregate rows as CSV (one row per run x echo).
pub fn comparison_csv(reports: &[NamedReport]) -> String {
    let mut out = String::from("run,echo,n_slices,dice,iou,acc,nsd,hd_mm,hd_infinite_count\n");
    for r in reports {
        for a in r.report.aggregates() {
            let _ = writeln!(
                out,
                "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
                r.name, a.echo, a.n_slices, a.dice, a.iou, a.acc, a.nsd, a.hd_mm, a.hd_infinite_count
            );
        }
    }
    out
}

/// Write table.txt / table.csv plus loss-curve PNGs and, when a dataset and
/// prediction directories are available, overlay panels per test slice.
pub fn write_report(
    out_dir: &Path,
    reports: &[NamedReport],
    loss_logs: &[(String, std::path::PathBuf)],
    dataset: Option<&Dataset>,
    pred_dirs: &[(String, std::path::PathBuf)],
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table = comparison_table(reports);
    std::fs::write(out_dir.join("table.txt"), &table).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(out_dir.join("table.csv"), comparison_csv(reports))
        .map_err(|e| Error::io(out_dir, e))?;

    for (name, log_path) in loss_logs {
        let series = read_loss_log(log_path)?;
        crate::viz::loss_curve_png(&out_dir.join(format!("loss_{name}.png")), &series)?;
    }

    if let Some(ds) = dataset {
        let mut cache = crate::mae::NormalizedCache::new();
        for (name, pred_dir) in pred_dirs {
            let ov_dir = out_dir.join(format!("overlays_{name}"));
            std::fs::create_dir_all(&ov_dir).map_err(|e| Error::io(&ov_dir, e))?;
            for (idx, entry) in ds.manifest.entries.iter().enumerate() {
                if entry.split != crate::dataio::Split::Test {
                    continue;
                }
                let gt = ds.load_mask(entry)?;
                for img_ref in &entry.images {
                    let pred_path =
                        pred_dir.join(format!("{}_sl{}_te{}.png", entry.subject, entry.slice, img_ref.echo));
                    if !pred_path.exists() {
                        continue;
                    }
                    let pred = crate::dataio::read_mask_png(&pred_path)?;
                    let input = cache.get(ds, idx, img_ref.echo)?.clone();
                    crate::viz::overlay_panel(
                        &ov_dir.join(format!("{}_sl{}_te{}.png", entry.subject, entry.slice, img_ref.echo)),
                        &input,
                        &pred,
                        &gt,
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Parse a loss log CSV into named numeric series (first column is the
/// step axis and is skipped).
pub fn read_loss_log(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format(format!("{}: empty log", path.display())))?;
    let names: Vec<String> = header.split(',').skip(1).map(|s| s.to_string()).collect();
    let mut series: Vec<(String, Vec<f64>)> = names.into_iter().map(|n| (n, Vec::new())).collect();
    for line in lines {
        for (i, field) in line.split(',').skip(1).enumerate() {
            if i < series.len() {
                series[i].1.push(field.parse().unwrap_or(f64::NAN));
            }
        }
    }
    Ok(series)
}
