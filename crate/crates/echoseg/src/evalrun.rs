//! Checkpoint evaluation on the held-out test split.

use std::path::Path;

use ndarray::Array2;
use tapegrad::nn::ParamStore;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataio::{Dataset, Split};
use crate::mae::NormalizedCache;
use crate::metrics::MetricReport;
use crate::mpl::predict_slice;
use crate::networks::{MaeModel, SegModel};
use crate::{Error, Result};

/// Which parameter set of an adaptation checkpoint to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WhichModel {
    Student,
    Teacher,
}

impl WhichModel {
    pub fn prefix(self) -> &'static str {
        match self {
            WhichModel::Student => "student.",
            WhichModel::Teacher => "teacher.",
        }
    }
}

/// Build a segmentation model and load one parameter set from an
/// adaptation checkpoint.
pub fn load_seg_model(ck: &Checkpoint, cfg: &RunConfig, which: WhichModel) -> Result<SegModel<f32>> {
    if ck.meta.kind != "mpl" {
        return Err(Error::CheckpointMismatch(format!(
            "expected an adaptation checkpoint, got kind {:?}",
            ck.meta.kind
        )));
    }
    if ck.meta.encoder != cfg.networks.encoder {
        return Err(Error::CheckpointMismatch(
            "checkpoint encoder spec differs from configured spec".into(),
        ));
    }
    let dec_spec = ck.meta.decoder.clone().unwrap_or_else(|| cfg.networks.decoder.clone());
    let mae = MaeModel::<f32>::new(&cfg.networks.encoder, 0)?;
    let model = SegModel::from_mae(&mae, &dec_spec, 0);
    crate::mae::load_params(&model.store, ck, which.prefix())?;
    Ok(model)
}

pub struct EvalOutput {
    pub report: MetricReport,
    /// (subject, slice, echo, prediction at native resolution)
    pub predictions: Vec<(String, u32, usize, Array2<u8>)>,
}

/// Evaluate a model on every test slice at the given echoes.
pub fn evaluate_model(
    model: &SegModel<f32>,
    cfg: &RunConfig,
    ds: &Dataset,
    echoes: &[usize],
) -> Result<EvalOutput> {
    let store: &ParamStore<f32> = &model.store.borrow();
    let mut cache = NormalizedCache::new();
    let spacing = ds.manifest.pixel_spacing_mm;
    let mut report = MetricReport { pixel_spacing_mm: spacing, records: vec![] };
    let mut predictions = Vec::new();

    let entries: Vec<usize> = ds
        .manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Split::Test)
        .map(|(i, _)| i)
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }

    for &idx in &entries {
        let entry = &ds.manifest.entries[idx];
        let gt = ds.load_mask(entry)?;
        for &echo in echoes {
            let img = cache.get(ds, idx, echo)?.clone();
            let pred = predict_slice(model, store, &img)?;
            report.records.push(MetricReport::compute_slice(
                &entry.subject,
                entry.slice,
                echo,
                &pred,
                &gt,
                spacing,
                cfg.eval.nsd_tolerance_vox,
                cfg.eval.boundary_connectivity,
                cfg.eval.hd_percentile,
            )?);
            predictions.push((entry.subject.clone(), entry.slice, echo, pred));
        }
    }
    Ok(EvalOutput { report, predictions })
}

/// Evaluate one side of an adaptation checkpoint and write the CSV plus
/// per-slice prediction masks.
pub fn evaluate_checkpoint_to_dir(
    ck: &Checkpoint,
    cfg: &RunConfig,
    ds: &Dataset,
    which: WhichModel,
    echoes: &[usize],
    out_dir: &Path,
    label: &str,
) -> Result<MetricReport> {
    let model = load_seg_model(ck, cfg, which)?;
    let out = evaluate_model(&model, cfg, ds, echoes)?;
    let csv_path = out_dir.join(format!("eval_{label}.csv"));
    out.report.write_csv(&csv_path)?;
    let pred_dir = out_dir.join(format!("pred_{label}"));
    std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    for (subject, slice, echo, pred) in &out.predictions {
        let p = pred_dir.join(format!("{subject}_sl{slice}_te{echo}.png"));
        crate::dataio::write_mask_png(&p, pred)?;
    }
    Ok(out.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn which_model_prefixes() {
        assert_eq!(WhichModel::Student.prefix(), "student.");
        assert_eq!(WhichModel::Teacher.prefix(), "teacher.");
    }
}
