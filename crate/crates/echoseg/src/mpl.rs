//! Stage 2: teacher-student masked pseudo-label adaptation from the
//! labeled source echo to an unlabeled target echo, with staged EMA,
//! global-local collaboration, cross-echo semantic consistency, warm-up
//! and early stopping.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::nn::{Binder, ParamStore};
use tapegrad::optim::{AdamW, AdamWConfig};
use tapegrad::Graph;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{EmaStageConfig, RunConfig};
use crate::dataio::{Dataset, Split};
use crate::dataprep::{self, ViewKind, ViewPair};
use crate::losses;
use crate::mae::NormalizedCache;
use crate::networks::{logits_to_mask, MaeModel, SegModel};
use crate::{Error, Result};

/// Staged EMA schedule: `alpha_at(step)` is the alpha of the first stage
/// whose `until_step` exceeds the step; the final stage applies forever.
#[derive(Clone, Debug)]
pub struct EmaSchedule {
    stages: Vec<(Option<u64>, f64)>,
}

impl EmaSchedule {
    pub fn from_config(stages: &[EmaStageConfig]) -> Result<EmaSchedule> {
        if stages.is_empty() {
            return Err(Error::Config("EMA schedule needs at least one stage".into()));
        }
        if stages.last().unwrap().until_step.is_some() {
            return Err(Error::Config("final EMA stage must be unbounded".into()));
        }
        let mut prev_t: Option<u64> = None;
        let mut prev_a = 0.0f64;
        for (i, s) in stages.iter().enumerate() {
            if !(0.0 < s.alpha && s.alpha < 1.0) {
                return Err(Error::Config(format!("EMA alpha {} must lie in (0, 1)", s.alpha)));
            }
            if s.alpha < prev_a {
                return Err(Error::Config("EMA alphas must be non-decreasing".into()));
            }
            prev_a = s.alpha;
            if i + 1 < stages.len() {
                let t = s.until_step.ok_or_else(|| {
                    Error::Config("only the final EMA stage may be unbounded".into())
                })?;
                if let Some(p) = prev_t {
                    if t <= p {
                        return Err(Error::Config("EMA thresholds must be strictly increasing".into()));
                    }
                }
                prev_t = Some(t);
            }
        }
        Ok(EmaSchedule { stages: stages.iter().map(|s| (s.until_step, s.alpha)).collect() })
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        for (until, alpha) in &self.stages {
            match until {
                Some(t) if step < *t => return *alpha,
                None => return *alpha,
                _ => {}
            }
        }
        self.stages.last().unwrap().1
    }
}

/// Elementwise `theta <- alpha*theta + (1-alpha)*phi`. The teacher is only
/// ever written here, never by the optimizer.
pub fn ema_update(teacher: &mut ParamStore<f32>, student: &ParamStore<f32>, alpha: f64) {
    let a = alpha as f32;
    for id in student.ids().collect::<Vec<_>>() {
        let phi = student.value(id);
        teacher
            .value_mut(id)
            .zip_mut_with(phi, |t, &p| *t = a * *t + (1.0 - a) * p);
    }
}

/// Student/teacher pair plus optimizer and early-stopping bookkeeping.
pub struct TrainState {
    pub student: SegModel<f32>,
    pub teacher: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub step: u64,
    pub epoch: u32,
    pub best_val_dice: f64,
    pub epochs_since_improvement: u32,
}

/// Build the adaptation model from a pretraining checkpoint: the encoder
/// (and reconstruction decoder) weights are retained, a fresh segmentation
/// head is attached, and the teacher starts as an exact copy.
pub fn init_from_mae(ck: &Checkpoint, cfg: &RunConfig) -> Result<TrainState> {
    if ck.meta.kind != "mae" {
        return Err(Error::CheckpointMismatch(format!(
            "expected a pretraining checkpoint, got kind {:?}",
            ck.meta.kind
        )));
    }
    if ck.meta.encoder != cfg.networks.encoder {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint encoder spec {:?} differs from configured {:?}",
            ck.meta.encoder, cfg.networks.encoder
        )));
    }
    let mae = MaeModel::<f32>::new(&cfg.networks.encoder, cfg.seed)?;
    crate::mae::load_params(&mae.store, ck, "")?;
    let student = SegModel::from_mae(&mae, &cfg.networks.decoder, cfg.seed ^ 0x5E6D_EC0D);
    let teacher = student.store.borrow().deep_clone();
    let opt = AdamW::new(
        AdamWConfig {
            lr: cfg.mpl.lr,
            beta1: cfg.mpl.beta1,
            beta2: cfg.mpl.beta2,
            eps: 1e-8,
            weight_decay: cfg.mpl.weight_decay,
        },
        &student.store.borrow(),
    );
    Ok(TrainState {
        student,
        teacher,
        opt,
        step: 0,
        epoch: 0,
        best_val_dice: f64::NEG_INFINITY,
        epochs_since_improvement: 0,
    })
}

/// Hard teacher predictions on an unmasked target view pair.
pub struct PseudoLabels {
    pub local: Array2<u8>,
    pub global_view: Array2<u8>,
}

pub fn pseudo_label(model: &SegModel<f32>, teacher: &ParamStore<f32>, pair: &ViewPair) -> Result<PseudoLabels> {
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::new(teacher);
    let out = model.forward_pair(
        &mut g,
        teacher,
        &mut binder,
        true,
        &pair.local,
        &pair.global_view,
        &pair.location,
        true,
    )?;
    let side = model.encoder.spec.view_size;
    let local = logits_to_mask(&g, out.logits, side);
    let global_view = logits_to_mask(&g, out.aux_global.as_ref().unwrap().logits, side);
    Ok(PseudoLabels { local, global_view })
}

/// Full-slice student/teacher prediction: whole-slice views, no masking,
/// resampled back to the slice's native resolution.
pub fn predict_slice(model: &SegModel<f32>, store: &ParamStore<f32>, slice_norm: &Array2<f32>) -> Result<Array2<u8>> {
    let pair = dataprep::extract_views(slice_norm, None, 1.0, 0)?;
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::new(store);
    let out = model.forward_pair(
        &mut g,
        store,
        &mut binder,
        true,
        &pair.local,
        &pair.global_view,
        &pair.location,
        false,
    )?;
    let side = model.encoder.spec.view_size;
    let pred = logits_to_mask(&g, out.logits, side);
    let (h, w) = slice_norm.dim();
    Ok(dataprep::resize_nearest(&pred, h, w))
}

pub struct AdaptOutput {
    pub best_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub best_val_dice: f64,
    pub best_epoch: u32,
    pub epochs_run: u32,
    pub stopped_early: bool,
}

struct StepLosses {
    mpl: f64,
    glc: f64,
    sc: f64,
    fss: f64,
    total: f64,
}

pub fn adapt(cfg: &RunConfig, dataset_dir: &Path, mae_ckpt: &Path, out_dir: &Path) -> Result<AdaptOutput> {
    let ds = Dataset::open(dataset_dir)?;
    let schedule = EmaSchedule::from_config(&cfg.mpl.ema_stages)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let panels_dir = out_dir.join("panels");
    std::fs::create_dir_all(&panels_dir).map_err(|e| Error::io(&panels_dir, e))?;

    let source_echo = ds.manifest.source_echo;
    let target_echo = cfg.mpl.target_echo;

    // Adapt-split slices; source echo is labeled, target echo is not.
    let adapt_entries: Vec<usize> = ds
        .manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Split::Adapt)
        .map(|(i, _)| i)
        .collect();
    if adapt_entries.is_empty() {
        return Err(Error::InvalidArgument("adaptation split is empty".into()));
    }
    if !cfg.mpl.source_only {
        for &i in &adapt_entries {
            let e = &ds.manifest.entries[i];
            if !e.images.iter().any(|im| im.echo == target_echo) {
                return Err(Error::InvalidArgument(format!(
                    "target echo {target_echo} not stored for {}[{}]",
                    e.subject, e.slice
                )));
            }
        }
    }

    let ck = Checkpoint::load(mae_ckpt)?;
    let mut state = init_from_mae(&ck, cfg)?;
    let mut cache = NormalizedCache::new();

    // Held-out source-validation slices for early stopping (subject-level
    // grouping keeps both slices of a subject together).
    let mut order = adapt_entries.clone();
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A11_D5E7);
    for i in (1..order.len()).rev() {
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((order.len() as f64 * cfg.mpl.val_fraction).round() as usize).clamp(1, order.len() - 1);
    let val_entries: Vec<usize> = order[..n_val].to_vec();
    let train_entries: Vec<usize> = order[n_val..].to_vec();

    let log_path = out_dir.join("loss_log.csv");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "step,mpl,glc,sc,fss,total,alpha").map_err(|e| Error::io(&log_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4D50_4C32);
    let mut best_snapshot: Option<(ParamStore<f32>, ParamStore<f32>)> = None;
    let mut best_epoch = 0u32;
    let mut stopped_early = false;

    'epochs: for epoch in 0..cfg.mpl.epochs as u32 {
        state.epoch = epoch;
        let warmup = (epoch as usize) < cfg.mpl.warmup_epochs || cfg.mpl.source_only;

        let mut idxs = train_entries.clone();
        for i in (1..idxs.len()).rev() {
            let j = rng.random_range(0..=i);
            idxs.swap(i, j);
        }

        for &entry_idx in &idxs {
            let losses = train_step(cfg, &ds, &mut cache, &mut state, &schedule, entry_idx, source_echo, target_echo, warmup, &mut rng, &panels_dir)?;
            if !losses.total.is_finite() {
                return Err(Error::NonFiniteLoss(state.step));
            }
            let alpha = schedule.alpha_at(state.step);
            writeln!(
                log,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
                state.step, losses.mpl, losses.glc, losses.sc, losses.fss, losses.total, alpha
            )
            .map_err(|e| Error::io(&log_path, e))?;
            state.step += 1;
        }

        // Source-validation Dice for early stopping.
        let val_dice = {
            let store = state.student.store.borrow();
            let mut acc = 0.0f64;
            for &vi in &val_entries {
                let entry = &ds.manifest.entries[vi];
                let img = cache.get(&ds, vi, source_echo)?.clone();
                let pred = predict_slice(&state.student, &store, &img)?;
                let gt = ds.load_mask(entry)?;
                acc += crate::metrics::dice(&pred, &gt)?;
            }
            acc / val_entries.len() as f64
        };

        if val_dice > state.best_val_dice + 1e-9 {
            state.best_val_dice = val_dice;
            state.epochs_since_improvement = 0;
            best_epoch = epoch;
            best_snapshot = Some((state.student.store.borrow().deep_clone(), state.teacher.deep_clone()));
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement >= cfg.mpl.patience_epochs as u32 {
                stopped_early = true;
                break 'epochs;
            }
        }
    }

    let (best_student, best_teacher) = best_snapshot
        .unwrap_or_else(|| (state.student.store.borrow().deep_clone(), state.teacher.deep_clone()));

    let best_path = out_dir.join("mpl_best.ckpt");
    let mut arrays = Vec::new();
    for (name, arr) in best_student.iter() {
        arrays.push((format!("student.{name}"), arr.clone()));
    }
    for (name, arr) in best_teacher.iter() {
        arrays.push((format!("teacher.{name}"), arr.clone()));
    }
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("best_val_dice".to_string(), format!("{:.9}", state.best_val_dice));
    extra.insert("best_epoch".to_string(), best_epoch.to_string());
    extra.insert("source_only".to_string(), cfg.mpl.source_only.to_string());
    extra.insert("target_echo".to_string(), target_echo.to_string());
    let meta = CheckpointMeta {
        kind: "mpl".into(),
        step: state.step,
        encoder: cfg.networks.encoder.clone(),
        decoder: Some(cfg.networks.decoder.clone()),
        config_sha256: cfg.sha256(),
        rng_seed: cfg.seed,
        rng_word_pos: rng.get_word_pos().to_string(),
        optimizer_step: state.opt.step_count(),
        extra,
    };
    Checkpoint { meta, arrays }.save(&best_path)?;

    Ok(AdaptOutput {
        best_checkpoint: best_path,
        loss_log: log_path,
        best_val_dice: state.best_val_dice,
        best_epoch,
        epochs_run: state.epoch + 1,
        stopped_early,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &RunConfig,
    ds: &Dataset,
    cache: &mut NormalizedCache,
    state: &mut TrainState,
    schedule: &EmaSchedule,
    entry_idx: usize,
    source_echo: usize,
    target_echo: usize,
    warmup: bool,
    rng: &mut ChaCha8Rng,
    panels_dir: &Path,
) -> Result<StepLosses> {
    let crop_seed: u64 = rng.random();
    let aug_seed: u64 = rng.random();
    let mask_seed_src: u64 = rng.random();
    let mask_seed_tgt: u64 = rng.random();

    let entry = &ds.manifest.entries[entry_idx];
    let gt_native = ds.load_mask(entry)?;

    // Source views with aligned labels; target views of the same slice and
    // crop so the semantic-consistency pair shares its location.
    let src_img = cache.get(ds, entry_idx, source_echo)?.clone();
    let mut src = dataprep::extract_views(&src_img, Some(&gt_native), cfg.dataprep.crop_fraction, crop_seed)?;
    if cfg.dataprep.augment_in_mpl {
        src = dataprep::augment(&src, cfg.dataprep.augment_prob, aug_seed);
    }
    let src_labels = src.labels.clone().expect("source views carry labels");

    let plan_src_l = dataprep::plan_mask(ViewKind::Local, cfg.dataprep.mask_ratio, mask_seed_src)?;
    let plan_src_g = dataprep::plan_mask(ViewKind::Global, cfg.dataprep.mask_ratio, mask_seed_src)?;
    let (src_masked_l, src_map_l) = dataprep::apply_mask(&src.local, &plan_src_l)?;
    let (src_masked_g, _) = dataprep::apply_mask(&src.global_view, &plan_src_g)?;

    let tgt_setup = if warmup {
        None
    } else {
        let tgt_img = cache.get(ds, entry_idx, target_echo)?.clone();
        let mut tgt = dataprep::extract_views(&tgt_img, None, cfg.dataprep.crop_fraction, crop_seed)?;
        if cfg.dataprep.augment_in_mpl {
            tgt = dataprep::augment(&tgt, cfg.dataprep.augment_prob, aug_seed);
        }
        // Teacher labels the unmasked target views.
        let pseudo = pseudo_label(&state.student, &state.teacher, &tgt)?;
        let plan_tgt_l = dataprep::plan_mask(ViewKind::Local, cfg.dataprep.mask_ratio, mask_seed_tgt)?;
        let plan_tgt_g = dataprep::plan_mask(ViewKind::Global, cfg.dataprep.mask_ratio, mask_seed_tgt)?;
        let (tgt_masked_l, tgt_map_l) = dataprep::apply_mask(&tgt.local, &plan_tgt_l)?;
        let (tgt_masked_g, _) = dataprep::apply_mask(&tgt.global_view, &plan_tgt_g)?;
        Some((tgt, pseudo, tgt_masked_l, tgt_masked_g, tgt_map_l))
    };

    let mut g = Graph::<f32>::new();
    let store = state.student.store.borrow();
    let mut binder = Binder::new(&store);
    let lw = &cfg.loss;

    // Unmasked source pass: fully-supervised term plus the source side of
    // global-local collaboration.
    let fwd_s = state.student.forward_pair(
        &mut g, &store, &mut binder, false, &src.local, &src.global_view, &src.location, true,
    )?;
    let fss = losses::seg_loss(&mut g, fwd_s.logits, &src_labels.local)?;
    let glc_src = losses::glc_loss(
        &mut g,
        fwd_s.aux_global.as_ref().unwrap().logits,
        &src_labels.global_view,
        fwd_s.pooled_local,
        fwd_s.pooled_global,
        lw.gamma_glc,
        lw.delta_glc,
        lw.epsilon,
        lw.paper_literal_cosine,
    )?;

    // Masked source pass (the beta term of the pseudo-label objective).
    let fwd_sm = state.student.forward_pair(
        &mut g, &store, &mut binder, false, &src_masked_l, &src_masked_g, &src.location, false,
    )?;
    let seg_sm = losses::seg_loss(&mut g, fwd_sm.logits, &src_labels.local)?;

    let (total, parts) = if let Some((tgt, pseudo, tgt_masked_l, tgt_masked_g, tgt_map_l)) = &tgt_setup {
        // Masked target pass.
        let fwd_tm = state.student.forward_pair(
            &mut g, &store, &mut binder, false, tgt_masked_l, tgt_masked_g, &tgt.location, true,
        )?;
        let seg_tm = losses::seg_loss(&mut g, fwd_tm.logits, &pseudo.local)?;
        let beta_sm = g.scale(seg_sm, lw.beta as f32);
        let mpl = g.add(seg_tm, beta_sm);

        let glc_tgt = losses::glc_loss(
            &mut g,
            fwd_tm.aux_global.as_ref().unwrap().logits,
            &pseudo.global_view,
            fwd_tm.pooled_local,
            fwd_tm.pooled_global,
            lw.gamma_glc,
            lw.delta_glc,
            lw.epsilon,
            lw.paper_literal_cosine,
        )?;
        let glc_sum = g.add(glc_src, glc_tgt);
        let glc = g.scale(glc_sum, 0.5);

        // Same-location source/target feature alignment on the masked
        // student passes; decoder features come from the segmentation head.
        let sc = losses::semantic_consistency(
            &mut g,
            fwd_sm.pooled_local,
            fwd_tm.pooled_local,
            fwd_sm.pooled_dec,
            fwd_tm.pooled_dec,
            lw.lambda_enc,
            lw.lambda_dec,
            lw.epsilon,
            lw.paper_literal_cosine,
        );

        let total = losses::mpl_total(&mut g, mpl, glc, sc, fss, lw.gamma_sc_mpl);
        let parts = StepLosses {
            mpl: f64::from(g.scalar_value(mpl)),
            glc: f64::from(g.scalar_value(glc)),
            sc: f64::from(g.scalar_value(sc)),
            fss: f64::from(g.scalar_value(fss)),
            total: f64::from(g.scalar_value(total)),
        };

        if cfg.mpl.panel_every > 0 && (state.step + 1) % cfg.mpl.panel_every == 0 {
            let side = state.student.encoder.spec.view_size;
            crate::viz::mpl_panel(
                &panels_dir.join(format!("step_{:06}.png", state.step + 1)),
                [
                    &src.local,
                    &src.global_view,
                    &mask_to_f32(&src_labels.local),
                    &mask_to_f32(&logits_to_mask(&g, fwd_s.logits, side)),
                    &mask_to_f32(&logits_to_mask(&g, fwd_s.aux_global.as_ref().unwrap().logits, side)),
                    &src_map_l,
                ],
                [
                    &tgt.local,
                    &tgt.global_view,
                    &mask_to_f32(&pseudo.local),
                    &mask_to_f32(&logits_to_mask(&g, fwd_tm.logits, side)),
                    &mask_to_f32(&logits_to_mask(&g, fwd_tm.aux_global.as_ref().unwrap().logits, side)),
                    tgt_map_l,
                ],
            )?;
        }
        (total, parts)
    } else {
        // Warm-up / source-only: trusted supervision + the source side of
        // collaboration; no pseudo-label or cross-echo terms exist in the
        // graph, so target inputs cannot influence any gradient.
        let beta_sm = g.scale(seg_sm, lw.beta as f32);
        let partial = g.add(fss, beta_sm);
        let total = g.add(partial, glc_src);
        let parts = StepLosses {
            mpl: f64::from(g.scalar_value(beta_sm)),
            glc: f64::from(g.scalar_value(glc_src)),
            sc: 0.0,
            fss: f64::from(g.scalar_value(fss)),
            total: f64::from(g.scalar_value(total)),
        };
        (total, parts)
    };

    let mut grads = g.backward(total);
    let gs = binder.collect_grads(&mut grads);
    drop(store);
    state.opt.step(&mut state.student.store.borrow_mut(), &gs);

    let alpha = schedule.alpha_at(state.step);
    ema_update(&mut state.teacher, &state.student.store.borrow(), alpha);

    Ok(parts)
}

fn mask_to_f32(m: &Array2<u8>) -> Array2<f32> {
    m.mapv(|v| f32::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EmaStageConfig;

    fn default_schedule() -> EmaSchedule {
        EmaSchedule::from_config(&[
            EmaStageConfig { until_step: Some(1000), alpha: 0.99 },
            EmaStageConfig { until_step: Some(2000), alpha: 0.999 },
            EmaStageConfig { until_step: None, alpha: 0.9999 },
        ])
        .unwrap()
    }

    #[test]
    fn schedule_switches_exactly_at_thresholds() {
        let s = default_schedule();
        assert_eq!(s.alpha_at(0), 0.99);
        assert_eq!(s.alpha_at(999), 0.99);
        assert_eq!(s.alpha_at(1000), 0.999);
        assert_eq!(s.alpha_at(1500), 0.999);
        assert_eq!(s.alpha_at(1999), 0.999);
        assert_eq!(s.alpha_at(2000), 0.9999);
        assert_eq!(s.alpha_at(1_000_000), 0.9999);
    }

    #[test]
    fn schedule_validation() {
        assert!(EmaSchedule::from_config(&[]).is_err());
        // Final stage must be unbounded.
        assert!(EmaSchedule::from_config(&[EmaStageConfig { until_step: Some(10), alpha: 0.9 }]).is_err());
        // Alphas must be in (0,1) and non-decreasing.
        assert!(EmaSchedule::from_config(&[EmaStageConfig { until_step: None, alpha: 1.0 }]).is_err());
        assert!(EmaSchedule::from_config(&[
            EmaStageConfig { until_step: Some(5), alpha: 0.999 },
            EmaStageConfig { until_step: None, alpha: 0.99 },
        ])
        .is_err());
        // Thresholds strictly increasing.
        assert!(EmaSchedule::from_config(&[
            EmaStageConfig { until_step: Some(5), alpha: 0.9 },
            EmaStageConfig { until_step: Some(5), alpha: 0.99 },
            EmaStageConfig { until_step: None, alpha: 0.999 },
        ])
        .is_err());
    }

    fn vector_store(vals: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", ndarray::Array1::from_vec(vals.to_vec()).into_dyn());
        s
    }

    #[test]
    fn ema_scalar_probe() {
        // alpha=0.99, theta=1.0, phi=0.5 -> 0.995.
        let student = vector_store(&[0.5]);
        let mut teacher = vector_store(&[1.0]);
        ema_update(&mut teacher, &student, 0.99);
        let v = teacher.value(tapegrad::nn::ParamId(0)).as_slice().unwrap()[0];
        assert!((f64::from(v) - 0.995).abs() < 1e-6);
    }

    #[test]
    fn ema_geometric_decay_with_frozen_student() {
        // With phi fixed, |theta_n - phi| = alpha^n |theta_0 - phi|.
        for alpha in [0.99f64, 0.999, 0.9999] {
            let student = vector_store(&[0.25, -1.5, 3.0]);
            let mut teacher = vector_store(&[1.25, 0.5, -2.0]);
            let norm0 = {
                let t = teacher.value(tapegrad::nn::ParamId(0));
                let p = student.value(tapegrad::nn::ParamId(0));
                t.iter().zip(p.iter()).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>().sqrt()
            };
            let n = 100;
            for _ in 0..n {
                ema_update(&mut teacher, &student, alpha);
            }
            let norm_n = {
                let t = teacher.value(tapegrad::nn::ParamId(0));
                let p = student.value(tapegrad::nn::ParamId(0));
                t.iter().zip(p.iter()).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>().sqrt()
            };
            let expect = alpha.powi(n) * norm0;
            assert!(
                (norm_n - expect).abs() / expect < 1e-4,
                "alpha={alpha}: {norm_n} vs {expect}"
            );
        }
    }

    #[test]
    fn teacher_step_is_convex_combination() {
        // Per-step change norm == (1-alpha)*|theta - phi| and every
        // coordinate stays inside the [theta, phi] envelope.
        let student = vector_store(&[2.0, -3.0, 0.5, 7.0]);
        let mut teacher = vector_store(&[-1.0, 4.0, 0.5, 5.0]);
        let alpha = 0.99f64;
        let id = tapegrad::nn::ParamId(0);
        for _ in 0..50 {
            let before: Vec<f32> = teacher.value(id).iter().copied().collect();
            ema_update(&mut teacher, &student, alpha);
            let after: Vec<f32> = teacher.value(id).iter().copied().collect();
            let change: f64 = before
                .iter()
                .zip(after.iter())
                .map(|(a, b)| f64::from(b - a).powi(2))
                .sum::<f64>()
                .sqrt();
            let dist: f64 = before
                .iter()
                .zip(student.value(id).iter())
                .map(|(t, p)| f64::from(t - p).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((change - (1.0 - alpha) * dist).abs() < 1e-6);
            for ((b, a), p) in before.iter().zip(after.iter()).zip(student.value(id).iter()) {
                let lo = b.min(*p) - 1e-6;
                let hi = b.max(*p) + 1e-6;
                assert!(*a >= lo && *a <= hi, "coordinate escaped the hull");
            }
        }
    }
}
