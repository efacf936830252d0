//! Stage 1: self-supervised masked-autoencoder pretraining over the
//! unlabeled multi-echo pool, with cross-echo semantic consistency.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::nn::{Binder, ParamStore};
use tapegrad::optim::{AdamW, AdamWConfig};
use tapegrad::{Graph, Var};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataio::{Dataset, Split};
use crate::dataprep::{self, MaskPlan, ViewKind, ViewPair};
use crate::losses;
use crate::networks::MaeModel;
use crate::{Error, Result};

/// Normalized-image cache keyed by (entry index, echo).
pub struct NormalizedCache {
    images: HashMap<(usize, usize), Array2<f32>>,
}

impl NormalizedCache {
    pub fn new() -> Self {
        NormalizedCache { images: HashMap::new() }
    }

    pub fn get(&mut self, ds: &Dataset, entry_idx: usize, echo: usize) -> Result<&Array2<f32>> {
        if !self.images.contains_key(&(entry_idx, echo)) {
            let entry = &ds.manifest.entries[entry_idx];
            let raw = ds.load_image(entry, echo)?;
            let norm = dataprep::normalize(&raw, None)?;
            self.images.insert((entry_idx, echo), norm);
        }
        Ok(&self.images[&(entry_idx, echo)])
    }
}

impl Default for NormalizedCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Slices eligible for cross-echo pairing (at least two stored echoes).
pub struct MaePool {
    pub slices: Vec<PoolSlice>,
}

pub struct PoolSlice {
    pub entry_idx: usize,
    pub subject: String,
    pub slice: u32,
    pub echoes: Vec<usize>,
}

impl MaePool {
    pub fn from_dataset(ds: &Dataset) -> Result<MaePool> {
        let mut slices = Vec::new();
        for (idx, e) in ds.manifest.entries.iter().enumerate() {
            if e.split != Split::Mae {
                continue;
            }
            let echoes: Vec<usize> = e.images.iter().map(|i| i.echo).collect();
            if echoes.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "slice {}[{}] has {} echo(es); cross-echo pairing needs at least two",
                    e.subject,
                    e.slice,
                    echoes.len()
                )));
            }
            slices.push(PoolSlice { entry_idx: idx, subject: e.subject.clone(), slice: e.slice, echoes });
        }
        if slices.is_empty() {
            return Err(Error::InvalidArgument("pretraining pool is empty".into()));
        }
        Ok(MaePool { slices })
    }
}

/// One sampled cross-echo pair: same slice and crop rectangle, different
/// echo indices, identical mask seeds.
#[derive(Clone, Debug)]
pub struct EchoPairDraw {
    pub entry_idx: usize,
    pub subject: String,
    pub slice: u32,
    pub echo_i: usize,
    pub echo_j: usize,
    pub crop_seed: u64,
    pub aug_seed: u64,
    pub mask_seed: u64,
}

pub fn sample_echo_pair(pool: &MaePool, rng: &mut ChaCha8Rng) -> EchoPairDraw {
    let s = &pool.slices[rng.random_range(0..pool.slices.len())];
    let a = rng.random_range(0..s.echoes.len());
    let mut b = rng.random_range(0..s.echoes.len() - 1);
    if b >= a {
        b += 1;
    }
    EchoPairDraw {
        entry_idx: s.entry_idx,
        subject: s.subject.clone(),
        slice: s.slice,
        echo_i: s.echoes[a],
        echo_j: s.echoes[b],
        crop_seed: rng.random(),
        aug_seed: rng.random(),
        mask_seed: rng.random(),
    }
}

/// Views plus shared mask plans for a sampled pair.
pub struct MaterializedPair {
    pub view_i: ViewPair,
    pub view_j: ViewPair,
    pub plan_local: MaskPlan,
    pub plan_global: MaskPlan,
}

pub fn materialize_pair(
    ds: &Dataset,
    cache: &mut NormalizedCache,
    cfg: &RunConfig,
    draw: &EchoPairDraw,
    augment: bool,
) -> Result<MaterializedPair> {
    let build = |cache: &mut NormalizedCache, echo: usize| -> Result<ViewPair> {
        let img = cache.get(ds, draw.entry_idx, echo)?.clone();
        let mut pair = dataprep::extract_views(&img, None, cfg.dataprep.crop_fraction, draw.crop_seed)?;
        if augment {
            pair = dataprep::augment(&pair, cfg.dataprep.augment_prob, draw.aug_seed);
        }
        Ok(pair)
    };
    let view_i = build(cache, draw.echo_i)?;
    let view_j = build(cache, draw.echo_j)?;
    let plan_local = dataprep::plan_mask(ViewKind::Local, cfg.dataprep.mask_ratio, draw.mask_seed)?;
    let plan_global = dataprep::plan_mask(ViewKind::Global, cfg.dataprep.mask_ratio, draw.mask_seed)?;
    Ok(MaterializedPair { view_i, view_j, plan_local, plan_global })
}

struct EchoForward {
    mae: Var,
    z_enc: Var,
    z_dec: Var,
    recon_local: Var,
    mask_local: Array2<f32>,
}

/// Masked forward of one echo's local+global views; returns the
/// reconstruction objective and pooled features for semantic consistency.
fn forward_echo(
    g: &mut Graph<f32>,
    binder: &mut Binder,
    store: &ParamStore<f32>,
    model: &MaeModel<f32>,
    views: &ViewPair,
    plan_local: &MaskPlan,
    plan_global: &MaskPlan,
) -> Result<EchoForward> {
    let (masked_l, map_l) = dataprep::apply_mask(&views.local, plan_local)?;
    let (masked_g, map_g) = dataprep::apply_mask(&views.global_view, plan_global)?;

    let feat_l = model.encoder.encode(g, store, binder, false, &masked_l)?;
    let rec_l = model.decoder.forward(g, store, binder, false, feat_l);
    let feat_g = model.encoder.encode(g, store, binder, false, &masked_g)?;
    let rec_g = model.decoder.forward(g, store, binder, false, feat_g);

    let orig_l = g.constant(views.local.clone().into_dyn());
    let orig_g = g.constant(views.global_view.clone().into_dyn());
    let map_lc = g.constant(map_l.clone().into_dyn());
    let map_gc = g.constant(map_g.into_dyn());
    let mae = losses::mae_loss(g, rec_l.image, orig_l, map_lc, rec_g.image, orig_g, map_gc);

    let z_enc = g.mean_rows(feat_l.tokens);
    Ok(EchoForward { mae, z_enc, z_dec: rec_l.pooled_hidden, recon_local: rec_l.image, mask_local: map_l })
}

pub struct PretrainOutput {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub initial_total: f64,
    pub final_total: f64,
    pub steps_run: u64,
}

pub fn pretrain(cfg: &RunConfig, dataset_dir: &Path, out_dir: &Path) -> Result<PretrainOutput> {
    let ds = Dataset::open(dataset_dir)?;
    let pool = MaePool::from_dataset(&ds)?;
    let mut cache = NormalizedCache::new();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let panels_dir = out_dir.join("panels");
    std::fs::create_dir_all(&panels_dir).map_err(|e| Error::io(&panels_dir, e))?;

    let model = MaeModel::<f32>::new(&cfg.networks.encoder, cfg.seed)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.mae.lr,
            beta1: cfg.mae.beta1,
            beta2: cfg.mae.beta2,
            eps: 1e-8,
            weight_decay: cfg.mae.weight_decay,
        },
        &model.store.borrow(),
    );

    let loop_seed = cfg.seed ^ 0x4D41_4531; // stage salt
    let mut rng = ChaCha8Rng::seed_from_u64(loop_seed);
    let mut start_step = 0u64;

    if let Some(resume) = &cfg.mae.resume_from {
        let ck = Checkpoint::load(Path::new(resume))?;
        if ck.meta.encoder != cfg.networks.encoder {
            return Err(Error::CheckpointMismatch(format!(
                "resume checkpoint encoder spec {:?} differs from configured {:?}",
                ck.meta.encoder, cfg.networks.encoder
            )));
        }
        restore_model_and_optimizer(&model.store, &mut opt, &ck)?;
        start_step = ck.meta.step;
        rng = ChaCha8Rng::seed_from_u64(ck.meta.rng_seed);
        let pos: u128 = ck
            .meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Format("bad rng_word_pos in checkpoint".into()))?;
        rng.set_word_pos(pos);
    }

    let steps_per_epoch = pool.slices.len().div_ceil(cfg.mae.batch_size) as u64;
    let total_steps = cfg.mae.max_steps.unwrap_or(cfg.mae.epochs as u64 * steps_per_epoch);

    // Fixed held-out slice for the optional per-step evaluation loss.
    let holdout = if cfg.mae.holdout_eval_every > 0 {
        ds.manifest
            .entries
            .iter()
            .position(|e| e.split == Split::Test)
            .map(|idx| (idx, ds.manifest.mae_echoes[0]))
    } else {
        None
    };

    let log_path = out_dir.join("loss_log.csv");
    let mut log = open_log(&log_path, start_step == 0)?;

    let mut initial_total = f64::NAN;
    let mut final_total = f64::NAN;

    for step in start_step..total_steps {
        let mut g = Graph::<f32>::new();
        let store = model.store.borrow();
        let mut binder = Binder::new(&store);

        let mut pair_totals = Vec::with_capacity(cfg.mae.batch_size);
        let mut mse_terms = Vec::new();
        let mut sc_terms = Vec::new();
        let mut panel_data: Option<(MaterializedPair, EchoForward)> = None;

        for b in 0..cfg.mae.batch_size {
            let draw = sample_echo_pair(&pool, &mut rng);
            let mat = materialize_pair(&ds, &mut cache, cfg, &draw, cfg.dataprep.augment_in_mae)?;

            let fi = forward_echo(&mut g, &mut binder, &store, &model, &mat.view_i, &mat.plan_local, &mat.plan_global)?;
            let fj = forward_echo(&mut g, &mut binder, &store, &model, &mat.view_j, &mat.plan_local, &mat.plan_global)?;

            let mae_sum = g.add(fi.mae, fj.mae);
            let mae_mean = g.scale(mae_sum, 0.5);
            let sc = losses::semantic_consistency(
                &mut g,
                fi.z_enc,
                fj.z_enc,
                fi.z_dec,
                fj.z_dec,
                cfg.loss.lambda_enc,
                cfg.loss.lambda_dec,
                cfg.loss.epsilon,
                cfg.loss.paper_literal_cosine,
            );
            let total = losses::mae_total(&mut g, mae_mean, sc, cfg.loss.gamma_sc_mae);
            mse_terms.push(g.scalar_value(mae_mean) as f64);
            sc_terms.push(g.scalar_value(sc) as f64);
            pair_totals.push(total);
            if b == 0 {
                panel_data = Some((mat, fi));
            }
        }

        let mut batch_total = pair_totals[0];
        for &t in &pair_totals[1..] {
            batch_total = g.add(batch_total, t);
        }
        let batch_total = g.scale(batch_total, 1.0 / cfg.mae.batch_size as f32);
        let total_value = f64::from(g.scalar_value(batch_total));
        if !total_value.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        if step == start_step {
            initial_total = total_value;
        }
        final_total = total_value;

        let mut grads = g.backward(batch_total);
        let gs = binder.collect_grads(&mut grads);
        drop(store);
        opt.step(&mut model.store.borrow_mut(), &gs);

        let eval_mse = match &holdout {
            Some((entry_idx, echo)) if (step + 1) % cfg.mae.holdout_eval_every == 0 => {
                Some(holdout_recon_loss(&ds, &mut cache, cfg, &model, *entry_idx, *echo)?)
            }
            _ => None,
        };

        writeln!(
            log,
            "{},{:.9e},{:.9e},{:.9e},{}",
            step,
            mean(&mse_terms),
            mean(&sc_terms),
            total_value,
            eval_mse.map(|v| format!("{v:.9e}")).unwrap_or_default()
        )
        .map_err(|e| Error::io(&log_path, e))?;

        let done = step + 1 == total_steps;
        if cfg.mae.panel_every > 0 && ((step + 1) % cfg.mae.panel_every == 0 || done) {
            if let Some((mat, fi)) = &panel_data {
                let recon = array2_from_node(&g, fi.recon_local);
                let (masked_l, _) = dataprep::apply_mask(&mat.view_i.local, &mat.plan_local)?;
                let (masked_g, map_g) = dataprep::apply_mask(&mat.view_i.global_view, &mat.plan_global)?;
                let feat = {
                    // Recompute the global reconstruction for the panel.
                    let mut g2 = Graph::<f32>::new();
                    let store = model.store.borrow();
                    let mut b2 = Binder::new(&store);
                    let f = model.encoder.encode(&mut g2, &store, &mut b2, true, &masked_g)?;
                    let r = model.decoder.forward(&mut g2, &store, &mut b2, true, f);
                    array2_from_node(&g2, r.image)
                };
                crate::viz::mae_panel(
                    &panels_dir.join(format!("step_{:06}.png", step + 1)),
                    &mat.view_i.local,
                    &fi.mask_local,
                    &recon,
                    &mat.view_i.global_view,
                    &map_g,
                    &feat,
                )?;
                let _ = masked_l;
            }
        }

        if (cfg.mae.checkpoint_every > 0 && (step + 1) % cfg.mae.checkpoint_every == 0) || done {
            let path = out_dir.join(format!("mae_{:06}.ckpt", step + 1));
            save_mae_checkpoint(cfg, &model, &opt, step + 1, loop_seed, rng.get_word_pos(), &path)?;
        }
    }

    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_ckpt = out_dir.join(format!("mae_{total_steps:06}.ckpt"));
    if start_step >= total_steps {
        // Nothing ran; still emit a checkpoint for downstream stages.
        save_mae_checkpoint(cfg, &model, &opt, total_steps, loop_seed, rng.get_word_pos(), &final_ckpt)?;
    }
    Ok(PretrainOutput {
        final_checkpoint: final_ckpt,
        loss_log: log_path,
        initial_total,
        final_total,
        steps_run: total_steps.saturating_sub(start_step),
    })
}

fn open_log(path: &Path, fresh: bool) -> Result<std::fs::File> {
    let mut opts = std::fs::OpenOptions::new();
    if fresh {
        opts.write(true).create(true).truncate(true);
    } else {
        opts.append(true).create(true);
    }
    let mut f = opts.open(path).map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "step,mse,sc,total,eval_mse").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn array2_from_node(g: &Graph<f32>, v: Var) -> Array2<f32> {
    g.value(v).clone().into_dimensionality::<ndarray::Ix2>().unwrap()
}

/// Masked reconstruction loss on a fixed held-out slice with fixed seeds.
fn holdout_recon_loss(
    ds: &Dataset,
    cache: &mut NormalizedCache,
    cfg: &RunConfig,
    model: &MaeModel<f32>,
    entry_idx: usize,
    echo: usize,
) -> Result<f64> {
    let img = cache.get(ds, entry_idx, echo)?.clone();
    let views = dataprep::extract_views(&img, None, cfg.dataprep.crop_fraction, 0xE0A1)?;
    let plan_l = dataprep::plan_mask(ViewKind::Local, cfg.dataprep.mask_ratio, 0xE0A2)?;
    let plan_g = dataprep::plan_mask(ViewKind::Global, cfg.dataprep.mask_ratio, 0xE0A2)?;
    let mut g = Graph::<f32>::new();
    let store = model.store.borrow();
    let mut binder = Binder::new(&store);
    let f = forward_echo(&mut g, &mut binder, &store, model, &views, &plan_l, &plan_g)?;
    Ok(f64::from(g.scalar_value(f.mae)))
}

fn save_mae_checkpoint(
    cfg: &RunConfig,
    model: &MaeModel<f32>,
    opt: &AdamW<f32>,
    step: u64,
    rng_seed: u64,
    rng_word_pos: u128,
    path: &Path,
) -> Result<()> {
    let store = model.store.borrow();
    let mut arrays = crate::networks::store_to_arrays(&store);
    for (name, m, v) in opt.state_arrays(&store) {
        arrays.push((format!("adam.m.{name}"), m));
        arrays.push((format!("adam.v.{name}"), v));
    }
    let meta = CheckpointMeta {
        kind: "mae".into(),
        step,
        encoder: cfg.networks.encoder.clone(),
        decoder: None,
        config_sha256: cfg.sha256(),
        rng_seed,
        rng_word_pos: rng_word_pos.to_string(),
        optimizer_step: opt.step_count(),
        extra: Default::default(),
    };
    Checkpoint { meta, arrays }.save(path)
}

/// Restore parameters and optimizer moments from a checkpoint that carries
/// `adam.m.*` / `adam.v.*` arrays.
pub fn restore_model_and_optimizer(
    store: &tapegrad::nn::SharedStore<f32>,
    opt: &mut AdamW<f32>,
    ck: &Checkpoint,
) -> Result<()> {
    let mut st = store.borrow_mut();
    let mut moments = Vec::with_capacity(st.len());
    for id in st.ids().collect::<Vec<_>>() {
        let name = st.name(id).to_string();
        let arr = ck
            .array(&name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))?;
        if arr.shape() != st.value(id).shape() {
            return Err(Error::CheckpointMismatch(format!("parameter {name} shape mismatch")));
        }
        *st.value_mut(id) = arr.clone();
        let m = ck
            .array(&format!("adam.m.{name}"))
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing adam.m.{name}")))?;
        let v = ck
            .array(&format!("adam.v.{name}"))
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing adam.v.{name}")))?;
        moments.push((m.clone(), v.clone()));
    }
    opt.restore_state(&st, ck.meta.optimizer_step, moments);
    Ok(())
}

/// Load only the model parameters (no optimizer state) from a checkpoint.
pub fn load_params(store: &tapegrad::nn::SharedStore<f32>, ck: &Checkpoint, prefix: &str) -> Result<()> {
    let mut st = store.borrow_mut();
    for id in st.ids().collect::<Vec<_>>() {
        let name = format!("{prefix}{}", st.name(id));
        let arr = ck
            .array(&name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))?;
        if arr.shape() != st.value(id).shape() {
            return Err(Error::CheckpointMismatch(format!("parameter {name} shape mismatch")));
        }
        *st.value_mut(id) = arr.clone();
    }
    Ok(())
}

/// Mean cosine similarity between pooled encoder features of unmasked
/// same-location views at two echoes, over `n_pairs` random crops of the
/// test split. The semantic-consistency objective should raise this.
pub fn cross_echo_cosine(
    model: &MaeModel<f32>,
    ds: &Dataset,
    echo_a: usize,
    echo_b: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
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
    let mut cache = NormalizedCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.store.borrow();
    let mut total = 0.0f64;
    for k in 0..n_pairs {
        let entry_idx = entries[k % entries.len()];
        let crop_seed: u64 = rng.random();
        let mut pooled = Vec::with_capacity(2);
        for echo in [echo_a, echo_b] {
            let img = cache.get(ds, entry_idx, echo)?.clone();
            let views = dataprep::extract_views(&img, None, 0.5, crop_seed)?;
            let mut g = Graph::<f32>::new();
            let mut binder = Binder::new(&store);
            let feat = model.encoder.encode(&mut g, &store, &mut binder, true, &views.local)?;
            let z = g.mean_rows(feat.tokens);
            pooled.push(g.value(z).iter().map(|&v| f64::from(v)).collect::<Vec<f64>>());
        }
        let dot: f64 = pooled[0].iter().zip(pooled[1].iter()).map(|(a, b)| a * b).sum();
        let na: f64 = pooled[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = pooled[1].iter().map(|v| v * v).sum::<f64>().sqrt();
        total += dot / (na * nb).max(1e-12);
    }
    Ok(total / n_pairs as f64)
}

/// Rebuild a pretraining model from a checkpoint.
pub fn mae_model_from_checkpoint(ck: &Checkpoint) -> Result<MaeModel<f32>> {
    if ck.meta.kind != "mae" {
        return Err(Error::CheckpointMismatch(format!(
            "expected a pretraining checkpoint, got kind {:?}",
            ck.meta.kind
        )));
    }
    let model = MaeModel::<f32>::new(&ck.meta.encoder, 0)?;
    load_params(&model.store, ck, "")?;
    Ok(model)
}
