//! Run configuration: one TOML file covering every stage, with published
//! recipe values pre-filled as defaults. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; stage RNGs derive from it.
    pub seed: u64,
    /// Recorded in outputs; the pipeline is single-threaded and ordered, so
    /// runs are reproducible either way.
    pub deterministic: bool,
    pub phantom: PhantomConfig,
    pub dataprep: DataprepConfig,
    pub networks: NetworkConfig,
    pub loss: LossConfig,
    pub mae: MaeStageConfig,
    pub mpl: MplStageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            deterministic: true,
            phantom: PhantomConfig::default(),
            dataprep: DataprepConfig::default(),
            networks: NetworkConfig::default(),
            loss: LossConfig::default(),
            mae: MaeStageConfig::default(),
            mpl: MplStageConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub subjects: usize,
    pub slices_per_subject: usize,
    pub height: usize,
    pub width: usize,
    /// Additive Gaussian noise applied to tissue pixels (background stays
    /// exactly zero so intensity==0 identifies background downstream).
    pub noise_sigma: f64,
    pub te_start_ms: f64,
    pub te_end_ms: f64,
    pub num_echoes: usize,
    pub pixel_spacing_mm: (f64, f64),
    /// Labeled source echo index (0-based; echo 1 of 8).
    pub source_echo: usize,
    /// Unlabeled adaptation target echo indices (0-based; echoes 2 and 6).
    pub target_echoes: Vec<usize>,
    pub mae_subjects: usize,
    pub adapt_subjects: usize,
    pub test_subjects: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            subjects: 30,
            slices_per_subject: 2,
            height: 256,
            width: 256,
            noise_sigma: 0.05,
            te_start_ms: 3.15,
            te_end_ms: 37.45,
            num_echoes: 8,
            pixel_spacing_mm: (1.0, 1.0),
            source_echo: 0,
            target_echoes: vec![1, 5],
            mae_subjects: 17,
            adapt_subjects: 8,
            test_subjects: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataprepConfig {
    /// Fraction of patches masked in both stages.
    pub mask_ratio: f64,
    /// Local crop covers this fraction of each slice dimension.
    pub crop_fraction: f64,
    /// Per-transform augmentation probability.
    pub augment_prob: f64,
    pub augment_in_mae: bool,
    pub augment_in_mpl: bool,
}

impl Default for DataprepConfig {
    fn default() -> Self {
        DataprepConfig {
            mask_ratio: 0.70,
            crop_fraction: 0.5,
            augment_prob: 0.35,
            augment_in_mae: true,
            augment_in_mpl: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder: EncoderSpec,
    pub decoder: SegDecoderSpec,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { encoder: EncoderSpec::default(), decoder: SegDecoderSpec::default() }
    }
}

/// Token-encoder architecture. The default is the published recipe
/// (8 layers, 512-dim embeddings on 256x256 inputs with a 16x16 token
/// grid); smaller instantiations keep every contract and are used for
/// desk-scale experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub view_size: usize,
    pub grid_side: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec { depth: 8, embed_dim: 512, heads: 8, mlp_ratio: 4, view_size: 256, grid_side: 16 }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.view_size % self.grid_side != 0 {
            return Err(Error::Config("encoder grid_side must divide view_size".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config("encoder heads must divide embed_dim".into()));
        }
        if self.depth == 0 || self.embed_dim == 0 {
            return Err(Error::Config("encoder depth/embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Pixel stride of one token cell.
    pub fn patch(&self) -> usize {
        self.view_size / self.grid_side
    }

    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// Atrous-pyramid segmentation head over fused token features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegDecoderSpec {
    pub aspp_channels: usize,
    pub num_classes: usize,
}

impl Default for SegDecoderSpec {
    fn default() -> Self {
        SegDecoderSpec { aspp_channels: 256, num_classes: 2 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Source-vs-target supervision ratio in the pseudo-label objective.
    pub beta: f64,
    /// Weight of the auxiliary global segmentation term.
    pub gamma_glc: f64,
    /// Weight of the local/global cosine alignment term.
    pub delta_glc: f64,
    pub gamma_sc_mae: f64,
    pub gamma_sc_mpl: f64,
    pub lambda_enc: f64,
    pub lambda_dec: f64,
    /// Cosine denominator guard.
    pub epsilon: f64,
    /// Reproduce the printed cosine denominator max(|a|, |b|, eps) instead
    /// of the standard norm product (the printed form is not
    /// scale-invariant; kept behind this flag for comparison).
    pub paper_literal_cosine: bool,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.5,
            gamma_glc: 1.0,
            delta_glc: 0.1,
            gamma_sc_mae: 0.4,
            gamma_sc_mpl: 0.4,
            lambda_enc: 0.5,
            lambda_dec: 0.5,
            epsilon: 1e-8,
            paper_literal_cosine: false,
            dice_smooth: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeStageConfig {
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Echo pairs per optimization step.
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub panel_every: u64,
    /// Log masked-reconstruction loss on one held-out test slice every N
    /// steps (0 disables).
    pub holdout_eval_every: u64,
    pub resume_from: Option<String>,
}

impl Default for MaeStageConfig {
    fn default() -> Self {
        MaeStageConfig {
            epochs: 300,
            max_steps: None,
            lr: 2e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 4,
            checkpoint_every: 500,
            panel_every: 500,
            holdout_eval_every: 0,
            resume_from: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MplStageConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub patience_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adaptation target echo index (0-based; echo 6 of 8).
    pub target_echo: usize,
    /// Staged EMA schedule: entries apply while `step < until_step`; the
    /// final entry (until_step absent) applies forever.
    pub ema_stages: Vec<EmaStageConfig>,
    /// Train on the labeled source echo only (no teacher, no target terms).
    /// This is the comparison baseline for adaptation runs.
    pub source_only: bool,
    /// Fraction of labeled source slices held out for early stopping.
    pub val_fraction: f64,
    pub panel_every: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaStageConfig {
    pub until_step: Option<u64>,
    pub alpha: f64,
}

impl Default for MplStageConfig {
    fn default() -> Self {
        MplStageConfig {
            epochs: 150,
            warmup_epochs: 50,
            patience_epochs: 75,
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            target_echo: 5,
            ema_stages: vec![
                EmaStageConfig { until_step: Some(1000), alpha: 0.99 },
                EmaStageConfig { until_step: Some(2000), alpha: 0.999 },
                EmaStageConfig { until_step: None, alpha: 0.9999 },
            ],
            source_only: false,
            val_fraction: 0.10,
            panel_every: 500,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Echo indices to evaluate; empty means the configured target echo.
    pub echoes: Vec<usize>,
    pub nsd_tolerance_vox: f64,
    /// Report this percentile of surface distances instead of the exact
    /// maximum when set (robustness studies only).
    pub hd_percentile: Option<f64>,
    /// Boundary connectivity: 4 (default) or 8.
    pub boundary_connectivity: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            echoes: vec![],
            nsd_tolerance_vox: 1.0,
            hd_percentile: None,
            boundary_connectivity: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let mut value: toml::Table =
            text.parse().map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
        apply_env_overrides(&mut value, "ECHOSEG_")?;
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults merged with environment overrides (used when no config file
    /// is given).
    pub fn resolved_default() -> Result<RunConfig> {
        Self::from_toml_str(&RunConfig::default().to_toml_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.networks.encoder.validate()?;
        let p = &self.phantom;
        if p.mae_subjects + p.adapt_subjects + p.test_subjects != p.subjects {
            return Err(Error::Config(format!(
                "split sizes {}+{}+{} must sum to subjects={}",
                p.mae_subjects, p.adapt_subjects, p.test_subjects, p.subjects
            )));
        }
        if p.source_echo >= p.num_echoes {
            return Err(Error::Config("source_echo out of range".into()));
        }
        for &t in &p.target_echoes {
            if t >= p.num_echoes || t == p.source_echo {
                return Err(Error::Config(format!(
                    "target echo {t} must differ from the source echo and lie in range"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dataprep.mask_ratio) {
            return Err(Error::Config("mask_ratio must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.dataprep.augment_prob) {
            return Err(Error::Config("augment_prob must be in [0, 1]".into()));
        }
        if self.mpl.target_echo >= p.num_echoes {
            return Err(Error::Config("mpl.target_echo out of range".into()));
        }
        if !matches!(self.eval.boundary_connectivity, 4 | 8) {
            return Err(Error::Config("boundary_connectivity must be 4 or 8".into()));
        }
        crate::mpl::EmaSchedule::from_config(&self.mpl.ema_stages)?;
        Ok(())
    }

    pub fn sha256(&self) -> String {
        crate::dataio::sha256_bytes(self.to_toml_string().as_bytes())
    }
}

/// `ECHOSEG_SECTION__KEY=value` overrides `section.key`. Values parse as
/// TOML scalars and fall back to strings.
fn apply_env_overrides(table: &mut toml::Table, prefix: &str) -> Result<()> {
    let mut vars: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(prefix))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[prefix.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.is_empty() || path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        let value = parse_env_value(&raw);
        let mut cur = &mut *table;
        for seg in &path[..path.len() - 1] {
            cur = cur
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {seg} is not a table")))?;
        }
        cur.insert(path.last().unwrap().clone(), value);
    }
    Ok(())
}

fn parse_env_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(t) = wrapped.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.phantom.num_echoes, 8);
        assert!((c.phantom.te_start_ms - 3.15).abs() < 1e-12);
        assert!((c.phantom.te_end_ms - 37.45).abs() < 1e-12);
        assert_eq!(c.networks.encoder.depth, 8);
        assert_eq!(c.networks.encoder.embed_dim, 512);
        assert!((c.dataprep.mask_ratio - 0.70).abs() < 1e-12);
        assert!((c.dataprep.augment_prob - 0.35).abs() < 1e-12);
        assert!((c.mae.lr - 2e-4).abs() < 1e-18);
        assert!((c.mae.weight_decay - 0.05).abs() < 1e-12);
        assert!((c.mae.beta1 - 0.9).abs() < 1e-12);
        assert!((c.mae.beta2 - 0.95).abs() < 1e-12);
        assert_eq!(c.mae.batch_size, 4);
        assert_eq!(c.mae.epochs, 300);
        assert_eq!(c.mpl.epochs, 150);
        assert_eq!(c.mpl.warmup_epochs, 50);
        assert_eq!(c.mpl.patience_epochs, 75);
        assert!((c.mpl.lr - 1e-4).abs() < 1e-18);
        assert!((c.mpl.weight_decay - 0.01).abs() < 1e-12);
        assert!((c.loss.beta - 0.5).abs() < 1e-12);
        assert!((c.loss.gamma_sc_mae - 0.4).abs() < 1e-12);
        assert!((c.loss.gamma_sc_mpl - 0.4).abs() < 1e-12);
        let alphas: Vec<f64> = c.mpl.ema_stages.iter().map(|s| s.alpha).collect();
        assert_eq!(alphas, vec![0.99, 0.999, 0.9999]);
    }

    #[test]
    fn toml_roundtrip_and_unknown_key_rejection() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.to_toml_string(), text);

        let bad = format!("{text}\n[mae]\nnot_a_field = 3\n");
        // toml rejects the duplicate table before serde sees it; also check
        // a fresh unknown key inside an existing table.
        assert!(RunConfig::from_toml_str(&bad).is_err());
        assert!(RunConfig::from_toml_str("unknown_top = 1").is_err());
        assert!(RunConfig::from_toml_str("[mpl]\nbogus = true").is_err());
    }

    #[test]
    fn env_override_applies() {
        // Serial-safe: unique variable name per test binary run.
        std::env::set_var("ECHOSEG_MPL__TARGET_ECHO", "1");
        let cfg = RunConfig::from_toml_str("").unwrap();
        std::env::remove_var("ECHOSEG_MPL__TARGET_ECHO");
        assert_eq!(cfg.mpl.target_echo, 1);
    }

    #[test]
    fn split_sizes_must_sum() {
        let mut cfg = RunConfig::default();
        cfg.phantom.test_subjects += 1;
        assert!(cfg.validate().is_err());
    }
}
