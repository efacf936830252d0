//! Synthetic multi-echo phantom: mono-exponential decay over a randomized
//! anatomy with a known placenta mask.
//!
//! Geometry per slice: a large uterine ellipse, an amniotic cavity ellipse
//! inside it, and the placenta as a radially-perturbed blob anchored on the
//! cavity wall, clipped to the uterus. The blob is star-convex, so the
//! clipped region stays 4-connected; the generator still verifies
//! connectivity and the pixel-fraction band and retries with a derived
//! seed on the rare violation.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PhantomConfig;
use crate::dataio::{self, ImageRef, Manifest, SliceEntry, Split};
use crate::{Error, Result};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_UTERUS: u8 = 1;
pub const LABEL_PLACENTA: u8 = 2;
pub const LABEL_FLUID: u8 = 3;

/// Base (s0, t2* in ms) per tissue class; indices 1..=3.
const CLASS_S0: [f64; 4] = [0.0, 0.85, 1.0, 0.78];
const CLASS_T2S: [f64; 4] = [0.0, 18.0, 45.0, 120.0];

/// Per-pixel multiplicative perturbation bands.
const S0_BAND: f64 = 0.02;
const T2S_BAND: f64 = 0.03;

/// Acceptable placenta pixel fraction (of the whole grid).
const PLACENTA_FRAC_MIN: f64 = 0.05;
const PLACENTA_FRAC_MAX: f64 = 0.30;

#[derive(Clone, Debug)]
pub struct TissueMap {
    pub label_grid: Array2<u8>,
    pub s0_grid: Array2<f32>,
    pub t2star_grid: Array2<f32>,
    pub seed: u64,
}

impl TissueMap {
    pub fn placenta_mask(&self) -> Array2<u8> {
        self.label_grid.mapv(|l| u8::from(l == LABEL_PLACENTA))
    }
}

#[derive(Clone, Debug)]
pub struct EchoSeries {
    pub images: Vec<Array2<f32>>,
    pub te_ms: Vec<f64>,
    pub mask: Array2<u8>,
    pub subject_id: String,
    pub slice_id: u32,
    pub noise_sigma: f64,
}

/// Default echo train: `num` echoes uniformly spaced over [start, end] ms.
pub fn uniform_te_list(start: f64, end: f64, num: usize) -> Vec<f64> {
    assert!(num >= 2 && end > start);
    (0..num)
        .map(|i| start + i as f64 * (end - start) / (num - 1) as f64)
        .collect()
}

pub fn default_te_list() -> Vec<f64> {
    uniform_te_list(3.15, 37.45, 8)
}

fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 over base^salt; decorrelates per-slice/per-echo streams.
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Zero-mean unit normal via Box-Muller on ChaCha uniforms.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ay;
        let dx = (x - self.cx) / self.ax;
        dy * dy + dx * dx <= 1.0
    }
}

pub fn make_tissue_map(seed: u64, height: usize, width: usize) -> Result<TissueMap> {
    if height < 64 || width < 64 {
        return Err(Error::InvalidArgument(format!(
            "tissue map must be at least 64x64, got {height}x{width}"
        )));
    }
    let (h, w) = (height as f64, width as f64);
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA11CE ^ attempt));

        let uterus = Ellipse {
            cy: h * (0.5 + rng.random_range(-0.02..0.02)),
            cx: w * (0.5 + rng.random_range(-0.02..0.02)),
            ay: h * rng.random_range(0.36..0.42),
            ax: w * rng.random_range(0.38..0.44),
        };
        let cavity = Ellipse {
            cy: uterus.cy + uterus.ay * rng.random_range(-0.08..0.08),
            cx: uterus.cx + uterus.ax * rng.random_range(-0.08..0.08),
            ay: uterus.ay * rng.random_range(0.55..0.65),
            ax: uterus.ax * rng.random_range(0.55..0.65),
        };

        // Placenta blob anchored on the cavity wall.
        let theta = rng.random_range(0.0..(2.0 * PI));
        let anchor_y = cavity.cy + cavity.ay * theta.sin();
        let anchor_x = cavity.cx + cavity.ax * theta.cos();
        let target_frac = rng.random_range(0.10..0.16);
        let r0 = (target_frac * h * w / PI).sqrt();
        let harmonics: Vec<(f64, f64)> = (2..=5)
            .map(|_| (rng.random_range(-0.08..0.08), rng.random_range(0.0..(2.0 * PI))))
            .collect();
        let blob_radius = |phi: f64| -> f64 {
            let mut r = 1.0;
            for (k, (a, psi)) in harmonics.iter().enumerate() {
                r += a * ((k as f64 + 2.0) * phi + psi).cos();
            }
            r0 * r
        };

        let mut label = Array2::<u8>::zeros((height, width));
        for ((r, c), l) in label.indexed_iter_mut() {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            if !uterus.contains(y, x) {
                continue;
            }
            let phi = (y - anchor_y).atan2(x - anchor_x);
            let d = ((y - anchor_y).powi(2) + (x - anchor_x).powi(2)).sqrt();
            if d <= blob_radius(phi) {
                *l = LABEL_PLACENTA;
            } else if cavity.contains(y, x) {
                *l = LABEL_FLUID;
            } else {
                *l = LABEL_UTERUS;
            }
        }

        let placenta_px = label.iter().filter(|&&l| l == LABEL_PLACENTA).count();
        let frac = placenta_px as f64 / (height * width) as f64;
        if !(PLACENTA_FRAC_MIN + 0.01..=PLACENTA_FRAC_MAX - 0.02).contains(&frac) {
            continue;
        }
        if !is_single_4connected(&label, LABEL_PLACENTA) {
            continue;
        }

        // Per-class property grids with small per-pixel perturbation bands.
        let mut s0 = Array2::<f32>::zeros((height, width));
        let mut t2s = Array2::<f32>::zeros((height, width));
        for ((idx, &l), (s, t)) in label
            .indexed_iter()
            .zip(s0.iter_mut().zip(t2s.iter_mut()))
        {
            let _ = idx;
            if l == LABEL_BACKGROUND {
                continue;
            }
            let ci = l as usize;
            *s = (CLASS_S0[ci] * (1.0 + rng.random_range(-S0_BAND..S0_BAND))) as f32;
            *t = (CLASS_T2S[ci] * (1.0 + rng.random_range(-T2S_BAND..T2S_BAND))) as f32;
        }

        return Ok(TissueMap { label_grid: label, s0_grid: s0, t2star_grid: t2s, seed });
    }
    Err(Error::InvalidArgument(format!(
        "could not generate a valid tissue map for seed {seed} ({height}x{width})"
    )))
}

fn is_single_4connected(label: &Array2<u8>, class: u8) -> bool {
    let (h, w) = label.dim();
    let total = label.iter().filter(|&&l| l == class).count();
    if total == 0 {
        return false;
    }
    let start = label
        .indexed_iter()
        .find(|(_, &l)| l == class)
        .map(|((r, c), _)| (r, c))
        .unwrap();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0usize;
    while let Some((r, c)) = stack.pop() {
        count += 1;
        let push = |rr: usize, cc: usize, seen: &mut Array2<bool>, stack: &mut Vec<(usize, usize)>| {
            if label[(rr, cc)] == class && !seen[(rr, cc)] {
                seen[(rr, cc)] = true;
                stack.push((rr, cc));
            }
        };
        if r > 0 {
            push(r - 1, c, &mut seen, &mut stack);
        }
        if r + 1 < h {
            push(r + 1, c, &mut seen, &mut stack);
        }
        if c > 0 {
            push(r, c - 1, &mut seen, &mut stack);
        }
        if c + 1 < w {
            push(r, c + 1, &mut seen, &mut stack);
        }
    }
    count == total
}

/// One echo image: `s0 * exp(-te/t2*)` per tissue pixel plus clamped
/// Gaussian noise. Background (s0 == 0) carries no signal source and stays
/// exactly zero, which is what downstream normalization keys on.
pub fn simulate_echo(
    tissue: &TissueMap,
    te_ms: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Array2<f32>> {
    if !te_ms.is_finite() || te_ms <= 0.0 {
        return Err(Error::InvalidArgument(format!("te_ms must be finite and > 0, got {te_ms}")));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be finite and >= 0, got {noise_sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::<f32>::zeros(tissue.label_grid.dim());
    for ((o, &s0), &t2s) in out
        .iter_mut()
        .zip(tissue.s0_grid.iter())
        .zip(tissue.t2star_grid.iter())
    {
        if s0 > 0.0 {
            let mut v = s0 as f64 * (-te_ms / t2s as f64).exp();
            if noise_sigma > 0.0 {
                v += noise_sigma * normal(&mut rng);
            }
            *o = v.max(0.0) as f32;
        }
    }
    Ok(out)
}

pub fn make_series(
    tissue: &TissueMap,
    te_list: &[f64],
    noise_sigma: f64,
    seed: u64,
    subject_id: &str,
    slice_id: u32,
) -> Result<EchoSeries> {
    if te_list.is_empty() {
        return Err(Error::InvalidArgument("te_list must be nonempty".into()));
    }
    if te_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("te_list must be strictly increasing".into()));
    }
    let images = te_list
        .iter()
        .enumerate()
        .map(|(i, &te)| simulate_echo(tissue, te, noise_sigma, derive_seed(seed, 0xEC40 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EchoSeries {
        images,
        te_ms: te_list.to_vec(),
        mask: tissue.placenta_mask(),
        subject_id: subject_id.to_string(),
        slice_id,
        noise_sigma,
    })
}

/// Echo indices available to pretraining: every echo except the source and
/// the adaptation targets. With the default 8-echo train and two targets
/// this is the five-echo unlabeled pool.
pub fn mae_echo_indices(num_echoes: usize, source: usize, targets: &[usize]) -> Vec<usize> {
    (0..num_echoes)
        .filter(|i| *i != source && !targets.contains(i))
        .collect()
}

/// Generate and write a dataset directory; returns the manifest.
pub fn make_dataset(cfg: &PhantomConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let te_ms = uniform_te_list(cfg.te_start_ms, cfg.te_end_ms, cfg.num_echoes);
    let mae_echoes = mae_echo_indices(cfg.num_echoes, cfg.source_echo, &cfg.target_echoes);
    if mae_echoes.len() < 2 {
        return Err(Error::Config(
            "pretraining pool needs at least two echo indices for cross-echo pairs".into(),
        ));
    }

    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;

    // Subject-level split assignment on a seeded shuffle.
    let mut order: Vec<usize> = (0..cfg.subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5B117));
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let split_of = |pos: usize| -> Split {
        if pos < cfg.mae_subjects {
            Split::Mae
        } else if pos < cfg.mae_subjects + cfg.adapt_subjects {
            Split::Adapt
        } else {
            Split::Test
        }
    };

    let mut entries = Vec::new();
    for (pos, &subj) in order.iter().enumerate() {
        let split = split_of(pos);
        let subject_id = format!("sub{subj:03}");
        for slice in 0..cfg.slices_per_subject {
            let slice_salt = (subj * 97 + slice) as u64;
            let tissue = make_tissue_map(derive_seed(seed, 0x7155 + slice_salt), cfg.height, cfg.width)?;
            let series = make_series(
                &tissue,
                &te_ms,
                cfg.noise_sigma,
                derive_seed(seed, 0x0E5E + slice_salt),
                &subject_id,
                slice as u32,
            )?;

            let echoes_to_store: Vec<usize> = match split {
                Split::Mae => mae_echoes.clone(),
                Split::Adapt => {
                    let mut v = vec![cfg.source_echo];
                    v.extend(cfg.target_echoes.iter().copied());
                    v
                }
                Split::Test => (0..cfg.num_echoes).collect(),
            };

            let mut images = Vec::new();
            for &e in &echoes_to_store {
                let rel = format!("images/{subject_id}_sl{slice}_te{e}.f32");
                dataio::write_raster(&out_dir.join(&rel), &series.images[e])?;
                let labeled = match split {
                    Split::Mae => false,
                    Split::Adapt => e == cfg.source_echo,
                    Split::Test => true,
                };
                images.push(ImageRef { echo: e, te_ms: te_ms[e], path: rel, labeled });
            }

            let mask = if split == Split::Mae {
                None
            } else {
                let rel = format!("masks/{subject_id}_sl{slice}.png");
                dataio::write_mask_png(&out_dir.join(&rel), &series.mask)?;
                Some(rel)
            };

            entries.push(SliceEntry { subject: subject_id.clone(), slice: slice as u32, split, mask, images });
        }
    }

    let manifest = Manifest {
        format_version: 1,
        seed,
        height: cfg.height,
        width: cfg.width,
        te_ms,
        echo_spacing_note: "uniform echo spacing assumed; the acquisition protocol specifies only the range".into(),
        noise_sigma: cfg.noise_sigma,
        pixel_spacing_mm: cfg.pixel_spacing_mm,
        source_echo: cfg.source_echo,
        target_echoes: cfg.target_echoes.clone(),
        mae_echoes,
        entries,
    };
    manifest.validate()?;
    manifest.save(out_dir)?;
    Ok(manifest)
}
