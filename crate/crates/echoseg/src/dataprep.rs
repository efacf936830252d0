//! Normalization, augmentation, dual-view extraction and reproducible
//! patch masking shared by both training stages.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Side length of every network input view.
pub const VIEW_SIZE: usize = 256;

/// Crop rectangle of the local view inside its source slice, in source
/// pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocationRecord {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    pub slice_h: usize,
    pub slice_w: usize,
}

impl LocationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0
            || self.w == 0
            || self.y0 + self.h > self.slice_h
            || self.x0 + self.w > self.slice_w
        {
            return Err(Error::InvalidArgument(format!("location {self:?} outside slice bounds")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ViewLabels {
    pub local: Array2<u8>,
    pub global_view: Array2<u8>,
}

/// A local crop and its downsampled whole-slice companion; the unit fed to
/// every network.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub local: Array2<f32>,
    pub global_view: Array2<f32>,
    pub location: LocationRecord,
    pub labels: Option<ViewLabels>,
}

/// Which view a mask plan is for; they use different patch sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    /// 8x8-pixel patches on a 32x32 grid.
    Local,
    /// 4x4-pixel patches on a 64x64 grid.
    Global,
}

impl ViewKind {
    pub fn patch_size(self) -> usize {
        match self {
            ViewKind::Local => 8,
            ViewKind::Global => 4,
        }
    }

    pub fn grid(self) -> (usize, usize) {
        let g = VIEW_SIZE / self.patch_size();
        (g, g)
    }
}

/// The exact set of masked patch indices for one view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub masked_indices: Vec<usize>,
    pub seed: u64,
}

/// Clip to the 99.5th percentile of non-background intensities and rescale
/// to [0, 1]. Background defaults to exactly-zero pixels; an explicit mask
/// overrides that (true = background).
pub fn normalize(image: &Array2<f32>, background: Option<&Array2<bool>>) -> Result<Array2<f32>> {
    if let Some(bg) = background {
        if bg.dim() != image.dim() {
            return Err(Error::ShapeMismatch(format!(
                "background mask {:?} vs image {:?}",
                bg.dim(),
                image.dim()
            )));
        }
    }
    let is_bg = |idx: (usize, usize), v: f32| match background {
        Some(bg) => bg[idx],
        None => v == 0.0,
    };
    let mut vals: Vec<f64> = image
        .indexed_iter()
        .filter(|(idx, &v)| !is_bg(*idx, v))
        .map(|(_, &v)| f64::from(v))
        .collect();
    if vals.is_empty() {
        return Ok(Array2::zeros(image.dim()));
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p = percentile_linear(&vals, 99.5);
    if p <= 0.0 {
        return Ok(Array2::zeros(image.dim()));
    }
    Ok(image.mapv(|v| ((f64::from(v).clamp(0.0, p)) / p) as f32))
}

/// Linear interpolation between order statistics of an ascending slice.
fn percentile_linear(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Flips (applied to images and labels, with the crop rectangle mirrored to
/// keep the local/global correspondence) and intensity jitter (images
/// only), each applied independently with probability `prob`.
pub fn augment(pair: &ViewPair, prob: f64, rng_seed: u64) -> ViewPair {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let do_h = rng.random::<f64>() < prob;
    let do_v = rng.random::<f64>() < prob;
    let do_jitter = rng.random::<f64>() < prob;

    let mut out = pair.clone();
    if do_h {
        out.local = flip_cols(&out.local);
        out.global_view = flip_cols(&out.global_view);
        if let Some(l) = &mut out.labels {
            l.local = flip_cols(&l.local);
            l.global_view = flip_cols(&l.global_view);
        }
        out.location.x0 = out.location.slice_w - (out.location.x0 + out.location.w);
    }
    if do_v {
        out.local = flip_rows(&out.local);
        out.global_view = flip_rows(&out.global_view);
        if let Some(l) = &mut out.labels {
            l.local = flip_rows(&l.local);
            l.global_view = flip_rows(&l.global_view);
        }
        out.location.y0 = out.location.slice_h - (out.location.y0 + out.location.h);
    }
    if do_jitter {
        let gain = rng.random_range(0.9..=1.1) as f32;
        let offset = rng.random_range(-0.05..=0.05) as f32;
        let jit = |img: &Array2<f32>| img.mapv(|v| (v * gain + offset).clamp(0.0, 1.0));
        out.local = jit(&out.local);
        out.global_view = jit(&out.global_view);
    }
    out
}

fn flip_cols<T: Copy + Default>(img: &Array2<T>) -> Array2<T> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(r, c)| img[(r, w - 1 - c)])
}

fn flip_rows<T: Copy + Default>(img: &Array2<T>) -> Array2<T> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(r, c)| img[(h - 1 - r, c)])
}

/// Bilinear resample with half-pixel centers.
pub fn resize_bilinear(img: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (ih, iw) = img.dim();
    if (ih, iw) == (oh, ow) {
        return img.clone();
    }
    let map = |o: usize, i_n: usize, o_n: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * i_n as f64 / o_n as f64 - 0.5).clamp(0.0, (i_n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(i_n - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    Array2::from_shape_fn((oh, ow), |(r, c)| {
        let (r0, r1, fr) = map(r, ih, oh);
        let (c0, c1, fc) = map(c, iw, ow);
        let top = img[(r0, c0)] * (1.0 - fc) + img[(r0, c1)] * fc;
        let bot = img[(r1, c0)] * (1.0 - fc) + img[(r1, c1)] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Nearest-neighbor resample; preserves the label value set.
pub fn resize_nearest(img: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (ih, iw) = img.dim();
    if (ih, iw) == (oh, ow) {
        return img.clone();
    }
    let map = |o: usize, i_n: usize, o_n: usize| -> usize {
        let src = (o as f64 + 0.5) * i_n as f64 / o_n as f64 - 0.5;
        (src.round().max(0.0) as usize).min(i_n - 1)
    };
    Array2::from_shape_fn((oh, ow), |(r, c)| img[(map(r, ih, oh), map(c, iw, ow))])
}

/// Whole-slice global view plus a random local crop, both resampled to
/// 256x256 (bilinear for images, nearest for labels).
pub fn extract_views(
    slice: &Array2<f32>,
    label: Option<&Array2<u8>>,
    crop_fraction: f64,
    rng_seed: u64,
) -> Result<ViewPair> {
    let (h, w) = slice.dim();
    if h < 64 || w < 64 {
        return Err(Error::InvalidArgument(format!("slice must be at least 64x64, got {h}x{w}")));
    }
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "crop_fraction must lie in (0, 1], got {crop_fraction}"
        )));
    }
    if let Some(l) = label {
        if l.dim() != slice.dim() {
            return Err(Error::ShapeMismatch("label shape differs from slice".into()));
        }
    }

    let ch = ((h as f64 * crop_fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * crop_fraction).round() as usize).clamp(1, w);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let y0 = if ch == h { 0 } else { rng.random_range(0..=h - ch) };
    let x0 = if cw == w { 0 } else { rng.random_range(0..=w - cw) };
    let location = LocationRecord { y0, x0, h: ch, w: cw, slice_h: h, slice_w: w };

    let crop = slice.slice(ndarray::s![y0..y0 + ch, x0..x0 + cw]).to_owned();
    let local = resize_bilinear(&crop, VIEW_SIZE, VIEW_SIZE);
    let global_view = resize_bilinear(slice, VIEW_SIZE, VIEW_SIZE);

    let labels = label.map(|l| {
        let lcrop = l.slice(ndarray::s![y0..y0 + ch, x0..x0 + cw]).to_owned();
        ViewLabels {
            local: resize_nearest(&lcrop, VIEW_SIZE, VIEW_SIZE),
            global_view: resize_nearest(l, VIEW_SIZE, VIEW_SIZE),
        }
    });

    Ok(ViewPair { local, global_view, location, labels })
}

/// Draw `floor(ratio * patch_count)` distinct patch indices.
pub fn plan_mask(view_kind: ViewKind, ratio: f64, rng_seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio must be in [0, 1), got {ratio}")));
    }
    let grid = view_kind.grid();
    let count = grid.0 * grid.1;
    let n_masked = (ratio * count as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut indices = rand::seq::index::sample(&mut rng, count, n_masked).into_vec();
    indices.sort_unstable();
    Ok(MaskPlan { patch_size: view_kind.patch_size(), grid, masked_indices: indices, seed: rng_seed })
}

/// Zero the planned patches. Returns the masked view and a 0/1 map marking
/// masked pixels.
pub fn apply_mask(view: &Array2<f32>, plan: &MaskPlan) -> Result<(Array2<f32>, Array2<f32>)> {
    let (h, w) = view.dim();
    if plan.grid.0 * plan.patch_size != h || plan.grid.1 * plan.patch_size != w {
        return Err(Error::ShapeMismatch(format!(
            "mask grid {:?} x patch {} does not tile a {h}x{w} view",
            plan.grid, plan.patch_size
        )));
    }
    let mut masked = view.clone();
    let mut map = Array2::<f32>::zeros((h, w));
    let p = plan.patch_size;
    for &idx in &plan.masked_indices {
        let (gr, gc) = (idx / plan.grid.1, idx % plan.grid.1);
        for r in gr * p..(gr + 1) * p {
            for c in gc * p..(gc + 1) * p {
                masked[(r, c)] = 0.0;
                map[(r, c)] = 1.0;
            }
        }
    }
    Ok((masked, map))
}
