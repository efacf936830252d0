//! Architecture: a token encoder shared between reconstruction and
//! segmentation, a lightweight reconstruction decoder, an atrous-pyramid
//! segmentation head, and global-local feature fusion.
//!
//! All parameters of one model live in a shared [`ParamStore`]; the
//! segmentation model built by [`SegModel::from_mae`] aliases the MAE
//! model's encoder parameters (same store object, same ids), so encoder
//! weight sharing is identity, not copy.

use ndarray::{Array2, ArrayD};
use tapegrad::nn::{Binder, ConvGrid, Init, Linear, ParamStore, SharedStore, TransformerBlock};
use tapegrad::{CellRect, Graph, Scalar, Var};

use crate::config::{EncoderSpec, SegDecoderSpec};
use crate::dataprep::LocationRecord;
use crate::{Error, Result};

/// Token features on a square grid.
#[derive(Clone, Copy)]
pub struct FeatureGrid {
    pub tokens: Var,
    pub side: usize,
    pub channels: usize,
}

#[derive(Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    patch_embed: Linear,
    pos: tapegrad::nn::ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: tapegrad::nn::LayerNorm,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, spec: &EncoderSpec) -> Encoder {
        let c = spec.embed_dim;
        let patch_px = spec.patch() * spec.patch();
        let patch_embed = Linear::new(store, init, "enc.patch", patch_px, c, 0.02);
        let pos = store.add("enc.pos", init.normal2(spec.tokens(), c, 0.02));
        let blocks = (0..spec.depth)
            .map(|i| TransformerBlock::new(store, init, &format!("enc.blk{i}"), c, spec.heads, spec.mlp_ratio))
            .collect();
        let ln_f = tapegrad::nn::LayerNorm::new(store, init, "enc.ln_f", c);
        Encoder { spec: spec.clone(), patch_embed, pos, blocks, ln_f }
    }

    /// Scalar parameter count implied by the spec alone.
    pub fn param_count(spec: &EncoderSpec) -> usize {
        let c = spec.embed_dim;
        let p2 = spec.patch() * spec.patch();
        let block = 2 * c            // ln1
            + c * 3 * c + 3 * c      // qkv
            + c * c + c              // proj
            + 2 * c                  // ln2
            + c * (c * spec.mlp_ratio) + c * spec.mlp_ratio   // fc1
            + (c * spec.mlp_ratio) * c + c;                   // fc2
        p2 * c + c                   // patch embed
            + spec.tokens() * c      // positional table
            + spec.depth * block
            + 2 * c                  // final norm
    }

    /// Forward from an already-inserted `(view, view)` image node.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        image: Var,
    ) -> FeatureGrid {
        let tok = g.patchify(image, self.spec.patch());
        let mut h = self.patch_embed.forward(g, store, binder, frozen, tok);
        let pos = if frozen {
            binder.bind_frozen(g, store, self.pos)
        } else {
            binder.bind(g, store, self.pos)
        };
        h = g.add(h, pos);
        for b in &self.blocks {
            h = b.forward(g, store, binder, frozen, h);
        }
        h = self.ln_f.forward(g, store, binder, frozen, h);
        FeatureGrid { tokens: h, side: self.spec.grid_side, channels: self.spec.embed_dim }
    }

    /// Shape-checked entry point for raw images.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        view: &Array2<T>,
    ) -> Result<FeatureGrid> {
        let s = self.spec.view_size;
        if view.dim() != (s, s) {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {s}x{s} views, got {:?}",
                view.dim()
            )));
        }
        let img = g.constant(view.clone().into_dyn());
        Ok(self.forward(g, store, binder, frozen, img))
    }
}

/// Reconstruction decoder: per-token MLP back to patch pixels. The hidden
/// activation is the "decoder feature" used by semantic consistency.
#[derive(Clone)]
pub struct ReconDecoder {
    fc1: Linear,
    fc2: Linear,
    patch: usize,
    grid: usize,
}

pub struct ReconOut {
    /// Full-resolution reconstruction, `(view, view)`.
    pub image: Var,
    /// Pooled penultimate decoder feature, `(embed_dim,)`.
    pub pooled_hidden: Var,
}

impl ReconDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, spec: &EncoderSpec) -> Self {
        let c = spec.embed_dim;
        let p2 = spec.patch() * spec.patch();
        ReconDecoder {
            fc1: Linear::new(store, init, "rec.fc1", c, c, 0.02),
            fc2: Linear::new(store, init, "rec.fc2", c, p2, 0.02),
            patch: spec.patch(),
            grid: spec.grid_side,
        }
    }

    pub fn param_count(spec: &EncoderSpec) -> usize {
        let c = spec.embed_dim;
        let p2 = spec.patch() * spec.patch();
        c * c + c + c * p2 + p2
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        feat: FeatureGrid,
    ) -> ReconOut {
        let h = self.fc1.forward(g, store, binder, frozen, feat.tokens);
        let h = g.gelu(h);
        let pooled_hidden = g.mean_rows(h);
        let px = self.fc2.forward(g, store, binder, frozen, h);
        let image = g.unpatchify(px, (self.grid, self.grid), self.patch);
        ReconOut { image, pooled_hidden }
    }
}

/// Map the crop rectangle (source pixels) onto feature-grid cells:
/// round to nearest with ties toward the origin, at least one cell.
pub fn location_to_cells(loc: &LocationRecord, grid: usize) -> Result<CellRect> {
    loc.validate()?;
    let round_half_down = |v: f64| -> isize { (v - 0.5).ceil() as isize };
    let to_cell = |lo: f64, hi: f64, extent: f64| -> (usize, usize) {
        let a = round_half_down(lo / extent * grid as f64).clamp(0, grid as isize - 1) as usize;
        let b = round_half_down(hi / extent * grid as f64).clamp(a as isize + 1, grid as isize) as usize;
        (a, b)
    };
    let (r0, r1) = to_cell(loc.y0 as f64, (loc.y0 + loc.h) as f64, loc.slice_h as f64);
    let (c0, c1) = to_cell(loc.x0 as f64, (loc.x0 + loc.w) as f64, loc.slice_w as f64);
    Ok(CellRect { r0, c0, h: r1 - r0, w: c1 - c0 })
}

/// Crop the whole-slice feature grid to the local view's rectangle,
/// upsample back to the full grid, and concatenate onto the local
/// features (local channels first).
pub fn fuse_global_local<T: Scalar>(
    g: &mut Graph<T>,
    feat_local: FeatureGrid,
    feat_global: FeatureGrid,
    location: &LocationRecord,
) -> Result<(FeatureGrid, FeatureGrid)> {
    assert_eq!(feat_local.side, feat_global.side);
    let side = feat_local.side;
    let rect = location_to_cells(location, side)?;
    let cropped = g.crop_cells(feat_global.tokens, (side, side), rect);
    let up = g.resize_bilinear(cropped, (rect.h, rect.w), (side, side), true);
    let fused = g.concat_cols(feat_local.tokens, up);
    Ok((
        FeatureGrid { tokens: fused, side, channels: feat_local.channels + feat_global.channels },
        FeatureGrid { tokens: up, side, channels: feat_global.channels },
    ))
}

/// Atrous-pyramid segmentation head with two declared input projections:
/// fused (2c) and single-view (c) features share the same trunk.
pub struct SegDecoder {
    pub spec: SegDecoderSpec,
    proj_fused: Linear,
    proj_single: Linear,
    branch_1x1: Linear,
    branch_d1: ConvGrid,
    branch_d2: ConvGrid,
    branch_pool: Linear,
    merge: Linear,
    classify: Linear,
    grid: usize,
    view: usize,
}

pub struct SegHeadOut {
    /// Per-pixel class logits, `(view*view, num_classes)`.
    pub logits: Var,
    /// Pooled penultimate decoder feature, `(aspp_channels,)`.
    pub pooled_hidden: Var,
}

impl SegDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        enc: &EncoderSpec,
        spec: &SegDecoderSpec,
    ) -> Self {
        let c = enc.embed_dim;
        let a = spec.aspp_channels;
        SegDecoder {
            spec: spec.clone(),
            proj_fused: Linear::new(store, init, "seg.proj_fused", 2 * c, a, 0.02),
            proj_single: Linear::new(store, init, "seg.proj_single", c, a, 0.02),
            branch_1x1: Linear::new(store, init, "seg.aspp0", a, a, 0.02),
            branch_d1: ConvGrid::new(store, init, "seg.aspp1", a, a, 1),
            branch_d2: ConvGrid::new(store, init, "seg.aspp2", a, a, 2),
            branch_pool: Linear::new(store, init, "seg.aspp_pool", a, a, 0.02),
            merge: Linear::new(store, init, "seg.merge", 4 * a, a, 0.02),
            classify: Linear::new(store, init, "seg.cls", a, spec.num_classes, 0.02),
            grid: enc.grid_side,
            view: enc.view_size,
        }
    }

    pub fn param_count(enc: &EncoderSpec, spec: &SegDecoderSpec) -> usize {
        let c = enc.embed_dim;
        let a = spec.aspp_channels;
        (2 * c * a + a)          // proj_fused
            + (c * a + a)        // proj_single
            + (a * a + a)        // 1x1 branch
            + 2 * (a * 9 * a + a) // dilated branches
            + (a * a + a)        // pooled branch
            + (4 * a * a + a)    // merge
            + (a * spec.num_classes + spec.num_classes)
    }

    fn trunk<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        projected: Var,
    ) -> SegHeadOut {
        let grid = (self.grid, self.grid);
        let x = g.relu(projected);
        let b0 = self.branch_1x1.forward(g, store, binder, frozen, x);
        let b0 = g.relu(b0);
        let b1 = self.branch_d1.forward(g, store, binder, frozen, x, grid);
        let b1 = g.relu(b1);
        let b2 = self.branch_d2.forward(g, store, binder, frozen, x, grid);
        let b2 = g.relu(b2);
        let pooled = g.mean_rows(x);
        let pooled = g.broadcast_row(pooled, self.grid * self.grid);
        let b3 = self.branch_pool.forward(g, store, binder, frozen, pooled);
        let b3 = g.relu(b3);
        let cat = g.concat_cols(b0, b1);
        let cat = g.concat_cols(cat, b2);
        let cat = g.concat_cols(cat, b3);
        let h = self.merge.forward(g, store, binder, frozen, cat);
        let h = g.relu(h);
        let pooled_hidden = g.mean_rows(h);
        let logits_grid = self.classify.forward(g, store, binder, frozen, h);
        let logits = g.resize_bilinear(logits_grid, grid, (self.view, self.view), false);
        SegHeadOut { logits, pooled_hidden }
    }

    /// Decode fused local+global features (2c channels).
    pub fn forward_fused<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        fused: FeatureGrid,
    ) -> SegHeadOut {
        let p = self.proj_fused.forward(g, store, binder, frozen, fused.tokens);
        self.trunk(g, store, binder, frozen, p)
    }

    /// Decode single-view features (c channels) through the declared
    /// input projection; this is the auxiliary global branch.
    pub fn forward_single<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        feat: FeatureGrid,
    ) -> SegHeadOut {
        let p = self.proj_single.forward(g, store, binder, frozen, feat.tokens);
        self.trunk(g, store, binder, frozen, p)
    }
}

/// Pretraining model: encoder + reconstruction decoder over one store.
pub struct MaeModel<T: Scalar> {
    pub store: SharedStore<T>,
    pub encoder: Encoder,
    pub decoder: ReconDecoder,
}

impl<T: Scalar> MaeModel<T> {
    pub fn new(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let encoder = Encoder::new(&mut store, &mut init, spec);
        let decoder = ReconDecoder::new(&mut store, &mut init, spec);
        Ok(MaeModel { store: std::rc::Rc::new(std::cell::RefCell::new(store)), encoder, decoder })
    }
}

/// Segmentation model; when built with [`SegModel::from_mae`] the encoder
/// parameters are the same store entries the MAE model uses.
pub struct SegModel<T: Scalar> {
    pub store: SharedStore<T>,
    pub encoder: Encoder,
    pub seg_decoder: SegDecoder,
    /// Retained reconstruction decoder (present when built from an MAE
    /// model; used when semantic consistency is configured to read decoder
    /// features from the reconstruction path).
    pub recon_decoder: Option<ReconDecoder>,
}

pub struct SegForward {
    pub logits: Var,
    pub aux_global: Option<SegHeadOut>,
    /// Pooled local encoder feature `(c,)`.
    pub pooled_local: Var,
    /// Pooled cropped-and-upsampled global feature `(c,)`.
    pub pooled_global: Var,
    /// Pooled segmentation-decoder hidden feature `(a,)`.
    pub pooled_dec: Var,
    pub feat_global_full: FeatureGrid,
}

impl<T: Scalar> SegModel<T> {
    /// Fresh model, encoder and decoder both randomly initialized.
    pub fn new(enc_spec: &EncoderSpec, dec_spec: &SegDecoderSpec, seed: u64) -> Result<Self> {
        let mae = MaeModel::new(enc_spec, seed)?;
        Ok(Self::from_mae(&mae, dec_spec, seed ^ 0x5E6))
    }

    /// Attach a segmentation head to a pretrained model. Encoder (and
    /// reconstruction decoder) parameters are shared by identity.
    pub fn from_mae(mae: &MaeModel<T>, dec_spec: &SegDecoderSpec, head_seed: u64) -> Self {
        let mut init = Init::new(head_seed);
        let seg_decoder = {
            let mut store = mae.store.borrow_mut();
            SegDecoder::new(&mut store, &mut init, &mae.encoder.spec, dec_spec)
        };
        SegModel {
            store: std::rc::Rc::clone(&mae.store),
            encoder: mae.encoder.clone(),
            seg_decoder,
            recon_decoder: Some(mae.decoder.clone()),
        }
    }

    /// Full segmentation pass over a view pair.
    pub fn forward_pair(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        local: &Array2<T>,
        global_view: &Array2<T>,
        location: &LocationRecord,
        with_aux_global: bool,
    ) -> Result<SegForward> {
        let feat_local = self.encoder.encode(g, store, binder, frozen, local)?;
        let feat_global = self.encoder.encode(g, store, binder, frozen, global_view)?;
        let (fused, cropped_up) = fuse_global_local(g, feat_local, feat_global, location)?;
        let head = self.seg_decoder.forward_fused(g, store, binder, frozen, fused);
        let aux_global = if with_aux_global {
            Some(self.seg_decoder.forward_single(g, store, binder, frozen, feat_global))
        } else {
            None
        };
        let pooled_local = g.mean_rows(feat_local.tokens);
        let pooled_global = g.mean_rows(cropped_up.tokens);
        Ok(SegForward {
            logits: head.logits,
            aux_global,
            pooled_local,
            pooled_global,
            pooled_dec: head.pooled_hidden,
            feat_global_full: feat_global,
        })
    }
}

/// Per-pixel argmax of a `(h*w, k)` logit node into a binary mask.
pub fn logits_to_mask<T: Scalar>(g: &Graph<T>, logits: Var, side: usize) -> Array2<u8> {
    let v = g.value(logits);
    let v2 = v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    assert_eq!(v2.nrows(), side * side);
    Array2::from_shape_fn((side, side), |(r, c)| {
        let row = v2.row(r * side + c);
        let mut best = 0usize;
        let mut bestv = row[0];
        for (k, &x) in row.iter().enumerate().skip(1) {
            if x > bestv {
                bestv = x;
                best = k;
            }
        }
        best as u8
    })
}

/// Softmax probabilities for one class as a flat image, e.g. for panels.
pub fn logits_to_prob<T: Scalar>(g: &Graph<T>, logits: Var, side: usize, class: usize) -> Array2<f32> {
    let v = g.value(logits);
    let v2 = v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    Array2::from_shape_fn((side, side), |(r, c)| {
        let row = v2.row(r * side + c);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).to_f64().exp()).collect();
        let s: f64 = exps.iter().sum();
        (exps[class] / s) as f32
    })
}

pub fn store_to_arrays<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, ArrayD<T>)> {
    store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
}
