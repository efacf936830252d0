//! The tape: eager forward execution with recorded adjoints.
//!
//! Tensors live in the graph as `ArrayD`; a [`Var`] is an index into the
//! tape. Shapes are validated with plain `assert!` since a shape error is
//! a programming bug, not a runtime condition.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2};

use crate::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Rectangle of cells on a feature grid, `r0/c0` inclusive origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    ClampMin(Var, T),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    BroadcastRow(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Var, Var),
    Reshape(Var),
    Patchify { x: Var, patch: usize },
    Unpatchify { x: Var, grid: (usize, usize), patch: usize },
    Conv3x3Grid { x: Var, w: Var, b: Var, grid: (usize, usize), dilation: usize },
    CropCells { x: Var, grid: (usize, usize), rect: CellRect },
    ResizeBilinear { x: Var, in_hw: (usize, usize), out_hw: (usize, usize), align_corners: bool },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.slots[v.0].take()
    }
}

/// Eagerly-evaluated autodiff tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value that participates in backward (a parameter or probed input).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Value treated as a constant; no gradient is ever computed for it.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(ArrayD::from_elem(ndarray::IxDyn(&[1]), v))
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Single-element value as a scalar.
    pub fn scalar_value(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val2(&self, v: Var) -> ndarray::ArrayView2<'_, T> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected a rank-2 tensor")
    }

    fn val1(&self, v: Var) -> ndarray::ArrayView1<'_, T> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("expected a rank-1 tensor")
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), ng)
    }

    /// Elementwise max; ties route the gradient to the first argument.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut v = self.nodes[a.0].value.clone();
        v.zip_mut_with(&self.nodes[b.0].value, |x, &y| {
            if y > *x {
                *x = y;
            }
        });
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Maximum(a, b), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let ng = self.needs(a);
        self.push(v, Op::Neg(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a, c), ng)
    }

    /// max(x, c); gradient passes where `x > c`.
    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > c { x } else { c });
        let ng = self.needs(a);
        self.push(v, Op::ClampMin(a, c), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let ng = self.needs(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_fwd);
        let ng = self.needs(a);
        self.push(v, Op::Gelu(a), ng)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.val2(a);
        let bv = self.val2(b);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimension mismatch");
        let v = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.val2(a).t().to_owned().into_dyn();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// `(n, c) + (c,)` row-broadcast add (bias).
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let av = self.val2(a);
        let bv = self.val1(b);
        assert_eq!(av.ncols(), bv.len());
        let v = (&av + &bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    // ---- reductions / broadcasts ----

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].value.iter().copied().sum();
        let ng = self.needs(a);
        self.push(arr_scalar(s), Op::Sum(a), ng)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s: T = self.nodes[a.0].value.iter().copied().sum();
        let ng = self.needs(a);
        self.push(arr_scalar(s / T::from_usize(n)), Op::Mean(a), ng)
    }

    /// `(n, c) -> (c,)` mean over rows (global average pooling of tokens).
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.val2(a);
        let n = T::from_usize(av.nrows());
        let v = (av.sum_axis(Axis(0)) / n).into_dyn();
        let ng = self.needs(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// `(c,) -> (rows, c)` repeat a vector as every row.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let av = self.val1(a);
        let v = Array2::from_shape_fn((rows, av.len()), |(_, j)| av[j]).into_dyn();
        let ng = self.needs(a);
        self.push(v, Op::BroadcastRow(a), ng)
    }

    // ---- row-wise nonlinear ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.val2(a);
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: T = row.iter().copied().sum();
            row.mapv_inplace(|x| x / s);
        }
        let ng = self.needs(a);
        self.push(v.into_dyn(), Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.val2(a);
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse: T = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.needs(a);
        self.push(v.into_dyn(), Op::LogSoftmaxRows(a), ng)
    }

    /// Row-wise layer norm over the channel axis with learned affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.val2(x);
        let g = self.val1(gamma);
        let b = self.val1(beta);
        assert_eq!(xv.ncols(), g.len());
        let mut v = xv.to_owned();
        for mut row in v.rows_mut() {
            let (mu, inv) = row_moments(row.view(), eps);
            for (j, e) in row.iter_mut().enumerate() {
                *e = (*e - mu) * inv * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v.into_dyn(), Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    // ---- shape ----

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.val2(x);
        assert!(start + len <= xv.ncols());
        let v = xv.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        let ng = self.needs(x);
        self.push(v, Op::SliceCols { x, start, len }, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.val2(a);
        let bv = self.val2(b);
        assert_eq!(av.nrows(), bv.nrows());
        let v = ndarray::concatenate(Axis(1), &[av, bv]).unwrap().into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a, b), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = as_standard(&self.nodes[x.0].value)
            .into_shape_with_order(ndarray::IxDyn(shape))
            .expect("reshape element count mismatch");
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// `(h, w)` image to `(gh*gw, patch*patch)` row-major patch tokens.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Var {
        let xv = self.val2(x);
        let (h, w) = (xv.nrows(), xv.ncols());
        assert!(h % patch == 0 && w % patch == 0, "patch size must tile the image");
        let (gh, gw) = (h / patch, w / patch);
        let mut v = Array2::zeros((gh * gw, patch * patch));
        for gr in 0..gh {
            for gc in 0..gw {
                let t = gr * gw + gc;
                for pr in 0..patch {
                    for pc in 0..patch {
                        v[(t, pr * patch + pc)] = xv[(gr * patch + pr, gc * patch + pc)];
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(v.into_dyn(), Op::Patchify { x, patch }, ng)
    }

    /// Inverse of [`Graph::patchify`]: `(gh*gw, patch*patch)` to `(gh*patch, gw*patch)`.
    pub fn unpatchify(&mut self, x: Var, grid: (usize, usize), patch: usize) -> Var {
        let xv = self.val2(x);
        let (gh, gw) = grid;
        assert_eq!(xv.nrows(), gh * gw);
        assert_eq!(xv.ncols(), patch * patch);
        let mut v = Array2::zeros((gh * patch, gw * patch));
        for gr in 0..gh {
            for gc in 0..gw {
                let t = gr * gw + gc;
                for pr in 0..patch {
                    for pc in 0..patch {
                        v[(gr * patch + pr, gc * patch + pc)] = xv[(t, pr * patch + pc)];
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(v.into_dyn(), Op::Unpatchify { x, grid, patch }, ng)
    }

    /// 3x3 (optionally dilated) convolution over tokens laid out on `grid`,
    /// zero-padded at the grid border. `w` is `(cin*9, cout)`, `b` is `(cout,)`.
    pub fn conv3x3_grid(&mut self, x: Var, w: Var, b: Var, grid: (usize, usize), dilation: usize) -> Var {
        let xv = self.val2(x);
        let wv = self.val2(w);
        let bv = self.val1(b);
        let cin = xv.ncols();
        assert_eq!(xv.nrows(), grid.0 * grid.1);
        assert_eq!(wv.nrows(), cin * 9);
        assert_eq!(wv.ncols(), bv.len());
        let col = im2col(&xv, grid, dilation);
        let v = (col.dot(&wv) + &bv).into_dyn();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Conv3x3Grid { x, w, b, grid, dilation }, ng)
    }

    /// Copy a cell rectangle out of a token grid: `(gh*gw, c)` to `(rect.h*rect.w, c)`.
    pub fn crop_cells(&mut self, x: Var, grid: (usize, usize), rect: CellRect) -> Var {
        let xv = self.val2(x);
        assert_eq!(xv.nrows(), grid.0 * grid.1);
        assert!(rect.r0 + rect.h <= grid.0 && rect.c0 + rect.w <= grid.1, "crop outside grid");
        assert!(rect.h > 0 && rect.w > 0);
        let c = xv.ncols();
        let mut v = Array2::zeros((rect.h * rect.w, c));
        for r in 0..rect.h {
            for cc in 0..rect.w {
                let src = (rect.r0 + r) * grid.1 + (rect.c0 + cc);
                v.row_mut(r * rect.w + cc).assign(&xv.row(src));
            }
        }
        let ng = self.needs(x);
        self.push(v.into_dyn(), Op::CropCells { x, grid, rect }, ng)
    }

    /// Separable bilinear resize of a token grid `(ih*iw, c)` to `(oh*ow, c)`.
    pub fn resize_bilinear(
        &mut self,
        x: Var,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        align_corners: bool,
    ) -> Var {
        let xv = self.val2(x);
        assert_eq!(xv.nrows(), in_hw.0 * in_hw.1);
        let c = xv.ncols();
        let rmap = axis_map::<T>(in_hw.0, out_hw.0, align_corners);
        let cmap = axis_map::<T>(in_hw.1, out_hw.1, align_corners);
        let mut v = Array2::zeros((out_hw.0 * out_hw.1, c));
        for (or, &(r0, r1, wr0, wr1)) in rmap.iter().enumerate() {
            for (oc, &(c0, c1, wc0, wc1)) in cmap.iter().enumerate() {
                let mut out = v.row_mut(or * out_hw.1 + oc);
                for (src, wgt) in [
                    (r0 * in_hw.1 + c0, wr0 * wc0),
                    (r0 * in_hw.1 + c1, wr0 * wc1),
                    (r1 * in_hw.1 + c0, wr1 * wc0),
                    (r1 * in_hw.1 + c1, wr1 * wc1),
                ] {
                    if wgt != T::zero() {
                        out.scaled_add(wgt, &xv.row(src));
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(v.into_dyn(), Op::ResizeBilinear { x, in_hw, out_hw, align_corners }, ng)
    }

    // ---- backward ----

    /// Backpropagate from `root`, seeding with ones of its shape.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut slots: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), T::one()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                slots[id] = None;
                continue;
            }
            let Some(dy) = slots[id].take() else { continue };
            self.backprop_node(id, &dy, &mut slots);
            if matches!(self.nodes[id].op, Op::Leaf) {
                slots[id] = Some(dy);
            }
        }
        Grads { slots }
    }

    fn backprop_node(&self, id: usize, dy: &ArrayD<T>, slots: &mut [Option<ArrayD<T>>]) {
        let dy2 = || dy.view().into_dimensionality::<Ix2>().unwrap();
        let dy1 = || dy.view().into_dimensionality::<Ix1>().unwrap();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(slots, *a, || dy.clone());
                self.accum(slots, *b, || dy.clone());
            }
            Op::Sub(a, b) => {
                self.accum(slots, *a, || dy.clone());
                self.accum(slots, *b, || dy.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accum(slots, *a, || dy * &self.nodes[b.0].value);
                self.accum(slots, *b, || dy * &self.nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                self.accum(slots, *a, || dy / bv);
                self.accum(slots, *b, || {
                    let av = &self.nodes[a.0].value;
                    let mut g = dy * av;
                    g.zip_mut_with(bv, |x, &d| *x = -*x / (d * d));
                    g
                });
            }
            Op::Maximum(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accum(slots, *a, || {
                    let mut g = dy.clone();
                    ndarray::Zip::from(&mut g).and(av).and(bv).for_each(|gx, &x, &y| {
                        if y > x {
                            *gx = T::zero();
                        }
                    });
                    g
                });
                self.accum(slots, *b, || {
                    let mut g = dy.clone();
                    ndarray::Zip::from(&mut g).and(av).and(bv).for_each(|gx, &x, &y| {
                        if y <= x {
                            *gx = T::zero();
                        }
                    });
                    g
                });
            }
            Op::Neg(a) => self.accum(slots, *a, || dy.mapv(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(slots, *a, || dy.mapv(|x| x * c));
            }
            Op::AddScalar(a, _) => self.accum(slots, *a, || dy.clone()),
            Op::ClampMin(a, c) => {
                let c = *c;
                let av = &self.nodes[a.0].value;
                self.accum(slots, *a, || {
                    let mut g = dy.clone();
                    g.zip_mut_with(av, |x, &v| {
                        if v <= c {
                            *x = T::zero();
                        }
                    });
                    g
                });
            }
            Op::Square(a) => {
                let av = &self.nodes[a.0].value;
                self.accum(slots, *a, || {
                    let mut g = dy * av;
                    g.mapv_inplace(|x| x + x);
                    g
                });
            }
            Op::Sqrt(a) => {
                let yv = &self.nodes[id].value;
                self.accum(slots, *a, || {
                    let mut g = dy.clone();
                    g.zip_mut_with(yv, |x, &y| *x = *x / (y + y));
                    g
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                self.accum(slots, *a, || {
                    let mut g = dy.clone();
                    g.zip_mut_with(av, |x, &v| {
                        if v <= T::zero() {
                            *x = T::zero();
                        }
                    });
                    g
                });
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                self.accum(slots, *a, || {
                    let mut g = dy.clone();
                    g.zip_mut_with(av, |x, &v| *x = *x * gelu_bwd(v));
                    g
                });
            }
            Op::MatMul(a, b) => {
                let av = self.val2(*a);
                let bv = self.val2(*b);
                self.accum(slots, *a, || dy2().dot(&bv.t()).into_dyn());
                self.accum(slots, *b, || av.t().dot(&dy2()).into_dyn());
            }
            Op::Transpose(a) => {
                self.accum(slots, *a, || dy2().t().to_owned().into_dyn());
            }
            Op::AddRow(a, b) => {
                self.accum(slots, *a, || dy.clone());
                self.accum(slots, *b, || dy2().sum_axis(Axis(0)).into_dyn());
            }
            Op::Sum(a) => {
                let g0 = dy1()[0];
                let shape = self.nodes[a.0].value.raw_dim();
                self.accum(slots, *a, || ArrayD::from_elem(shape.clone(), g0));
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.nodes[a.0].value.len());
                let g0 = dy1()[0] / n;
                let shape = self.nodes[a.0].value.raw_dim();
                self.accum(slots, *a, || ArrayD::from_elem(shape.clone(), g0));
            }
            Op::MeanRows(a) => {
                let av = self.val2(*a);
                let n = T::from_usize(av.nrows());
                let d = dy1();
                self.accum(slots, *a, || {
                    Array2::from_shape_fn((av.nrows(), av.ncols()), |(_, j)| d[j] / n).into_dyn()
                });
            }
            Op::BroadcastRow(v) => {
                self.accum(slots, *v, || dy2().sum_axis(Axis(0)).into_dyn());
            }
            Op::SoftmaxRows(a) => {
                let yv = self.val2(Var(id));
                self.accum(slots, *a, || {
                    let d = dy2();
                    let mut g = d.to_owned();
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(yv.rows()) {
                        let dot: T = grow.iter().zip(yrow.iter()).map(|(&gd, &y)| gd * y).sum();
                        for (ge, &y) in grow.iter_mut().zip(yrow.iter()) {
                            *ge = y * (*ge - dot);
                        }
                    }
                    g.into_dyn()
                });
            }
            Op::LogSoftmaxRows(a) => {
                let yv = self.val2(Var(id));
                self.accum(slots, *a, || {
                    let d = dy2();
                    let mut g = d.to_owned();
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(yv.rows()) {
                        let s: T = grow.iter().copied().sum();
                        for (ge, &y) in grow.iter_mut().zip(yrow.iter()) {
                            *ge = *ge - y.exp() * s;
                        }
                    }
                    g.into_dyn()
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.val2(*x);
                let g = self.val1(*gamma);
                let eps = *eps;
                let d = dy2();
                let c = T::from_usize(xv.ncols());
                if self.needs(*beta) {
                    self.accum(slots, *beta, || d.sum_axis(Axis(0)).into_dyn());
                }
                if self.needs(*gamma) {
                    self.accum(slots, *gamma, || {
                        let mut dg = Array1::<T>::zeros(xv.ncols());
                        for (xrow, drow) in xv.rows().into_iter().zip(d.rows()) {
                            let (mu, inv) = row_moments(xrow, eps);
                            for (j, (&xe, &de)) in xrow.iter().zip(drow.iter()).enumerate() {
                                dg[j] += de * (xe - mu) * inv;
                            }
                        }
                        dg.into_dyn()
                    });
                }
                if self.needs(*x) {
                    self.accum(slots, *x, || {
                        let mut dx = Array2::<T>::zeros(xv.raw_dim());
                        for ((xrow, drow), mut orow) in
                            xv.rows().into_iter().zip(d.rows()).zip(dx.rows_mut())
                        {
                            let (mu, inv) = row_moments(xrow, eps);
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for (j, (&xe, &de)) in xrow.iter().zip(drow.iter()).enumerate() {
                                let dxh = de * g[j];
                                let xh = (xe - mu) * inv;
                                m1 += dxh;
                                m2 += dxh * xh;
                            }
                            m1 = m1 / c;
                            m2 = m2 / c;
                            for (j, (&xe, &de)) in xrow.iter().zip(drow.iter()).enumerate() {
                                let dxh = de * g[j];
                                let xh = (xe - mu) * inv;
                                orow[j] = inv * (dxh - m1 - xh * m2);
                            }
                        }
                        dx.into_dyn()
                    });
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.val2(*x);
                let (start, len) = (*start, *len);
                self.accum(slots, *x, || {
                    let mut g = Array2::<T>::zeros(xv.raw_dim());
                    g.slice_mut(ndarray::s![.., start..start + len]).assign(&dy2());
                    g.into_dyn()
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.val2(*a).ncols();
                self.accum(slots, *a, || dy2().slice(ndarray::s![.., ..ca]).to_owned().into_dyn());
                self.accum(slots, *b, || dy2().slice(ndarray::s![.., ca..]).to_owned().into_dyn());
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.raw_dim();
                self.accum(slots, *x, || {
                    as_standard(dy).into_shape_with_order(shape.clone()).unwrap()
                });
            }
            Op::Patchify { x, patch } => {
                let xv = self.val2(*x);
                let p = *patch;
                let (h, w) = (xv.nrows(), xv.ncols());
                let gw = w / p;
                self.accum(slots, *x, || {
                    let d = dy2();
                    let mut g = Array2::<T>::zeros((h, w));
                    for gr in 0..h / p {
                        for gc in 0..gw {
                            let t = gr * gw + gc;
                            for pr in 0..p {
                                for pc in 0..p {
                                    g[(gr * p + pr, gc * p + pc)] = d[(t, pr * p + pc)];
                                }
                            }
                        }
                    }
                    g.into_dyn()
                });
            }
            Op::Unpatchify { x, grid, patch } => {
                let (gh, gw) = *grid;
                let p = *patch;
                self.accum(slots, *x, || {
                    let d = dy2();
                    let mut g = Array2::<T>::zeros((gh * gw, p * p));
                    for gr in 0..gh {
                        for gc in 0..gw {
                            let t = gr * gw + gc;
                            for pr in 0..p {
                                for pc in 0..p {
                                    g[(t, pr * p + pc)] = d[(gr * p + pr, gc * p + pc)];
                                }
                            }
                        }
                    }
                    g.into_dyn()
                });
            }
            Op::Conv3x3Grid { x, w, b, grid, dilation } => {
                let xv = self.val2(*x);
                let wv = self.val2(*w);
                let d = dy2();
                if self.needs(*b) {
                    self.accum(slots, *b, || d.sum_axis(Axis(0)).into_dyn());
                }
                if self.needs(*w) {
                    let col = im2col(&xv, *grid, *dilation);
                    self.accum(slots, *w, || col.t().dot(&d).into_dyn());
                }
                if self.needs(*x) {
                    let dcol = d.dot(&wv.t());
                    self.accum(slots, *x, || {
                        col2im(&dcol.view(), xv.ncols(), *grid, *dilation).into_dyn()
                    });
                }
            }
            Op::CropCells { x, grid, rect } => {
                let xv = self.val2(*x);
                let (grid, rect) = (*grid, *rect);
                self.accum(slots, *x, || {
                    let d = dy2();
                    let mut g = Array2::<T>::zeros(xv.raw_dim());
                    for r in 0..rect.h {
                        for cc in 0..rect.w {
                            let src = (rect.r0 + r) * grid.1 + (rect.c0 + cc);
                            g.row_mut(src).assign(&d.row(r * rect.w + cc));
                        }
                    }
                    g.into_dyn()
                });
            }
            Op::ResizeBilinear { x, in_hw, out_hw, align_corners } => {
                let xv = self.val2(*x);
                let (in_hw, out_hw) = (*in_hw, *out_hw);
                let rmap = axis_map::<T>(in_hw.0, out_hw.0, *align_corners);
                let cmap = axis_map::<T>(in_hw.1, out_hw.1, *align_corners);
                self.accum(slots, *x, || {
                    let d = dy2();
                    let mut g = Array2::<T>::zeros(xv.raw_dim());
                    for (or, &(r0, r1, wr0, wr1)) in rmap.iter().enumerate() {
                        for (oc, &(c0, c1, wc0, wc1)) in cmap.iter().enumerate() {
                            let drow = d.row(or * out_hw.1 + oc);
                            for (src, wgt) in [
                                (r0 * in_hw.1 + c0, wr0 * wc0),
                                (r0 * in_hw.1 + c1, wr0 * wc1),
                                (r1 * in_hw.1 + c0, wr1 * wc0),
                                (r1 * in_hw.1 + c1, wr1 * wc1),
                            ] {
                                if wgt != T::zero() {
                                    g.row_mut(src).scaled_add(wgt, &drow);
                                }
                            }
                        }
                    }
                    g.into_dyn()
                });
            }
        }
    }

    fn accum<F: FnOnce() -> ArrayD<T>>(&self, slots: &mut [Option<ArrayD<T>>], v: Var, g: F) {
        if !self.needs(v) {
            return;
        }
        let g = g();
        match &mut slots[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn arr_scalar<T: Scalar>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(ndarray::IxDyn(&[1]), v)
}

/// Copy into C-order layout if necessary.
fn as_standard<T: Scalar>(a: &ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a.clone()
    } else {
        ArrayD::from_shape_vec(a.raw_dim(), a.iter().copied().collect()).unwrap()
    }
}

fn row_moments<T: Scalar>(row: ndarray::ArrayView1<'_, T>, eps: T) -> (T, T) {
    let n = T::from_usize(row.len());
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
    (mu, T::one() / (var + eps).sqrt())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    // tanh approximation of x * Phi(x)
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Per-output-index `(i0, i1, w0, w1)` interpolation table for one axis.
fn axis_map<T: Scalar>(in_n: usize, out_n: usize, align_corners: bool) -> Vec<(usize, usize, T, T)> {
    assert!(in_n > 0 && out_n > 0);
    (0..out_n)
        .map(|i| {
            if in_n == 1 {
                return (0, 0, T::one(), T::zero());
            }
            let src = if align_corners {
                if out_n == 1 {
                    (in_n - 1) as f64 / 2.0
                } else {
                    i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
                }
            } else {
                let s = (i as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
                s.clamp(0.0, (in_n - 1) as f64)
            };
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            let w1 = src - i0 as f64;
            (i0, i1, T::from_f64(1.0 - w1), T::from_f64(w1))
        })
        .collect()
}

fn im2col<T: Scalar>(x: &ndarray::ArrayView2<'_, T>, grid: (usize, usize), dilation: usize) -> Array2<T> {
    let (gh, gw) = grid;
    let cin = x.ncols();
    let d = dilation as isize;
    let mut col = Array2::<T>::zeros((gh * gw, cin * 9));
    for r in 0..gh {
        for c in 0..gw {
            let t = r * gw + c;
            let mut k = 0usize;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (sr, sc) = (r as isize + dr * d, c as isize + dc * d);
                    if sr >= 0 && sr < gh as isize && sc >= 0 && sc < gw as isize {
                        let src = sr as usize * gw + sc as usize;
                        col.slice_mut(ndarray::s![t, k * cin..(k + 1) * cin]).assign(&x.row(src));
                    }
                    k += 1;
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(
    dcol: &ndarray::ArrayView2<'_, T>,
    cin: usize,
    grid: (usize, usize),
    dilation: usize,
) -> Array2<T> {
    let (gh, gw) = grid;
    let d = dilation as isize;
    let mut dx = Array2::<T>::zeros((gh * gw, cin));
    for r in 0..gh {
        for c in 0..gw {
            let t = r * gw + c;
            let mut k = 0usize;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (sr, sc) = (r as isize + dr * d, c as isize + dc * d);
                    if sr >= 0 && sr < gh as isize && sc >= 0 && sc < gw as isize {
                        let src = sr as usize * gw + sc as usize;
                        let patch = dcol.slice(ndarray::s![t, k * cin..(k + 1) * cin]);
                        dx.row_mut(src).zip_mut_with(&patch, |a, &b| *a += b);
                    }
                    k += 1;
                }
            }
        }
    }
    dx
}
