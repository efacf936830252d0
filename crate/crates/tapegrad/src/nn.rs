//! Parameter storage and the handful of layers the models are built from.
//!
//! Parameters live outside any tape in a [`ParamStore`]; each training step
//! binds them into a fresh [`Graph`] through a [`Binder`] so that a weight
//! used twice in one step (e.g. a shared encoder applied to two views)
//! maps to a single leaf and its gradients accumulate.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Scalar, Var};

/// Index of a parameter inside its store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Order is creation order and is part of the
/// checkpoint contract.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

/// A store shared between models (the MAE model and the segmentation model
/// alias the same encoder weights through one of these).
pub type SharedStore<T> = Rc<RefCell<ParamStore<T>>>;

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.iter().any(|n| *n == name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn deep_clone(&self) -> Self {
        ParamStore { names: self.names.clone(), values: self.values.clone() }
    }
}

/// Per-step map from parameters to tape leaves.
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        Binder { vars: vec![None; store.len()] }
    }

    /// Leaf for `id`, created on first use and reused afterwards.
    pub fn bind<T: Scalar>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(store.value(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Teacher-style binding: the value enters the tape as a constant, so
    /// no gradient ever flows back to it.
    pub fn bind_frozen<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        id: ParamId,
    ) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.constant(store.value(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// `(ParamId, grad)` pairs for every bound parameter with a gradient.
    pub fn collect_grads<T: Scalar>(&self, grads: &mut crate::Grads<T>) -> Vec<(ParamId, ArrayD<T>)> {
        let mut out = Vec::new();
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(var) = v {
                if let Some(g) = grads.take(*var) {
                    out.push((ParamId(i), g));
                }
            }
        }
        out
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// N(0, std^2) via Box-Muller on ChaCha uniforms.
    fn normal(&mut self, std: f64) -> f64 {
        let u1: f64 = self.rng.random::<f64>().max(1e-12);
        let u2: f64 = self.rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    }

    pub fn normal2<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> ArrayD<T> {
        Array2::from_shape_simple_fn((rows, cols), || T::from_f64(self.normal(std))).into_dyn()
    }

    pub fn zeros1<T: Scalar>(&mut self, n: usize) -> ArrayD<T> {
        Array1::<T>::zeros(n).into_dyn()
    }

    pub fn ones1<T: Scalar>(&mut self, n: usize) -> ArrayD<T> {
        Array1::<T>::from_elem(n, T::one()).into_dyn()
    }
}

/// Dense layer `(n, in) -> (n, out)`.
#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Self {
        Linear {
            w: store.add(format!("{prefix}.w"), init.normal2(d_in, d_out, std)),
            b: store.add(format!("{prefix}.b"), init.zeros1(d_out)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        x: Var,
    ) -> Var {
        let w = bind(g, store, binder, frozen, self.w);
        let b = bind(g, store, binder, frozen, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Learned per-channel affine layer norm.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{prefix}.g"), init.ones1(dim)),
            beta: store.add(format!("{prefix}.b"), init.zeros1(dim)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        x: Var,
    ) -> Var {
        let gamma = bind(g, store, binder, frozen, self.gamma);
        let beta = bind(g, store, binder, frozen, self.beta);
        g.layer_norm(x, gamma, beta, T::from_f64(1e-5))
    }
}

/// Pre-norm transformer block: LN -> MHSA -> +res, LN -> MLP -> +res.
#[derive(Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        assert!(dim % heads == 0, "head count must divide embed dim");
        let hidden = dim * mlp_ratio;
        TransformerBlock {
            ln1: LayerNorm::new(store, init, &format!("{prefix}.ln1"), dim),
            qkv: Linear::new(store, init, &format!("{prefix}.qkv"), dim, 3 * dim, 0.02),
            proj: Linear::new(store, init, &format!("{prefix}.proj"), dim, dim, 0.02),
            ln2: LayerNorm::new(store, init, &format!("{prefix}.ln2"), dim),
            fc1: Linear::new(store, init, &format!("{prefix}.fc1"), dim, hidden, 0.02),
            fc2: Linear::new(store, init, &format!("{prefix}.fc2"), hidden, dim, 0.02),
            heads,
            dim,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        x: Var,
    ) -> Var {
        let dh = self.dim / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let h = self.ln1.forward(g, store, binder, frozen, x);
        let qkv = self.qkv.forward(g, store, binder, frozen, h);
        let mut head_outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let q = g.slice_cols(qkv, hd * dh, dh);
            let k = g.slice_cols(qkv, self.dim + hd * dh, dh);
            let v = g.slice_cols(qkv, 2 * self.dim + hd * dh, dh);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            head_outs.push(g.matmul(attn, v));
        }
        let mut ctx = head_outs[0];
        for &h in &head_outs[1..] {
            ctx = g.concat_cols(ctx, h);
        }
        let attn_out = self.proj.forward(g, store, binder, frozen, ctx);
        let x = g.add(x, attn_out);

        let h = self.ln2.forward(g, store, binder, frozen, x);
        let h = self.fc1.forward(g, store, binder, frozen, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, binder, frozen, h);
        g.add(x, h)
    }
}

/// 3x3 grid convolution with weights stored as `(cin*9, cout)`.
#[derive(Clone)]
pub struct ConvGrid {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

impl ConvGrid {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        cin: usize,
        cout: usize,
        dilation: usize,
    ) -> Self {
        let std = (2.0 / (cin as f64 * 9.0)).sqrt();
        ConvGrid {
            w: store.add(format!("{prefix}.w"), init.normal2(cin * 9, cout, std)),
            b: store.add(format!("{prefix}.b"), init.zeros1(cout)),
            dilation,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        frozen: bool,
        x: Var,
        grid: (usize, usize),
    ) -> Var {
        let w = bind(g, store, binder, frozen, self.w);
        let b = bind(g, store, binder, frozen, self.b);
        g.conv3x3_grid(x, w, b, grid, self.dilation)
    }
}

fn bind<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    binder: &mut Binder,
    frozen: bool,
    id: ParamId,
) -> Var {
    if frozen {
        binder.bind_frozen(g, store, id)
    } else {
        binder.bind(g, store, id)
    }
}
