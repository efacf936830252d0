//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the graph from scratch for every probe, so the
//! function under test must be a pure function of its inputs.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Var};

/// Result of probing one coordinate.
#[derive(Debug, Clone, Copy)]
pub struct ProbeResult {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare backprop gradients of `build` against central differences.
///
/// `build` receives a fresh graph plus one leaf per input array and must
/// return the scalar output node. `coords_per_input` coordinates are probed
/// per input, chosen by `seed`. Returns the worst probe.
pub fn gradcheck<F>(
    inputs: &[ArrayD<f64>],
    step: f64,
    coords_per_input: usize,
    seed: u64,
    build: F,
) -> ProbeResult
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |arrays: &[ArrayD<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = arrays.iter().map(|a| g.leaf(a.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };

    let (g, vars, out) = eval(inputs);
    assert_eq!(g.value(out).len(), 1, "gradcheck requires a scalar output");
    let grads = g.backward(out);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = ProbeResult { input: 0, coord: 0, analytic: 0.0, numeric: 0.0, rel_err: 0.0 };
    for (i, arr) in inputs.iter().enumerate() {
        for _ in 0..coords_per_input.min(arr.len()) {
            let coord = rng.random_range(0..arr.len());
            let mut plus = inputs.to_vec();
            *flat_mut(&mut plus[i], coord) += step;
            let (gp, _, op) = eval(&plus);
            let fp = gp.scalar_value(op);

            let mut minus = inputs.to_vec();
            *flat_mut(&mut minus[i], coord) -= step;
            let (gm, _, om) = eval(&minus);
            let fm = gm.scalar_value(om);

            let numeric = (fp - fm) / (2.0 * step);
            let a = flat_get(&analytic[i], coord);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel_err = (a - numeric).abs() / denom;
            if rel_err > worst.rel_err {
                worst = ProbeResult { input: i, coord, analytic: a, numeric, rel_err };
            }
        }
    }
    worst
}

/// Row-major flat index into a possibly non-contiguous array.
fn multi_index(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

fn flat_get(a: &ArrayD<f64>, flat: usize) -> f64 {
    if a.ndim() == 0 {
        return *a.iter().next().unwrap();
    }
    a[ndarray::IxDyn(&multi_index(a.shape(), flat))]
}

fn flat_mut(a: &mut ArrayD<f64>, flat: usize) -> &mut f64 {
    let idx = multi_index(a.shape(), flat);
    &mut a[ndarray::IxDyn(&idx)]
}

/// Convenience assertion wrapper around [`gradcheck`].
pub fn assert_grads_match<F>(inputs: &[ArrayD<f64>], tol: f64, seed: u64, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let worst = gradcheck(inputs, 1e-4, 10, seed, build);
    assert!(
        worst.rel_err < tol,
        "gradient mismatch: input {} coord {} analytic {:.6e} numeric {:.6e} rel_err {:.3e}",
        worst.input,
        worst.coord,
        worst.analytic,
        worst.numeric,
        worst.rel_err
    );
}
