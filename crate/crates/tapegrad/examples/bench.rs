use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::nn::{Binder, Init, ParamStore, TransformerBlock};
use tapegrad::Graph;

fn main() {
    for (depth, dim, heads, mlp) in [(2usize, 48usize, 4usize, 2usize), (2, 64, 4, 2), (3, 64, 4, 2), (4, 64, 4, 2), (8, 512, 8, 4)] {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(7);
        let blocks: Vec<_> = (0..depth)
            .map(|i| TransformerBlock::new(&mut store, &mut init, &format!("b{i}"), dim, heads, mlp))
            .collect();
        let patch_w = init.normal2::<f32>(256, dim, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ArrayD::from_shape_simple_fn(IxDyn(&[256, 256]), || rng.random::<f32>());

        let iters = if dim > 128 { 3 } else { 20 };
        let t0 = Instant::now();
        for _ in 0..iters {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store);
            let x = g.constant(img.clone());
            let tok = g.patchify(x, 16);
            let wp = g.constant(patch_w.clone());
            let mut h = g.matmul(tok, wp);
            for b in &blocks {
                h = b.forward(&mut g, &store, &mut binder, false, h);
            }
            let sq = g.square(h);
            let loss = g.mean(sq);
            let mut grads = g.backward(loss);
            let _ = binder.collect_grads(&mut grads);
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        println!(
            "depth={depth} dim={dim}: fwd+bwd {:.1} ms/view  ({} params)",
            dt * 1e3,
            store.num_scalars()
        );
    }
}
