//! Shared helpers for the integration tests: deterministic tensor fills and
//! a central finite-difference gradient checker.

use myot2_core::{Graph, NodeId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform fill in [lo, hi), deterministic in the seed.
pub fn rand_tensor(shape: impl Into<Vec<usize>>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data)
}

/// Uniform fill with magnitude in [0.1, 1.1) and random sign, so values stay
/// away from the relu kink at zero.
pub fn rand_tensor_signed(shape: impl Into<Vec<usize>>, seed: u64) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.1);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Reduces an arbitrary tensor to a scalar through a fixed random weighting,
/// so every output element influences the loss with a distinct coefficient.
pub fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> NodeId {
    let w = g.input(rand_tensor(g.shape(y).to_vec(), seed, 0.5, 1.5));
    let m = g.mul(y, w);
    g.sum_all(m)
}

/// Relative error with a floor: |a - n| / max(|a|, |n|, 1e-3). The floor
/// keeps finite-difference rounding noise on near-zero gradients from
/// registering, while a wrong analytic gradient of any practical size still
/// produces an error far above every tolerance used in these tests.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Checks every element of every parameter in `store` against central finite
/// differences of the scalar loss built by `build`. Returns the largest
/// relative error seen. The builder must be deterministic: it is re-invoked
/// for each perturbed evaluation.
pub fn max_fd_rel_err(
    store: &ParamStore,
    h: f64,
    build: impl Fn(&mut Graph, &ParamStore) -> NodeId,
) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);
    let named = g.param_grads(&grads);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for (name, tensor) in store.iter() {
        let analytic = named
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from gradient map"));
        for i in 0..tensor.numel() {
            let x0 = tensor.data()[i];
            let step = h * x0.abs().max(1.0);
            let mut bumped = tensor.clone();
            bumped.data_mut()[i] = x0 + step;
            let mut sp = store.clone();
            sp.set_value(name, bumped.clone()).expect("parameter exists");
            let fp = eval(&sp);
            bumped.data_mut()[i] = x0 - step;
            sp.set_value(name, bumped).expect("parameter exists");
            let fm = eval(&sp);
            let numeric = (fp - fm) / (2.0 * step);
            let e = rel_err(analytic.data()[i], numeric);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}

/// Builds a store from (name, tensor) pairs.
pub fn store_of(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, t) in entries {
        store.insert(name, t.clone()).expect("unique parameter names");
    }
    store
}
