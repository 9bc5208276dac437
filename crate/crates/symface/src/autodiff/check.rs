//! Finite-difference gradient checking.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Real};
use crate::error::{Error, Result};
use crate::params::{BindMode, Binding, ParamStore};

const REL_FLOOR: f64 = 1e-8;

fn check_epsilon<F: Real>(epsilon: F) -> Result<f64> {
    let e = epsilon.as_f64();
    // slack for f32 literals that round just past the nominal bounds
    if !(0.999e-7..=1.001e-3).contains(&e) {
        return Err(Error::Parameter(format!(
            "grad_check epsilon {e} outside [1e-7, 1e-3]"
        )));
    }
    Ok(e)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Evaluate a scalar-valued graph builder on a plain array input.
pub fn eval_scalar<F: Real>(
    build: &impl Fn(&mut Graph<F>, NodeId) -> Result<NodeId>,
    x: &ArrayD<F>,
) -> Result<F> {
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let out = build(&mut g, xid)?;
    let v = g.scalar_value(out);
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite objective in grad check".into()));
    }
    Ok(v)
}

/// Compare the analytic gradient of `build` w.r.t. `x` against central finite
/// differences, componentwise. Returns the max relative error with
/// denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F: Real>(
    build: impl Fn(&mut Graph<F>, NodeId) -> Result<NodeId>,
    x: &ArrayD<F>,
    epsilon: F,
) -> Result<f64> {
    let eps = check_epsilon(epsilon)?;

    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let out = build(&mut g, xid)?;
    if !g.scalar_value(out).is_finite() {
        return Err(Error::Numeric("non-finite objective in grad check".into()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(xid)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));

    let mut max_err = 0.0f64;
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().expect("contiguous input")[idx];
        xp.as_slice_mut().expect("contiguous input")[idx] = orig + F::of_f64(eps);
        let fp = eval_scalar(&build, &xp)?.as_f64();
        xp.as_slice_mut().expect("contiguous input")[idx] = orig - F::of_f64(eps);
        let fm = eval_scalar(&build, &xp)?.as_f64();
        xp.as_slice_mut().expect("contiguous input")[idx] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.as_slice().expect("contiguous grad")[idx].as_f64();
        max_err = max_err.max(rel_err(a, numeric));
    }
    Ok(max_err)
}

/// Gradient check w.r.t. parameters held in a store. For each array a
/// deterministic random subset of `samples_per_array` components is probed
/// with central differences. Returns the max relative error.
pub fn grad_check_store<F: Real>(
    store: &ParamStore<F>,
    build: impl Fn(&mut Graph<F>, &Binding) -> Result<NodeId>,
    epsilon: F,
    samples_per_array: usize,
    seed: u64,
) -> Result<f64> {
    let eps = check_epsilon(epsilon)?;

    let mut g = Graph::new();
    let binding = store.bind(&mut g, BindMode::Trainable);
    let out = build(&mut g, &binding)?;
    if !g.scalar_value(out).is_finite() {
        return Err(Error::Numeric("non-finite objective in grad check".into()));
    }
    g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut work = store.clone();
    for (name, arr) in store.iter() {
        let id = binding.id(name);
        let analytic = g.grad(id).cloned().unwrap_or_else(|| ArrayD::zeros(arr.raw_dim()));
        let len = arr.len();
        let n_probe = samples_per_array.min(len);
        for _ in 0..n_probe {
            let idx = rng.gen_range(0..len);
            let orig = work.get(name).expect("param").as_slice().expect("contiguous")[idx];
            let f_at = |w: &ParamStore<F>| -> Result<f64> {
                let mut g = Graph::new();
                let b = w.bind(&mut g, BindMode::Trainable);
                let out = build(&mut g, &b)?;
                Ok(g.scalar_value(out).as_f64())
            };
            work.get_mut(name).expect("param").as_slice_mut().expect("contiguous")[idx] =
                orig + F::of_f64(eps);
            let fp = f_at(&work)?;
            work.get_mut(name).expect("param").as_slice_mut().expect("contiguous")[idx] =
                orig - F::of_f64(eps);
            let fm = f_at(&work)?;
            work.get_mut(name).expect("param").as_slice_mut().expect("contiguous")[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.as_slice().expect("contiguous grad")[idx].as_f64();
            max_err = max_err.max(rel_err(a, numeric));
        }
    }
    Ok(max_err)
}
