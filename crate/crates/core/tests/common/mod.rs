//! Shared test helpers: a central finite-difference oracle that only ever
//! evaluates forward values, never the backward sweep.

#![allow(dead_code)]

use msct_core::tensor::{Graph, ParamStore, Tensor, Var};
use msct_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn rand_away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `sum(f(inputs) * weights)` so every output element influences the loss.
fn scalar_loss<F>(f: &F, inputs: &[Tensor], weights: &mut Option<Tensor>, seed: u64) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let w = weights
        .get_or_insert_with(|| {
            let mut r = rng(seed ^ 0xabcdef);
            rand_tensor(&mut r, g.shape(out), 0.5, 1.5)
        })
        .clone();
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

/// Largest violation `|a - n| - rtol * max(|a|, |n|)` over all input elements;
/// the check passes when this is `<= 1e-8`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    let (g, vars, loss) = scalar_loss(&f, inputs, &mut weights, seed)?;
    let grads = g.backward(loss)?;
    let mut worst = f64::NEG_INFINITY;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (gp, _, lp) = scalar_loss(&f, &plus, &mut weights, seed)?;
            let (gm, _, lm) = scalar_loss(&f, &minus, &mut weights, seed)?;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let violation = (a - numeric).abs() - FD_RTOL * a.abs().max(numeric.abs());
            worst = worst.max(violation);
        }
    }
    Ok(worst)
}

pub fn assert_grad_ok<F>(name: &str, f: F, inputs: &[Tensor], seed: u64)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let worst = grad_check(f, inputs, seed).unwrap();
    assert!(worst <= 1e-8, "{name}: finite-difference mismatch {worst:e} (seed {seed})");
}

/// Like [`grad_check`] but also perturbs every parameter in `store`.
pub fn layer_grad_check<F>(f: F, store: &ParamStore, inputs: &[Tensor], seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor> = None;
    let eval = |store: &ParamStore, inputs: &[Tensor], weights: &mut Option<Tensor>| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        let w = weights
            .get_or_insert_with(|| {
                let mut r = rng(seed ^ 0x5eed);
                rand_tensor(&mut r, g.shape(out), 0.5, 1.5)
            })
            .clone();
        let wv = g.constant(w);
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod)?;
        Ok((g, vars, loss))
    };
    let loss_at = |store: &ParamStore, inputs: &[Tensor], weights: &mut Option<Tensor>| -> Result<f64> {
        let (g, _, l) = eval(store, inputs, weights)?;
        Ok(g.value(l).item())
    };
    let (g, vars, loss) = eval(store, inputs, &mut weights)?;
    let grads = g.backward(loss)?;
    let mut worst = f64::NEG_INFINITY;
    let mut judge = |a: f64, n: f64| {
        worst = worst.max((a - n).abs() - FD_RTOL * a.abs().max(n.abs()));
    };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let n = (loss_at(store, &plus, &mut weights)? - loss_at(store, &minus, &mut weights)?) / (2.0 * FD_STEP);
            judge(analytic.data()[j], n);
        }
    }
    for id in store.ids() {
        let analytic = grads.param_or_zero(store, id);
        for j in 0..analytic.len() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[j] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[j] -= FD_STEP;
            let n = (loss_at(&plus, inputs, &mut weights)? - loss_at(&minus, inputs, &mut weights)?) / (2.0 * FD_STEP);
            judge(analytic.data()[j], n);
        }
    }
    Ok(worst)
}

pub fn assert_layer_grad_ok<F>(name: &str, f: F, store: &ParamStore, inputs: &[Tensor], seed: u64)
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let worst = layer_grad_check(f, store, inputs, seed).unwrap();
    assert!(worst <= 1e-8, "{name}: finite-difference mismatch {worst:e} (seed {seed})");
}
