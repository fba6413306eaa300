//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the code under test except to
//! build inputs or read parameter values.

#![allow(dead_code)]

use aoan_core::attention::AttentionParams;
use aoan_core::data::Polarity;
use aoan_core::model::Prepared;
use aoan_core::params::ParamStore;
use aoan_core::{Graph, Model, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Below this norm a gradient counts as zero when forming relative errors.
pub const REL_FLOOR: f64 = 1e-6;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn norm(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied())
        .max(norm(numeric.iter().copied()))
        .max(REL_FLOOR);
    diff / scale
}

/// Worst per-input relative error between backprop and central differences
/// for a scalar function of `inputs`.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        let mut xs = inputs.to_vec();
        for j in 0..input.numel() {
            let orig = input.data()[j];
            xs[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[k].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(analytic[k].data(), &numeric));
    }
    worst
}

/// Worst per-parameter relative error of the model loss gradient.
pub fn model_grad_check(model: &mut Model, batch: &[Prepared]) -> f64 {
    let (_, analytic) = model.loss_and_grads(batch).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..model.params().len() {
        if !model.params().entries()[k].trainable {
            continue;
        }
        let numel = model.params().entries()[k].value.numel();
        let mut numeric = vec![0.0; numel];
        for j in 0..numel {
            let orig = model.params().entries()[k].value.data()[j];
            model.params_mut().entries_mut()[k].value.data_mut()[j] = orig + FD_STEP;
            let up = model.loss(batch).unwrap();
            model.params_mut().entries_mut()[k].value.data_mut()[j] = orig - FD_STEP;
            let down = model.loss(batch).unwrap();
            model.params_mut().entries_mut()[k].value.data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(analytic[k].data(), &numeric));
    }
    worst
}

/// Mask by enumerating the three distance cases as explicit row sets: the
/// `l` rows left of the aspect, the aspect rows, and the row right after the
/// aspect plus `l` more.
pub fn brute_force_mask(n: usize, start: usize, len: usize, l: usize) -> Vec<bool> {
    let mut on = vec![false; n + 1];
    for row in start..start + len {
        on[row] = true;
    }
    for k in 1..=l {
        if let Some(row) = start.checked_sub(k) {
            on[row] = true;
        }
    }
    for k in 0..=l {
        let row = start + len + k;
        if row <= n {
            on[row] = true;
        }
    }
    on
}

fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|i| (0..cols).map(|j| w.at(i, j) * x[j]).sum())
        .collect()
}

fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Per-head loop over plain vectors: project the query and each key row,
/// softmax the scaled scores over valid rows, average values, concatenate
/// heads and apply the output map.
pub fn naive_attention(
    store: &ParamStore,
    params: &AttentionParams,
    query: &[f64],
    keys: &[Vec<f64>],
    valid: &[bool],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let get = |id| store.get(id);
    let q = add_vec(&mat_vec(get(params.wq), query), get(params.bq).data());
    let k: Vec<Vec<f64>> = keys
        .iter()
        .map(|x| add_vec(&mat_vec(get(params.wk), x), get(params.bk).data()))
        .collect();
    let v: Vec<Vec<f64>> = keys
        .iter()
        .map(|x| add_vec(&mat_vec(get(params.wv), x), get(params.bv).data()))
        .collect();
    let d = query.len();
    let dk = d / params.heads;
    let mut concat = Vec::with_capacity(d);
    let mut all_weights = Vec::new();
    for h in 0..params.heads {
        let lo = h * dk;
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| (0..dk).map(|t| q[lo + t] * kj[lo + t]).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let max = scores
            .iter()
            .zip(valid)
            .filter(|(_, &ok)| ok)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores
            .iter()
            .zip(valid)
            .map(|(s, &ok)| if ok { (s - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
        for t in 0..dk {
            concat.push(weights.iter().zip(&v).map(|(w, vj)| w * vj[lo + t]).sum());
        }
        all_weights.push(weights);
    }
    (mat_vec(get(params.wh), &concat), all_weights)
}

/// Accuracy and macro-F1 from direct counting, without a confusion matrix.
pub fn hand_metrics(gold: &[Polarity], pred: &[Polarity]) -> (f64, f64) {
    let n = gold.len();
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let mut f1_sum = 0.0;
    for class in Polarity::ALL {
        let tp = gold.iter().zip(pred).filter(|(g, p)| **g == class && **p == class).count() as f64;
        let fp = gold.iter().zip(pred).filter(|(g, p)| **g != class && **p == class).count() as f64;
        let fn_ = gold.iter().zip(pred).filter(|(g, p)| **g == class && **p != class).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        f1_sum += f1;
    }
    (accuracy, f1_sum / 3.0)
}
