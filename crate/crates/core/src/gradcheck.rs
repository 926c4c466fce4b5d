//! Finite-difference verification of the backward pass in `f64`.
//!
//! Each check builds a small random graph, reduces it to a scalar (a random
//! linear functional for non-loss ops), and compares reverse-mode gradients
//! with central differences. The relative error of one coordinate is
//! `|a - n| / max(|a|, |n|, 1e-2)`, so gradients far below 1e-2 are compared
//! absolutely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, Graph, Mode, NodeId};
use crate::error::{arg_err, Result};
use crate::model::{build_model, Head, ModelConfig};
use crate::tensor::Tensor;

pub const OPS: [&str; 9] = [
    "conv2d",
    "dense",
    "relu",
    "sigmoid",
    "dropout",
    "flatten",
    "mse_loss",
    "bce_loss",
    "micro_model",
];

/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-2;
/// One-sided slopes differing by more than this mark a ReLU kink inside the stencil.
const KINK_GAP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradcheckOptions {
    /// Perturb every analytic gradient by 1%, as a negative control.
    pub corrupt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the stencil straddled a ReLU kink.
    pub skipped: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'a;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random values bounded away from zero by `margin`.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn scalar_of(build: &Build, leaves: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    Ok(g.value(out).data()[0])
}

/// Compares analytic and numeric gradients for every leaf marked as
/// requiring a gradient.
fn compare(name: &str, build: &Build, leaves: Vec<Tensor<f64>>, opts: GradcheckOptions) -> Result<OpReport> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    if g.value(out).numel() != 1 {
        return arg_err(format!("{name}: check graph must end in a scalar"));
    }
    g.backward(out)?;

    let mut report = OpReport { op: name.to_string(), max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut probe = leaves.clone();
    for (li, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            continue;
        }
        let analytic = g.grad(ids[li]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for j in 0..leaf.numel() {
            let x = leaf.data()[j];
            let mut at = |v: f64| -> Result<f64> {
                probe[li].data_mut()[j] = v;
                scalar_of(build, &probe)
            };
            let f_plus = at(x + STEP)?;
            let f_minus = at(x - STEP)?;
            let f_0 = at(x)?;
            let right = (f_plus - f_0) / STEP;
            let left = (f_0 - f_minus) / STEP;
            if (right - left).abs() > KINK_GAP * right.abs().max(left.abs()).max(1.0) {
                report.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * STEP);
            let mut a = analytic[j];
            if opts.corrupt {
                a = a * 1.01 + 1e-2;
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn projected(g: &mut Graph<f64>, node: NodeId, weights: &[f64]) -> Result<NodeId> {
    g.dot(node, weights)
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn grad(t: Tensor<f64>) -> Tensor<f64> {
    t.with_requires_grad(true)
}

/// Runs the check for `op` with inputs drawn from `seed`.
pub fn check_op(op: &str, seed: u64, opts: GradcheckOptions) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    match op {
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let x = grad(uniform(rng, &[2, 5, 6, 3], -1.0, 1.0)?);
            let k = grad(uniform(rng, &[3, 3, 3, 4], -1.0, 1.0)?);
            let b = grad(uniform(rng, &[4], -1.0, 1.0)?);
            let out_len = 2 * 5usize.div_ceil(stride) * 6usize.div_ceil(stride) * 4;
            let w = projection(rng, out_len);
            let build = move |g: &mut Graph<f64>, l: &[NodeId]| {
                let y = g.conv2d(l[0], l[1], l[2], stride)?;
                projected(g, y, &w)
            };
            compare(op, &build, vec![x, k, b], opts)
        }
        "dense" => {
            let x = grad(uniform(rng, &[3, 7], -1.0, 1.0)?);
            let w = grad(uniform(rng, &[7, 5], -1.0, 1.0)?);
            let b = grad(uniform(rng, &[5], -1.0, 1.0)?);
            let p = projection(rng, 15);
            let build = move |g: &mut Graph<f64>, l: &[NodeId]| {
                let y = g.dense(l[0], l[1], l[2])?;
                projected(g, y, &p)
            };
            compare(op, &build, vec![x, w, b], opts)
        }
        "relu" | "sigmoid" => {
            let kind = if op == "relu" { Activation::Relu } else { Activation::Sigmoid };
            let x = grad(off_zero(rng, &[4, 6], 0.05)?);
            let p = projection(rng, 24);
            let build = move |g: &mut Graph<f64>, l: &[NodeId]| {
                let y = g.activation(l[0], kind)?;
                projected(g, y, &p)
            };
            compare(op, &build, vec![x], opts)
        }
        "dropout" => {
            let x = grad(uniform(rng, &[3, 8], -1.0, 1.0)?);
            let p = projection(rng, 24);
            let build = move |g: &mut Graph<f64>, l: &[NodeId]| {
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                let y = g.dropout(l[0], 0.3, Mode::Inference, &mut unused)?;
                projected(g, y, &p)
            };
            compare(op, &build, vec![x], opts)
        }
        "flatten" => {
            let x = grad(uniform(rng, &[2, 3, 4, 2], -1.0, 1.0)?);
            let p = projection(rng, 48);
            let build = move |g: &mut Graph<f64>, l: &[NodeId]| {
                let y = g.flatten(l[0])?;
                projected(g, y, &p)
            };
            compare(op, &build, vec![x], opts)
        }
        "mse_loss" => {
            let pred = grad(uniform(rng, &[3, 4], -1.0, 1.0)?);
            let target = grad(uniform(rng, &[3, 4], -1.0, 1.0)?);
            let build = |g: &mut Graph<f64>, l: &[NodeId]| g.mse_loss(l[0], l[1]);
            compare(op, &build, vec![pred, target], opts)
        }
        "bce_loss" => {
            let pred = grad(uniform(rng, &[6, 1], 0.05, 0.95)?);
            let target = Tensor::from_fn(&[6, 1], |i| (i % 2) as f64)?;
            let build = |g: &mut Graph<f64>, l: &[NodeId]| g.bce_loss(l[0], l[1]);
            compare(op, &build, vec![pred, target], opts)
        }
        "micro_model" => micro_model(seed, rng, opts),
        other => arg_err(format!("unknown op '{other}'")),
    }
}

/// Two convolution blocks, one dropout/dense pair and the landmark head,
/// with dropout in train mode under a fixed mask.
fn micro_model(seed: u64, rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<OpReport> {
    let config = ModelConfig {
        input_height: 7,
        input_width: 9,
        block_widths: vec![2, 3],
        convs_per_block: 2,
        kernel_size: 3,
        fc_widths: vec![6],
        dropout_p: 0.3,
        head: Head::Landmark4,
        width_multiplier: 1.0,
    };
    let model = build_model::<f64>(&config, seed)?;
    let input = uniform(rng, &[2, 7, 9, 1], -1.0, 1.0)?;
    let target = uniform(rng, &[2, 4], -1.0, 1.0)?;
    let n_params = model.params().len();

    let mut leaves: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    leaves.push(input.with_requires_grad(true));
    leaves.push(target);
    let build = move |g: &mut Graph<f64>, l: &[NodeId]| {
        // the same mask on every evaluation
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let out = model.record_with(g, l[n_params], &l[..n_params], Mode::Train, &mut mask_rng)?;
        g.mse_loss(out, l[n_params + 1])
    };
    compare("micro_model", &build, leaves, opts)
}

/// Worst case per op over `seeds`, in `OPS` order.
pub fn run_all(seeds: impl IntoIterator<Item = u64> + Clone, opts: GradcheckOptions) -> Result<Vec<OpReport>> {
    OPS.iter()
        .map(|op| {
            let mut worst = OpReport { op: op.to_string(), max_rel_error: 0.0, checked: 0, skipped: 0 };
            for seed in seeds.clone() {
                let r = check_op(op, seed, opts)?;
                worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
                worst.checked += r.checked;
                worst.skipped += r.skipped;
            }
            Ok(worst)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_a_few_seeds() {
        for report in run_all(0..3, GradcheckOptions::default()).unwrap() {
            assert!(report.passed(), "{report:?}");
            assert!(report.checked > 0, "{report:?}");
        }
    }

    #[test]
    fn corruption_is_caught() {
        for op in OPS {
            let r = check_op(op, 0, GradcheckOptions { corrupt: true }).unwrap();
            assert!(!r.passed(), "{op} passed with corrupted gradients");
        }
    }

    #[test]
    fn unknown_op() {
        assert!(check_op("softmax", 0, GradcheckOptions::default()).is_err());
    }
}
