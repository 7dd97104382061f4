//! Finite-difference audit of every differentiable operation and of the
//! whole relaxed selection pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Reduction, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{init_params, joint_loss_on, ModelConfig, TaskLabels, TaskSpec};
use crate::selection::{relaxed_permutation, topk_relaxed_mask};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Case = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .expect("shape")
}

/// `sum(y ⊙ w)` with a fixed random `w`, so every output entry gets its own
/// upstream gradient.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), t.value(y).shape());
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor, Case)> {
    let other = random(rng, &[4, 3]);
    let left = random(rng, &[2, 3]);
    let same = random(rng, &[3, 4]);
    let row = random(rng, &[4]);
    let mask = Tensor::vector(vec![0.3, 0.0, 1.0, 0.7]);
    let logits_labels = vec![Some(1), None, Some(3)];
    let mut targets = random(rng, &[3, 4]).into_values();
    targets[5] = f64::NAN;
    let x34 = random(rng, &[3, 4]);
    let scores = Tensor::vector(vec![0.4, -1.1, 0.9, 0.05, -0.3]);

    let o = other.clone();
    let l = left.clone();
    let s1 = same.clone();
    let s2 = same.clone();
    let s3 = same;
    let r1 = row.clone();
    let r2 = row;
    let m1 = mask.clone();
    let x_for_mask = x34.clone();
    vec![
        (
            "matmul (lhs)",
            x34.clone(),
            Box::new(move |t: &mut Tape, x| {
                let b = t.constant(o.clone());
                let y = t.matmul(x, b)?;
                project(t, y, 1)
            }) as Case,
        ),
        (
            "matmul (rhs)",
            x34.clone(),
            Box::new(move |t: &mut Tape, x| {
                let a = t.constant(l.clone());
                let a = t.matmul(a, x)?;
                project(t, a, 2)
            }),
        ),
        (
            "softmax_rows",
            x34.clone(),
            Box::new(|t: &mut Tape, x| {
                let y = t.softmax_rows(x)?;
                project(t, y, 3)
            }),
        ),
        (
            "add",
            x34.clone(),
            Box::new(move |t: &mut Tape, x| {
                let b = t.constant(s1.clone());
                let y = t.add(x, b)?;
                let y = t.mul(y, y)?;
                project(t, y, 4)
            }),
        ),
        (
            "sub (broadcast row)",
            x34.clone(),
            Box::new(move |t: &mut Tape, x| {
                let b = t.constant(r1.clone());
                let y = t.sub(x, b)?;
                let y = t.mul(y, y)?;
                project(t, y, 5)
            }),
        ),
        (
            "mul",
            x34.clone(),
            Box::new(move |t: &mut Tape, x| {
                let b = t.constant(s2.clone());
                let y = t.mul(x, b)?;
                let y = t.mul(y, x)?;
                project(t, y, 6)
            }),
        ),
        (
            "mul (broadcast rhs)",
            r2.clone(),
            Box::new(move |t: &mut Tape, r| {
                let a = t.constant(s3.clone());
                let y = t.mul(a, r)?;
                project(t, y, 7)
            }),
        ),
        (
            "relu",
            x34.clone(),
            Box::new(|t: &mut Tape, x| {
                let y = t.relu(x)?;
                project(t, y, 8)
            }),
        ),
        (
            "neg",
            x34.clone(),
            Box::new(|t: &mut Tape, x| {
                let y = t.neg(x)?;
                project(t, y, 9)
            }),
        ),
        (
            "abs",
            x34.clone(),
            Box::new(|t: &mut Tape, x| {
                let y = t.abs(x)?;
                project(t, y, 10)
            }),
        ),
        (
            "scale",
            x34.clone(),
            Box::new(|t: &mut Tape, x| {
                let y = t.scale(x, -1.7)?;
                project(t, y, 11)
            }),
        ),
        (
            "sum (all, axis 0, axis 1)",
            x34.clone(),
            Box::new(|t: &mut Tape, x| {
                let a = t.reduce(Reduction::Sum, x, Some(0))?;
                let b = t.reduce(Reduction::Sum, x, Some(1))?;
                let a = project(t, a, 12)?;
                let b = project(t, b, 13)?;
                let c = t.sum(x)?;
                let c = t.mul(c, c)?;
                let ab = t.add(a, b)?;
                t.add(ab, c)
            }),
        ),
        (
            "mean (all, axis 0, axis 1)",
            x34.clone(),
            Box::new(|t: &mut Tape, x| {
                let a = t.reduce(Reduction::Mean, x, Some(0))?;
                let b = t.reduce(Reduction::Mean, x, Some(1))?;
                let a = project(t, a, 14)?;
                let b = project(t, b, 15)?;
                let c = t.mean(x)?;
                let c = t.mul(c, c)?;
                let ab = t.add(a, b)?;
                t.add(ab, c)
            }),
        ),
        (
            "reshape / narrow / slice_rows",
            x34.clone(),
            Box::new(|t: &mut Tape, x| {
                let y = t.reshape(x, &[12])?;
                let y = t.narrow(y, 2, &[2, 3])?;
                let z = t.slice_rows(x, 1, 3)?;
                let y = project(t, y, 16)?;
                let z = project(t, z, 17)?;
                t.add(y, z)
            }),
        ),
        (
            "pairwise_diff",
            scores.clone(),
            Box::new(|t: &mut Tape, s| {
                let y = t.pairwise_diff(s)?;
                project(t, y, 18)
            }),
        ),
        (
            "mask_columns (input)",
            x_for_mask,
            Box::new(move |t: &mut Tape, x| {
                let m = t.constant(m1.clone());
                let y = t.mask_columns(x, m)?;
                project(t, y, 19)
            }),
        ),
        (
            "mask_columns (mask)",
            mask,
            Box::new(move |t: &mut Tape, m| {
                let x = t.constant(x34.clone());
                let y = t.mask_columns(x, m)?;
                project(t, y, 20)
            }),
        ),
        (
            "softmax_cross_entropy",
            random(rng, &[3, 4]),
            Box::new(move |t: &mut Tape, x| t.softmax_cross_entropy(x, &logits_labels)),
        ),
        (
            "masked_mse",
            random(rng, &[3, 4]),
            Box::new(move |t: &mut Tape, x| t.masked_mse(x, &targets)),
        ),
        (
            "relaxed_permutation",
            scores.clone(),
            Box::new(|t: &mut Tape, s| {
                let p = relaxed_permutation(t, s, 0.7)?;
                project(t, p, 21)
            }),
        ),
        (
            "topk_relaxed_mask",
            scores,
            Box::new(|t: &mut Tape, s| {
                let p = relaxed_permutation(t, s, 0.7)?;
                let m = topk_relaxed_mask(t, p, 2)?;
                project(t, m, 22)
            }),
        ),
    ]
}

/// Whole model on a small problem (d = 8, N = 16, two tasks), with the
/// relaxed top-k mask in place of the straight-through one, differentiated
/// with respect to every parameter at once.
fn end_to_end(rng: &mut ChaCha8Rng) -> Result<(Tensor, Case)> {
    let (n, d) = (16, 8);
    let tasks = vec![TaskSpec::classification("c", 3), TaskSpec::regression("r")];
    let mut config = ModelConfig::with_defaults(d, 3, tasks, 100)?;
    config.encoder_layers = vec![6];
    config.latent_dim = 4;
    let params = init_params(&config, rng)?;
    let mut flat = params.flatten();
    for v in flat.iter_mut().take(d) {
        *v = rng.gen_range(-0.5..0.5);
    }
    let x = random(rng, &[n, d]);
    let labels = vec![
        TaskLabels::Class(
            (0..n)
                .map(|i| if i % 5 == 4 { None } else { Some(i % 3) })
                .collect(),
        ),
        TaskLabels::Regression(
            (0..n)
                .map(|i| {
                    if i % 7 == 3 {
                        f64::NAN
                    } else {
                        (i as f64).sin()
                    }
                })
                .collect(),
        ),
    ];
    let flat = Tensor::vector(flat);
    let f: Case = Box::new(move |t: &mut Tape, theta| {
        let vars = params.vars_from_flat(t, theta)?;
        let pi = relaxed_permutation(t, vars.scores, 2.0)?;
        let mask = topk_relaxed_mask(t, pi, config.k_final)?;
        let input = t.constant(x.clone());
        joint_loss_on(t, input, &labels, &vars, &config, mask)
    });
    Ok((flat, f))
}

/// Runs every check; deterministic in `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, x, f) in op_cases(&mut rng) {
        out.push(OpCheck {
            name: name.to_owned(),
            max_rel_error: grad_check(f, &x, EPS)?,
            tolerance: TOLERANCE,
        });
    }
    let (theta, f) = end_to_end(&mut rng)?;
    out.push(OpCheck {
        name: "end-to-end (relaxed mask, encoder, two heads)".to_owned(),
        max_rel_error: grad_check(f, &theta, EPS)?,
        tolerance: TOLERANCE,
    });
    Ok(out)
}
