//! Differentiable top-k selection from learnable per-feature scores.
//!
//! Scores `s` (length `d`) are turned into a row-stochastic relaxed
//! permutation matrix whose row `m` (1-based) is
//!
//! ```text
//! softmax(((d + 1 - 2m) * s - A_s 1) / tau),   A_s[m, n] = |s_m - s_n|
//! ```
//!
//! The sum of its first `k` rows is a soft top-k indicator. The forward pass
//! uses the exact 0/1 indicator of the `k` largest scores instead; gradients
//! flow through the soft indicator (straight-through).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Learnable per-feature scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("score vector must have at least one entry"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("score {i} is not finite")));
        }
        Ok(ScoreVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone())
    }

    /// Indices of the `k` largest scores, best first.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        top_k_indices(&self.0, k)
    }
}

/// A relaxed permutation matrix evaluated outside any tape.
#[derive(Clone, Debug)]
pub struct RelaxedPermutation {
    pub pi: Tensor,
    pub tau: f64,
}

impl RelaxedPermutation {
    pub fn compute(scores: &ScoreVector, tau: f64) -> Result<Self> {
        let mut tape = Tape::new();
        let s = tape.constant(scores.to_tensor());
        let pi = relaxed_permutation(&mut tape, s, tau)?;
        Ok(RelaxedPermutation {
            pi: tape.value(pi).clone(),
            tau,
        })
    }

    pub fn dim(&self) -> usize {
        self.pi.shape()[0]
    }

    /// Soft top-k indicator: sum of the first `k` rows.
    pub fn topk_mask(&self, k: usize) -> Result<Vec<f64>> {
        let d = self.dim();
        check_k(k, d)?;
        let mut out = vec![0.0; d];
        for m in 0..k {
            for (o, v) in out.iter_mut().zip(&self.pi.values()[m * d..(m + 1) * d]) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// Forward-hard, backward-relaxed selection mask recorded on a tape.
#[derive(Clone, Debug)]
pub struct SelectionMask {
    /// 0/1 indicator of the selected features.
    pub hard: Vec<f64>,
    /// Soft top-k indicator the gradient flows through.
    pub relaxed: Var,
    /// Value seen downstream: equals `hard`, differentiates like `relaxed`.
    pub output: Var,
    pub k: usize,
}

impl SelectionMask {
    pub fn selected(&self) -> Vec<usize> {
        self.hard
            .iter()
            .enumerate()
            .filter(|(_, &h)| h == 1.0)
            .map(|(i, _)| i)
            .collect()
    }
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::contract(format!("k must be in 1..={d}, got {k}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// `A[m, n] = |s_m - s_n|`.
pub fn pairwise_abs_diff(tape: &mut Tape, s: Var) -> Result<Var> {
    let diff = tape.pairwise_diff(s)?;
    tape.abs(diff)
}

/// Relaxed permutation matrix of scores `s` at temperature `tau`.
pub fn relaxed_permutation(tape: &mut Tape, s: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let d = tape.value(s).numel();
    if d == 0 || tape.value(s).shape().len() != 1 {
        return Err(Error::Dimension {
            op: "relaxed_permutation",
            lhs: tape.value(s).shape().to_vec(),
            rhs: vec![],
        });
    }
    let abs_diff = pairwise_abs_diff(tape, s)?;
    let spread = tape.reduce(Reduction::Sum, abs_diff, Some(1))?;
    let coef: Vec<f64> = (1..=d).map(|m| (d + 1) as f64 - 2.0 * m as f64).collect();
    let coef = tape.constant(Tensor::new(vec![d, 1], coef)?);
    let s_row = tape.reshape(s, &[1, d])?;
    let weighted = tape.matmul(coef, s_row)?;
    let logits = tape.sub(weighted, spread)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    tape.softmax_rows(logits)
}

/// Sum of the first `k` rows of a relaxed permutation.
pub fn topk_relaxed_mask(tape: &mut Tape, pi: Var, k: usize) -> Result<Var> {
    let d = tape.value(pi).shape()[0];
    check_k(k, d)?;
    let top = tape.slice_rows(pi, 0, k)?;
    tape.reduce(Reduction::Sum, top, Some(0))
}

/// Adds `scale` times standard Gumbel noise to `s`. The noise is a constant
/// on the tape; with `scale == 0` the input is returned untouched.
pub fn gumbel_perturb<R: Rng + ?Sized>(
    tape: &mut Tape,
    s: Var,
    rng: &mut R,
    scale: f64,
) -> Result<Var> {
    if !(scale >= 0.0) {
        return Err(Error::contract(format!(
            "noise scale must be >= 0, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(s);
    }
    let d = tape.value(s).numel();
    let noise: Vec<f64> = (0..d).map(|_| scale * sample_gumbel(rng)).collect();
    let noise = tape.constant(Tensor::new(tape.value(s).shape().to_vec(), noise)?);
    tape.add(s, noise)
}

/// One draw from Gumbel(0, 1).
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// Indices of the `k` largest values, best first; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// 0/1 indicator of the `k` largest values.
pub fn hard_topk(values: &[f64], k: usize) -> Vec<f64> {
    let mut hard = vec![0.0; values.len()];
    for i in top_k_indices(values, k) {
        hard[i] = 1.0;
    }
    hard
}

/// Builds the straight-through selection mask for scores `s`.
///
/// When `noise` is given and `noise_scale > 0`, Gumbel noise perturbs the
/// scores first; both the hard and the relaxed mask use the perturbed scores.
pub fn straight_through_mask<R: Rng + ?Sized>(
    tape: &mut Tape,
    s: Var,
    tau: f64,
    k: usize,
    noise: Option<&mut R>,
    noise_scale: f64,
) -> Result<SelectionMask> {
    check_tau(tau)?;
    check_k(k, tape.value(s).numel())?;
    let perturbed = match noise {
        Some(rng) => gumbel_perturb(tape, s, rng, noise_scale)?,
        None => s,
    };
    let hard = hard_topk(tape.value(perturbed).values(), k);
    let pi = relaxed_permutation(tape, perturbed, tau)?;
    let relaxed = topk_relaxed_mask(tape, pi, k)?;
    let output = tape.straight_through(hard.clone(), relaxed)?;
    Ok(SelectionMask {
        hard,
        relaxed,
        output,
        k,
    })
}

/// Mask fixed to the given features: no relaxation, no gradient.
pub fn fixed_mask(tape: &mut Tape, d: usize, indices: &[usize]) -> Result<SelectionMask> {
    let mut hard = vec![0.0; d];
    for &i in indices {
        if i >= d {
            return Err(Error::contract(format!(
                "feature index {i} out of range for {d} features"
            )));
        }
        hard[i] = 1.0;
    }
    let output = tape.constant(Tensor::vector(hard.clone()));
    Ok(SelectionMask {
        k: indices.len(),
        hard,
        relaxed: output,
        output,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Exponential,
}

/// `tau(t) = max(tau_min, tau0 * exp(-rate * t))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub rate: f64,
    pub tau_min: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl TemperatureSchedule {
    pub fn new(tau0: f64, rate: f64, tau_min: f64) -> Result<Self> {
        let s = TemperatureSchedule {
            tau0,
            rate,
            tau_min,
            kind: ScheduleKind::Exponential,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule that reaches `tau_min` after `steps` steps.
    pub fn reaching_floor_at(tau0: f64, tau_min: f64, steps: usize) -> Result<Self> {
        let rate = if tau0 > tau_min {
            (tau0 / tau_min).ln() / steps.max(1) as f64
        } else {
            f64::MIN_POSITIVE
        };
        TemperatureSchedule::new(tau0, rate, tau_min)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.rate > 0.0 && self.tau_min > 0.0) {
            return Err(Error::contract(
                "temperature schedule needs tau0, rate, tau_min > 0",
            ));
        }
        Ok(())
    }

    pub fn at(&self, step: usize) -> f64 {
        (self.tau0 * (-self.rate * step as f64).exp()).max(self.tau_min)
    }
}

pub fn temperature_at(sched: &TemperatureSchedule, step: usize) -> f64 {
    sched.at(step)
}

/// Subset size annealed from `d` down to `k_final`: a plateau at `d` for
/// `warmup_steps`, then geometric decay over `decay_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub d: usize,
    pub k_final: usize,
    pub warmup_steps: usize,
    pub decay_steps: usize,
}

impl SparsitySchedule {
    pub fn new(d: usize, k_final: usize, warmup_steps: usize, decay_steps: usize) -> Result<Self> {
        let s = SparsitySchedule {
            d,
            k_final,
            warmup_steps,
            decay_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_k(self.k_final, self.d)
    }

    pub fn at(&self, step: usize) -> usize {
        if step < self.warmup_steps {
            return self.d;
        }
        let elapsed = step - self.warmup_steps;
        if self.decay_steps == 0 || elapsed >= self.decay_steps {
            return self.k_final;
        }
        let frac = elapsed as f64 / self.decay_steps as f64;
        let ratio = self.k_final as f64 / self.d as f64;
        let k = (self.d as f64 * ratio.powf(frac)).round() as usize;
        k.clamp(self.k_final, self.d)
    }
}

pub fn k_at(sched: &SparsitySchedule, step: usize) -> usize {
    sched.at(step)
}

/// Plackett-Luce log-likelihood of `ranking` (best first) under positive
/// item weights `exp(s)`.
pub fn pl_log_prob(scores: &ScoreVector, ranking: &[usize]) -> Result<f64> {
    let s = scores.values();
    let d = s.len();
    let mut seen = vec![false; d];
    if ranking.len() != d {
        return Err(Error::contract(format!(
            "ranking has {} entries, expected {d}",
            ranking.len()
        )));
    }
    for &r in ranking {
        if r >= d || seen[r] {
            return Err(Error::contract(format!(
                "ranking is not a permutation of 0..{d}"
            )));
        }
        seen[r] = true;
    }
    // Suffix log-sum-exp over the items still unranked at each step.
    let mut suffix = vec![f64::NEG_INFINITY; d + 1];
    for m in (0..d).rev() {
        let (a, b) = (suffix[m + 1], s[ranking[m]]);
        let hi = a.max(b);
        suffix[m] = if hi == f64::NEG_INFINITY {
            hi
        } else {
            hi + ((a - hi).exp() + (b - hi).exp()).ln()
        };
    }
    Ok((0..d).map(|m| s[ranking[m]] - suffix[m]).sum())
}
