//! Two-stage reference selector: rank features by ANOVA F-statistic with a
//! correlation redundancy penalty (mRMR), then retrain on the fixed subset.

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::model::ModelConfig;
use crate::trainer::{train_with, SelectionMode, TrainConfig, TrainReport};

/// Stand-in for an infinite F-statistic.
pub const F_CAP: f64 = 1e12;

fn columns(x: &Tensor) -> Result<(usize, usize)> {
    x.dims2()
        .ok_or_else(|| Error::contract("feature matrix must be 2-D"))
}

/// One-way ANOVA F-statistic of every feature against class `labels`.
/// Negative labels mark missing rows and are skipped.
pub fn f_statistic_relevance(x: &Tensor, labels: &[i64]) -> Result<Vec<f64>> {
    let (n, d) = columns(x)?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "f_statistic_relevance",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    let rows: Vec<usize> = (0..n).filter(|&r| labels[r] >= 0).collect();
    let n_classes = rows
        .iter()
        .map(|&r| labels[r] as usize + 1)
        .max()
        .unwrap_or(0);
    let mut counts = vec![0usize; n_classes];
    for &r in &rows {
        counts[labels[r] as usize] += 1;
    }
    let groups = counts.iter().filter(|&&c| c > 0).count();
    let m = rows.len();
    if groups < 2 || m <= groups {
        return Ok(vec![0.0; d]);
    }
    let v = x.values();
    Ok((0..d)
        .map(|j| {
            let mut sums = vec![0.0; n_classes];
            for &r in &rows {
                sums[labels[r] as usize] += v[r * d + j];
            }
            let grand = sums.iter().sum::<f64>() / m as f64;
            let means: Vec<f64> = sums
                .iter()
                .zip(&counts)
                .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                .collect();
            let between: f64 = means
                .iter()
                .zip(&counts)
                .map(|(mu, &c)| c as f64 * (mu - grand).powi(2))
                .sum::<f64>()
                / (groups - 1) as f64;
            let within: f64 = rows
                .iter()
                .map(|&r| (v[r * d + j] - means[labels[r] as usize]).powi(2))
                .sum::<f64>()
                / (m - groups) as f64;
            if between == 0.0 {
                0.0
            } else if within == 0.0 {
                F_CAP
            } else {
                (between / within).min(F_CAP)
            }
        })
        .collect())
}

fn centered_column(x: &[f64], n: usize, d: usize, j: usize) -> (Vec<f64>, f64) {
    let mean = (0..n).map(|r| x[r * d + j]).sum::<f64>() / n as f64;
    let col: Vec<f64> = (0..n).map(|r| x[r * d + j] - mean).collect();
    let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
    (col, norm)
}

/// Pearson correlation of two columns; 0 when either is constant.
pub fn pearson(x: &Tensor, a: usize, b: usize) -> Result<f64> {
    let (n, d) = columns(x)?;
    let (ca, na) = centered_column(x.values(), n, d, a);
    let (cb, nb) = centered_column(x.values(), n, d, b);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(ca.iter().zip(&cb).map(|(p, q)| p * q).sum::<f64>() / (na * nb))
}

/// Greedy mRMR: start from the most relevant feature, then repeatedly add
/// the one maximising `F(f) - mean_c |corr(f, c)|` over the chosen `c`.
/// Ties go to the lower index.
pub fn mrmr_select(x: &Tensor, labels: &[i64], k: usize) -> Result<Vec<usize>> {
    let (n, d) = columns(x)?;
    if k == 0 || k > d {
        return Err(Error::contract(format!("k must be in 1..={d}, got {k}")));
    }
    let relevance = f_statistic_relevance(x, labels)?;
    let cols: Vec<(Vec<f64>, f64)> = (0..d)
        .map(|j| centered_column(x.values(), n, d, j))
        .collect();
    let corr = |a: usize, b: usize| {
        let ((ca, na), (cb, nb)) = (&cols[a], &cols[b]);
        if *na == 0.0 || *nb == 0.0 {
            0.0
        } else {
            ca.iter().zip(cb).map(|(p, q)| p * q).sum::<f64>() / (na * nb)
        }
    };

    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut redundancy = vec![0.0; d];
    let mut available = vec![true; d];
    while chosen.len() < k {
        let denom = chosen.len().max(1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for j in (0..d).filter(|&j| available[j]) {
            let score = relevance[j] - redundancy[j] / denom;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((j, score));
            }
        }
        let (pick, _) = best.expect("k <= d leaves a candidate");
        available[pick] = false;
        chosen.push(pick);
        for j in (0..d).filter(|&j| available[j]) {
            redundancy[j] += corr(j, pick).abs();
        }
    }
    Ok(chosen)
}

/// Trains the usual encoder and heads on a frozen mask at `indices` and
/// returns the final test metrics.
pub fn retrain_fixed_mask(
    dataset: &Dataset,
    indices: &[usize],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<MetricRecord> {
    retrain_fixed_mask_report(dataset, indices, model_config, train_config).map(|r| r.final_metrics)
}

/// As [`retrain_fixed_mask`], keeping the whole training report.
pub fn retrain_fixed_mask_report(
    dataset: &Dataset,
    indices: &[usize],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainReport> {
    let mut config = model_config.clone();
    config.k_final = indices.len();
    config.sparsity.k_final = indices.len();
    let (_, report) = train_with(
        dataset,
        &config,
        train_config,
        &SelectionMode::Fixed(indices.to_vec()),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(cols: &[Vec<f64>]) -> Tensor {
        let n = cols[0].len();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|r| cols.iter().map(|c| c[r]).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    /// Brute-force ANOVA straight from the definition.
    fn anova_oracle(col: &[f64], labels: &[i64]) -> f64 {
        let classes: std::collections::BTreeSet<i64> =
            labels.iter().copied().filter(|&l| l >= 0).collect();
        let obs: Vec<(f64, i64)> = col
            .iter()
            .copied()
            .zip(labels.iter().copied())
            .filter(|(_, l)| *l >= 0)
            .collect();
        let grand = obs.iter().map(|o| o.0).sum::<f64>() / obs.len() as f64;
        let mut ssb = 0.0;
        let mut ssw = 0.0;
        for &c in &classes {
            let g: Vec<f64> = obs.iter().filter(|o| o.1 == c).map(|o| o.0).collect();
            let mu = g.iter().sum::<f64>() / g.len() as f64;
            ssb += g.len() as f64 * (mu - grand) * (mu - grand);
            ssw += g.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        let k = classes.len() as f64;
        (ssb / (k - 1.0)) / (ssw / (obs.len() as f64 - k))
    }

    /// Ten values with mean `mu` and sample variance exactly 1.
    fn unit_group(mu: f64) -> Vec<f64> {
        let raw: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let m = 4.5;
        let sd = (raw.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 9.0).sqrt();
        raw.iter().map(|v| mu + (v - m) / sd).collect()
    }

    #[test]
    fn f_statistic_examples() {
        let labels: Vec<i64> = (0..20).map(|i| i64::from(i >= 10)).collect();
        let mut informative = unit_group(0.0);
        informative.extend(unit_group(1.0));
        let flat = vec![3.0; 20];
        let index: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let f =
            f_statistic_relevance(&matrix(&[informative.clone(), flat, index]), &labels).unwrap();
        assert!((f[0] - 5.0).abs() < 1e-12, "{}", f[0]);
        assert!((anova_oracle(&informative, &labels) - 5.0).abs() < 1e-12);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], F_CAP);
    }

    #[test]
    fn missing_labels_are_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let col: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let labels: Vec<i64> = (0..30)
            .map(|i| if i % 4 == 0 { -1 } else { i % 3 })
            .collect();
        let f = f_statistic_relevance(&matrix(std::slice::from_ref(&col)), &labels).unwrap();
        assert!((f[0] - anova_oracle(&col, &labels)).abs() < 1e-10);
    }

    #[test]
    fn f_statistic_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(8..40);
            let c = rng.gen_range(2..5);
            let labels: Vec<i64> = (0..n)
                .map(|i| {
                    if i < c {
                        i as i64
                    } else {
                        rng.gen_range(0..c as i64)
                    }
                })
                .collect();
            let col: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = f_statistic_relevance(&matrix(std::slice::from_ref(&col)), &labels).unwrap();
            let want = anova_oracle(&col, &labels);
            assert!((f[0] - want).abs() <= 1e-9 * want.max(1.0));
        }
    }

    /// Column with class means exactly `delta` apart: both rows of every
    /// (class 0, class 1) pair share the same base value.
    fn paired(rng: &mut ChaCha8Rng, n: usize, delta: f64) -> Vec<f64> {
        let base: Vec<f64> = (0..n / 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (0..n)
            .map(|i| base[i / 2] + delta * (i % 2) as f64)
            .collect()
    }

    fn pair_labels(n: usize) -> Vec<i64> {
        (0..n).map(|i| (i % 2) as i64).collect()
    }

    #[test]
    fn duplicate_is_penalised_below_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200;
        let inf = paired(&mut rng, n, 0.05);
        let noise = paired(&mut rng, n, 0.0);
        let x = matrix(&[inf.clone(), inf, noise]);
        let y = pair_labels(n);
        let f = f_statistic_relevance(&x, &y).unwrap();
        assert_eq!(f[2], 0.0);
        assert!(
            f[0] > 0.0 && f[0] < 1.0 - pearson(&x, 0, 2).unwrap().abs(),
            "{f:?}"
        );
        assert_eq!(mrmr_select(&x, &y, 1).unwrap(), vec![0]);
        assert_eq!(mrmr_select(&x, &y, 3).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn duplicate_informative_column_is_not_picked_twice_early() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 400;
        let mut cols: Vec<Vec<f64>> = [0.05, 0.045, 0.04]
            .iter()
            .map(|&d| paired(&mut rng, n, d))
            .collect();
        cols.push(cols[0].clone());
        let order = mrmr_select(&matrix(&cols), &pair_labels(n), 4).unwrap();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn mrmr_returns_k_distinct(seed in 0u64..1000, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols: Vec<Vec<f64>> = (0..8).map(|_| (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let labels: Vec<i64> = (0..30).map(|i| i % 3).collect();
            let sel = mrmr_select(&matrix(&cols), &labels, k).unwrap();
            let mut uniq = sel.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(sel.len(), k);
            prop_assert_eq!(uniq.len(), k);
        }

        #[test]
        fn f_statistic_is_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let col: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let labels: Vec<i64> = (0..24).map(|i| i % 3).collect();
            let scaled: Vec<f64> = col.iter().map(|v| a * v + b).collect();
            let f = f_statistic_relevance(&matrix(&[col, scaled]), &labels).unwrap();
            prop_assert!((f[0] - f[1]).abs() <= 1e-9 * f[0].max(1.0));
        }
    }
}
