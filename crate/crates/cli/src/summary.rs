//! Mean and spread of metrics across seeds.

use std::collections::BTreeMap;

use serde::Serialize;

use panelsel::MetricRecord;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; undefined (null) for a single seed.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            f64::NAN
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std, values }
    }
}

/// Flattens a record to `task/metric` keys (plus `selection/precision` and
/// `selection/recall`), each key prefixed with `prefix` when non-empty.
pub fn flatten(prefix: &str, record: &MetricRecord, into: &mut BTreeMap<String, f64>) {
    let key = |s: String| {
        if prefix.is_empty() {
            s
        } else {
            format!("{prefix}/{s}")
        }
    };
    for t in &record.tasks {
        for (name, v) in t.scores.named() {
            into.insert(key(format!("{}/{name}", t.task)), v);
        }
    }
    if let Some(sel) = &record.selection {
        into.insert(key("selection/precision".into()), sel.precision);
        into.insert(key("selection/recall".into()), sel.recall);
    }
}

/// Aggregates per-seed flattened metrics. Keys missing from some seeds are
/// summarised over the seeds that have them.
pub fn aggregate(per_seed: &[BTreeMap<String, f64>]) -> BTreeMap<String, Stat> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in per_seed {
        for (k, v) in m {
            cols.entry(k.clone()).or_default().push(*v);
        }
    }
    cols.into_iter().map(|(k, v)| (k, Stat::of(v))).collect()
}
