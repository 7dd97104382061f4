use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;

use panelsel::baselines;
use panelsel::data::{self, DatasetSummary, Labels, Nonlinearity};
use panelsel::gradcheck;
use panelsel::trainer::{self, Ablation};
use panelsel::{Checkpoint, Dataset, MetricRecord, ModelConfig, TaskKind, TrainReport};

use crate::config::{load_dataset, sidecar_path, RunConfig, TruthSidecar};
use crate::summary::{self, Stat};
use crate::{Common, EvalArgs, GradcheckArgs, RunArgs, SynthArgs};

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Timestamps {
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    schema_version: u32,
    command: &'static str,
    effective_config: &'a RunConfig,
    dataset: DatasetSummary,
    report: &'a TrainReport,
    timestamps: Timestamps,
}

#[derive(Serialize)]
struct MetricsOutput<'a> {
    schema_version: u32,
    command: &'static str,
    effective_config: &'a RunConfig,
    selected_features: &'a [usize],
    selected_names: Vec<String>,
    metrics: &'a MetricRecord,
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    schema_version: u32,
    command: &'static str,
    effective_config: &'a RunConfig,
    rows: Vec<trainer::AblationRow>,
    ablation: &'a Ablation,
}

#[derive(Serialize)]
struct SeedSummary<'a> {
    schema_version: u32,
    command: &'static str,
    effective_config: &'a RunConfig,
    seeds: &'a [u64],
    metrics: BTreeMap<String, Stat>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn base_config(common: &Common) -> anyhow::Result<RunConfig> {
    let config = RunConfig::load(common.config.as_deref())?;
    Ok(match common.seed {
        Some(s) => config.with_seed(s),
        None => config.with_seed(config.seed),
    })
}

/// Seeds to run, and whether outputs go to per-seed subdirectories.
fn seeds(common: &Common, config: &RunConfig) -> anyhow::Result<(Vec<u64>, bool)> {
    match &common.seeds {
        Some(list) if list.is_empty() => bail!("--seeds needs at least one seed"),
        Some(list) => Ok((list.clone(), true)),
        None => Ok((vec![config.seed], false)),
    }
}

fn apply_run_flags(config: &mut RunConfig, args: &RunArgs) {
    if let Some(k) = args.k {
        config.model.k_final = k;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
}

/// Dataset split by the run seed, plus the model config for its tasks (or
/// only `--task`).
fn prepare(
    config: &RunConfig,
    data_path: &Path,
    task: Option<&str>,
) -> anyhow::Result<(Dataset, ModelConfig)> {
    let ds = load_dataset(data_path, &config.data)?;
    let ds = data::split(&ds, config.seed);
    let mut tasks = ds.task_specs();
    if let Some(name) = task {
        tasks.retain(|t| t.name == name);
        if tasks.is_empty() {
            bail!("no label column named {name:?} in {}", data_path.display());
        }
    }
    let model = config.model_config(ds.n_features(), tasks, ds.train_rows().len())?;
    Ok((ds, model))
}

fn names(ds: &Dataset, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| ds.feature_names[i].clone()).collect()
}

fn out_dir(root: &Path, seed: u64, multi: bool) -> anyhow::Result<PathBuf> {
    let dir = if multi {
        root.join(format!("seed{seed}"))
    } else {
        root.to_path_buf()
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_summary(
    root: &Path,
    command: &'static str,
    config: &RunConfig,
    seeds: &[u64],
    per_seed: &[BTreeMap<String, f64>],
) -> anyhow::Result<()> {
    let metrics = summary::aggregate(per_seed);
    let mut text = String::new();
    for (k, s) in &metrics {
        writeln!(text, "{k:<40} {:.4} ± {:.4}", s.mean, s.std)?;
    }
    print!("{text}");
    write_json(
        &root.join("summary.json"),
        &SeedSummary {
            schema_version: OUTPUT_SCHEMA_VERSION,
            command,
            effective_config: config,
            seeds,
            metrics,
        },
    )
}

fn print_metrics(record: &MetricRecord) {
    for t in &record.tasks {
        let parts: Vec<String> = t
            .scores
            .named()
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect();
        println!("{} (n={}): {}", t.task, t.n_evaluated, parts.join(" "));
    }
    if let Some(s) = &record.selection {
        println!(
            "selection: precision={:.4} recall={:.4}",
            s.precision, s.recall
        );
    }
}

pub fn synth(args: SynthArgs) -> anyhow::Result<ExitCode> {
    let mut config = base_config(&args.common)?;
    let s = &mut config.synth;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f.clone() { s.$f = v; })* };
    }
    set!(
        n,
        d,
        g,
        tasks,
        classes,
        shared_fraction,
        noise_sigma,
        missing_rate
    );
    if let Some(nl) = &args.nonlinearity {
        s.nonlinearity = serde_json::from_value::<Nonlinearity>(serde_json::Value::String(
            nl.clone(),
        ))
        .map_err(|_| anyhow!("unknown nonlinearity {nl:?} (expected linear or xor-pairs)"))?;
    }
    let (seed_list, multi) = seeds(&args.common, &config)?;
    for seed in seed_list {
        let cfg = config.with_seed(seed);
        let path = if multi {
            let stem = args
                .out
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("synth");
            args.out.with_file_name(format!("{stem}.seed{seed}.csv"))
        } else {
            args.out.clone()
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let spec = cfg.synth_spec();
        let ds = data::generate_synthetic(&spec)?;
        let task_informative = data::task_informative_sets(&spec)?;
        let mut union: Vec<usize> = task_informative.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        ds.write_csv(&path)?;
        write_json(
            &sidecar_path(&path),
            &TruthSidecar {
                schema_version: OUTPUT_SCHEMA_VERSION,
                label_columns: spec.tasks.iter().map(|t| t.name.clone()).collect(),
                regression_columns: vec![],
                ground_truth: union,
                task_informative,
                spec,
            },
        )?;
        println!(
            "wrote {} ({} rows, {} features)",
            path.display(),
            ds.n_rows(),
            ds.n_features()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn train_one(config: &RunConfig, args: &RunArgs, dir: &Path) -> anyhow::Result<MetricRecord> {
    let started = now_ms();
    let (ds, model) = prepare(config, &args.data, args.task.as_deref())?;
    let (params, report) = trainer::train(&ds, &model, &config.train_config())?;
    Checkpoint::new(model, params).save(dir.join("checkpoint.json"))?;
    let mut ranked = names(&ds, &report.ranked_selection()).join("\n");
    ranked.push('\n');
    std::fs::write(dir.join("selected_features.txt"), ranked)?;
    write_json(
        &dir.join("report.json"),
        &TrainOutput {
            schema_version: OUTPUT_SCHEMA_VERSION,
            command: "train",
            effective_config: config,
            dataset: ds.summary(),
            report: &report,
            timestamps: Timestamps {
                started_unix_ms: started,
                finished_unix_ms: now_ms(),
            },
        },
    )?;
    Ok(report.final_metrics)
}

pub fn train(args: RunArgs) -> anyhow::Result<ExitCode> {
    let mut config = base_config(&args.common)?;
    apply_run_flags(&mut config, &args);
    let (seed_list, multi) = seeds(&args.common, &config)?;
    let mut per_seed = Vec::new();
    for &seed in &seed_list {
        let cfg = config.with_seed(seed);
        let dir = out_dir(&args.out, seed, multi)?;
        let metrics = train_one(&cfg, &args, &dir)?;
        println!("seed {seed}: wrote {}", dir.display());
        print_metrics(&metrics);
        let mut flat = BTreeMap::new();
        summary::flatten("", &metrics, &mut flat);
        per_seed.push(flat);
    }
    if multi {
        write_summary(&args.out, "train", &config, &seed_list, &per_seed)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    if args.common.seeds.is_some() {
        bail!("eval takes a single --seed (the split seed)");
    }
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut config = RunConfig::load(args.common.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(checkpoint.config.seed);
    config = config.with_seed(seed);
    let ds = data::split(&load_dataset(&args.data, &config.data)?, seed);
    if ds.n_features() != checkpoint.config.d {
        bail!(
            "checkpoint expects {} features, {} has {}",
            checkpoint.config.d,
            args.data.display(),
            ds.n_features()
        );
    }
    let selected = trainer::eval_selection(&checkpoint.params, &checkpoint.config);
    let metrics = trainer::evaluate(
        &checkpoint.params,
        &checkpoint.config,
        &ds,
        &ds.test_rows(),
        &selected,
    )?;
    let out = MetricsOutput {
        schema_version: OUTPUT_SCHEMA_VERSION,
        command: "eval",
        effective_config: &config,
        selected_features: &selected,
        selected_names: names(&ds, &selected),
        metrics: &metrics,
    };
    match &args.out {
        Some(p) => {
            write_json(p, &out)?;
            print_metrics(&metrics);
        }
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn ablation_table(rows: &[trainer::AblationRow]) -> String {
    let metric_names: Vec<&str> = rows
        .first()
        .map(|r| r.metrics.scores.named().iter().map(|(k, _)| *k).collect())
        .unwrap_or_default();
    let mut header = vec!["task".to_string(), "mode".to_string()];
    header.extend(metric_names.iter().map(|s| s.to_string()));
    let mut table = vec![header];
    for r in rows {
        let mut line = vec![r.task.clone(), r.mode.clone()];
        for name in &metric_names {
            line.push(
                r.metrics
                    .scores
                    .get(name)
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| {
            table
                .iter()
                .map(|l| l.get(c).map_or(0, String::len))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for line in &table {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn ablate(args: RunArgs) -> anyhow::Result<ExitCode> {
    let mut config = base_config(&args.common)?;
    apply_run_flags(&mut config, &args);
    let (seed_list, multi) = seeds(&args.common, &config)?;
    let mut per_seed = Vec::new();
    for &seed in &seed_list {
        let cfg = config.with_seed(seed);
        let dir = out_dir(&args.out, seed, multi)?;
        let (ds, model) = prepare(&cfg, &args.data, args.task.as_deref())?;
        let ablation = trainer::ablate(&ds, &model, &cfg.train_config())?;
        let rows = ablation.rows();
        let table = ablation_table(&rows);
        print!("{table}");
        std::fs::write(dir.join("ablation.txt"), &table)?;
        let mut flat = BTreeMap::new();
        summary::flatten("multi-task", &ablation.multi_task.final_metrics, &mut flat);
        summary::flatten("single-task", &merged_single(&ablation), &mut flat);
        per_seed.push(flat);
        write_json(
            &dir.join("ablation.json"),
            &AblationOutput {
                schema_version: OUTPUT_SCHEMA_VERSION,
                command: "ablate",
                effective_config: &cfg,
                rows,
                ablation: &ablation,
            },
        )?;
    }
    if multi {
        write_summary(&args.out, "ablate", &config, &seed_list, &per_seed)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Each task's metrics from its own single-task run.
fn merged_single(ablation: &Ablation) -> MetricRecord {
    MetricRecord {
        tasks: ablation
            .single_task
            .iter()
            .flat_map(|r| r.final_metrics.tasks.clone())
            .collect(),
        selection: None,
    }
}

fn baseline_one(config: &RunConfig, args: &RunArgs, dir: &Path) -> anyhow::Result<MetricRecord> {
    let (ds, model) = prepare(config, &args.data, args.task.as_deref())?;
    let target = model
        .tasks
        .iter()
        .find(|t| matches!(t.kind, TaskKind::Classification { .. }))
        .ok_or_else(|| anyhow!("mRMR needs a classification task"))?;
    let rows = ds.train_rows();
    let labels: Vec<i64> = match &ds
        .label_column(&target.name)
        .expect("task comes from the dataset")
        .labels
    {
        Labels::Class { values, .. } => rows.iter().map(|&r| values[r]).collect(),
        Labels::Regression { .. } => unreachable!("classification task"),
    };
    let selected = baselines::mrmr_select(&ds.x.select_rows(&rows), &labels, model.k_final)?;
    let report =
        baselines::retrain_fixed_mask_report(&ds, &selected, &model, &config.train_config())?;
    let mut ranked = names(&ds, &selected).join("\n");
    ranked.push('\n');
    std::fs::write(dir.join("selected_features.txt"), ranked)?;
    let mut sorted = selected.clone();
    sorted.sort_unstable();
    write_json(
        &dir.join("metrics.json"),
        &MetricsOutput {
            schema_version: OUTPUT_SCHEMA_VERSION,
            command: "baseline",
            effective_config: config,
            selected_features: &sorted,
            selected_names: names(&ds, &sorted),
            metrics: &report.final_metrics,
        },
    )?;
    Ok(report.final_metrics)
}

pub fn baseline(args: RunArgs) -> anyhow::Result<ExitCode> {
    let mut config = base_config(&args.common)?;
    apply_run_flags(&mut config, &args);
    let (seed_list, multi) = seeds(&args.common, &config)?;
    let mut per_seed = Vec::new();
    for &seed in &seed_list {
        let cfg = config.with_seed(seed);
        let dir = out_dir(&args.out, seed, multi)?;
        let metrics = baseline_one(&cfg, &args, &dir)?;
        println!("seed {seed}: wrote {}", dir.display());
        print_metrics(&metrics);
        let mut flat = BTreeMap::new();
        summary::flatten("", &metrics, &mut flat);
        per_seed.push(flat);
    }
    if multi {
        write_summary(&args.out, "baseline", &config, &seed_list, &per_seed)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let checks = gradcheck::run_suite(args.seed)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut ok = true;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        ok &= c.passed();
        println!("{:<width$}  {:.3e}  {verdict}", c.name, c.max_rel_error);
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
