//! Training loop: annealed straight-through masks, joint multi-task loss and
//! Adam, with held-out evaluation along the way.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape};
use crate::data::{self, Dataset, LabelColumn, Labels};
use crate::error::{Error, Result};
use crate::metrics::{selection_recovery, MetricRecord, SelectionRecovery, TaskMetrics};
use crate::model::{
    forward_fixed, init_params, joint_loss, Batch, ModelConfig, ModelParams, TaskKind, TaskSpec,
};
use crate::selection::{fixed_mask, straight_through_mask, top_k_indices, SelectionMask};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Seeds the split, the batch order and the mask noise.
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::contract(
                "epochs, batch_size and eval_every must be >= 1",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::contract(
                "Adam betas must lie in [0, 1) and eps be > 0",
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    /// Optimizer steps of a full run on `n_train` rows.
    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_train)
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter / gradient length mismatch"
    );
    assert_eq!(params.len(), state.m.len(), "optimizer state size mismatch");
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
}

/// How the feature mask is obtained during training.
#[derive(Clone, Debug, PartialEq)]
pub enum SelectionMode {
    /// Scores are learned through the annealed straight-through mask.
    Learned,
    /// The mask is frozen to these features; scores stay untouched.
    Fixed(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub step: usize,
    pub tau: f64,
    pub k: usize,
    /// Mean training loss over the epoch.
    pub train_loss: f64,
    pub metrics: MetricRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub steps_per_epoch: usize,
    pub evals: Vec<EvalPoint>,
    /// Indices of the `k_final` highest final scores, ascending.
    pub selected_features: Vec<usize>,
    pub selected_names: Vec<String>,
    pub final_scores: Vec<f64>,
    /// Temperature at every optimizer step.
    pub tau_trace: Vec<f64>,
    /// Subset size at every optimizer step.
    pub k_trace: Vec<usize>,
    /// Mean training loss of every epoch.
    pub loss_trace: Vec<f64>,
    pub final_metrics: MetricRecord,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Selected features ordered by descending final score.
    pub fn ranked_selection(&self) -> Vec<usize> {
        let mut sel = self.selected_features.clone();
        sel.sort_by(|&a, &b| {
            self.final_scores[b]
                .total_cmp(&self.final_scores[a])
                .then(a.cmp(&b))
        });
        sel
    }
}

/// Label columns of `dataset` feeding the tasks of `config`, matched by name.
fn task_columns<'a>(dataset: &'a Dataset, config: &ModelConfig) -> Result<Vec<&'a LabelColumn>> {
    config
        .tasks
        .iter()
        .map(|task| {
            let col = dataset
                .label_column(&task.name)
                .ok_or_else(|| Error::data(None, Some(&task.name), "no label column for task"))?;
            check_column(col, task)?;
            Ok(col)
        })
        .collect()
}

fn check_column(col: &LabelColumn, task: &TaskSpec) -> Result<()> {
    match (&task.kind, &col.labels) {
        (TaskKind::Classification { num_classes }, Labels::Class { values, .. }) => {
            match values.iter().position(|&v| v >= *num_classes as i64) {
                Some(row) => Err(Error::data(
                    Some(row),
                    Some(&task.name),
                    format!("class {} >= num_classes {num_classes}", values[row]),
                )),
                None => Ok(()),
            }
        }
        (TaskKind::Regression { output_dim: 1 }, Labels::Regression { .. }) => Ok(()),
        _ => Err(Error::data(
            None,
            Some(&task.name),
            "label column does not match task kind",
        )),
    }
}

fn with_split(dataset: &Dataset, seed: u64) -> Dataset {
    match dataset.split {
        Some(_) => dataset.clone(),
        None => data::split(dataset, seed),
    }
}

/// Trains with learned selection. See [`train_with`].
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    train_with(dataset, model_config, train_config, &SelectionMode::Learned)
}

/// Full training run. Parameters are initialised from `model_config.seed`;
/// the split (when the dataset has none), batch order and mask noise come
/// from `train_config.seed`. One straight-through mask is drawn per batch.
pub fn train_with(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mode: &SelectionMode,
) -> Result<(ModelParams, TrainReport)> {
    model_config.validate()?;
    train_config.validate()?;
    if dataset.n_features() != model_config.d {
        return Err(Error::Dimension {
            op: "train",
            lhs: vec![dataset.n_features()],
            rhs: vec![model_config.d],
        });
    }
    let dataset = with_split(dataset, train_config.seed);
    let columns = task_columns(&dataset, model_config)?;
    let train_rows = dataset.train_rows();
    let test_rows = dataset.test_rows();
    if train_rows.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if let SelectionMode::Fixed(idx) = mode {
        if idx.is_empty() || idx.iter().any(|&i| i >= model_config.d) {
            return Err(Error::contract("fixed mask needs feature indices in range"));
        }
    }

    let mut params = init_params(
        model_config,
        &mut ChaCha8Rng::seed_from_u64(model_config.seed),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut adam = AdamState::new(params.len());
    let mut flat = params.flatten();

    let steps_per_epoch = train_config.steps_per_epoch(train_rows.len());
    let total = train_config.epochs * steps_per_epoch;
    let mut tau_trace = Vec::with_capacity(total);
    let mut k_trace = Vec::with_capacity(total);
    let mut loss_trace = Vec::with_capacity(train_config.epochs);
    let mut evals = Vec::new();
    let mut order = train_rows.clone();
    let mut step = 0;

    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for rows in order.chunks(train_config.batch_size) {
            let tau = model_config.temperature.at(step);
            let k = model_config.sparsity.at(step);
            let value = train_step(
                &mut params,
                &mut flat,
                &mut adam,
                StepInputs {
                    dataset: &dataset,
                    rows,
                    columns: &columns,
                    model_config,
                    train_config,
                    mode,
                    tau,
                    k,
                },
                &mut rng,
            )
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    step,
                    tau,
                    k,
                    message: format!("non-finite value in {op}"),
                },
                Error::Diverged { message, .. } => Error::Diverged {
                    step,
                    tau,
                    k,
                    message,
                },
                e => e,
            })?;

            tau_trace.push(tau);
            k_trace.push(k);
            epoch_loss += value * rows.len() as f64;
            step += 1;
        }
        let epoch_loss = epoch_loss / train_rows.len() as f64;
        loss_trace.push(epoch_loss);

        if epoch % train_config.eval_every == 0 || epoch == train_config.epochs {
            let selected = final_selection(&params, model_config, mode);
            let last = step.saturating_sub(1);
            evals.push(EvalPoint {
                epoch,
                step,
                tau: model_config.temperature.at(last),
                k: model_config.sparsity.at(last),
                train_loss: epoch_loss,
                metrics: evaluate(&params, model_config, &dataset, &test_rows, &selected)?,
            });
        }
    }

    let selected_features = final_selection(&params, model_config, mode);
    let final_metrics = evals
        .last()
        .expect("last epoch is always evaluated")
        .metrics
        .clone();
    let report = TrainReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        n_train: train_rows.len(),
        n_test: test_rows.len(),
        steps_per_epoch,
        evals,
        selected_names: selected_features
            .iter()
            .map(|&i| dataset.feature_names[i].clone())
            .collect(),
        selected_features,
        final_scores: params.scores.values().to_vec(),
        tau_trace,
        k_trace,
        loss_trace,
        final_metrics,
    };
    Ok((params, report))
}

struct StepInputs<'a> {
    dataset: &'a Dataset,
    rows: &'a [usize],
    columns: &'a [&'a LabelColumn],
    model_config: &'a ModelConfig,
    train_config: &'a TrainConfig,
    mode: &'a SelectionMode,
    tau: f64,
    k: usize,
}

/// Forward, backward and Adam update on one batch; returns the batch loss.
fn train_step(
    params: &mut ModelParams,
    flat: &mut [f64],
    adam: &mut AdamState,
    inp: StepInputs<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let mask = build_mask(
        &mut tape,
        vars.scores,
        inp.model_config,
        inp.mode,
        inp.tau,
        inp.k,
        rng,
    )?;
    let batch = Batch {
        x: inp.dataset.x.select_rows(inp.rows),
        labels: inp.columns.iter().map(|c| c.gather(inp.rows)).collect(),
    };
    let loss = joint_loss(&mut tape, &batch, &vars, inp.model_config, &mask)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            tau: inp.tau,
            k: inp.k,
            message: format!("loss is {value}"),
        });
    }
    tape.backward(loss)?;
    let grads = params.gather_grads(&tape, &vars);
    adam_step(flat, &grads, adam, inp.train_config);
    params.set_flat(flat)?;
    Ok(value)
}

fn build_mask(
    tape: &mut Tape,
    scores: crate::autodiff::Var,
    config: &ModelConfig,
    mode: &SelectionMode,
    tau: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SelectionMask> {
    match mode {
        SelectionMode::Learned => {
            let noise = config.noise_scale0 * tau / config.temperature.tau0;
            straight_through_mask(tape, scores, tau, k, Some(rng), noise)
        }
        SelectionMode::Fixed(idx) => fixed_mask(tape, config.d, idx),
    }
}

/// Features used at evaluation: the `k_final` best scores, ascending.
fn final_selection(params: &ModelParams, config: &ModelConfig, mode: &SelectionMode) -> Vec<usize> {
    let mut sel = match mode {
        SelectionMode::Learned => top_k_indices(params.scores.values(), config.k_final),
        SelectionMode::Fixed(idx) => idx.clone(),
    };
    sel.sort_unstable();
    sel.dedup();
    sel
}

/// The evaluation mask of a trained model: its `k_final` best scores.
pub fn eval_selection(params: &ModelParams, config: &ModelConfig) -> Vec<usize> {
    final_selection(params, config, &SelectionMode::Learned)
}

/// Per-task metrics on `rows` using only the features in `selected` (no
/// noise, hard mask). Rows without a label are skipped per task.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &Dataset,
    rows: &[usize],
    selected: &[usize],
) -> Result<MetricRecord> {
    let columns = task_columns(dataset, config)?;
    let outputs = forward_fixed(params, config, &dataset.x.select_rows(rows), selected)?;
    let mut tasks = Vec::with_capacity(config.tasks.len());
    for ((task, col), out) in config.tasks.iter().zip(&columns).zip(outputs) {
        let width = task.output_width();
        let labeled: Vec<usize> = (0..rows.len())
            .filter(|&i| !col.is_missing(rows[i]))
            .collect();
        let row_of = |i: usize| &out.values()[i * width..(i + 1) * width];
        tasks.push(match (&task.kind, &col.labels) {
            (TaskKind::Classification { num_classes }, Labels::Class { values, .. }) => {
                let probs: Vec<Vec<f64>> = labeled
                    .iter()
                    .map(|&i| {
                        let mut p = row_of(i).to_vec();
                        softmax_in_place(&mut p);
                        p
                    })
                    .collect();
                let truth: Vec<usize> = labeled.iter().map(|&i| values[rows[i]] as usize).collect();
                TaskMetrics::classification(&task.name, &probs, &truth, *num_classes)
            }
            (_, Labels::Regression { values }) => {
                let pred: Vec<f64> = labeled.iter().map(|&i| row_of(i)[0]).collect();
                let truth: Vec<f64> = labeled.iter().map(|&i| values[rows[i]]).collect();
                TaskMetrics::regression(&task.name, &pred, &truth)
            }
            _ => unreachable!("columns were checked against the tasks"),
        });
    }
    let selection = dataset.ground_truth.as_ref().map(|truth| {
        let (precision, recall) = selection_recovery(selected, truth);
        SelectionRecovery { precision, recall }
    });
    Ok(MetricRecord { tasks, selection })
}

/// The same model restricted to the single task `task_index`.
pub fn single_task_mode(model_config: &ModelConfig, task_index: usize) -> Result<ModelConfig> {
    let task = model_config.tasks.get(task_index).ok_or_else(|| {
        Error::contract(format!(
            "no task {task_index} among {}",
            model_config.tasks.len()
        ))
    })?;
    let mut cfg = model_config.clone();
    cfg.tasks = vec![task.clone()];
    Ok(cfg)
}

/// Multi-task run plus one single-task run per task, all with the same
/// architecture, schedules and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub schema_version: u32,
    pub multi_task: TrainReport,
    pub single_task: Vec<TrainReport>,
}

/// One line of the ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    pub mode: String,
    pub metrics: TaskMetrics,
    pub selected_features: Vec<usize>,
}

pub fn ablate(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<Ablation> {
    let (_, multi_task) = train(dataset, model_config, train_config)?;
    let single_task = (0..model_config.tasks.len())
        .map(|t| train(dataset, &single_task_mode(model_config, t)?, train_config).map(|(_, r)| r))
        .collect::<Result<_>>()?;
    Ok(Ablation {
        schema_version: REPORT_SCHEMA_VERSION,
        multi_task,
        single_task,
    })
}

impl Ablation {
    /// Final test metrics of every task under both modes.
    pub fn rows(&self) -> Vec<AblationRow> {
        let mut rows = Vec::new();
        for (single, task) in self
            .single_task
            .iter()
            .zip(&self.multi_task.model_config.tasks)
        {
            for (mode, report) in [("multi-task", &self.multi_task), ("single-task", single)] {
                if let Some(m) = report.final_metrics.task(&task.name) {
                    rows.push(AblationRow {
                        task: task.name.clone(),
                        mode: mode.to_owned(),
                        metrics: m.clone(),
                        selected_features: report.selected_features.clone(),
                    });
                }
            }
        }
        rows
    }
}
