//! Shared encoder, per-task heads and the joint multi-task loss.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::selection::{ScoreVector, SelectionMask, SparsitySchedule, TemperatureSchedule};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression { output_dim: usize },
}

/// One supervision signal. `name` matches the dataset's label column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn classification(name: impl Into<String>, num_classes: usize) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Classification { num_classes },
        }
    }

    pub fn regression(name: impl Into<String>) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Regression { output_dim: 1 },
        }
    }

    pub fn output_width(&self) -> usize {
        match self.kind {
            TaskKind::Classification { num_classes } => num_classes,
            TaskKind::Regression { output_dim } => output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Classification { num_classes } if num_classes < 2 => Err(Error::contract(
                format!("task {} needs at least 2 classes", self.name),
            )),
            TaskKind::Regression { output_dim } if output_dim < 1 => Err(Error::contract(format!(
                "task {} needs output_dim >= 1",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

/// Architecture, tasks and annealing schedules of one model.
///
/// `encoder_layers` lists the hidden widths; the encoder ends with a linear
/// layer of width `latent_dim`. An empty list gives a single linear encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub k_final: usize,
    pub encoder_layers: Vec<usize>,
    pub latent_dim: usize,
    pub tasks: Vec<TaskSpec>,
    pub temperature: TemperatureSchedule,
    pub sparsity: SparsitySchedule,
    pub noise_scale0: f64,
    pub seed: u64,
}

pub const DEFAULT_TAU0: f64 = 4.0;
pub const DEFAULT_TAU_MIN: f64 = 0.05;
pub const DEFAULT_NOISE_SCALE: f64 = 1.0;

impl ModelConfig {
    /// Config with the default schedules for a run of `total_steps`
    /// optimizer steps: temperature reaches its floor at 80% of training,
    /// `k` stays at `d` for the first 10% and decays over the next 40%.
    pub fn with_defaults(
        d: usize,
        k_final: usize,
        tasks: Vec<TaskSpec>,
        total_steps: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            d,
            k_final,
            encoder_layers: vec![128, 128],
            latent_dim: 64,
            tasks,
            temperature: TemperatureSchedule::reaching_floor_at(
                DEFAULT_TAU0,
                DEFAULT_TAU_MIN,
                (total_steps as f64 * 0.8).round() as usize,
            )?,
            sparsity: SparsitySchedule::new(
                d,
                k_final,
                (total_steps as f64 * 0.1).round() as usize,
                (total_steps as f64 * 0.4).round() as usize,
            )?,
            noise_scale0: DEFAULT_NOISE_SCALE,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.encoder_layers.contains(&0) {
            return Err(Error::contract("layer widths must be positive"));
        }
        if self.tasks.is_empty() {
            return Err(Error::contract("model needs at least one task"));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        if self.sparsity.d != self.d || self.sparsity.k_final != self.k_final {
            return Err(Error::contract(
                "sparsity schedule disagrees with d / k_final",
            ));
        }
        if !(self.noise_scale0 >= 0.0) {
            return Err(Error::contract("noise_scale0 must be >= 0"));
        }
        self.sparsity.validate()?;
        self.temperature.validate()
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.d];
        widths.extend(&self.encoder_layers);
        widths.push(self.latent_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub scores: ScoreVector,
    pub encoder: Vec<Linear>,
    pub heads: Vec<Linear>,
}

/// Tape handles for every parameter tensor of a model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub scores: Var,
    pub encoder: Vec<(Var, Var)>,
    pub heads: Vec<(Var, Var)>,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.scores];
        for (w, b) in self.encoder.iter().chain(&self.heads) {
            out.push(*w);
            out.push(*b);
        }
        out
    }
}

/// Scores uniform in [-0.01, 0.01], weights fan-in scaled uniform, zero biases.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let scores = (0..config.d).map(|_| rng.gen_range(-0.01..=0.01)).collect();
    let encoder = config
        .layer_dims()
        .into_iter()
        .map(|(i, o)| Linear::init(i, o, rng))
        .collect();
    let heads = config
        .tasks
        .iter()
        .map(|t| Linear::init(config.latent_dim, t.output_width(), rng))
        .collect();
    Ok(ModelParams {
        scores: ScoreVector::new(scores)?,
        encoder,
        heads,
    })
}

impl ModelParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.heads) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.scores.len() + self.tensors().iter().map(|t| t.numel()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters as one vector: scores, then each encoder layer's weight
    /// and bias, then each head's.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.scores.values().to_vec();
        for t in self.tensors() {
            out.extend_from_slice(t.values());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Dimension {
                op: "set_flat",
                lhs: vec![self.len()],
                rhs: vec![flat.len()],
            });
        }
        let d = self.scores.len();
        self.scores.values_mut().copy_from_slice(&flat[..d]);
        let mut off = d;
        for l in self.encoder.iter_mut().chain(self.heads.iter_mut()) {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.numel();
                t.values_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "parameter update",
            });
        }
        Ok(())
    }

    /// Records every parameter as a leaf; `trainable` controls gradients.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut rec = |t: Tensor| {
            if trainable {
                tape.leaf(t.requiring_grad())
            } else {
                tape.constant(t)
            }
        };
        let scores = rec(self.scores.to_tensor());
        let encoder = self
            .encoder
            .iter()
            .map(|l| (rec(l.weight.clone()), rec(l.bias.clone())))
            .collect();
        let heads = self
            .heads
            .iter()
            .map(|l| (rec(l.weight.clone()), rec(l.bias.clone())))
            .collect();
        ModelVars {
            scores,
            encoder,
            heads,
        }
    }

    /// Views one flat parameter vector on the tape as the model's tensors,
    /// following the [`ModelParams::flatten`] layout.
    pub fn vars_from_flat(&self, tape: &mut Tape, flat: Var) -> Result<ModelVars> {
        let d = self.scores.len();
        let scores = tape.narrow(flat, 0, &[d])?;
        let mut off = d;
        let mut take = |tape: &mut Tape, l: &Linear| -> Result<(Var, Var)> {
            let w = tape.narrow(flat, off, l.weight.shape())?;
            off += l.weight.numel();
            let b = tape.narrow(flat, off, l.bias.shape())?;
            off += l.bias.numel();
            Ok((w, b))
        };
        let encoder = self
            .encoder
            .iter()
            .map(|l| take(tape, l))
            .collect::<Result<_>>()?;
        let heads = self
            .heads
            .iter()
            .map(|l| take(tape, l))
            .collect::<Result<_>>()?;
        Ok(ModelVars {
            scores,
            encoder,
            heads,
        })
    }

    /// Collects the gradients of `vars` in [`ModelParams::flatten`] order;
    /// parameters no gradient reached get zeros.
    pub fn gather_grads(&self, tape: &Tape, vars: &ModelVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for v in vars.all() {
            match tape.grad(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(v).numel())),
            }
        }
        out
    }
}

/// `X ⊙ mask` with the straight-through mask: hard in forward, relaxed in
/// backward.
pub fn apply_mask(tape: &mut Tape, x: Var, mask: &SelectionMask) -> Result<Var> {
    tape.mask_columns(x, mask.output)
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

/// Shared encoder: relu between layers, linear output.
pub fn encode(tape: &mut Tape, input: Var, vars: &ModelVars) -> Result<Var> {
    let mut h = input;
    let last = vars.encoder.len().saturating_sub(1);
    for (i, layer) in vars.encoder.iter().enumerate() {
        h = linear(tape, h, *layer)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Linear head of task `task`: logits for classification, values for
/// regression.
pub fn predict(tape: &mut Tape, z: Var, task: usize, vars: &ModelVars) -> Result<Var> {
    let head = *vars
        .heads
        .get(task)
        .ok_or_else(|| Error::contract(format!("no head for task {task}")))?;
    linear(tape, z, head)
}

/// One task's labels for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskLabels {
    /// `None` marks a missing label.
    Class(Vec<Option<usize>>),
    /// Row-major `rows x output_dim`; NaN marks a missing label.
    Regression(Vec<f64>),
}

impl TaskLabels {
    pub fn labeled_count(&self) -> usize {
        match self {
            TaskLabels::Class(v) => v.iter().filter(|l| l.is_some()).count(),
            TaskLabels::Regression(v) => v.iter().filter(|l| !l.is_nan()).count(),
        }
    }
}

/// Cross-entropy or MSE averaged over the labeled rows only.
pub fn task_loss(tape: &mut Tape, pred: Var, labels: &TaskLabels, task: &TaskSpec) -> Result<Var> {
    match (&task.kind, labels) {
        (TaskKind::Classification { num_classes }, TaskLabels::Class(y)) => {
            if let Some((row, c)) = y
                .iter()
                .enumerate()
                .find_map(|(i, l)| l.filter(|c| c >= num_classes).map(|c| (i, c)))
            {
                return Err(Error::data(
                    Some(row),
                    Some(&task.name),
                    format!("class {c} >= num_classes {num_classes}"),
                ));
            }
            tape.softmax_cross_entropy(pred, y)
        }
        (TaskKind::Regression { .. }, TaskLabels::Regression(y)) => tape.masked_mse(pred, y),
        _ => Err(Error::contract(format!(
            "label kind does not match task {}",
            task.name
        ))),
    }
}

/// Inputs and labels (one entry per model task) for a forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<TaskLabels>,
}

/// `(1/T) Σ_t L_t` with `T` the configured task count; a task without labels
/// in the batch contributes 0.
pub fn joint_loss(
    tape: &mut Tape,
    batch: &Batch,
    vars: &ModelVars,
    config: &ModelConfig,
    mask: &SelectionMask,
) -> Result<Var> {
    let x = tape.constant(batch.x.clone());
    joint_loss_on(tape, x, &batch.labels, vars, config, mask.output)
}

/// Same as [`joint_loss`] for an already recorded input and mask.
pub fn joint_loss_on(
    tape: &mut Tape,
    x: Var,
    labels: &[TaskLabels],
    vars: &ModelVars,
    config: &ModelConfig,
    mask: Var,
) -> Result<Var> {
    if config.tasks.is_empty() || labels.len() != config.tasks.len() {
        return Err(Error::contract(format!(
            "{} label columns for {} tasks",
            labels.len(),
            config.tasks.len()
        )));
    }
    let selected = tape.mask_columns(x, mask)?;
    let z = encode(tape, selected, vars)?;
    let mut total: Option<Var> = None;
    for (t, (task, y)) in config.tasks.iter().zip(labels).enumerate() {
        let pred = predict(tape, z, t, vars)?;
        let l = task_loss(tape, pred, y, task)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.expect("at least one task");
    tape.scale(total, 1.0 / config.tasks.len() as f64)
}

/// Per-task outputs (logits or regression values) using only the features
/// in `selected`.
pub fn forward_fixed(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
    selected: &[usize],
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let mask = crate::selection::fixed_mask(&mut tape, config.d, selected)?;
    let x = tape.constant(x.clone());
    let s = apply_mask(&mut tape, x, &mask)?;
    let z = encode(&mut tape, s, &vars)?;
    (0..config.tasks.len())
        .map(|t| predict(&mut tape, z, t, &vars).map(|p| tape.value(p).clone()))
        .collect()
}

/// Serialized model: config plus every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint schema version {}",
                ck.schema_version
            )));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::selection::straight_through_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(d: usize, layers: Vec<usize>, latent: usize, tasks: Vec<TaskSpec>) -> ModelConfig {
        let mut c = ModelConfig::with_defaults(d, d.min(2), tasks, 100).unwrap();
        c.encoder_layers = layers;
        c.latent_dim = latent;
        c
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = config(10, vec![16, 8], 4, vec![TaskSpec::classification("a", 3)]);
        let p1 = init_params(&c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let p2 = init_params(&c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (f1, f2) = (p1.flatten(), p2.flatten());
        assert!(f1.iter().zip(&f2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(p1.scores.values().iter().all(|s| s.abs() <= 0.01));
        for (l, fan_in) in p1.encoder.iter().zip([10usize, 16, 8]) {
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(l.weight.values().iter().all(|w| w.abs() <= bound));
            assert!(l.bias.values().iter().all(|&b| b == 0.0));
        }
        assert_eq!(p1.heads[0].weight.shape(), &[4, 3]);
    }

    #[test]
    fn apply_mask_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let m = crate::selection::fixed_mask(&mut t, 3, &[0, 2]).unwrap();
        let y = apply_mask(&mut t, x, &m).unwrap();
        assert_eq!(t.value(y).values(), &[1.0, 0.0, 3.0]);

        let s = t.constant(Tensor::vector(vec![0.3, -0.1, 0.2]));
        let full = straight_through_mask::<ChaCha8Rng>(&mut t, s, 0.5, 3, None, 0.0).unwrap();
        let y = apply_mask(&mut t, x, &full).unwrap();
        assert_eq!(t.value(y).values(), t.value(x).values());
    }

    #[test]
    fn encode_degenerate_cases() {
        let c = config(3, vec![], 2, vec![TaskSpec::classification("a", 2)]);
        let mut p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        p.encoder[0].bias = Tensor::vector(vec![0.5, -0.25]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 0.5]]).unwrap();
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let xv = t.constant(x.clone());
        let z = encode(&mut t, xv, &vars).unwrap();
        let w = &p.encoder[0].weight;
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|k| x.at(i, k) * w.at(k, j)).sum::<f64>()
                    + p.encoder[0].bias.values()[j];
                assert!((t.value(z).at(i, j) - want).abs() < 1e-12);
            }
        }

        let c = config(3, vec![5], 2, vec![TaskSpec::classification("a", 2)]);
        let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let zero = t.constant(Tensor::zeros(&[4, 3]));
        let z = encode(&mut t, zero, &vars).unwrap();
        assert!(t.value(z).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_and_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = config(
            4,
            vec![5],
            3,
            vec![TaskSpec::classification("a", 3), TaskSpec::regression("b")],
        );
        let p = init_params(&c, &mut rng).unwrap();
        let x = random_x(&mut rng, 3, 4);
        let labels = vec![
            TaskLabels::Class(vec![Some(0), Some(2), None]),
            TaskLabels::Regression(vec![0.5, f64::NAN, -1.0]),
        ];
        let flat = Tensor::vector(p.flatten());
        let err = grad_check(
            |t, flat| {
                let vars = p.vars_from_flat(t, flat)?;
                let x = t.constant(x.clone());
                let ones = t.constant(Tensor::vector(vec![1.0; 4]));
                joint_loss_on(t, x, &labels, &vars, &c, ones)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let c = config(3, vec![], 2, vec![TaskSpec::classification("a", 4)]);
        let mut p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        p.heads[0].weight = Tensor::zeros(&[2, 4]);
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let z = t.constant(Tensor::zeros(&[1, 2]));
        let logits = predict(&mut t, z, 0, &vars).unwrap();
        assert!(t.value(logits).values().iter().all(|&v| v == 0.0));
        let probs = t.softmax_rows(logits).unwrap();
        assert!(t
            .value(probs)
            .values()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn task_loss_examples() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let l = task_loss(
            &mut t,
            p,
            &TaskLabels::Regression(vec![0.0, 0.0]),
            &TaskSpec::regression("r"),
        )
        .unwrap();
        assert_eq!(t.value(l).item(), 2.5);
        let logits = t.constant(Tensor::zeros(&[2, 3]));
        let task = TaskSpec::classification("c", 3);
        let l = task_loss(
            &mut t,
            logits,
            &TaskLabels::Class(vec![Some(0), Some(1)]),
            &task,
        )
        .unwrap();
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-12);
        let err = task_loss(
            &mut t,
            logits,
            &TaskLabels::Class(vec![Some(3), None]),
            &task,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data { row: Some(0), .. }));
    }

    #[test]
    fn cross_entropy_is_class_permutation_equivariant() {
        let logits = vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4];
        let labels = vec![Some(2), Some(0)];
        let perm = [1usize, 2, 0];
        let permuted: Vec<f64> = (0..2)
            .flat_map(|r| {
                let row = &logits[r * 3..(r + 1) * 3];
                let mut out = vec![0.0; 3];
                for c in 0..3 {
                    out[perm[c]] = row[c];
                }
                out
            })
            .collect();
        let plabels: Vec<Option<usize>> = labels.iter().map(|l| l.map(|c| perm[c])).collect();
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, logits).unwrap());
        let b = t.constant(Tensor::matrix(2, 3, permuted).unwrap());
        let la = t.softmax_cross_entropy(a, &labels).unwrap();
        let lb = t.softmax_cross_entropy(b, &plabels).unwrap();
        assert!((t.value(la).item() - t.value(lb).item()).abs() < 1e-14);
    }

    fn two_task_setup() -> (ModelConfig, ModelParams, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = config(
            4,
            vec![6],
            3,
            vec![
                TaskSpec::classification("a", 2),
                TaskSpec::classification("b", 3),
            ],
        );
        let p = init_params(&c, &mut rng).unwrap();
        (c, p, random_x(&mut rng, 5, 4))
    }

    fn loss_and_grads(
        c: &ModelConfig,
        p: &ModelParams,
        x: &Tensor,
        labels: &[TaskLabels],
    ) -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let vars = p.register(&mut t, true);
        let xv = t.constant(x.clone());
        let ones = t.constant(Tensor::vector(vec![1.0; c.d]));
        let l = joint_loss_on(&mut t, xv, labels, &vars, c, ones).unwrap();
        t.backward(l).unwrap();
        (t.value(l).item(), p.gather_grads(&t, &vars))
    }

    #[test]
    fn joint_loss_with_unlabeled_task() {
        let (c, p, x) = two_task_setup();
        let a = TaskLabels::Class(vec![Some(0), Some(1), Some(1), None, Some(0)]);
        let none = TaskLabels::Class(vec![None; 5]);
        let (loss, grads) = loss_and_grads(&c, &p, &x, &[a.clone(), none]);

        let mut single = c.clone();
        single.tasks.truncate(1);
        let mut p1 = p.clone();
        p1.heads.truncate(1);
        let (loss_a, grads_a) = loss_and_grads(&single, &p1, &x, &[a]);
        assert!((loss - loss_a / 2.0).abs() < 1e-15);

        let head_b = p.heads[0].weight.numel() + p.heads[0].bias.numel();
        let head_b_start = grads.len() - (p.heads[1].weight.numel() + p.heads[1].bias.numel());
        assert!(grads[head_b_start..].iter().all(|&g| g == 0.0));
        let shared_end = head_b_start - head_b;
        for (g, ga) in grads[..shared_end].iter().zip(&grads_a[..shared_end]) {
            assert!((g - ga / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_loss_of_identical_tasks_equals_task_loss_and_ignores_order() {
        let (c, mut p, x) = two_task_setup();
        let mut c2 = c.clone();
        c2.tasks[1] = c.tasks[0].clone();
        p.heads[1] = p.heads[0].clone();
        let y = TaskLabels::Class(vec![Some(0), Some(1), Some(1), None, Some(0)]);
        let (both, _) = loss_and_grads(&c2, &p, &x, &[y.clone(), y.clone()]);
        let mut c1 = c2.clone();
        c1.tasks.truncate(1);
        let mut p1 = p.clone();
        p1.heads.truncate(1);
        let (one, _) = loss_and_grads(&c1, &p1, &x, &[y]);
        assert!((both - one).abs() < 1e-15);

        let (c, p, x) = two_task_setup();
        let ya = TaskLabels::Class(vec![Some(0), Some(1), None, Some(1), Some(0)]);
        let yb = TaskLabels::Class(vec![Some(2), None, Some(0), Some(1), Some(1)]);
        let (fwd, _) = loss_and_grads(&c, &p, &x, &[ya.clone(), yb.clone()]);
        let mut cr = c.clone();
        cr.tasks.reverse();
        let mut pr = p.clone();
        pr.heads.reverse();
        let (rev, _) = loss_and_grads(&cr, &pr, &x, &[yb, ya]);
        assert!((fwd - rev).abs() < 1e-15);
    }

    #[test]
    fn heads_receive_disjoint_gradients() {
        let (c, p, x) = two_task_setup();
        let ya = TaskLabels::Class(vec![Some(0), Some(1), None, Some(1), Some(0)]);
        let none = TaskLabels::Class(vec![None; 5]);
        let (_, g_a_only) = loss_and_grads(&c, &p, &x, &[ya, none]);
        let head_a_start = p.len()
            - p.heads
                .iter()
                .map(|h| h.weight.numel() + h.bias.numel())
                .sum::<usize>();
        let head_a_end = head_a_start + p.heads[0].weight.numel() + p.heads[0].bias.numel();
        assert!(g_a_only[head_a_start..head_a_end].iter().any(|&g| g != 0.0));
        assert!(g_a_only[head_a_end..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn full_mask_at_low_temperature_matches_plain_mlp() {
        let (c, p, x) = two_task_setup();
        let labels = vec![
            TaskLabels::Class(vec![Some(0), Some(1), None, Some(1), Some(0)]),
            TaskLabels::Class(vec![Some(2), None, Some(0), Some(1), Some(1)]),
        ];
        let mut t = Tape::new();
        let vars = p.register(&mut t, true);
        let m =
            straight_through_mask::<ChaCha8Rng>(&mut t, vars.scores, 1e-3, c.d, None, 0.0).unwrap();
        let xv = t.constant(x.clone());
        let masked = joint_loss_on(&mut t, xv, &labels, &vars, &c, m.output).unwrap();
        let (plain, _) = loss_and_grads(&c, &p, &x, &labels);
        assert!((t.value(masked).item() - plain).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = config(
            6,
            vec![5, 4],
            3,
            vec![TaskSpec::classification("a", 3), TaskSpec::regression("b")],
        );
        let mut p = init_params(&c, &mut rng).unwrap();
        let mut flat = p.flatten();
        flat[0] = 1e-300;
        flat[1] = -123456.789e100;
        flat[2] = std::f64::consts::PI;
        p.set_flat(&flat).unwrap();
        let ck = Checkpoint::new(c, p);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let (a, b) = (ck.params.flatten(), back.params.flatten());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ck, back);
    }
}
