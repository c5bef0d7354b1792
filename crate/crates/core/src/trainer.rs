//! Optimization and training protocols: Adam, joint multi-task training,
//! per-task fine-tuning, and frozen-encoder transfer.
//!
//! Freezing is implemented by never passing a frozen tensor to the
//! optimizer, so frozen values stay bitwise-identical across a run.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledSequence, TextExample};
use crate::evalviz::argmax;
use crate::mtl::{ModelError, MtlModel, SchemeKind, Target, TaskDef, TaskKind};
use crate::tape::Tape;
use crate::tensor::Var;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug)]
pub enum TrainError {
    /// A parameter reached the optimizer without a gradient.
    MissingGrad {
        name: String,
    },
    /// A selected task has no usable examples.
    EmptyDataset {
        task: String,
        split: &'static str,
    },
    BadConfig {
        reason: String,
    },
    Model(ModelError),
    Io(io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::MissingGrad { name } => {
                write!(f, "parameter '{name}' has no gradient to apply")
            }
            TrainError::EmptyDataset { task, split } => {
                write!(f, "task '{task}' has an empty {split} set")
            }
            TrainError::BadConfig { reason } => write!(f, "bad training config: {reason}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

impl From<io::Error> for TrainError {
    fn from(e: io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// How training steps pick the next task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Every task equally often.
    Uniform,
    /// Tasks in proportion to their training-set sizes.
    Proportional,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    /// Steps between dev evaluations; 0 means once per epoch.
    pub dev_interval: usize,
    pub seed: u64,
    /// Weight on the domain-classifier loss term (DA only).
    pub dc_weight: f64,
    pub sampling: Sampling,
    /// When false, the embedding table is excluded from joint updates.
    pub fine_tune_embeddings: bool,
    /// Uniform init range for parameters a protocol has to allocate itself.
    pub init_range: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 32,
            dropout: 0.5,
            max_epochs: 20,
            dev_interval: 0,
            seed: 1,
            dc_weight: 1.0,
            sampling: Sampling::Uniform,
            fine_tune_embeddings: true,
            init_range: 0.1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: &str| {
            Err(TrainError::BadConfig {
                reason: reason.to_string(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.dc_weight < 0.0 || !self.dc_weight.is_finite() {
            return bad("dc_weight must be non-negative and finite");
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return bad("init_range must be positive and finite");
        }
        Ok(())
    }
}

/// Train/dev material for one task, aligned by index with the model's tasks.
#[derive(Debug, Clone)]
pub enum TaskData {
    Classification {
        train: Vec<TextExample>,
        dev: Vec<TextExample>,
    },
    Labeling {
        train: Vec<LabeledSequence>,
        dev: Vec<LabeledSequence>,
    },
}

impl TaskData {
    pub fn train_len(&self) -> usize {
        match self {
            TaskData::Classification { train, .. } => train.len(),
            TaskData::Labeling { train, .. } => train.len(),
        }
    }

    pub fn dev_len(&self) -> usize {
        match self {
            TaskData::Classification { dev, .. } => dev.len(),
            TaskData::Labeling { dev, .. } => dev.len(),
        }
    }

    fn matches(&self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (TaskData::Classification { .. }, TaskKind::Classification)
                | (TaskData::Labeling { .. }, TaskKind::SequenceLabeling)
        )
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-parameter step count; parameters that join late (a task sampled
    /// for the first time) still get correct bias correction.
    t: u64,
}

/// Adam optimizer state, keyed by registry parameter name.
#[derive(Debug, Default)]
pub struct AdamState {
    moments: HashMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    /// Steps applied so far to `name`.
    pub fn steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.t)
    }

    #[cfg(test)]
    fn moment_norms(&self, name: &str) -> Option<(f64, f64)> {
        self.moments.get(name).map(|mo| {
            let m: f64 = mo.m.iter().map(|x| x.abs()).sum();
            let v: f64 = mo.v.iter().map(|x| x.abs()).sum();
            (m, v)
        })
    }
}

/// Applies one bias-corrected Adam update in place to every listed
/// parameter. Errors if any parameter is missing a gradient; gradients are
/// left untouched so the caller controls when they reset.
pub fn adam_step(
    params: &[(String, Var)],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, var) in params {
        let grad = var
            .grad_vec()
            .ok_or_else(|| TrainError::MissingGrad { name: name.clone() })?;
        let entry = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
        entry.t += 1;
        let correct1 = 1.0 - ADAM_BETA1.powi(entry.t as i32);
        let correct2 = 1.0 - ADAM_BETA2.powi(entry.t as i32);
        let mut data = var.to_vec();
        for i in 0..grad.len() {
            entry.m[i] = ADAM_BETA1 * entry.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            entry.v[i] = ADAM_BETA2 * entry.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = entry.m[i] / correct1;
            let v_hat = entry.v[i] / correct2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
        var.set_data(&data);
    }
    Ok(())
}

/// One log line: training rows carry `train_loss`, evaluation rows carry
/// `dev_accuracy`; the other field stays empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub task: String,
    pub train_loss: Option<f64>,
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "step,task,train_loss,dev_accuracy")?;
        for row in &self.rows {
            write!(out, "{},{},", row.step, row.task)?;
            match row.train_loss {
                Some(l) => write!(out, "{l}")?,
                None => {}
            }
            match row.dev_accuracy {
                Some(a) => writeln!(out, ",{a}")?,
                None => writeln!(out, ",")?,
            }
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("vec write cannot fail");
        String::from_utf8(out).expect("csv is ascii")
    }

    pub fn save_csv(&self, path: &Path) -> io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()
    }
}

/// Result of a training protocol. The model holds the best-dev parameters.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Step whose evaluation won model selection (0 = initial state).
    pub best_step: u64,
    /// Mean dev accuracy over the trained tasks at `best_step`.
    pub best_dev: f64,
    /// Per-task dev accuracy of the returned (restored) parameters.
    pub final_dev: Vec<(String, f64)>,
}

/// Dev/test accuracy of one task: exact-match for classification,
/// per-token for sequence labeling.
pub fn evaluate_task(model: &MtlModel, task: usize, data: &TaskData) -> Result<f64, TrainError> {
    let spec = &model.tasks[task];
    let mut correct = 0usize;
    let mut total = 0usize;
    match data {
        TaskData::Classification { dev, .. } => {
            for ex in dev {
                let mut tape = Tape::new();
                let fwd = model.forward_eval(&mut tape, task, &ex.tokens)?;
                let rep = fwd.rep.as_ref().expect("classification rep");
                let probs = model.classify(&mut tape, task, rep)?;
                if argmax(&probs.to_vec()) == ex.label {
                    correct += 1;
                }
                total += 1;
            }
        }
        TaskData::Labeling { dev, .. } => {
            for seq in dev {
                let mut tape = Tape::new();
                let fwd = model.forward_eval(&mut tape, task, &seq.tokens)?;
                let probs = model.sequence_label(&mut tape, task, &fwd.states)?;
                let classes = spec.labels.len();
                let flat = probs.to_vec();
                for (t, gold) in seq.tags.iter().enumerate() {
                    if argmax(&flat[t * classes..(t + 1) * classes]) == *gold {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(TrainError::EmptyDataset {
            task: spec.name.clone(),
            split: "dev",
        });
    }
    Ok(correct as f64 / total as f64)
}

/// Accumulates one batch of `task` on a fresh tape and returns the mean loss.
fn batch_loss(
    model: &MtlModel,
    task: usize,
    data: &TaskData,
    cfg: &TrainConfig,
    dc_weight: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let mut total: Option<Var> = None;
    for _ in 0..cfg.batch_size {
        let loss = match data {
            TaskData::Classification { train, .. } => {
                let ex = &train[rng.gen_range(0..train.len())];
                model.example_loss(
                    &mut tape,
                    task,
                    &ex.tokens,
                    &Target::Class(ex.label),
                    cfg.dropout,
                    rng,
                    dc_weight,
                )?
            }
            TaskData::Labeling { train, .. } => {
                let seq = &train[rng.gen_range(0..train.len())];
                model.example_loss(
                    &mut tape,
                    task,
                    &seq.tokens,
                    &Target::Tags(seq.tags.clone()),
                    cfg.dropout,
                    rng,
                    dc_weight,
                )?
            }
        };
        total = Some(match total {
            Some(acc) => tape.add(&acc, &loss)?,
            None => loss,
        });
    }
    let total = total.expect("batch_size >= 1");
    let mean = tape.scale(&total, 1.0 / cfg.batch_size as f64);
    tape.backward(&mean)?;
    Ok(mean.item())
}

/// Core loop shared by all protocols: seeded task sampling, mini-batch
/// gradient accumulation, Adam on `trainable` only, periodic dev
/// evaluation, and best-dev parameter restoration.
fn run_protocol(
    model: &MtlModel,
    data: &[TaskData],
    cfg: &TrainConfig,
    trainable: &[(String, Var)],
    eligible: &[usize],
    dc_weight: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.len() != model.tasks.len() {
        return Err(TrainError::BadConfig {
            reason: format!(
                "got data for {} tasks, model has {}",
                data.len(),
                model.tasks.len()
            ),
        });
    }
    for &k in eligible {
        let spec = &model.tasks[k];
        if !data[k].matches(spec.kind) {
            return Err(TrainError::BadConfig {
                reason: format!("task '{}' paired with data of the wrong kind", spec.name),
            });
        }
        if data[k].train_len() == 0 {
            return Err(TrainError::EmptyDataset {
                task: spec.name.clone(),
                split: "train",
            });
        }
        if data[k].dev_len() == 0 {
            return Err(TrainError::EmptyDataset {
                task: spec.name.clone(),
                split: "dev",
            });
        }
    }
    if eligible.is_empty() {
        return Err(TrainError::BadConfig {
            reason: "no tasks to train".to_string(),
        });
    }

    let sizes: Vec<usize> = eligible.iter().map(|&k| data[k].train_len()).collect();
    let total_train: usize = sizes.iter().sum();
    let steps_per_epoch = total_train.div_ceil(cfg.batch_size).max(1);
    let total_steps = steps_per_epoch as u64 * cfg.max_epochs as u64;
    let interval = if cfg.dev_interval == 0 {
        steps_per_epoch as u64
    } else {
        cfg.dev_interval as u64
    };

    let all_params = model.params();
    let mut state = AdamState::new();
    let mut log = TrainLog::default();

    let evaluate_all = |model: &MtlModel| -> Result<Vec<(String, f64)>, TrainError> {
        eligible
            .iter()
            .map(|&k| {
                let acc = evaluate_task(model, k, &data[k])?;
                Ok((model.tasks[k].name.clone(), acc))
            })
            .collect()
    };
    let mean =
        |accs: &[(String, f64)]| accs.iter().map(|(_, a)| a).sum::<f64>() / accs.len() as f64;
    let snapshot =
        |params: &[(String, Var)]| params.iter().map(|(_, v)| v.to_vec()).collect::<Vec<_>>();

    // The untrained state is the first selection candidate, so a protocol
    // can never return parameters worse on dev than what it started from.
    let initial = evaluate_all(model)?;
    for (name, acc) in &initial {
        log.rows.push(LogRow {
            step: 0,
            task: name.clone(),
            train_loss: None,
            dev_accuracy: Some(*acc),
        });
    }
    let mut best_dev = mean(&initial);
    let mut best_step = 0u64;
    let mut best_params = snapshot(trainable);

    for step in 1..=total_steps {
        let pick = match cfg.sampling {
            Sampling::Uniform => eligible[rng.gen_range(0..eligible.len())],
            Sampling::Proportional => {
                let mut r = rng.gen_range(0..total_train);
                let mut chosen = eligible[eligible.len() - 1];
                for (i, &n) in sizes.iter().enumerate() {
                    if r < n {
                        chosen = eligible[i];
                        break;
                    }
                    r -= n;
                }
                chosen
            }
        };

        let loss = batch_loss(model, pick, &data[pick], cfg, dc_weight, rng)?;
        let stepped: Vec<(String, Var)> = trainable
            .iter()
            .filter(|(_, v)| v.grad_vec().is_some())
            .cloned()
            .collect();
        adam_step(&stepped, &mut state, cfg.lr)?;
        for (_, v) in &all_params {
            v.zero_grad();
        }

        log.rows.push(LogRow {
            step,
            task: model.tasks[pick].name.clone(),
            train_loss: Some(loss),
            dev_accuracy: None,
        });

        if step % interval == 0 || step == total_steps {
            let accs = evaluate_all(model)?;
            for (name, acc) in &accs {
                log.rows.push(LogRow {
                    step,
                    task: name.clone(),
                    train_loss: None,
                    dev_accuracy: Some(*acc),
                });
            }
            let m = mean(&accs);
            if m > best_dev {
                best_dev = m;
                best_step = step;
                best_params = snapshot(trainable);
            }
        }
    }

    for ((_, var), values) in trainable.iter().zip(&best_params) {
        var.set_data(values);
    }
    let final_dev = evaluate_all(model)?;

    Ok(TrainOutcome {
        log,
        best_step,
        best_dev,
        final_dev,
    })
}

/// Joint training: each step samples one task, accumulates gradients over
/// one mini-batch of it, and updates all live parameters. DA models add the
/// weighted domain-classifier loss to every batch.
pub fn train_multitask(
    model: &MtlModel,
    data: &[TaskData],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let trainable: Vec<(String, Var)> = model
        .params()
        .into_iter()
        .filter(|(name, _)| cfg.fine_tune_embeddings || !name.starts_with("embed/"))
        .collect();
    let eligible: Vec<usize> = (0..model.tasks.len()).collect();
    let dc_weight = (model.kind == SchemeKind::Da).then_some(cfg.dc_weight);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_protocol(model, data, cfg, &trainable, &eligible, dc_weight, &mut rng)
}

/// Names of the parameters shared across tasks (frozen by `finetune` and
/// `transfer`): embeddings, the shared encoder, and DA's global attention
/// machinery.
pub fn shared_param_names(model: &MtlModel) -> Vec<String> {
    model
        .params()
        .into_iter()
        .map(|(name, _)| name)
        .filter(|name| {
            name.starts_with("embed/")
                || name.starts_with("shared/")
                || name.starts_with("dc/")
                || name.starts_with("dyn/")
        })
        .collect()
}

/// Continues training task `task` alone with every shared parameter frozen;
/// only that task's private parameters, query, and head move.
pub fn finetune(
    model: &MtlModel,
    task: usize,
    data: &[TaskData],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if task >= model.tasks.len() {
        return Err(TrainError::BadConfig {
            reason: format!("no task {task} to fine-tune"),
        });
    }
    let prefix = format!("task{task}/");
    let trainable: Vec<(String, Var)> = model
        .params()
        .into_iter()
        .filter(|(name, _)| name.starts_with(&prefix))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_protocol(model, data, cfg, &trainable, &[task], None, &mut rng)
}

/// Builds a fresh model for `defs` over the source vocabulary, copies the
/// source's shared parameters in, freezes them, and trains only the new
/// tasks' parameters. Unseen tokens fold to the unknown embedding.
pub fn transfer(
    source: &MtlModel,
    defs: &[TaskDef],
    data: &[TaskData],
    cfg: &TrainConfig,
) -> Result<(MtlModel, TrainOutcome), TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = MtlModel::init(
        source.kind,
        source.vocab.clone(),
        defs,
        source.d_e,
        source.d_h,
        cfg.init_range,
        &mut rng,
    )?;

    let source_params: HashMap<String, Var> = source.params().into_iter().collect();
    for (name, var) in target.params() {
        if let Some(src) = source_params.get(&name) {
            // The DC head is task-count-shaped; when task sets differ it
            // stays fresh (it is frozen and outside the transfer loss).
            if src.len() == var.len() {
                var.set_data(&src.to_vec());
            }
        }
    }

    let frozen = shared_param_names(&target);
    let trainable: Vec<(String, Var)> = target
        .params()
        .into_iter()
        .filter(|(name, _)| !frozen.contains(name))
        .collect();
    let eligible: Vec<usize> = (0..target.tasks.len()).collect();
    let outcome = run_protocol(&target, data, cfg, &trainable, &eligible, None, &mut rng)?;
    Ok((target, outcome))
}
