//! Scheme composition: the fully shared encoder and the five ways tasks read
//! from it (FS, SSP, PSP, SA, DA), task heads, loss assembly, parameter
//! accounting, and the checkpoint format.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, domain_attend, dynamic_query, DomainAttnParams, DynamicQueryParams,
};
use crate::encoder::{bilstm_encode, lookup, Alloc, BiLstm, EncoderParams, Vocab};
use crate::tape::Tape;
use crate::tensor::{init_uniform, TensorError, Var};

/// Errors from model construction, forward passes, and checkpoints.
#[derive(Debug)]
pub enum ModelError {
    Tensor(TensorError),
    Io(std::io::Error),
    Json(serde_json::Error),
    /// Task index outside the model's task list.
    UnknownTask {
        index: usize,
        count: usize,
    },
    /// Operation requires the other task kind.
    KindMismatch {
        op: &'static str,
        task: String,
    },
    /// Task definition violates an invariant (label count, weight).
    InvalidTask {
        name: String,
        reason: &'static str,
    },
    /// Checkpoint file failed validation.
    BadCheckpoint {
        reason: String,
    },
    /// A label id exceeds the task's class count.
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Io(e) => write!(f, "i/o error: {e}"),
            ModelError::Json(e) => write!(f, "json error: {e}"),
            ModelError::UnknownTask { index, count } => {
                write!(f, "task index {index} out of range for {count} tasks")
            }
            ModelError::KindMismatch { op, task } => {
                write!(f, "{op}: task '{task}' has the wrong kind")
            }
            ModelError::InvalidTask { name, reason } => {
                write!(f, "invalid task '{name}': {reason}")
            }
            ModelError::BadCheckpoint { reason } => write!(f, "bad checkpoint: {reason}"),
            ModelError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

impl From<serde_json::Error> for ModelError {
    fn from(e: serde_json::Error) -> Self {
        ModelError::Json(e)
    }
}

/// The five information-sharing schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// Fully shared: one encoder, mean pooling for every task.
    Fs,
    /// Stacked shared-private: shared states feed per-task private BiLSTMs.
    Ssp,
    /// Parallel shared-private: shared and private encoders read the
    /// embeddings independently; representations are concatenated.
    Psp,
    /// Static task attention over the shared states.
    Sa,
    /// Dynamic task attention: queries generated from the domain-classifier
    /// context.
    Da,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Fs,
        SchemeKind::Ssp,
        SchemeKind::Psp,
        SchemeKind::Sa,
        SchemeKind::Da,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::Fs => "fs",
            SchemeKind::Ssp => "ssp",
            SchemeKind::Psp => "psp",
            SchemeKind::Sa => "sa",
            SchemeKind::Da => "da",
        }
    }

    pub fn parse(s: &str) -> Option<SchemeKind> {
        match s {
            "fs" => Some(SchemeKind::Fs),
            "ssp" => Some(SchemeKind::Ssp),
            "psp" => Some(SchemeKind::Psp),
            "sa" => Some(SchemeKind::Sa),
            "da" => Some(SchemeKind::Da),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    SequenceLabeling,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::SequenceLabeling => "sequence-labeling",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "classification" => Some(TaskKind::Classification),
            "sequence-labeling" => Some(TaskKind::SequenceLabeling),
            _ => None,
        }
    }
}

/// Task definition prior to parameter allocation.
#[derive(Debug, Clone)]
pub struct TaskDef {
    pub name: String,
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub weight: f64,
}

impl TaskDef {
    pub fn classification(name: &str, labels: &[&str]) -> Self {
        TaskDef {
            name: name.to_string(),
            kind: TaskKind::Classification,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            weight: 1.0,
        }
    }

    pub fn labeling(name: &str, tags: &[&str]) -> Self {
        TaskDef {
            name: name.to_string(),
            kind: TaskKind::SequenceLabeling,
            labels: tags.iter().map(|s| s.to_string()).collect(),
            weight: 1.0,
        }
    }
}

/// One task: identity, label set, head parameters, and loss weight.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub kind: TaskKind,
    pub labels: Vec<String>,
    /// Head weights `[C × rep_width]` (classification) or `[C × 2d_h]`
    /// (sequence labeling, applied per position).
    pub w: Var,
    pub b: Var,
    pub weight: f64,
}

impl TaskSpec {
    pub fn classes(&self) -> usize {
        self.labels.len()
    }
}

/// One forward pass's outputs: the classification representation (absent for
/// labeling tasks), the shared per-position states, and attention traces.
pub struct Forward {
    pub rep: Option<Var>,
    pub states: Var,
    /// Task attention distribution (SA/DA classification tasks).
    pub alpha: Option<Var>,
    /// Domain-classifier attention distribution (DA).
    pub alpha_dc: Option<Var>,
    /// Domain-classifier prediction (DA).
    pub y_dc: Option<Var>,
}

/// A scheme instance: shared encoder plus per-scheme reading apparatus.
pub struct MtlModel {
    pub kind: SchemeKind,
    pub vocab: Vocab,
    pub d_e: usize,
    pub d_h: usize,
    pub shared: EncoderParams,
    /// Per-task private BiLSTMs (SSP/PSP), aligned with task ids.
    pub private: Vec<BiLstm>,
    /// Per-task static queries (SA), classification tasks only.
    pub queries: Vec<Option<Var>>,
    /// Domain-classifier attention (DA).
    pub domain_attn: Option<DomainAttnParams>,
    /// Query generation (DA). Biases are allocated per task; labeling tasks
    /// never use theirs and they stay out of the parameter registry.
    pub dyn_query: Option<DynamicQueryParams>,
    pub tasks: Vec<TaskSpec>,
}

impl MtlModel {
    /// Width of the classification representation for this scheme.
    pub fn rep_width(&self) -> usize {
        match self.kind {
            SchemeKind::Psp => 4 * self.d_h,
            _ => 2 * self.d_h,
        }
    }

    /// Width of the shared per-position states.
    pub fn state_width(&self) -> usize {
        2 * self.d_h
    }

    fn build(
        kind: SchemeKind,
        vocab: Vocab,
        defs: &[TaskDef],
        d_e: usize,
        d_h: usize,
        alloc: &mut Alloc,
    ) -> Result<Self, ModelError> {
        for def in defs {
            if def.labels.len() < 2 {
                return Err(ModelError::InvalidTask {
                    name: def.name.clone(),
                    reason: "needs at least two labels",
                });
            }
            if def.weight <= 0.0 {
                return Err(ModelError::InvalidTask {
                    name: def.name.clone(),
                    reason: "loss weight must be positive",
                });
            }
        }

        let shared = EncoderParams::from_alloc(vocab.len(), d_e, d_h, alloc)?;
        let width = 2 * d_h;
        let k_total = defs.len();

        let (domain_attn, dyn_query) = if kind == SchemeKind::Da {
            let domain_attn = DomainAttnParams {
                q_dc: alloc(&[width])?,
                w_dc: alloc(&[k_total, width])?,
                b_dc: alloc(&[k_total])?,
            };
            let biases = defs
                .iter()
                .map(|_| alloc(&[width]))
                .collect::<Result<_, _>>()?;
            let dyn_query = DynamicQueryParams {
                u: alloc(&[width, width])?,
                biases,
            };
            (Some(domain_attn), Some(dyn_query))
        } else {
            (None, None)
        };

        let rep_width = match kind {
            SchemeKind::Psp => 4 * d_h,
            _ => 2 * d_h,
        };
        let mut private = Vec::new();
        let mut queries = Vec::new();
        let mut tasks = Vec::new();
        for (id, def) in defs.iter().enumerate() {
            match kind {
                SchemeKind::Ssp => private.push(BiLstm::from_alloc(width, d_h, alloc)?),
                SchemeKind::Psp => private.push(BiLstm::from_alloc(d_e, d_h, alloc)?),
                _ => {}
            }
            queries.push(
                if kind == SchemeKind::Sa && def.kind == TaskKind::Classification {
                    Some(alloc(&[width])?)
                } else {
                    None
                },
            );
            let head_width = match def.kind {
                TaskKind::Classification => rep_width,
                TaskKind::SequenceLabeling => width,
            };
            let c = def.labels.len();
            tasks.push(TaskSpec {
                id,
                name: def.name.clone(),
                kind: def.kind,
                labels: def.labels.clone(),
                w: alloc(&[c, head_width])?,
                b: alloc(&[c])?,
                weight: def.weight,
            });
        }

        Ok(MtlModel {
            kind,
            vocab,
            d_e,
            d_h,
            shared,
            private,
            queries,
            domain_attn,
            dyn_query,
            tasks,
        })
    }

    /// Allocates a scheme with uniform random parameters in `[-range, range]`.
    pub fn init(
        kind: SchemeKind,
        vocab: Vocab,
        defs: &[TaskDef],
        d_e: usize,
        d_h: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        MtlModel::build(kind, vocab, defs, d_e, d_h, &mut |shape: &[usize]| {
            Ok(Var::new(init_uniform(shape, -range, range, rng)?))
        })
    }

    /// Allocates a scheme with all-zero parameters; used for size
    /// accounting and as the fill target when loading checkpoints.
    pub fn zeros(
        kind: SchemeKind,
        vocab: Vocab,
        defs: &[TaskDef],
        d_e: usize,
        d_h: usize,
    ) -> Result<Self, ModelError> {
        MtlModel::build(kind, vocab, defs, d_e, d_h, &mut |shape: &[usize]| {
            Ok(Var::zeros(shape.to_vec()))
        })
    }

    /// All trainable parameters under their stable registry names
    /// (`component/task/tensor`), in a fixed documented order.
    pub fn params(&self) -> Vec<(String, Var)> {
        let mut out = vec![("embed/table".to_string(), self.shared.embedding.clone())];
        out.extend(self.shared.cells.params("shared"));
        if let (Some(dc), Some(dq)) = (&self.domain_attn, &self.dyn_query) {
            out.push(("dc/query".to_string(), dc.q_dc.clone()));
            out.push(("dc/head/w".to_string(), dc.w_dc.clone()));
            out.push(("dc/head/b".to_string(), dc.b_dc.clone()));
            out.push(("dyn/u".to_string(), dq.u.clone()));
        }
        for task in &self.tasks {
            let k = task.id;
            if let Some(cells) = self.private.get(k) {
                out.extend(cells.params(&format!("task{k}/private")));
            }
            if let Some(Some(q)) = self.queries.get(k) {
                out.push((format!("task{k}/query"), q.clone()));
            }
            if let Some(dq) = &self.dyn_query {
                if task.kind == TaskKind::Classification {
                    out.push((format!("task{k}/query_bias"), dq.biases[k].clone()));
                }
            }
            out.push((format!("task{k}/head/w"), task.w.clone()));
            out.push((format!("task{k}/head/b"), task.b.clone()));
        }
        out
    }

    /// Count of trainable scalars; the embedding table is optional because
    /// reported model sizes conventionally exclude it.
    pub fn count_params(&self, include_embeddings: bool) -> usize {
        self.params()
            .iter()
            .filter(|(name, _)| include_embeddings || !name.starts_with("embed/"))
            .map(|(_, v)| v.len())
            .sum()
    }

    fn task(&self, index: usize) -> Result<&TaskSpec, ModelError> {
        self.tasks.get(index).ok_or(ModelError::UnknownTask {
            index,
            count: self.tasks.len(),
        })
    }

    /// Runs the scheme on one token sequence for `task`. `dropout` is the
    /// train-time drop probability; pass 0 for evaluation (exact identity).
    pub fn forward<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        task: usize,
        tokens: &[S],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Forward, ModelError> {
        let spec = self.task(task)?;
        let embedded = lookup(tape, &self.vocab, &self.shared.embedding, tokens)?;
        let embedded = tape.dropout(&embedded, dropout, rng)?;
        let encoded = bilstm_encode(tape, &self.shared.cells, &embedded)?;
        let states = tape.dropout(&encoded.states, dropout, rng)?;

        let (alpha_dc, c_dc, y_dc) = match &self.domain_attn {
            Some(dc) => {
                let (a, c, y) = domain_attend(tape, dc, &states)?;
                (Some(a), Some(c), Some(y))
            }
            None => (None, None, None),
        };

        let (rep, alpha) = if spec.kind == TaskKind::Classification {
            match self.kind {
                SchemeKind::Fs => (Some(tape.mean_rows(&states)?), None),
                SchemeKind::Ssp => {
                    let out = bilstm_encode(tape, &self.private[task], &states)?;
                    (Some(out.pooled), None)
                }
                SchemeKind::Psp => {
                    let shared_pooled = tape.mean_rows(&states)?;
                    let out = bilstm_encode(tape, &self.private[task], &embedded)?;
                    (Some(tape.concat(&[&shared_pooled, &out.pooled])?), None)
                }
                SchemeKind::Sa => {
                    let q = self.queries[task]
                        .as_ref()
                        .expect("classification task under SA has a query");
                    let (alpha, c) = attend(tape, q, &states)?;
                    (Some(c), Some(alpha))
                }
                SchemeKind::Da => {
                    let dq = self.dyn_query.as_ref().expect("DA has query params");
                    let c_dc = c_dc.as_ref().expect("DA computed the DC context");
                    let q = dynamic_query(tape, dq, c_dc, task)?;
                    let (alpha, c) = attend(tape, &q, &states)?;
                    (Some(c), Some(alpha))
                }
            }
        } else {
            (None, None)
        };

        Ok(Forward {
            rep,
            states,
            alpha,
            alpha_dc,
            y_dc,
        })
    }

    /// Evaluation-mode forward pass (no dropout, no randomness consumed).
    pub fn forward_eval<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        task: usize,
        tokens: &[S],
    ) -> Result<Forward, ModelError> {
        // Dropout 0 never samples, so any rng works; keep one local.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        self.forward(tape, task, tokens, 0.0, &mut rng)
    }

    /// Task head over a representation: softmax(W·rep + b).
    pub fn classify(&self, tape: &mut Tape, task: usize, rep: &Var) -> Result<Var, ModelError> {
        let spec = self.task(task)?;
        let logits = tape.matmul(&spec.w, rep)?;
        let logits = tape.add(&logits, &spec.b)?;
        Ok(tape.softmax(&logits)?)
    }

    /// Per-position tag distributions `[T × C]` over encoder states.
    pub fn sequence_label(
        &self,
        tape: &mut Tape,
        task: usize,
        states: &Var,
    ) -> Result<Var, ModelError> {
        let spec = self.task(task)?;
        if spec.kind != TaskKind::SequenceLabeling {
            return Err(ModelError::KindMismatch {
                op: "sequence_label",
                task: spec.name.clone(),
            });
        }
        let t_len = states.shape()[0];
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let h = tape.row(states, t)?;
            let logits = tape.matmul(&spec.w, &h)?;
            let logits = tape.add(&logits, &spec.b)?;
            rows.push(tape.softmax(&logits)?);
        }
        let refs: Vec<&Var> = rows.iter().collect();
        Ok(tape.stack_rows(&refs)?)
    }

    /// On-tape weighted loss for one example: α_k · cross-entropy, with the
    /// per-position mean for labeling tasks, plus the domain-classifier term
    /// (weight `dc_weight`, domain label = source task id) when requested on
    /// a DA model.
    pub fn example_loss<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        task: usize,
        tokens: &[S],
        target: &Target,
        dropout: f64,
        rng: &mut impl Rng,
        dc_weight: Option<f64>,
    ) -> Result<Var, ModelError> {
        let spec = self.task(task)?;
        let fwd = self.forward(tape, task, tokens, dropout, rng)?;
        let mut loss = match (spec.kind, target) {
            (TaskKind::Classification, Target::Class(label)) => {
                let rep = fwd.rep.as_ref().expect("classification rep");
                let probs = self.classify(tape, task, rep)?;
                self.check_label(spec, *label)?;
                tape.nll(&probs, *label)?
            }
            (TaskKind::SequenceLabeling, Target::Tags(tags)) => {
                if tags.len() != tokens.len() {
                    return Err(ModelError::BadCheckpoint {
                        reason: format!(
                            "tag count {} does not match token count {}",
                            tags.len(),
                            tokens.len()
                        ),
                    });
                }
                let probs = self.sequence_label(tape, task, &fwd.states)?;
                let mut total: Option<Var> = None;
                for (t, &tag) in tags.iter().enumerate() {
                    self.check_label(spec, tag)?;
                    let row = tape.row(&probs, t)?;
                    let nll = tape.nll(&row, tag)?;
                    total = Some(match total {
                        Some(acc) => tape.add(&acc, &nll)?,
                        None => nll,
                    });
                }
                let total = total.expect("tokens non-empty");
                tape.scale(&total, 1.0 / tags.len() as f64)
            }
            (TaskKind::Classification, Target::Tags(_)) => {
                return Err(ModelError::KindMismatch {
                    op: "example_loss",
                    task: spec.name.clone(),
                })
            }
            (TaskKind::SequenceLabeling, Target::Class(_)) => {
                return Err(ModelError::KindMismatch {
                    op: "example_loss",
                    task: spec.name.clone(),
                })
            }
        };
        if spec.weight != 1.0 {
            loss = tape.scale(&loss, spec.weight);
        }
        if let Some(w) = dc_weight {
            if let Some(y_dc) = &fwd.y_dc {
                let mut dc_loss = tape.nll(y_dc, task)?;
                if w != 1.0 {
                    dc_loss = tape.scale(&dc_loss, w);
                }
                loss = tape.add(&loss, &dc_loss)?;
            }
        }
        Ok(loss)
    }

    fn check_label(&self, spec: &TaskSpec, label: usize) -> Result<(), ModelError> {
        if label >= spec.classes() {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: spec.classes(),
            });
        }
        Ok(())
    }
}

/// Supervision for one example.
#[derive(Debug, Clone)]
pub enum Target {
    Class(usize),
    Tags(Vec<usize>),
}

/// One term of the total loss: a prediction already evaluated to plain
/// probabilities, its gold target, and the task weight α.
#[derive(Debug, Clone)]
pub enum LossTerm<'a> {
    Class {
        weight: f64,
        probs: &'a [f64],
        label: usize,
    },
    /// Flat row-major `[T × classes]` distributions and T gold tags.
    Tags {
        weight: f64,
        probs: &'a [f64],
        classes: usize,
        labels: &'a [usize],
    },
}

/// Weighted total cross-entropy Σ_k α_k · CE_k over a batch of terms.
/// Sequence-labeling terms contribute their mean per-position cross-entropy.
pub fn total_loss(terms: &[LossTerm]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for term in terms {
        match term {
            LossTerm::Class {
                weight,
                probs,
                label,
            } => {
                if *label >= probs.len() {
                    return Err(ModelError::LabelOutOfRange {
                        label: *label,
                        classes: probs.len(),
                    });
                }
                total += weight * -probs[*label].ln();
            }
            LossTerm::Tags {
                weight,
                probs,
                classes,
                labels,
            } => {
                let mut ce = 0.0;
                for (t, &tag) in labels.iter().enumerate() {
                    if tag >= *classes {
                        return Err(ModelError::LabelOutOfRange {
                            label: tag,
                            classes: *classes,
                        });
                    }
                    ce += -probs[t * classes + tag].ln();
                }
                total += weight * ce / labels.len() as f64;
            }
        }
    }
    Ok(total)
}

const CHECKPOINT_FORMAT: &str = "attnmtl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TaskMeta {
    id: usize,
    name: String,
    kind: String,
    labels: Vec<String>,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    scheme: String,
    d_e: usize,
    d_h: usize,
    vocab: Vec<String>,
    tasks: Vec<TaskMeta>,
    params: Vec<ParamEntry>,
}

impl MtlModel {
    /// Writes a self-describing versioned checkpoint: scheme metadata plus
    /// every registry parameter (name, shape, row-major values). Output is
    /// byte-deterministic for identical parameters.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            scheme: self.kind.as_str().to_string(),
            d_e: self.d_e,
            d_h: self.d_h,
            vocab: self.vocab.tokens().to_vec(),
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskMeta {
                    id: t.id,
                    name: t.name.clone(),
                    kind: t.kind.as_str().to_string(),
                    labels: t.labels.clone(),
                    weight: t.weight,
                })
                .collect(),
            params: self
                .params()
                .iter()
                .map(|(name, v)| ParamEntry {
                    name: name.clone(),
                    shape: v.shape(),
                    values: v.to_vec(),
                })
                .collect(),
        };
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &file)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    /// Rebuilds a model from [`MtlModel::save`] output, validating format,
    /// version, and exact parameter coverage.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(ModelError::BadCheckpoint {
                reason: format!("unknown format '{}'", file.format),
            });
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(ModelError::BadCheckpoint {
                reason: format!("unsupported version {}", file.version),
            });
        }
        let kind = SchemeKind::parse(&file.scheme).ok_or_else(|| ModelError::BadCheckpoint {
            reason: format!("unknown scheme '{}'", file.scheme),
        })?;
        let vocab = Vocab::from_tokens(file.vocab).map_err(|_| ModelError::BadCheckpoint {
            reason: "invalid vocabulary".to_string(),
        })?;
        let mut defs = Vec::with_capacity(file.tasks.len());
        for (i, t) in file.tasks.iter().enumerate() {
            if t.id != i {
                return Err(ModelError::BadCheckpoint {
                    reason: format!("task ids out of order at {i}"),
                });
            }
            let kind = TaskKind::parse(&t.kind).ok_or_else(|| ModelError::BadCheckpoint {
                reason: format!("unknown task kind '{}'", t.kind),
            })?;
            defs.push(TaskDef {
                name: t.name.clone(),
                kind,
                labels: t.labels.clone(),
                weight: t.weight,
            });
        }

        let model = MtlModel::build(kind, vocab, &defs, file.d_e, file.d_h, &mut |shape| {
            Ok(Var::zeros(shape.to_vec()))
        })?;

        let mut by_name: HashMap<String, ParamEntry> = file
            .params
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        for (name, var) in model.params() {
            let entry = by_name
                .remove(&name)
                .ok_or_else(|| ModelError::BadCheckpoint {
                    reason: format!("missing parameter '{name}'"),
                })?;
            if entry.shape != var.shape() || entry.values.len() != var.len() {
                return Err(ModelError::BadCheckpoint {
                    reason: format!("shape mismatch for parameter '{name}'"),
                });
            }
            var.set_data(&entry.values);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::BadCheckpoint {
                reason: format!("unexpected parameter '{extra}'"),
            });
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_gradients_match, GradCheckSettings};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_class_defs() -> Vec<TaskDef> {
        vec![
            TaskDef::classification("alpha", &["neg", "pos"]),
            TaskDef::classification("beta", &["neg", "pos"]),
        ]
    }

    fn toy_vocab() -> Vocab {
        let mut v = Vocab::new();
        for t in ["the", "film", "was", "great", "camera", "sharp"] {
            v.add(t);
        }
        v
    }

    fn toy_model(kind: SchemeKind, seed: u64) -> MtlModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MtlModel::init(kind, toy_vocab(), &two_class_defs(), 4, 4, 0.3, &mut rng).unwrap()
    }

    #[test]
    fn rep_widths_match_scheme_contract() {
        let tokens = ["the", "film"];
        for (kind, width) in [
            (SchemeKind::Fs, 400),
            (SchemeKind::Ssp, 400),
            (SchemeKind::Psp, 800),
            (SchemeKind::Sa, 400),
            (SchemeKind::Da, 400),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let model = MtlModel::init(
                kind,
                toy_vocab(),
                &two_class_defs(),
                200,
                200,
                0.1,
                &mut rng,
            )
            .unwrap();
            assert_eq!(model.rep_width(), width, "{kind:?} declared width");
            let mut tape = Tape::new();
            let fwd = model.forward_eval(&mut tape, 0, &tokens).unwrap();
            assert_eq!(fwd.rep.unwrap().len(), width, "{kind:?} forward width");
            assert_eq!(fwd.states.shape(), vec![2, 400]);
        }
    }

    #[test]
    fn sa_with_zero_queries_matches_fs_pooling() {
        let model = toy_model(SchemeKind::Sa, 2);
        for q in model.queries.iter().flatten() {
            q.set_data(&vec![0.0; q.len()]);
        }
        let tokens = ["camera", "was", "great"];
        let mut tape = Tape::new();
        let fwd = model.forward_eval(&mut tape, 0, &tokens).unwrap();
        let mean = tape.mean_rows(&fwd.states).unwrap();
        for (a, b) in fwd.rep.unwrap().to_vec().iter().zip(mean.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn da_with_zero_u_matches_sa_bitwise() {
        let da = toy_model(SchemeKind::Da, 3);
        let sa = toy_model(SchemeKind::Sa, 3);
        // Align every shared tensor, zero U, and copy the DA biases into the
        // SA queries so the two schemes compute identical task queries.
        let da_params: HashMap<String, Var> = da.params().into_iter().collect();
        for (name, var) in sa.params() {
            if let Some(src) = da_params.get(&name) {
                if src.shape() == var.shape() {
                    var.set_data(&src.to_vec());
                }
            }
        }
        let dq = da.dyn_query.as_ref().unwrap();
        dq.u.set_data(&vec![0.0; dq.u.len()]);
        for (k, q) in sa.queries.iter().enumerate() {
            if let Some(q) = q {
                q.set_data(&dq.biases[k].to_vec());
            }
        }
        let tokens = ["the", "camera", "was", "sharp"];
        for task in 0..2 {
            let mut tape = Tape::new();
            let da_fwd = da.forward_eval(&mut tape, task, &tokens).unwrap();
            let sa_fwd = sa.forward_eval(&mut tape, task, &tokens).unwrap();
            let (da_rep, sa_rep) = (da_fwd.rep.unwrap(), sa_fwd.rep.unwrap());
            assert_eq!(da_rep.to_vec(), sa_rep.to_vec(), "task {task} rep");
            assert_eq!(
                da_fwd.alpha.unwrap().to_vec(),
                sa_fwd.alpha.unwrap().to_vec(),
                "task {task} attention"
            );
        }
    }

    #[test]
    fn classify_degenerate_heads() {
        let model = toy_model(SchemeKind::Fs, 4);
        let task = &model.tasks[0];
        task.w.set_data(&vec![0.0; task.w.len()]);
        task.b.set_data(&[0.0, 0.0]);
        let mut tape = Tape::new();
        let fwd = model.forward_eval(&mut tape, 0, &["film"]).unwrap();
        let probs = model
            .classify(&mut tape, 0, fwd.rep.as_ref().unwrap())
            .unwrap();
        assert_eq!(probs.to_vec(), vec![0.5, 0.5]);

        task.b.set_data(&[10.0, -10.0]);
        let mut tape = Tape::new();
        let fwd = model.forward_eval(&mut tape, 0, &["film"]).unwrap();
        let probs = model
            .classify(&mut tape, 0, fwd.rep.as_ref().unwrap())
            .unwrap();
        let p = probs.to_vec();
        assert!(p[0] > 1.0 - 1e-8);
        assert!(p[1] < 1e-8);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn labeling_model(seed: u64) -> MtlModel {
        let defs = vec![
            TaskDef::classification("sent", &["neg", "pos"]),
            TaskDef::labeling("tags", &["o", "b-np", "i-np"]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MtlModel::init(SchemeKind::Fs, toy_vocab(), &defs, 4, 4, 0.3, &mut rng).unwrap()
    }

    #[test]
    fn sequence_label_rows_are_distributions() {
        let model = labeling_model(5);
        let mut tape = Tape::new();
        let fwd = model
            .forward_eval(&mut tape, 1, &["the", "film", "was"])
            .unwrap();
        let probs = model.sequence_label(&mut tape, 1, &fwd.states).unwrap();
        assert_eq!(probs.shape(), vec![3, 3]);
        let v = probs.to_vec();
        for t in 0..3 {
            let row = &v[t * 3..(t + 1) * 3];
            assert!(row.iter().all(|p| *p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_label_single_position_reduces_to_classify() {
        let model = labeling_model(6);
        let mut tape = Tape::new();
        let fwd = model.forward_eval(&mut tape, 1, &["great"]).unwrap();
        let seq = model.sequence_label(&mut tape, 1, &fwd.states).unwrap();
        let row0 = tape.row(&fwd.states, 0).unwrap();
        let single = model.classify(&mut tape, 1, &row0).unwrap();
        assert_eq!(seq.to_vec(), single.to_vec());
    }

    #[test]
    fn sequence_label_rejects_classification_task() {
        let model = labeling_model(7);
        let mut tape = Tape::new();
        let fwd = model.forward_eval(&mut tape, 0, &["great"]).unwrap();
        assert!(matches!(
            model.sequence_label(&mut tape, 0, &fwd.states),
            Err(ModelError::KindMismatch { .. })
        ));
    }

    #[test]
    fn total_loss_analytic_cases() {
        // One-hot on the true label: zero loss.
        let one_hot = vec![0.0, 1.0];
        let loss = total_loss(&[LossTerm::Class {
            weight: 1.0,
            probs: &one_hot,
            label: 1,
        }])
        .unwrap();
        assert_eq!(loss, 0.0);

        // Uniform over C: ln C.
        let uniform = vec![0.25; 4];
        let loss = total_loss(&[LossTerm::Class {
            weight: 1.0,
            probs: &uniform,
            label: 2,
        }])
        .unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);

        // Linearity: α = (1, 2) over per-task losses (a, b) gives a + 2b.
        let p1 = vec![0.5, 0.5];
        let p2 = vec![0.9, 0.1];
        let (a, b) = (-(0.5f64).ln(), -(0.1f64).ln());
        let loss = total_loss(&[
            LossTerm::Class {
                weight: 1.0,
                probs: &p1,
                label: 0,
            },
            LossTerm::Class {
                weight: 2.0,
                probs: &p2,
                label: 1,
            },
        ])
        .unwrap();
        assert!((loss - (a + 2.0 * b)).abs() < 1e-12);

        // Label range enforcement.
        assert!(matches!(
            total_loss(&[LossTerm::Class {
                weight: 1.0,
                probs: &p1,
                label: 2
            }]),
            Err(ModelError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn tags_term_is_mean_per_position() {
        let probs = vec![0.5, 0.5, 0.25, 0.75];
        let loss = total_loss(&[LossTerm::Tags {
            weight: 1.0,
            probs: &probs,
            classes: 2,
            labels: &[0, 1],
        }])
        .unwrap();
        let expected = (-(0.5f64).ln() + -(0.75f64).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn on_tape_loss_agrees_with_pure_total_loss() {
        let model = toy_model(SchemeKind::Da, 8);
        let tokens = ["film", "was", "great"];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let loss = model
            .example_loss(
                &mut tape,
                1,
                &tokens,
                &Target::Class(0),
                0.0,
                &mut rng,
                Some(1.0),
            )
            .unwrap();

        let mut tape2 = Tape::new();
        let fwd = model.forward_eval(&mut tape2, 1, &tokens).unwrap();
        let probs = model
            .classify(&mut tape2, 1, fwd.rep.as_ref().unwrap())
            .unwrap();
        let task_probs = probs.to_vec();
        let dc_probs = fwd.y_dc.unwrap().to_vec();
        let expected = total_loss(&[
            LossTerm::Class {
                weight: 1.0,
                probs: &task_probs,
                label: 0,
            },
            LossTerm::Class {
                weight: 1.0,
                probs: &dc_probs,
                label: 1,
            },
        ])
        .unwrap();
        assert!((loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn count_params_reconciles_published_sizes() {
        // 16 binary classification tasks at the published dimensions.
        let defs: Vec<TaskDef> = (0..16)
            .map(|i| TaskDef::classification(&format!("t{i}"), &["neg", "pos"]))
            .collect();
        let expected = [
            (SchemeKind::Fs, 644_000.0),
            (SchemeKind::Ssp, 16_074_000.0),
            (SchemeKind::Psp, 10_972_000.0),
            (SchemeKind::Sa, 668_000.0),
            (SchemeKind::Da, 818_000.0),
        ];
        for (kind, published) in expected {
            let model = MtlModel::build(kind, toy_vocab(), &defs, 200, 200, &mut |shape| {
                Ok(Var::zeros(shape.to_vec()))
            })
            .unwrap();
            let count = model.count_params(false) as f64;
            let rel = (count - published).abs() / published;
            assert!(
                rel < 0.05,
                "{kind:?}: {count} vs published {published} (rel {rel:.4})"
            );
            assert!(model.count_params(true) > model.count_params(false));
        }
    }

    #[test]
    fn every_scheme_passes_whole_model_gradient_check() {
        let tokens = ["camera", "was", "sharp"];
        for kind in SchemeKind::ALL {
            let model = toy_model(kind, 40);
            let params = model.params();
            assert_gradients_match(&params, &GradCheckSettings::full_model(), |tape| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let dc = if kind == SchemeKind::Da {
                    Some(1.0)
                } else {
                    None
                };
                let l0 = model
                    .example_loss(tape, 0, &tokens, &Target::Class(1), 0.0, &mut rng, dc)
                    .unwrap();
                let l1 = model
                    .example_loss(tape, 1, &tokens, &Target::Class(0), 0.0, &mut rng, dc)
                    .unwrap();
                tape.add(&l0, &l1)
            });
        }
    }

    #[test]
    fn labeling_loss_gradients_match_finite_differences() {
        let model = labeling_model(41);
        let params = model.params();
        assert_gradients_match(&params, &GradCheckSettings::full_model(), |tape| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            Ok(model
                .example_loss(
                    tape,
                    1,
                    &["the", "film", "was"],
                    &Target::Tags(vec![0, 1, 2]),
                    0.0,
                    &mut rng,
                    None,
                )
                .unwrap())
        });
    }

    #[test]
    fn checkpoint_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model(SchemeKind::Da, 50);
        let p1 = dir.path().join("model1.json");
        let p2 = dir.path().join("model2.json");
        model.save(&p1).unwrap();
        model.save(&p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "identical params must serialize identically"
        );

        let loaded = MtlModel::load(&p1).unwrap();
        assert_eq!(loaded.kind, model.kind);
        assert_eq!(loaded.vocab.tokens(), model.vocab.tokens());
        let (orig, copy) = (model.params(), loaded.params());
        assert_eq!(orig.len(), copy.len());
        for ((n1, v1), (n2, v2)) in orig.iter().zip(&copy) {
            assert_eq!(n1, n2);
            assert_eq!(v1.to_vec(), v2.to_vec(), "param {n1}");
        }

        // Loaded model computes identically.
        let tokens = ["great", "camera"];
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let f1 = model.forward_eval(&mut t1, 0, &tokens).unwrap();
        let f2 = loaded.forward_eval(&mut t2, 0, &tokens).unwrap();
        assert_eq!(f1.rep.unwrap().to_vec(), f2.rep.unwrap().to_vec());
    }

    #[test]
    fn checkpoint_rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model(SchemeKind::Sa, 51);
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let truncated = path.with_extension("trunc.json");
        std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
        assert!(matches!(
            MtlModel::load(&truncated),
            Err(ModelError::Json(_))
        ));

        let renamed = text.replace("task0/query", "task0/quarry");
        let bad = path.with_extension("bad.json");
        std::fs::write(&bad, renamed).unwrap();
        assert!(matches!(
            MtlModel::load(&bad),
            Err(ModelError::BadCheckpoint { .. })
        ));
    }

    #[test]
    fn forward_rejects_unknown_task() {
        let model = toy_model(SchemeKind::Fs, 52);
        let mut tape = Tape::new();
        assert!(matches!(
            model.forward_eval(&mut tape, 9, &["film"]),
            Err(ModelError::UnknownTask { index: 9, count: 2 })
        ));
    }

    #[test]
    fn init_rejects_degenerate_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one_label = vec![TaskDef::classification("bad", &["only"])];
        assert!(matches!(
            MtlModel::init(SchemeKind::Fs, toy_vocab(), &one_label, 4, 4, 0.1, &mut rng),
            Err(ModelError::InvalidTask { .. })
        ));
        let mut neg = two_class_defs();
        neg[0].weight = 0.0;
        assert!(matches!(
            MtlModel::init(SchemeKind::Fs, toy_vocab(), &neg, 4, 4, 0.1, &mut rng),
            Err(ModelError::InvalidTask { .. })
        ));
    }
}
