//! Metrics and analysis exports: accuracy, pairwise query distances, and
//! attention-distribution dumps for qualitative inspection.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TextExample;
use crate::mtl::{ModelError, MtlModel, SchemeKind, TaskKind};
use crate::tape::Tape;

#[derive(Debug)]
pub enum EvalError {
    /// Predictions and golds differ in length, or are empty.
    LengthMismatch {
        predictions: usize,
        golds: usize,
    },
    /// Queries differ in width or there are fewer than two.
    BadQueries {
        reason: &'static str,
    },
    /// The scheme has no attention distributions to export.
    NoAttention {
        scheme: &'static str,
    },
    /// An exported distribution failed normalization.
    BadDistribution {
        sum: f64,
    },
    Model(ModelError),
    Io(std::io::Error),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::LengthMismatch { predictions, golds } => write!(
                f,
                "got {predictions} predictions for {golds} golds (need equal, non-zero)"
            ),
            EvalError::BadQueries { reason } => write!(f, "bad queries: {reason}"),
            EvalError::NoAttention { scheme } => {
                write!(f, "scheme '{scheme}' has no attention to export")
            }
            EvalError::BadDistribution { sum } => {
                write!(f, "attention distribution sums to {sum}, expected 1")
            }
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e)
    }
}

/// Fraction of exactly correct predictions.
pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != golds.len() || predictions.is_empty() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Index of the largest entry (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Pairwise Euclidean distances ‖q_i − q_j‖₂ between task queries:
/// symmetric, zero diagonal; smaller means more similar.
pub fn query_similarity(queries: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EvalError> {
    if queries.len() < 2 {
        return Err(EvalError::BadQueries {
            reason: "need at least two queries",
        });
    }
    let width = queries[0].len();
    if queries.iter().any(|q| q.len() != width) {
        return Err(EvalError::BadQueries {
            reason: "queries have differing widths",
        });
    }
    let k = queries.len();
    let mut matrix = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let dist = queries[i]
                .iter()
                .zip(&queries[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            matrix[i][j] = dist;
            matrix[j][i] = dist;
        }
    }
    Ok(matrix)
}

/// Writes a similarity matrix as CSV with task names on the header row and
/// the leading column.
pub fn similarity_csv<W: Write>(
    names: &[String],
    matrix: &[Vec<f64>],
    out: &mut W,
) -> Result<(), EvalError> {
    write!(out, "task")?;
    for name in names {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for (name, row) in names.iter().zip(matrix) {
        write!(out, "{name}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// One exported attention distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub task: String,
    pub tokens: Vec<String>,
    pub alpha: Vec<f64>,
    pub prediction: String,
    pub gold: String,
}

/// Reserved task name for domain-classifier records.
pub const DC_TASK_NAME: &str = "dc";

fn check_alpha(alpha: &[f64]) -> Result<(), EvalError> {
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || alpha.iter().any(|a| *a < 0.0) {
        return Err(EvalError::BadDistribution { sum });
    }
    Ok(())
}

/// Computes every (example × classification task) attention record for an
/// SA or DA model, plus one domain-classifier record per example under DA.
pub fn attention_records(
    model: &MtlModel,
    examples: &[TextExample],
) -> Result<Vec<AttentionRecord>, EvalError> {
    if !matches!(model.kind, SchemeKind::Sa | SchemeKind::Da) {
        return Err(EvalError::NoAttention {
            scheme: model.kind.as_str(),
        });
    }
    let mut records = Vec::new();
    for example in examples {
        let gold_task = &model.tasks[example.task];
        for task in &model.tasks {
            if task.kind != TaskKind::Classification {
                continue;
            }
            let mut tape = Tape::new();
            let fwd = model.forward_eval(&mut tape, task.id, &example.tokens)?;
            let alpha = fwd.alpha.as_ref().expect("SA/DA attention").to_vec();
            check_alpha(&alpha)?;
            let rep = fwd.rep.as_ref().expect("classification rep");
            let probs = model.classify(&mut tape, task.id, rep)?;
            let prediction = task.labels[argmax(&probs.to_vec())].clone();
            records.push(AttentionRecord {
                task: task.name.clone(),
                tokens: example.tokens.clone(),
                alpha,
                prediction,
                gold: gold_task.labels[example.label].clone(),
            });
        }
        if model.kind == SchemeKind::Da {
            let mut tape = Tape::new();
            let fwd = model.forward_eval(&mut tape, example.task, &example.tokens)?;
            let alpha = fwd.alpha_dc.as_ref().expect("DA DC attention").to_vec();
            check_alpha(&alpha)?;
            let y_dc = fwd.y_dc.as_ref().expect("DA DC prediction").to_vec();
            records.push(AttentionRecord {
                task: DC_TASK_NAME.to_string(),
                tokens: example.tokens.clone(),
                alpha,
                prediction: model.tasks[argmax(&y_dc)].name.clone(),
                gold: gold_task.name.clone(),
            });
        }
    }
    Ok(records)
}

/// Writes [`attention_records`] as JSONL. Returns the record count.
pub fn export_attention(
    model: &MtlModel,
    examples: &[TextExample],
    path: &Path,
) -> Result<usize, EvalError> {
    let records = attention_records(model, examples)?;
    let mut out = BufWriter::new(File::create(path)?);
    for record in &records {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| EvalError::Io(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}
