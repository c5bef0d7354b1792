//! Task-specific information selection over shared encoder states: static
//! learned queries, and dynamic queries generated from a domain-classifier
//! context vector.

use rand::Rng;

use crate::tape::Tape;
use crate::tensor::{init_uniform, TensorError, Var};

/// One task's learned query over the `2d_h`-wide encoder states.
#[derive(Debug, Clone)]
pub struct StaticQuery {
    pub q: Var,
}

impl StaticQuery {
    pub fn init(width: usize, range: f64, rng: &mut impl Rng) -> Result<Self, TensorError> {
        Ok(StaticQuery {
            q: Var::new(init_uniform(&[width], -range, range, rng)?),
        })
    }
}

/// Domain-classifier attention: a static query plus a softmax head over the
/// K domains.
#[derive(Debug, Clone)]
pub struct DomainAttnParams {
    pub q_dc: Var,
    pub w_dc: Var,
    pub b_dc: Var,
}

impl DomainAttnParams {
    pub fn init(
        width: usize,
        domains: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        Ok(DomainAttnParams {
            q_dc: Var::new(init_uniform(&[width], -range, range, rng)?),
            w_dc: Var::new(init_uniform(&[domains, width], -range, range, rng)?),
            b_dc: Var::new(init_uniform(&[domains], -range, range, rng)?),
        })
    }

    pub fn domains(&self) -> usize {
        self.b_dc.len()
    }
}

/// Query generation: one shared transform `U` and a per-task bias `b_k`.
#[derive(Debug, Clone)]
pub struct DynamicQueryParams {
    pub u: Var,
    pub biases: Vec<Var>,
}

impl DynamicQueryParams {
    pub fn init(
        width: usize,
        tasks: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let u = Var::new(init_uniform(&[width, width], -range, range, rng)?);
        let biases = (0..tasks)
            .map(|_| Ok(Var::new(init_uniform(&[width], -range, range, rng)?)))
            .collect::<Result<_, TensorError>>()?;
        Ok(DynamicQueryParams { u, biases })
    }

    pub fn tasks(&self) -> usize {
        self.biases.len()
    }
}

/// Dot-product attention: `alpha = softmax(states·q)`, `c = alphaᵀ·states`.
/// Scores are unscaled.
pub fn attend(tape: &mut Tape, q: &Var, states: &Var) -> Result<(Var, Var), TensorError> {
    let shape = states.shape();
    if shape.len() != 2 || shape[1] != q.len() {
        return Err(TensorError::ShapeMismatch {
            op: "attend",
            left: q.shape(),
            right: shape,
        });
    }
    let scores = tape.matmul(states, q)?;
    let alpha = tape.softmax(&scores)?;
    let c = tape.matmul(&alpha, states)?;
    Ok((alpha, c))
}

/// Domain-classifier pass: attention with the static DC query, then a
/// softmax over domains from the attended context.
pub fn domain_attend(
    tape: &mut Tape,
    params: &DomainAttnParams,
    states: &Var,
) -> Result<(Var, Var, Var), TensorError> {
    let (alpha_dc, c_dc) = attend(tape, &params.q_dc, states)?;
    let wc = tape.matmul(&params.w_dc, &c_dc)?;
    let logits = tape.add(&wc, &params.b_dc)?;
    let y_dc = tape.softmax(&logits)?;
    Ok((alpha_dc, c_dc, y_dc))
}

/// Task `k`'s generated query `U·c_dc + b_k`.
pub fn dynamic_query(
    tape: &mut Tape,
    params: &DynamicQueryParams,
    c_dc: &Var,
    task: usize,
) -> Result<Var, TensorError> {
    let b_k = params
        .biases
        .get(task)
        .ok_or(TensorError::IndexOutOfRange {
            op: "dynamic_query",
            index: task,
            len: params.biases.len(),
        })?;
    let uc = tape.matmul(&params.u, c_dc)?;
    tape.add(&uc, b_k)
}
