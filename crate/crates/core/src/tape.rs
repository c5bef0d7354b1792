//! Reverse-mode differentiation over a linear operation tape.
//!
//! Forward passes record one node per operation, in execution order, so the
//! node list is topologically sorted by construction. [`Tape::backward`]
//! walks the list once in reverse, propagating adjoints with fresh scratch
//! buffers per call and accumulating the results into each tensor's gradient
//! slot (so repeated calls without `zero_grad` add up).

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{Tensor, TensorError, Var};

enum Op {
    /// `[m×n] · [n×p] -> [m×p]`
    MatMat {
        m: usize,
        n: usize,
        p: usize,
    },
    /// `[m×n] · [n] -> [m]`
    MatVec {
        m: usize,
        n: usize,
    },
    /// `[n] · [n×p] -> [p]`
    VecMat {
        n: usize,
        p: usize,
    },
    Add,
    Mul,
    Sigmoid,
    Tanh,
    /// 1-D softmax, computed with max subtraction.
    Softmax,
    /// Mask entries are 0 or 1/(1-p); applied multiplicatively.
    Dropout {
        mask: Vec<f64>,
    },
    /// 1-D inputs laid end to end.
    Concat {
        lens: Vec<usize>,
    },
    /// T same-width 1-D inputs stacked into `[T×w]`.
    StackRows {
        width: usize,
    },
    /// Row extraction from `[rows×w]`.
    Row {
        index: usize,
        width: usize,
    },
    /// Arithmetic mean over the rows of `[rows×w]`.
    MeanRows {
        rows: usize,
        width: usize,
    },
    /// Sum of all entries, to a scalar.
    Sum,
    /// Multiplication by a constant.
    Scale {
        factor: f64,
    },
    /// Negative log of the probability at `label`.
    Nll {
        label: usize,
    },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    output: usize,
}

/// Records operations during a forward pass for one example.
///
/// Single-threaded, one tape per forward/backward; parameters may be shared
/// across consecutive tapes (their gradient slots accumulate across tapes
/// until the optimizer consumes and clears them).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    slots: HashMap<usize, usize>,
    vars: Vec<Var>,
    is_output: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn slot(&mut self, v: &Var) -> usize {
        if let Some(&s) = self.slots.get(&v.key()) {
            return s;
        }
        let s = self.vars.len();
        self.slots.insert(v.key(), s);
        self.vars.push(v.clone());
        self.is_output.push(false);
        s
    }

    fn push(&mut self, op: Op, inputs: &[&Var], output: Var) -> Var {
        let inputs = inputs.iter().map(|v| self.slot(v)).collect();
        let out_slot = self.slot(&output);
        self.is_output[out_slot] = true;
        self.nodes.push(Node {
            op,
            inputs,
            output: out_slot,
        });
        output
    }

    /// Matrix product. Accepts `[m×n]·[n×p]`, `[m×n]·[n]`, and `[n]·[n×p]`.
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, n, n2, p) = (sa[0], sa[1], sb[0], sb[1]);
                if n != n2 {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; m * p];
                {
                    let (ta, tb) = (a.borrow(), b.borrow());
                    let (da, db) = (ta.data(), tb.data());
                    for i in 0..m {
                        for k in 0..n {
                            let aik = da[i * n + k];
                            let brow = &db[k * p..(k + 1) * p];
                            let orow = &mut out[i * p..(i + 1) * p];
                            for j in 0..p {
                                orow[j] += aik * brow[j];
                            }
                        }
                    }
                }
                let out = Var::new(Tensor::new(vec![m, p], out)?);
                Ok(self.push(Op::MatMat { m, n, p }, &[a, b], out))
            }
            (2, 1) => {
                let (m, n) = (sa[0], sa[1]);
                if n != sb[0] {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; m];
                {
                    let (ta, tb) = (a.borrow(), b.borrow());
                    let (da, dx) = (ta.data(), tb.data());
                    for (i, o) in out.iter_mut().enumerate() {
                        let row = &da[i * n..(i + 1) * n];
                        *o = row.iter().zip(dx).map(|(r, x)| r * x).sum();
                    }
                }
                let out = Var::new(Tensor::new(vec![m], out)?);
                Ok(self.push(Op::MatVec { m, n }, &[a, b], out))
            }
            (1, 2) => {
                let (n, p) = (sb[0], sb[1]);
                if sa[0] != n {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; p];
                {
                    let (ta, tb) = (a.borrow(), b.borrow());
                    let (dx, da) = (ta.data(), tb.data());
                    for (k, &xk) in dx.iter().enumerate() {
                        let row = &da[k * p..(k + 1) * p];
                        for j in 0..p {
                            out[j] += xk * row[j];
                        }
                    }
                }
                let out = Var::new(Tensor::new(vec![p], out)?);
                Ok(self.push(Op::VecMat { n, p }, &[a, b], out))
            }
            _ => Err(mismatch()),
        }
    }

    fn binary_same_shape(&mut self, op: &'static str, a: &Var, b: &Var) -> Result<(), TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let data = {
            let (ta, tb) = (a.borrow(), b.borrow());
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect()
        };
        let out = Var::new(Tensor::new(a.shape(), data)?);
        Ok(self.push(Op::Add, &[a, b], out))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let data = {
            let (ta, tb) = (a.borrow(), b.borrow());
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x * y)
                .collect()
        };
        let out = Var::new(Tensor::new(a.shape(), data)?);
        Ok(self.push(Op::Mul, &[a, b], out))
    }

    pub fn sigmoid(&mut self, x: &Var) -> Var {
        let data = x
            .borrow()
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let out = Var::new(Tensor::new(x.shape(), data).expect("shape preserved"));
        self.push(Op::Sigmoid, &[x], out)
    }

    pub fn tanh(&mut self, x: &Var) -> Var {
        let data = x.borrow().data().iter().map(|&v| v.tanh()).collect();
        let out = Var::new(Tensor::new(x.shape(), data).expect("shape preserved"));
        self.push(Op::Tanh, &[x], out)
    }

    /// Softmax over a 1-D tensor, overflow-safe via max subtraction.
    pub fn softmax(&mut self, x: &Var) -> Result<Var, TensorError> {
        if x.is_empty() {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let data = {
            let t = x.borrow();
            let d = t.data();
            if d.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = d.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exp.iter().sum();
            exp.into_iter().map(|e| e / sum).collect::<Vec<f64>>()
        };
        let out = Var::new(Tensor::new(x.shape(), data)?);
        Ok(self.push(Op::Softmax, &[x], out))
    }

    /// Inverted dropout: surviving entries scaled by 1/(1-p). `p == 0` is the
    /// identity and records nothing; evaluation mode simply passes `p = 0`.
    pub fn dropout(&mut self, x: &Var, p: f64, rng: &mut impl Rng) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability { p });
        }
        if p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = x
            .borrow()
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let out = Var::new(Tensor::new(x.shape(), data)?);
        Ok(self.push(Op::Dropout { mask }, &[x], out))
    }

    /// Concatenates 1-D tensors end to end.
    pub fn concat(&mut self, parts: &[&Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let mut lens = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for v in parts {
            let t = v.borrow();
            lens.push(t.len());
            data.extend_from_slice(t.data());
        }
        let out = Var::new(Tensor::new(vec![data.len()], data)?);
        Ok(self.push(Op::Concat { lens }, parts, out))
    }

    /// Stacks T equal-width 1-D tensors into a `[T×w]` matrix.
    pub fn stack_rows(&mut self, rows: &[&Var]) -> Result<Var, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        }
        let width = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for v in rows {
            let t = v.borrow();
            if t.len() != width {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![width],
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let out = Var::new(Tensor::new(vec![rows.len(), width], data)?);
        Ok(self.push(Op::StackRows { width }, rows, out))
    }

    /// Extracts row `index` of a `[rows×w]` matrix as a 1-D tensor.
    pub fn row(&mut self, m: &Var, index: usize) -> Result<Var, TensorError> {
        let shape = m.shape();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row",
                left: shape,
                right: vec![],
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        if index >= rows {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index,
                len: rows,
            });
        }
        let data = m.borrow().data()[index * width..(index + 1) * width].to_vec();
        let out = Var::new(Tensor::new(vec![width], data)?);
        Ok(self.push(Op::Row { index, width }, &[m], out))
    }

    /// Arithmetic mean over the rows of a `[rows×w]` matrix.
    pub fn mean_rows(&mut self, m: &Var) -> Result<Var, TensorError> {
        let shape = m.shape();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_rows",
                left: shape,
                right: vec![],
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        let mut data = vec![0.0; width];
        {
            let t = m.borrow();
            for r in 0..rows {
                let row = &t.data()[r * width..(r + 1) * width];
                for (o, v) in data.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        let out = Var::new(Tensor::new(vec![width], data)?);
        Ok(self.push(Op::MeanRows { rows, width }, &[m], out))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: &Var) -> Var {
        let total: f64 = x.borrow().data().iter().sum();
        let out = Var::scalar(total);
        self.push(Op::Sum, &[x], out)
    }

    /// Multiplication by a constant factor.
    pub fn scale(&mut self, x: &Var, factor: f64) -> Var {
        let data = x.borrow().data().iter().map(|v| v * factor).collect();
        let out = Var::new(Tensor::new(x.shape(), data).expect("shape preserved"));
        self.push(Op::Scale { factor }, &[x], out)
    }

    /// Negative log-likelihood of `label` under a probability vector.
    pub fn nll(&mut self, probs: &Var, label: usize) -> Result<Var, TensorError> {
        let n = probs.len();
        if label >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "nll",
                index: label,
                len: n,
            });
        }
        let p = probs.borrow().data()[label];
        let out = Var::scalar(-p.ln());
        Ok(self.push(Op::Nll { label }, &[probs], out))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Propagates d`loss`/d· through the recorded graph, adding the result
    /// into every touched tensor's gradient slot.
    pub fn backward(&self, loss: &Var) -> Result<(), TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss.shape(),
            });
        }
        let loss_slot = match self.slots.get(&loss.key()) {
            Some(&s) if self.is_output[s] => s,
            _ => return Err(TensorError::NotInGraph),
        };

        // Fresh adjoint buffers per call keep repeated backward passes
        // independent; accumulation across calls happens in the grad slots.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.vars.len()];
        adj[loss_slot] = Some(vec![1.0]);

        for node in self.nodes.iter().rev() {
            let g = match adj[node.output].clone() {
                Some(g) => g,
                None => continue,
            };
            let deltas = self.node_adjoints(node, &g);
            for (slot, delta) in node.inputs.iter().zip(deltas) {
                match &mut adj[*slot] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    empty => *empty = Some(delta),
                }
            }
        }

        for (slot, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                self.vars[slot].borrow_mut().accumulate_grad(&a);
            }
        }
        Ok(())
    }

    /// Adjoint of one node: per-input gradient contributions given the
    /// output adjoint `g`. Pure reads; accumulation happens in the caller.
    fn node_adjoints(&self, node: &Node, g: &[f64]) -> Vec<Vec<f64>> {
        let input = |i: usize| self.vars[node.inputs[i]].borrow();
        let output = || self.vars[node.output].borrow();
        match &node.op {
            Op::MatMat { m, n, p } => {
                let (ta, tb) = (input(0), input(1));
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; m * n];
                let mut gb = vec![0.0; n * p];
                for i in 0..*m {
                    let grow = &g[i * p..(i + 1) * p];
                    for k in 0..*n {
                        let brow = &db[k * p..(k + 1) * p];
                        let mut s = 0.0;
                        for j in 0..*p {
                            s += grow[j] * brow[j];
                        }
                        ga[i * n + k] = s;
                        let aik = da[i * n + k];
                        let gbrow = &mut gb[k * p..(k + 1) * p];
                        for j in 0..*p {
                            gbrow[j] += aik * grow[j];
                        }
                    }
                }
                vec![ga, gb]
            }
            Op::MatVec { m, n } => {
                let (ta, tx) = (input(0), input(1));
                let (da, dx) = (ta.data(), tx.data());
                let mut ga = vec![0.0; m * n];
                let mut gx = vec![0.0; *n];
                for i in 0..*m {
                    let gi = g[i];
                    let arow = &da[i * n..(i + 1) * n];
                    let garow = &mut ga[i * n..(i + 1) * n];
                    for k in 0..*n {
                        garow[k] = gi * dx[k];
                        gx[k] += gi * arow[k];
                    }
                }
                vec![ga, gx]
            }
            Op::VecMat { n, p } => {
                let (tx, ta) = (input(0), input(1));
                let (dx, da) = (tx.data(), ta.data());
                let mut gx = vec![0.0; *n];
                let mut ga = vec![0.0; n * p];
                for k in 0..*n {
                    let arow = &da[k * p..(k + 1) * p];
                    let garow = &mut ga[k * p..(k + 1) * p];
                    let mut s = 0.0;
                    for j in 0..*p {
                        s += g[j] * arow[j];
                        garow[j] = dx[k] * g[j];
                    }
                    gx[k] = s;
                }
                vec![gx, ga]
            }
            Op::Add => vec![g.to_vec(), g.to_vec()],
            Op::Mul => {
                let (ta, tb) = (input(0), input(1));
                let ga = g.iter().zip(tb.data()).map(|(gi, b)| gi * b).collect();
                let gb = g.iter().zip(ta.data()).map(|(gi, a)| gi * a).collect();
                vec![ga, gb]
            }
            Op::Sigmoid => {
                let out = output();
                let y = out.data();
                vec![g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect()]
            }
            Op::Tanh => {
                let out = output();
                let y = out.data();
                vec![g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect()]
            }
            Op::Softmax => {
                let out = output();
                let y = out.data();
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                vec![g.iter().zip(y).map(|(gi, yi)| yi * (gi - dot)).collect()]
            }
            Op::Dropout { mask } => {
                vec![g.iter().zip(mask).map(|(gi, m)| gi * m).collect()]
            }
            Op::Concat { lens } => {
                let mut offset = 0;
                lens.iter()
                    .map(|&l| {
                        let part = g[offset..offset + l].to_vec();
                        offset += l;
                        part
                    })
                    .collect()
            }
            Op::StackRows { width } => (0..node.inputs.len())
                .map(|r| g[r * width..(r + 1) * width].to_vec())
                .collect(),
            Op::Row { index, width } => {
                let rows = self.vars[node.inputs[0]].len() / width;
                let mut gm = vec![0.0; rows * width];
                gm[index * width..(index + 1) * width].copy_from_slice(g);
                vec![gm]
            }
            Op::MeanRows { rows, width } => {
                let inv = 1.0 / *rows as f64;
                let mut gm = vec![0.0; rows * width];
                for r in 0..*rows {
                    for j in 0..*width {
                        gm[r * width + j] = g[j] * inv;
                    }
                }
                vec![gm]
            }
            Op::Sum => {
                let n = self.vars[node.inputs[0]].len();
                vec![vec![g[0]; n]]
            }
            Op::Scale { factor } => vec![g.iter().map(|gi| gi * factor).collect()],
            Op::Nll { label } => {
                let probs = input(0);
                let mut gp = vec![0.0; probs.len()];
                gp[*label] = -g[0] / probs.data()[*label];
                vec![gp]
            }
        }
    }
}
