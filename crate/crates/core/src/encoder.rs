//! Shared sentence encoder: embedding lookup and a bidirectional LSTM
//! producing per-position states plus a mean-pooled sentence vector.

use std::collections::HashMap;

use rand::Rng;

use crate::tape::Tape;
use crate::tensor::{init_uniform, TensorError, Var};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token table with reserved padding and unknown entries at indices 0 and 1.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.add(PAD_TOKEN);
        v.add(UNK_TOKEN);
        v
    }

    /// Rebuilds a vocabulary from an ordered token list (checkpoint load).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TensorError> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(TensorError::InvalidVocab);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TensorError::InvalidVocab);
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Interns `token`, returning its index (existing or freshly assigned).
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    /// Index of `token`, folding unknown tokens to [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One direction's gate parameters: input weights `[d_h×d_in]`, recurrent
/// weights `[d_h×d_h]`, biases `[d_h]`, for gates i, f, o and candidate g.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_i: Var,
    pub u_i: Var,
    pub b_i: Var,
    pub w_f: Var,
    pub u_f: Var,
    pub b_f: Var,
    pub w_o: Var,
    pub u_o: Var,
    pub b_o: Var,
    pub w_g: Var,
    pub u_g: Var,
    pub b_g: Var,
}

/// Allocation hook: shape in, fresh parameter out. Lets the same
/// construction code serve random init and checkpoint loading.
pub type Alloc<'a> = dyn FnMut(&[usize]) -> Result<Var, TensorError> + 'a;

impl LstmCell {
    pub fn from_alloc(d_in: usize, d_h: usize, alloc: &mut Alloc) -> Result<Self, TensorError> {
        Ok(LstmCell {
            w_i: alloc(&[d_h, d_in])?,
            u_i: alloc(&[d_h, d_h])?,
            b_i: alloc(&[d_h])?,
            w_f: alloc(&[d_h, d_in])?,
            u_f: alloc(&[d_h, d_h])?,
            b_f: alloc(&[d_h])?,
            w_o: alloc(&[d_h, d_in])?,
            u_o: alloc(&[d_h, d_h])?,
            b_o: alloc(&[d_h])?,
            w_g: alloc(&[d_h, d_in])?,
            u_g: alloc(&[d_h, d_h])?,
            b_g: alloc(&[d_h])?,
        })
    }

    pub fn init(
        d_in: usize,
        d_h: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        LstmCell::from_alloc(d_in, d_h, &mut |shape: &[usize]| {
            Ok(Var::new(init_uniform(shape, -range, range, rng)?))
        })
    }

    pub fn d_h(&self) -> usize {
        self.b_i.len()
    }

    pub fn d_in(&self) -> usize {
        self.w_i.shape()[1]
    }

    /// Named parameter handles under `prefix`, in a fixed order.
    pub fn params(&self, prefix: &str) -> Vec<(String, Var)> {
        [
            ("w_i", &self.w_i),
            ("u_i", &self.u_i),
            ("b_i", &self.b_i),
            ("w_f", &self.w_f),
            ("u_f", &self.u_f),
            ("b_f", &self.b_f),
            ("w_o", &self.w_o),
            ("u_o", &self.u_o),
            ("b_o", &self.b_o),
            ("w_g", &self.w_g),
            ("u_g", &self.u_g),
            ("b_g", &self.b_g),
        ]
        .iter()
        .map(|(n, v)| (format!("{prefix}/{n}"), (*v).clone()))
        .collect()
    }
}

/// A bidirectional pair of LSTM cells over a common input width.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn from_alloc(d_in: usize, d_h: usize, alloc: &mut Alloc) -> Result<Self, TensorError> {
        Ok(BiLstm {
            fwd: LstmCell::from_alloc(d_in, d_h, alloc)?,
            bwd: LstmCell::from_alloc(d_in, d_h, alloc)?,
        })
    }

    pub fn init(
        d_in: usize,
        d_h: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        BiLstm::from_alloc(d_in, d_h, &mut |shape: &[usize]| {
            Ok(Var::new(init_uniform(shape, -range, range, rng)?))
        })
    }

    pub fn d_h(&self) -> usize {
        self.fwd.d_h()
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = self.fwd.params(&format!("{prefix}/fwd"));
        out.extend(self.bwd.params(&format!("{prefix}/bwd")));
        out
    }
}

/// Embedding table plus the shared bidirectional cells.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embedding: Var,
    pub cells: BiLstm,
}

impl EncoderParams {
    pub fn from_alloc(
        vocab_size: usize,
        d_e: usize,
        d_h: usize,
        alloc: &mut Alloc,
    ) -> Result<Self, TensorError> {
        Ok(EncoderParams {
            embedding: alloc(&[vocab_size, d_e])?,
            cells: BiLstm::from_alloc(d_e, d_h, alloc)?,
        })
    }

    pub fn init(
        vocab_size: usize,
        d_e: usize,
        d_h: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        EncoderParams::from_alloc(vocab_size, d_e, d_h, &mut |shape: &[usize]| {
            Ok(Var::new(init_uniform(shape, -range, range, rng)?))
        })
    }

    pub fn d_e(&self) -> usize {
        self.embedding.shape()[1]
    }

    pub fn d_h(&self) -> usize {
        self.cells.d_h()
    }
}

/// Per-position states `[T×2d_h]` and their arithmetic mean `[2d_h]`.
pub struct EncoderOutput {
    pub states: Var,
    pub pooled: Var,
}

/// Embeds a token sequence as a `[T×d_e]` matrix. Unknown tokens resolve to
/// the UNK row via [`Vocab::id`].
pub fn lookup<S: AsRef<str>>(
    tape: &mut Tape,
    vocab: &Vocab,
    embedding: &Var,
    tokens: &[S],
) -> Result<Var, TensorError> {
    if tokens.is_empty() {
        return Err(TensorError::EmptyInput { op: "lookup" });
    }
    let rows: Vec<Var> = tokens
        .iter()
        .map(|t| tape.row(embedding, vocab.id(t.as_ref())))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Var> = rows.iter().collect();
    tape.stack_rows(&refs)
}

/// One gated update: `i,f,o = σ(W·x + U·h + b)`, `g = tanh(W·x + U·h + b)`,
/// `c = f∘c_prev + i∘g`, `h = o∘tanh(c)`.
pub fn lstm_step(
    tape: &mut Tape,
    prev_h: &Var,
    prev_c: &Var,
    x: &Var,
    cell: &LstmCell,
) -> Result<(Var, Var), TensorError> {
    let mut gate = |w: &Var, u: &Var, b: &Var| -> Result<Var, TensorError> {
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, prev_h)?;
        let s = tape.add(&wx, &uh)?;
        tape.add(&s, b)
    };
    let i_pre = gate(&cell.w_i, &cell.u_i, &cell.b_i)?;
    let f_pre = gate(&cell.w_f, &cell.u_f, &cell.b_f)?;
    let o_pre = gate(&cell.w_o, &cell.u_o, &cell.b_o)?;
    let g_pre = gate(&cell.w_g, &cell.u_g, &cell.b_g)?;
    let i = tape.sigmoid(&i_pre);
    let f = tape.sigmoid(&f_pre);
    let o = tape.sigmoid(&o_pre);
    let g = tape.tanh(&g_pre);
    let fc = tape.mul(&f, prev_c)?;
    let ig = tape.mul(&i, &g)?;
    let c = tape.add(&fc, &ig)?;
    let tc = tape.tanh(&c);
    let h = tape.mul(&o, &tc)?;
    Ok((h, c))
}

/// Runs one direction over the rows of `embedded`, returning the hidden
/// state at each position in input order.
fn run_direction(
    tape: &mut Tape,
    cell: &LstmCell,
    embedded: &Var,
    reverse: bool,
) -> Result<Vec<Var>, TensorError> {
    let t_len = embedded.shape()[0];
    let d_h = cell.d_h();
    let mut h = Var::zeros(vec![d_h]);
    let mut c = Var::zeros(vec![d_h]);
    let mut states = vec![None; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let x = tape.row(embedded, t)?;
        let (nh, nc) = lstm_step(tape, &h, &c, &x, cell)?;
        states[t] = Some(nh.clone());
        h = nh;
        c = nc;
    }
    Ok(states.into_iter().map(|s| s.unwrap()).collect())
}

/// Encodes `embedded` (`[T×d_e]`) with both directions from zero initial
/// states. Row t of `states` is `h⃗_t ⊕ h⃖_t`; `pooled` is the row mean.
pub fn bilstm_encode(
    tape: &mut Tape,
    cells: &BiLstm,
    embedded: &Var,
) -> Result<EncoderOutput, TensorError> {
    let shape = embedded.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(TensorError::EmptyInput {
            op: "bilstm_encode",
        });
    }
    let fwd = run_direction(tape, &cells.fwd, embedded, false)?;
    let bwd = run_direction(tape, &cells.bwd, embedded, true)?;
    let rows: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Var> = rows.iter().collect();
    let states = tape.stack_rows(&refs)?;
    let pooled = tape.mean_rows(&states)?;
    Ok(EncoderOutput { states, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_gradients_match, GradCheckSettings};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cell(d_in: usize, d_h: usize, seed: u64) -> LstmCell {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LstmCell::init(d_in, d_h, 0.5, &mut rng).unwrap()
    }

    fn zero_cell(d_in: usize, d_h: usize) -> LstmCell {
        LstmCell {
            w_i: Var::zeros(vec![d_h, d_in]),
            u_i: Var::zeros(vec![d_h, d_h]),
            b_i: Var::zeros(vec![d_h]),
            w_f: Var::zeros(vec![d_h, d_in]),
            u_f: Var::zeros(vec![d_h, d_h]),
            b_f: Var::zeros(vec![d_h]),
            w_o: Var::zeros(vec![d_h, d_in]),
            u_o: Var::zeros(vec![d_h, d_h]),
            b_o: Var::zeros(vec![d_h]),
            w_g: Var::zeros(vec![d_h, d_in]),
            u_g: Var::zeros(vec![d_h, d_h]),
            b_g: Var::zeros(vec![d_h]),
        }
    }

    #[test]
    fn vocab_reserves_pad_and_unk() {
        let mut v = Vocab::new();
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);
        assert_eq!(v.id(UNK_TOKEN), UNK_ID);
        assert_eq!(v.id("never-seen"), UNK_ID);
        let i = v.add("book");
        assert_eq!(i, 2);
        assert_eq!(v.add("book"), 2);
        assert_eq!(v.token(2), Some("book"));
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn vocab_round_trips_through_token_list() {
        let mut v = Vocab::new();
        v.add("alpha");
        v.add("beta");
        let rebuilt = Vocab::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(rebuilt.id("beta"), v.id("beta"));
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
        assert!(Vocab::from_tokens(vec![
            PAD_TOKEN.into(),
            UNK_TOKEN.into(),
            "dup".into(),
            "dup".into()
        ])
        .is_err());
    }

    #[test]
    fn lookup_returns_exact_rows_and_folds_oov() {
        let mut v = Vocab::new();
        v.add("good");
        let table = Var::from_vec(
            vec![3, 2],
            vec![0.0, 0.0, 0.1, 0.2, 0.3, 0.4], // pad, unk, good
        )
        .unwrap();
        let mut tape = Tape::new();
        let emb = lookup(&mut tape, &v, &table, &["good", "martian"]).unwrap();
        assert_eq!(emb.shape(), vec![2, 2]);
        assert_eq!(emb.to_vec(), vec![0.3, 0.4, 0.1, 0.2]);
    }

    #[test]
    fn lookup_rejects_empty_sequence() {
        let v = Vocab::new();
        let table = Var::zeros(vec![2, 4]);
        let mut tape = Tape::new();
        let err = lookup(&mut tape, &v, &table, &[] as &[&str]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyInput { .. }));
    }

    #[test]
    fn lookup_default_dims() {
        let mut v = Vocab::new();
        for t in ["a", "b", "c"] {
            v.add(t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = Var::new(init_uniform(&[v.len(), 200], -0.1, 0.1, &mut rng).unwrap());
        let mut tape = Tape::new();
        let emb = lookup(&mut tape, &v, &table, &["a", "b", "c"]).unwrap();
        assert_eq!(emb.shape(), vec![3, 200]);
    }

    #[test]
    fn lstm_step_all_zero_params_gives_zero_state() {
        let cell = zero_cell(3, 2);
        let mut tape = Tape::new();
        let x = Var::from_vec(vec![3], vec![5.0, -2.0, 1.0]).unwrap();
        let h0 = Var::zeros(vec![2]);
        let c0 = Var::zeros(vec![2]);
        let (h, c) = lstm_step(&mut tape, &h0, &c0, &x, &cell).unwrap();
        assert_eq!(h.to_vec(), vec![0.0, 0.0]);
        assert_eq!(c.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn lstm_step_biases_only_matches_scalar_reference() {
        // With W = U = 0, gates depend on biases alone; a scalar reference
        // loop serves as the oracle over several steps.
        let (bi, bf, bo, bg) = (0.3_f64, -0.4_f64, 0.2_f64, 0.7_f64);
        let cell = {
            let c = zero_cell(1, 1);
            c.b_i.set_data(&[bi]);
            c.b_f.set_data(&[bf]);
            c.b_o.set_data(&[bo]);
            c.b_g.set_data(&[bg]);
            c
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut rc = 0.0_f64;
        let mut tape = Tape::new();
        let mut h = Var::zeros(vec![1]);
        let mut c = Var::zeros(vec![1]);
        let x = Var::zeros(vec![1]);
        for _ in 0..4 {
            rc = sig(bf) * rc + sig(bi) * bg.tanh();
            let rh = sig(bo) * rc.tanh();
            let (nh, nc) = lstm_step(&mut tape, &h, &c, &x, &cell).unwrap();
            h = nh;
            c = nc;
            assert!((h.item() - rh).abs() < 1e-15);
            assert!((c.item() - rc).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_step_gradients_match_finite_differences() {
        let cell = toy_cell(3, 2, 11);
        let x = Var::from_vec(vec![3], vec![0.4, -0.6, 0.2]).unwrap();
        let h0 = Var::from_vec(vec![2], vec![0.1, -0.3]).unwrap();
        let c0 = Var::from_vec(vec![2], vec![-0.2, 0.5]).unwrap();
        let mut params = cell.params("cell");
        params.push(("x".to_string(), x.clone()));
        params.push(("h0".to_string(), h0.clone()));
        params.push(("c0".to_string(), c0.clone()));
        assert_gradients_match(&params, &GradCheckSettings::per_op(), |tape| {
            let (h, c) = lstm_step(tape, &h0, &c0, &x, &cell)?;
            let hc = tape.concat(&[&h, &c])?;
            let sq = tape.mul(&hc, &hc)?;
            Ok(tape.sum(&sq))
        });
    }

    #[test]
    fn single_position_pooled_equals_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cells = BiLstm::init(3, 2, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = Var::from_vec(vec![1, 3], vec![0.5, -1.0, 0.25]).unwrap();
        let out = bilstm_encode(&mut tape, &cells, &x).unwrap();
        assert_eq!(out.states.shape(), vec![1, 4]);
        assert_eq!(out.pooled.to_vec(), out.states.to_vec());
    }

    #[test]
    fn input_reversal_swaps_directional_halves() {
        // With the two directions sharing parameters, encoding the reversed
        // sequence permutes and half-swaps the states bitwise.
        let cell = toy_cell(3, 2, 7);
        let cells = BiLstm {
            fwd: cell.clone(),
            bwd: cell,
        };
        let d_h = 2;
        let data = vec![0.3, -0.1, 0.8, 0.2, 0.9, -0.5, -0.7, 0.4, 0.6];
        let x = Var::from_vec(vec![3, 3], data.clone()).unwrap();
        let mut rev = Vec::new();
        for t in (0..3).rev() {
            rev.extend_from_slice(&data[t * 3..(t + 1) * 3]);
        }
        let xr = Var::from_vec(vec![3, 3], rev).unwrap();

        let mut tape = Tape::new();
        let out = bilstm_encode(&mut tape, &cells, &x).unwrap();
        let out_r = bilstm_encode(&mut tape, &cells, &xr).unwrap();
        let (s, sr) = (out.states.to_vec(), out_r.states.to_vec());
        let width = 2 * d_h;
        for t in 0..3 {
            let orig = &s[(2 - t) * width..(2 - t + 1) * width];
            let rev = &sr[t * width..(t + 1) * width];
            assert_eq!(&rev[..d_h], &orig[d_h..], "fwd half at t={t}");
            assert_eq!(&rev[d_h..], &orig[..d_h], "bwd half at t={t}");
        }
    }

    #[test]
    fn default_dims_produce_400_wide_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderParams::init(4, 200, 200, 0.1, &mut rng).unwrap();
        let mut v = Vocab::new();
        v.add("w1");
        v.add("w2");
        let mut tape = Tape::new();
        let emb = lookup(&mut tape, &v, &enc.embedding, &["w1", "w2"]).unwrap();
        let out = bilstm_encode(&mut tape, &enc.cells, &emb).unwrap();
        assert_eq!(out.states.shape(), vec![2, 400]);
        assert_eq!(out.pooled.shape(), vec![400]);
    }

    #[test]
    fn encode_rejects_empty_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cells = BiLstm::init(3, 2, 0.1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let flat = Var::zeros(vec![3]);
        assert!(bilstm_encode(&mut tape, &cells, &flat).is_err());
    }

    #[test]
    fn whole_encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderParams::init(5, 3, 2, 0.5, &mut rng).unwrap();
        let mut vocab = Vocab::new();
        for t in ["one", "two", "three"] {
            vocab.add(t);
        }
        let tokens = ["one", "three", "two"];
        let mut params = enc.cells.params("enc");
        params.push(("embed".to_string(), enc.embedding.clone()));
        assert_gradients_match(&params, &GradCheckSettings::full_model(), |tape| {
            let emb = lookup(tape, &vocab, &enc.embedding, &tokens)?;
            let out = bilstm_encode(tape, &enc.cells, &emb)?;
            let sq = tape.mul(&out.pooled, &out.pooled)?;
            Ok(tape.sum(&sq))
        });
    }

    proptest! {
        #[test]
        fn pooled_is_mean_of_state_rows(
            seed in 0u64..500,
            t_len in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cells = BiLstm::init(2, 2, 0.5, &mut rng).unwrap();
            let x = Var::new(init_uniform(&[t_len, 2], -1.0, 1.0, &mut rng).unwrap());
            let mut tape = Tape::new();
            let out = bilstm_encode(&mut tape, &cells, &x).unwrap();
            let states = out.states.to_vec();
            let pooled = out.pooled.to_vec();
            let width = 4;
            for j in 0..width {
                let mean: f64 = (0..t_len).map(|r| states[r * width + j]).sum::<f64>()
                    / t_len as f64;
                prop_assert!((pooled[j] - mean).abs() < 1e-12);
            }
        }
    }
}
