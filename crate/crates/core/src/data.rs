//! Corpus ingestion and generation: classification JSONL, CoNLL-style
//! column files, plain-text embeddings, deterministic splits, and a planted
//! multi-domain synthetic benchmark with a perfect lexicon oracle.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::encoder::Vocab;
use crate::tensor::{init_uniform, Tensor, TensorError};

#[derive(Debug)]
pub enum DataError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed content, located by 1-based line number.
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    /// Split ratios do not sum to 1.
    BadRatios {
        sum: f64,
    },
    /// An embedding line carries the wrong number of values.
    WrongDim {
        token: String,
        expected: usize,
        got: usize,
    },
    /// Synthetic-corpus configuration violates an invariant.
    BadConfig {
        reason: String,
    },
    Tensor(TensorError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => {
                write!(f, "{}: {source}", path.display())
            }
            DataError::Parse { path, line, reason } => {
                write!(f, "{}:{line}: {reason}", path.display())
            }
            DataError::BadRatios { sum } => {
                write!(f, "split ratios must sum to 1, got {sum}")
            }
            DataError::WrongDim {
                token,
                expected,
                got,
            } => write!(
                f,
                "embedding for token '{token}' has {got} values, expected {expected}"
            ),
            DataError::BadConfig { reason } => write!(f, "bad synthetic config: {reason}"),
            DataError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<TensorError> for DataError {
    fn from(e: TensorError) -> Self {
        DataError::Tensor(e)
    }
}

/// One classification example: tokens, interned label, source task index.
#[derive(Debug, Clone, PartialEq)]
pub struct TextExample {
    pub tokens: Vec<String>,
    pub label: usize,
    pub task: usize,
}

/// One tagging example: tokens and same-length tag ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub tokens: Vec<String>,
    pub tags: Vec<usize>,
}

/// Lowercases and splits into alphanumeric runs plus single punctuation
/// tokens; whitespace separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            run.extend(ch.to_lowercase());
        } else {
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !run.is_empty() {
        out.push(run);
    }
    out
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    label: String,
}

/// Classification examples plus label names in first-seen order.
#[derive(Debug, Clone)]
pub struct LoadedClassification {
    pub examples: Vec<TextExample>,
    pub labels: Vec<String>,
}

/// Reads JSONL records with `text` and `label` fields; other fields are
/// ignored. Labels are interned to ids in first-seen order; `task` stamps
/// every example with its source task index.
pub fn load_classification(path: &Path, task: usize) -> Result<LoadedClassification, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut labels: Vec<String> = Vec::new();
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            reason: format!("malformed record: {e}"),
        })?;
        let tokens = tokenize(&record.text);
        if tokens.is_empty() {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                reason: "empty text".to_string(),
            });
        }
        let label = match labels.iter().position(|l| *l == record.label) {
            Some(id) => id,
            None => {
                labels.push(record.label.clone());
                labels.len() - 1
            }
        };
        examples.push(TextExample {
            tokens,
            label,
            task,
        });
    }
    Ok(LoadedClassification { examples, labels })
}

/// Seeded shuffle followed by a contiguous three-way split. Dev and test
/// sizes are floors of their ratios; the remainder goes to train.
pub fn split<T: Clone>(
    data: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), DataError> {
    let (r_train, r_dev, r_test) = ratios;
    let sum = r_train + r_dev + r_test;
    if (sum - 1.0).abs() > 1e-9 || r_train < 0.0 || r_dev < 0.0 || r_test < 0.0 {
        return Err(DataError::BadRatios { sum });
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_dev = (r_dev * n as f64).floor() as usize;
    let n_test = (r_test * n as f64).floor() as usize;
    let n_train = n - n_dev - n_test;

    let take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| data[i].clone()).collect()
    };
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_dev),
        take(n_train + n_dev..n),
    ))
}

/// Loads plain-text embeddings (`token v1 ... v_dim` per line) into a
/// `[V × dim]` table over `vocab`. Rows for tokens absent from the file,
/// and the PAD/UNK rows, are drawn uniform from [-0.1, 0.1] under `seed`,
/// so loading is idempotent given the seed.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    seed: u64,
) -> Result<Tensor, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = init_uniform(&[vocab.len(), dim], -0.1, 0.1, &mut rng)?;

    let file = File::open(path).map_err(io_err)?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().ok_or_else(|| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: "missing token".to_string(),
        })?;
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| DataError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("bad number '{p}'"),
                })
            })
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(DataError::WrongDim {
                token: token.to_string(),
                expected: dim,
                got: values.len(),
            });
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        if id <= crate::encoder::UNK_ID {
            continue; // reserved rows stay randomly initialized
        }
        table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
    }
    Ok(table)
}

/// Which CoNLL column supplies the tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagColumn {
    Pos,
    Chunk,
}

/// Tagged sentences plus the tag inventory in first-seen order.
#[derive(Debug, Clone)]
pub struct LoadedConll {
    pub sequences: Vec<LabeledSequence>,
    pub tags: Vec<String>,
}

/// Reads three-column (token, POS, chunk) sentences separated by blank
/// lines, selecting one tag column. Tokens are kept verbatim.
pub fn load_conll(path: &Path, column: TagColumn) -> Result<LoadedConll, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut tags: Vec<String> = Vec::new();
    let mut sequences = Vec::new();
    let mut tokens = Vec::new();
    let mut seq_tags = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                sequences.push(LabeledSequence {
                    tokens: std::mem::take(&mut tokens),
                    tags: std::mem::take(&mut seq_tags),
                });
            }
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected 3 columns, got {}", cols.len()),
            });
        }
        let tag = match column {
            TagColumn::Pos => cols[1],
            TagColumn::Chunk => cols[2],
        };
        let tag_id = match tags.iter().position(|t| t == tag) {
            Some(id) => id,
            None => {
                tags.push(tag.to_string());
                tags.len() - 1
            }
        };
        tokens.push(cols[0].to_string());
        seq_tags.push(tag_id);
    }
    if !tokens.is_empty() {
        sequences.push(LabeledSequence {
            tokens,
            tags: seq_tags,
        });
    }
    Ok(LoadedConll { sequences, tags })
}

/// Builds a vocabulary over the given token sequences (training splits of
/// all tasks jointly; one shared table).
pub fn build_vocab<'a, I, S>(sequences: I) -> Vocab
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut vocab = Vocab::new();
    for tokens in sequences {
        for t in tokens {
            vocab.add(t.as_ref());
        }
    }
    vocab
}

/// Configuration of the planted multi-domain benchmark.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub domains: usize,
    /// Words per domain lexicon (lexicons are pairwise disjoint).
    pub domain_lexicon: usize,
    /// Total shared sentiment words, half positive and half negative.
    pub sentiment_lexicon: usize,
    /// Inclusive sentence-length bounds.
    pub len_range: (usize, usize),
    /// Fraction of each sentence drawn from the noise pool.
    pub noise_ratio: f64,
    pub train_per_domain: usize,
    pub dev_per_domain: usize,
    pub test_per_domain: usize,
    pub labeling_train: usize,
    pub labeling_dev: usize,
    pub labeling_test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            domains: 4,
            domain_lexicon: 12,
            sentiment_lexicon: 12,
            len_range: (5, 12),
            noise_ratio: 0.3,
            train_per_domain: 500,
            dev_per_domain: 100,
            test_per_domain: 100,
            labeling_train: 500,
            labeling_dev: 100,
            labeling_test: 100,
            seed: 7,
        }
    }
}

/// Token-origin tags of the synthetic labeling task.
pub const SYNTH_TAGS: [&str; 4] = ["dom", "pos", "neg", "noise"];
/// Binary sentiment labels of the synthetic classification tasks.
pub const SYNTH_LABELS: [&str; 2] = ["neg", "pos"];

const NOISE_POOL: usize = 40;

/// One domain's pre-split classification datasets.
#[derive(Debug, Clone)]
pub struct SyntheticDomain {
    pub name: String,
    pub train: Vec<TextExample>,
    pub dev: Vec<TextExample>,
    pub test: Vec<TextExample>,
}

/// The shared labeling task over sentences from all domains.
#[derive(Debug, Clone)]
pub struct SyntheticLabeling {
    pub train: Vec<LabeledSequence>,
    pub dev: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
}

/// Generated benchmark plus its planted lexicons (the Bayes oracle).
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub domains: Vec<SyntheticDomain>,
    pub labeling: SyntheticLabeling,
    /// Per-domain lexicons, disjoint across domains.
    pub domain_words: Vec<Vec<String>>,
    /// Positive sentiment words shared by every domain.
    pub positive_words: Vec<String>,
    /// Negative sentiment words shared by every domain.
    pub negative_words: Vec<String>,
    pub noise_words: Vec<String>,
}

impl Synthetic {
    fn word_tag(&self, token: &str) -> Option<usize> {
        if self
            .domain_words
            .iter()
            .any(|lex| lex.iter().any(|w| w == token))
        {
            Some(0)
        } else if self.positive_words.iter().any(|w| w == token) {
            Some(1)
        } else if self.negative_words.iter().any(|w| w == token) {
            Some(2)
        } else if self.noise_words.iter().any(|w| w == token) {
            Some(3)
        } else {
            None
        }
    }

    /// Lexicon-lookup sentiment: majority polarity of sentiment words.
    pub fn oracle_label<S: AsRef<str>>(&self, tokens: &[S]) -> Option<usize> {
        let mut pos = 0usize;
        let mut neg = 0usize;
        for t in tokens {
            match self.word_tag(t.as_ref()) {
                Some(1) => pos += 1,
                Some(2) => neg += 1,
                _ => {}
            }
        }
        match pos.cmp(&neg) {
            std::cmp::Ordering::Greater => Some(1),
            std::cmp::Ordering::Less => Some(0),
            std::cmp::Ordering::Equal => None,
        }
    }

    /// Lexicon-lookup domain: the unique domain whose lexicon appears.
    pub fn oracle_domain<S: AsRef<str>>(&self, tokens: &[S]) -> Option<usize> {
        let mut found = None;
        for t in tokens {
            for (k, lex) in self.domain_words.iter().enumerate() {
                if lex.iter().any(|w| w == t.as_ref()) {
                    match found {
                        Some(prev) if prev != k => return None,
                        _ => found = Some(k),
                    }
                }
            }
        }
        found
    }

    /// Lexicon-lookup tags, one per token.
    pub fn oracle_tags<S: AsRef<str>>(&self, tokens: &[S]) -> Option<Vec<usize>> {
        tokens.iter().map(|t| self.word_tag(t.as_ref())).collect()
    }
}

struct SentenceDraw {
    tokens: Vec<String>,
    tags: Vec<usize>,
}

fn draw_sentence(
    rng: &mut ChaCha8Rng,
    synth: &Synthetic,
    cfg: &SyntheticConfig,
    domain: usize,
    label: usize,
) -> SentenceDraw {
    let len = rng.gen_range(cfg.len_range.0..=cfg.len_range.1);
    let n_noise = ((cfg.noise_ratio * len as f64).round() as usize).min(len - 2);
    let remaining = len - n_noise;
    let n_dom = 1 + rng.gen_range(0..remaining - 1);
    let n_sent = remaining - n_dom;
    // Strict majority of sentiment words carries the planted label.
    let majority = n_sent / 2 + 1;
    let n_match = rng.gen_range(majority..=n_sent);

    let mut picks: Vec<(String, usize)> = Vec::with_capacity(len);
    let pick = |rng: &mut ChaCha8Rng, pool: &[String]| -> String {
        pool[rng.gen_range(0..pool.len())].clone()
    };
    for _ in 0..n_dom {
        picks.push((pick(rng, &synth.domain_words[domain]), 0));
    }
    let (matching, opposite, match_tag, opp_tag) = if label == 1 {
        (&synth.positive_words, &synth.negative_words, 1, 2)
    } else {
        (&synth.negative_words, &synth.positive_words, 2, 1)
    };
    for _ in 0..n_match {
        picks.push((pick(rng, matching), match_tag));
    }
    for _ in 0..n_sent - n_match {
        picks.push((pick(rng, opposite), opp_tag));
    }
    for _ in 0..n_noise {
        picks.push((pick(rng, &synth.noise_words), 3));
    }
    picks.shuffle(rng);

    let (tokens, tags) = picks.into_iter().unzip();
    SentenceDraw { tokens, tags }
}

/// Generates the planted benchmark: K binary-sentiment domains with
/// pairwise-disjoint domain lexicons and one shared sentiment lexicon, plus
/// a token-origin labeling task over sentences from all domains. Every
/// sentence contains at least one domain word and one sentiment word; labels
/// alternate within each split for exact balance. Deterministic under
/// `cfg.seed`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Synthetic, DataError> {
    let bad = |reason: &str| DataError::BadConfig {
        reason: reason.to_string(),
    };
    if cfg.domains == 0 {
        return Err(bad("domains must be positive"));
    }
    if cfg.domain_lexicon == 0 {
        return Err(bad("domain lexicon must be non-empty"));
    }
    if cfg.sentiment_lexicon < 2 || cfg.sentiment_lexicon % 2 != 0 {
        return Err(bad("sentiment lexicon must be even and at least 2"));
    }
    if cfg.len_range.0 < 2 || cfg.len_range.0 > cfg.len_range.1 {
        return Err(bad(
            "sentence length range must be ordered with minimum at least 2",
        ));
    }
    if !(0.0..1.0).contains(&cfg.noise_ratio) {
        return Err(bad("noise ratio must lie in [0, 1)"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = cfg.sentiment_lexicon / 2;
    let mut synth = Synthetic {
        domains: Vec::new(),
        labeling: SyntheticLabeling {
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        },
        domain_words: (0..cfg.domains)
            .map(|k| {
                (0..cfg.domain_lexicon)
                    .map(|i| format!("dom{k}w{i}"))
                    .collect()
            })
            .collect(),
        positive_words: (0..half).map(|i| format!("posw{i}")).collect(),
        negative_words: (0..half).map(|i| format!("negw{i}")).collect(),
        noise_words: (0..NOISE_POOL).map(|i| format!("noise{i}")).collect(),
    };

    for k in 0..cfg.domains {
        let mut splits: Vec<Vec<TextExample>> = Vec::new();
        for count in [
            cfg.train_per_domain,
            cfg.dev_per_domain,
            cfg.test_per_domain,
        ] {
            let mut examples = Vec::with_capacity(count);
            for i in 0..count {
                let label = i % 2;
                let draw = draw_sentence(&mut rng, &synth, cfg, k, label);
                examples.push(TextExample {
                    tokens: draw.tokens,
                    label,
                    task: k,
                });
            }
            splits.push(examples);
        }
        let test = splits.pop().unwrap();
        let dev = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        synth.domains.push(SyntheticDomain {
            name: format!("domain{k}"),
            train,
            dev,
            test,
        });
    }

    let mut labeling_splits: Vec<Vec<LabeledSequence>> = Vec::new();
    for count in [cfg.labeling_train, cfg.labeling_dev, cfg.labeling_test] {
        let mut sequences = Vec::with_capacity(count);
        for i in 0..count {
            let domain = rng.gen_range(0..cfg.domains);
            let draw = draw_sentence(&mut rng, &synth, cfg, domain, i % 2);
            sequences.push(LabeledSequence {
                tokens: draw.tokens,
                tags: draw.tags,
            });
        }
        labeling_splits.push(sequences);
    }
    synth.labeling.test = labeling_splits.pop().unwrap();
    synth.labeling.dev = labeling_splits.pop().unwrap();
    synth.labeling.train = labeling_splits.pop().unwrap();

    Ok(synth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Easy to use!"), vec!["easy", "to", "use", "!"]);
        assert_eq!(tokenize("good,bad"), vec!["good", ",", "bad"]);
        assert_eq!(tokenize("  spaced   out  "), vec!["spaced", "out"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn classification_loader_interns_labels_first_seen() {
        let f = write_temp(concat!(
            "{\"text\": \"Easy to use!\", \"label\": \"pos\"}\n",
            "{\"text\": \"Terrible quality.\", \"label\": \"neg\", \"extra\": 5}\n",
            "{\"text\": \"Loved it\", \"label\": \"pos\"}\n",
        ));
        let loaded = load_classification(f.path(), 3).unwrap();
        assert_eq!(loaded.labels, vec!["pos", "neg"]);
        assert_eq!(loaded.examples.len(), 3);
        assert_eq!(loaded.examples[0].tokens, vec!["easy", "to", "use", "!"]);
        assert_eq!(loaded.examples[0].label, 0);
        assert_eq!(loaded.examples[1].label, 1);
        assert_eq!(loaded.examples[2].label, 0);
        assert!(loaded.examples.iter().all(|e| e.task == 3));
    }

    #[test]
    fn classification_loader_reports_line_numbers() {
        let f = write_temp("{\"text\": \"ok\", \"label\": \"a\"}\nnot json\n");
        match load_classification(f.path(), 0) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }

        let f = write_temp("{\"text\": \"   \", \"label\": \"a\"}\n");
        match load_classification(f.path(), 0) {
            Err(DataError::Parse { line, reason, .. }) => {
                assert_eq!(line, 1);
                assert!(reason.contains("empty text"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_thousand_line_file_loads_two_thousand_examples() {
        let mut content = String::new();
        for i in 0..2000 {
            content.push_str(&format!(
                "{{\"text\": \"example number {i}\", \"label\": \"l{}\"}}\n",
                i % 2
            ));
        }
        let f = write_temp(&content);
        let loaded = load_classification(f.path(), 0).unwrap();
        assert_eq!(loaded.examples.len(), 2000);
    }

    #[test]
    fn split_matches_published_row_shape() {
        let data: Vec<usize> = (0..2000).collect();
        let (train, dev, test) = split(&data, (0.70, 0.10, 0.20), 11).unwrap();
        assert_eq!((train.len(), dev.len(), test.len()), (1400, 200, 400));

        // Disjoint cover.
        let mut all: Vec<usize> = train.iter().chain(&dev).chain(&test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, data);

        // Determinism.
        let again = split(&data, (0.70, 0.10, 0.20), 11).unwrap();
        assert_eq!(again.0, train);
        assert_eq!(again.1, dev);
        assert_eq!(again.2, test);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let data = vec![1, 2, 3];
        assert!(matches!(
            split(&data, (0.5, 0.2, 0.2), 0),
            Err(DataError::BadRatios { .. })
        ));
    }

    #[test]
    fn embeddings_fill_known_rows_and_seed_the_rest() {
        let mut vocab = Vocab::new();
        vocab.add("good");
        vocab.add("rare");
        let f = write_temp("good 0.25 -0.5 1.0\nunused 1 2 3\n");
        let t1 = load_embeddings(f.path(), &vocab, 3, 9).unwrap();
        let t2 = load_embeddings(f.path(), &vocab, 3, 9).unwrap();
        assert_eq!(t1.data(), t2.data(), "idempotent under fixed seed");

        let good = vocab.id("good");
        assert_eq!(&t1.data()[good * 3..good * 3 + 3], &[0.25, -0.5, 1.0]);
        let rare = vocab.id("rare");
        for v in &t1.data()[rare * 3..rare * 3 + 3] {
            assert!(v.abs() <= 0.1, "missing token row drawn from [-0.1, 0.1]");
        }
        for v in &t1.data()[..2 * 3] {
            assert!(v.abs() <= 0.1, "reserved rows stay randomly initialized");
        }
    }

    #[test]
    fn embeddings_reject_wrong_dimension_naming_token() {
        let mut vocab = Vocab::new();
        vocab.add("short");
        let f = write_temp("short 0.1 0.2\n");
        match load_embeddings(f.path(), &vocab, 3, 0) {
            Err(DataError::WrongDim {
                token,
                expected,
                got,
            }) => {
                assert_eq!(token, "short");
                assert_eq!((expected, got), (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conll_loader_separates_sentences_on_blank_lines() {
        let f = write_temp(concat!(
            "He PRP B-NP\n",
            "reckons VBZ B-VP\n",
            "\n",
            "The DT B-NP\n",
            "deficit NN I-NP\n",
            "\n",
        ));
        let chunk = load_conll(f.path(), TagColumn::Chunk).unwrap();
        assert_eq!(chunk.sequences.len(), 2);
        assert_eq!(chunk.tags, vec!["B-NP", "B-VP", "I-NP"]);
        assert_eq!(chunk.sequences[0].tokens, vec!["He", "reckons"]);
        assert_eq!(chunk.sequences[0].tags, vec![0, 1]);

        let pos = load_conll(f.path(), TagColumn::Pos).unwrap();
        assert_eq!(pos.tags, vec!["PRP", "VBZ", "DT", "NN"]);
    }

    #[test]
    fn conll_loader_rejects_malformed_rows() {
        let f = write_temp("He PRP B-NP\nbroken row with too many columns here\n");
        match load_conll(f.path(), TagColumn::Chunk) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conll_loader_handles_published_corpus_size() {
        let mut content = String::new();
        for i in 0..8774 {
            content.push_str(&format!("tok{} NN B-NP\n.{} . O\n\n", i % 50, i % 9));
        }
        let f = write_temp(&content);
        let loaded = load_conll(f.path(), TagColumn::Chunk).unwrap();
        assert_eq!(loaded.sequences.len(), 8774);
    }

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            domains: 3,
            train_per_domain: 40,
            dev_per_domain: 10,
            test_per_domain: 10,
            labeling_train: 30,
            labeling_dev: 10,
            labeling_test: 10,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let cfg = small_config();
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        for (da, db) in a.domains.iter().zip(&b.domains) {
            assert_eq!(da.train, db.train);
            assert_eq!(da.dev, db.dev);
            assert_eq!(da.test, db.test);
        }
        assert_eq!(a.labeling.train, b.labeling.train);
    }

    #[test]
    fn synthetic_plants_lexicon_structure() {
        let cfg = small_config();
        let synth = gen_synthetic(&cfg).unwrap();
        assert_eq!(synth.domains.len(), 3);
        for (k, domain) in synth.domains.iter().enumerate() {
            assert_eq!(domain.train.len(), 40);
            assert_eq!(domain.dev.len(), 10);
            assert_eq!(domain.test.len(), 10);
            let balance: usize = domain.train.iter().map(|e| e.label).sum();
            assert_eq!(balance, 20, "labels alternate to exact balance");
            for e in domain.train.iter().chain(&domain.dev).chain(&domain.test) {
                // Planted guarantees: oracle recovers label and domain.
                assert_eq!(synth.oracle_label(&e.tokens), Some(e.label));
                assert_eq!(synth.oracle_domain(&e.tokens), Some(k));
                assert!(
                    (cfg.len_range.0..=cfg.len_range.1).contains(&e.tokens.len()),
                    "length within configured range"
                );
            }
        }
        for seq in synth
            .labeling
            .train
            .iter()
            .chain(&synth.labeling.dev)
            .chain(&synth.labeling.test)
        {
            assert_eq!(seq.tokens.len(), seq.tags.len());
            assert_eq!(synth.oracle_tags(&seq.tokens), Some(seq.tags.clone()));
        }
    }

    #[test]
    fn synthetic_rejects_bad_configs() {
        let mut cfg = small_config();
        cfg.sentiment_lexicon = 3;
        assert!(matches!(
            gen_synthetic(&cfg),
            Err(DataError::BadConfig { .. })
        ));
        let mut cfg = small_config();
        cfg.len_range = (1, 4);
        assert!(gen_synthetic(&cfg).is_err());
        let mut cfg = small_config();
        cfg.noise_ratio = 1.0;
        assert!(gen_synthetic(&cfg).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 0usize..300, seed in 0u64..1000) {
            let data: Vec<usize> = (0..n).collect();
            let (train, dev, test) = split(&data, (0.70, 0.10, 0.20), seed).unwrap();
            prop_assert_eq!(train.len() + dev.len() + test.len(), n);
            let mut all: Vec<usize> = train.iter().chain(&dev).chain(&test).cloned().collect();
            all.sort_unstable();
            let expected: Vec<usize> = (0..n).collect();
            prop_assert_eq!(all, expected);
        }
    }
}
