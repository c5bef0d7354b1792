//! Command-line entry point. Every command reads the same flat key-value
//! configuration (defaults < config file < `--key value` overrides) and
//! maps failures onto three exit codes: 1 config, 2 data, 3 failed check.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ConfigError, Settings, TaskFiles, CONFIG_ENV};
use crate::data::{
    gen_synthetic, load_classification, load_conll, load_embeddings, DataError, LabeledSequence,
    TextExample, SYNTH_LABELS, SYNTH_TAGS,
};
use crate::encoder::Vocab;
use crate::evalviz::{self, EvalError};
use crate::gradcheck;
use crate::mtl::{ModelError, MtlModel, SchemeKind, TaskDef, TaskKind};
use crate::trainer::{self, TaskData, TrainError};

const USAGE: &str = "usage: attnmtl <command> [--config PATH] [--key value]...
commands: train, eval, transfer, finetune, export-attention, similarity,
          param-count, gradcheck, gen-synthetic
Keys are documented in docs/config.md; --key value overrides the config file.";

/// Distinct init stream so model initialization and the training schedule
/// draw independent sequences from one seed.
const INIT_STREAM: u64 = 0x9e3779b97f4a7c15;

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Check(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Data(m) => write!(f, "{m}"),
            CliError::Check(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::UnknownKey { .. } => CliError::Config(format!("{e}\n{USAGE}")),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadConfig { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig { .. } => CliError::Config(e.to_string()),
            TrainError::MissingGrad { .. } => CliError::Check(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NoAttention { .. } | EvalError::BadQueries { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "attnmtl",
    version,
    about = "Multi-task text classification with task-attentive reading of one shared encoder",
    after_help = "All commands accept --config PATH plus --key value overrides; see docs/config.md."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Jointly train a scheme on the configured tasks
    Train(RawArgs),
    /// Report accuracy of a checkpoint on a dev or test split
    Eval(RawArgs),
    /// Train new tasks against a frozen shared encoder
    Transfer(RawArgs),
    /// Fine-tune one task with all shared parameters frozen
    Finetune(RawArgs),
    /// Dump per-task attention distributions as JSONL
    #[command(name = "export-attention")]
    ExportAttention(RawArgs),
    /// Print pairwise distances between task query vectors
    Similarity(RawArgs),
    /// Print per-scheme trainable-parameter counts
    #[command(name = "param-count")]
    ParamCount(RawArgs),
    /// Run the finite-difference gradient suite on toy dimensions
    Gradcheck(RawArgs),
    /// Generate the planted synthetic benchmark corpus
    #[command(name = "gen-synthetic")]
    GenSynthetic(RawArgs),
}

#[derive(clap::Args)]
struct RawArgs {
    /// --config PATH, then --key value pairs (see docs/config.md)
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "ARGS"
    )]
    raw: Vec<String>,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (raw, cmd): (&RawArgs, fn(&Settings) -> Result<(), CliError>) = match &cli.command {
        Cmd::Train(a) => (a, cmd_train),
        Cmd::Eval(a) => (a, cmd_eval),
        Cmd::Transfer(a) => (a, cmd_transfer),
        Cmd::Finetune(a) => (a, cmd_finetune),
        Cmd::ExportAttention(a) => (a, cmd_export_attention),
        Cmd::Similarity(a) => (a, cmd_similarity),
        Cmd::ParamCount(a) => (a, cmd_param_count),
        Cmd::Gradcheck(a) => (a, cmd_gradcheck),
        Cmd::GenSynthetic(a) => (a, cmd_gen_synthetic),
    };
    let parsed = match parse_raw(&raw.raw)? {
        Parsed::Help => {
            println!("{USAGE}");
            return Ok(());
        }
        Parsed::Pairs { config, pairs } => (config, pairs),
    };
    let (config_path, pairs) = parsed;
    let config_path = config_path.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let text =
        match &config_path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config '{}': {e}", p.display()))
            })?),
            None => None,
        };
    let file = config_path.as_deref().zip(text.as_deref());
    let settings = Settings::assemble(file, &pairs)?;
    cmd(&settings)
}

enum Parsed {
    Help,
    Pairs {
        config: Option<PathBuf>,
        pairs: Vec<(String, String)>,
    },
}

fn parse_raw(raw: &[String]) -> Result<Parsed, CliError> {
    let mut pairs = Vec::new();
    let mut config = None;
    let mut i = 0;
    while i < raw.len() {
        let tok = &raw[i];
        if tok == "--help" || tok == "-h" {
            return Ok(Parsed::Help);
        }
        let body = tok
            .strip_prefix("--")
            .ok_or_else(|| CliError::Config(format!("expected --key, got '{tok}'\n{USAGE}")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                i += 1;
                let v = raw.get(i).ok_or_else(|| {
                    CliError::Config(format!("missing value for --{body}\n{USAGE}"))
                })?;
                (body.to_string(), v.clone())
            }
        };
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
        i += 1;
    }
    Ok(Parsed::Pairs { config, pairs })
}

fn note(line: fmt::Arguments) {
    eprintln!("[attnmtl] {line}");
}

fn load_model(path: &Path) -> Result<MtlModel, CliError> {
    MtlModel::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// One task's loaded material: definition, train+dev data, optional test.
struct LoadedTask {
    def: TaskDef,
    data: TaskData,
    test: Option<TaskData>,
}

fn remap_examples(
    examples: Vec<TextExample>,
    labels: &[String],
    target: &[String],
    path: &Path,
) -> Result<Vec<TextExample>, CliError> {
    let map: Vec<Option<usize>> = labels
        .iter()
        .map(|l| target.iter().position(|t| t == l))
        .collect();
    examples
        .into_iter()
        .map(|mut ex| match map[ex.label] {
            Some(id) => {
                ex.label = id;
                Ok(ex)
            }
            None => Err(CliError::Data(format!(
                "{}: label '{}' does not appear in the training label set",
                path.display(),
                labels[ex.label]
            ))),
        })
        .collect()
}

fn remap_sequences(
    sequences: Vec<LabeledSequence>,
    tags: &[String],
    target: &[String],
    path: &Path,
) -> Result<Vec<LabeledSequence>, CliError> {
    let map: Vec<Option<usize>> = tags
        .iter()
        .map(|t| target.iter().position(|x| x == t))
        .collect();
    sequences
        .into_iter()
        .map(|mut seq| {
            for tag in seq.tags.iter_mut() {
                match map[*tag] {
                    Some(id) => *tag = id,
                    None => {
                        return Err(CliError::Data(format!(
                            "{}: tag '{}' does not appear in the training tag set",
                            path.display(),
                            tags[*tag]
                        )))
                    }
                }
            }
            Ok(seq)
        })
        .collect()
}

/// Loads one task's splits. Label ids come from `fixed_labels` when given
/// (evaluating against a checkpoint), otherwise from the train file.
fn load_task(
    files: &TaskFiles,
    id: usize,
    fixed_labels: Option<&[String]>,
) -> Result<LoadedTask, CliError> {
    match files.kind {
        TaskKind::Classification => {
            let tr = load_classification(&files.train, id)?;
            let labels: Vec<String> = match fixed_labels {
                Some(l) => l.to_vec(),
                None => tr.labels.clone(),
            };
            let train = remap_examples(tr.examples, &tr.labels, &labels, &files.train)?;
            let dv = load_classification(&files.dev, id)?;
            let dev = remap_examples(dv.examples, &dv.labels, &labels, &files.dev)?;
            let test = match &files.test {
                Some(p) => {
                    let te = load_classification(p, id)?;
                    Some(TaskData::Classification {
                        train: Vec::new(),
                        dev: remap_examples(te.examples, &te.labels, &labels, p)?,
                    })
                }
                None => None,
            };
            let mut def = TaskDef::classification(&files.name, &[]);
            def.labels = labels;
            def.weight = files.weight;
            Ok(LoadedTask {
                def,
                data: TaskData::Classification { train, dev },
                test,
            })
        }
        TaskKind::SequenceLabeling => {
            let tr = load_conll(&files.train, files.tag_column)?;
            let tags: Vec<String> = match fixed_labels {
                Some(l) => l.to_vec(),
                None => tr.tags.clone(),
            };
            let train = remap_sequences(tr.sequences, &tr.tags, &tags, &files.train)?;
            let dv = load_conll(&files.dev, files.tag_column)?;
            let dev = remap_sequences(dv.sequences, &dv.tags, &tags, &files.dev)?;
            let test = match &files.test {
                Some(p) => {
                    let te = load_conll(p, files.tag_column)?;
                    Some(TaskData::Labeling {
                        train: Vec::new(),
                        dev: remap_sequences(te.sequences, &te.tags, &tags, p)?,
                    })
                }
                None => None,
            };
            let mut def = TaskDef::labeling(&files.name, &[]);
            def.labels = tags;
            def.weight = files.weight;
            Ok(LoadedTask {
                def,
                data: TaskData::Labeling { train, dev },
                test,
            })
        }
    }
}

fn build_vocab_over(tasks: &[LoadedTask]) -> Vocab {
    let mut seqs: Vec<&[String]> = Vec::new();
    for t in tasks {
        match &t.data {
            TaskData::Classification { train, .. } => {
                for ex in train {
                    seqs.push(&ex.tokens);
                }
            }
            TaskData::Labeling { train, .. } => {
                for s in train {
                    seqs.push(&s.tokens);
                }
            }
        }
    }
    crate::data::build_vocab(seqs)
}

fn configured_tasks(settings: &Settings) -> Result<Vec<TaskFiles>, CliError> {
    let tasks = settings.tasks()?;
    if tasks.is_empty() {
        return Err(CliError::Config(format!(
            "no tasks configured; declare task.<name>.train/dev keys\n{USAGE}"
        )));
    }
    Ok(tasks)
}

fn out_path(settings: &Settings, key: &str, default: &str) -> PathBuf {
    settings
        .get_path(key)
        .unwrap_or_else(|| PathBuf::from(default))
}

fn apply_embeddings(settings: &Settings, model: &MtlModel, seed: u64) -> Result<(), CliError> {
    if let Some(path) = settings.get_path("embeddings") {
        let table = load_embeddings(&path, &model.vocab, model.d_e, seed)?;
        model.shared.embedding.set_data(table.data());
        note(format_args!(
            "event=embeddings_loaded path={} dim={}",
            path.display(),
            model.d_e
        ));
    }
    Ok(())
}

fn print_outcome(outcome: &trainer::TrainOutcome, split: &str) {
    println!(
        "best_step={} best_dev={}",
        outcome.best_step, outcome.best_dev
    );
    for (name, acc) in &outcome.final_dev {
        println!("task={name} split={split} accuracy={acc}");
    }
}

fn cmd_train(settings: &Settings) -> Result<(), CliError> {
    let cfg = settings.train_config()?;
    let scheme = settings.scheme()?;
    let files = configured_tasks(settings)?;
    let loaded: Vec<LoadedTask> = files
        .iter()
        .enumerate()
        .map(|(id, f)| load_task(f, id, None))
        .collect::<Result<_, _>>()?;
    let vocab = build_vocab_over(&loaded);
    let defs: Vec<TaskDef> = loaded.iter().map(|t| t.def.clone()).collect();
    let data: Vec<TaskData> = loaded.iter().map(|t| t.data.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
    let model = MtlModel::init(
        scheme,
        vocab,
        &defs,
        settings.d_e()?,
        settings.d_h()?,
        settings.init_range()?,
        &mut rng,
    )?;
    apply_embeddings(settings, &model, cfg.seed)?;
    note(format_args!(
        "event=train_start scheme={} tasks={} params={} seed={}",
        scheme.as_str(),
        model.tasks.len(),
        model.count_params(true),
        cfg.seed
    ));

    let outcome = trainer::train_multitask(&model, &data, &cfg)?;

    let ckpt = out_path(settings, "out", "model.json");
    model.save(&ckpt)?;
    let log = out_path(settings, "log", "train.csv");
    outcome.log.save_csv(&log)?;
    note(format_args!(
        "event=train_done checkpoint={} log={}",
        ckpt.display(),
        log.display()
    ));
    print_outcome(&outcome, "dev");
    Ok(())
}

/// Matches checkpoint tasks to configured `task.*` entries by name.
fn files_for_model<'a>(
    model: &MtlModel,
    files: &'a [TaskFiles],
) -> Result<Vec<&'a TaskFiles>, CliError> {
    model
        .tasks
        .iter()
        .map(|spec| {
            let f = files.iter().find(|f| f.name == spec.name).ok_or_else(|| {
                CliError::Config(format!("no task.{}.* keys for checkpoint task", spec.name))
            })?;
            if f.kind != spec.kind {
                return Err(CliError::Config(format!(
                    "task '{}' kind differs from the checkpoint",
                    spec.name
                )));
            }
            Ok(f)
        })
        .collect()
}

fn cmd_eval(settings: &Settings) -> Result<(), CliError> {
    let ckpt = settings.require_path("checkpoint")?;
    let model = load_model(&ckpt)?;
    let split = settings.get_string("eval_split", "dev");
    if split != "dev" && split != "test" {
        return Err(CliError::Config(format!(
            "eval_split must be dev or test, got '{split}'"
        )));
    }
    let files = configured_tasks(settings)?;
    let matched = files_for_model(&model, &files)?;

    let mut total = 0.0;
    for (spec, f) in model.tasks.iter().zip(&matched) {
        let loaded = load_task(f, spec.id, Some(&spec.labels))?;
        let eval_data = if split == "test" {
            loaded
                .test
                .ok_or_else(|| CliError::Config(format!("task.{}.test is not set", spec.name)))?
        } else {
            loaded.data
        };
        let acc = trainer::evaluate_task(&model, spec.id, &eval_data)?;
        println!("task={} split={split} accuracy={acc}", spec.name);
        total += acc;
    }
    println!("mean_accuracy={}", total / model.tasks.len() as f64);
    Ok(())
}

fn cmd_finetune(settings: &Settings) -> Result<(), CliError> {
    let ckpt = settings.require_path("checkpoint")?;
    let model = load_model(&ckpt)?;
    let cfg = settings.train_config()?;
    let name = settings
        .get("finetune_task")
        .ok_or_else(|| CliError::Config("missing required key 'finetune_task'".to_string()))?
        .to_string();
    let task = model
        .tasks
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| CliError::Config(format!("checkpoint has no task named '{name}'")))?;

    let files = configured_tasks(settings)?;
    let f = files
        .iter()
        .find(|f| f.name == name)
        .ok_or_else(|| CliError::Config(format!("no task.{name}.* keys configured")))?;
    if f.kind != model.tasks[task].kind {
        return Err(CliError::Config(format!(
            "task '{name}' kind differs from the checkpoint"
        )));
    }
    let loaded = load_task(f, task, Some(&model.tasks[task].labels))?;

    // Placeholders for the frozen tasks; only `task` is sampled.
    let mut data: Vec<TaskData> = model
        .tasks
        .iter()
        .map(|_| TaskData::Classification {
            train: Vec::new(),
            dev: Vec::new(),
        })
        .collect();
    data[task] = loaded.data;

    note(format_args!(
        "event=finetune_start task={name} scheme={}",
        model.kind.as_str()
    ));
    let outcome = trainer::finetune(&model, task, &data, &cfg)?;

    let out = out_path(settings, "out", "finetuned.json");
    model.save(&out)?;
    let log = out_path(settings, "log", "finetune.csv");
    outcome.log.save_csv(&log)?;
    note(format_args!(
        "event=finetune_done checkpoint={} log={}",
        out.display(),
        log.display()
    ));
    print_outcome(&outcome, "dev");
    Ok(())
}

fn cmd_transfer(settings: &Settings) -> Result<(), CliError> {
    let ckpt = settings.require_path("checkpoint")?;
    let source = load_model(&ckpt)?;
    let cfg = settings.train_config()?;
    let files = configured_tasks(settings)?;
    let loaded: Vec<LoadedTask> = files
        .iter()
        .enumerate()
        .map(|(id, f)| load_task(f, id, None))
        .collect::<Result<_, _>>()?;
    let defs: Vec<TaskDef> = loaded.iter().map(|t| t.def.clone()).collect();
    let data: Vec<TaskData> = loaded.iter().map(|t| t.data.clone()).collect();

    note(format_args!(
        "event=transfer_start scheme={} new_tasks={}",
        source.kind.as_str(),
        defs.len()
    ));
    let (target, outcome) = trainer::transfer(&source, &defs, &data, &cfg)?;

    let out = out_path(settings, "out", "transfer.json");
    target.save(&out)?;
    let log = out_path(settings, "log", "transfer.csv");
    outcome.log.save_csv(&log)?;
    note(format_args!(
        "event=transfer_done checkpoint={} log={}",
        out.display(),
        log.display()
    ));
    print_outcome(&outcome, "dev");
    for (spec, task) in target.tasks.iter().zip(&loaded) {
        if let Some(test) = &task.test {
            let acc = trainer::evaluate_task(&target, spec.id, test)?;
            println!("task={} split=test accuracy={acc}", spec.name);
        }
    }
    Ok(())
}

fn cmd_export_attention(settings: &Settings) -> Result<(), CliError> {
    let ckpt = settings.require_path("checkpoint")?;
    let model = load_model(&ckpt)?;
    if !matches!(model.kind, SchemeKind::Sa | SchemeKind::Da) {
        return Err(CliError::Config(format!(
            "scheme '{}' has no attention to export",
            model.kind.as_str()
        )));
    }
    let split = settings.get_string("export_split", "dev");
    if split != "dev" && split != "test" {
        return Err(CliError::Config(format!(
            "export_split must be dev or test, got '{split}'"
        )));
    }
    let limit = settings.get_usize("export_limit", 0)?;
    let files = configured_tasks(settings)?;
    let matched = files_for_model(&model, &files)?;

    let mut examples = Vec::new();
    for (spec, f) in model.tasks.iter().zip(&matched) {
        if spec.kind != TaskKind::Classification {
            continue;
        }
        let loaded = load_task(f, spec.id, Some(&spec.labels))?;
        let data = if split == "test" {
            loaded
                .test
                .ok_or_else(|| CliError::Config(format!("task.{}.test is not set", spec.name)))?
        } else {
            loaded.data
        };
        if let TaskData::Classification { dev, .. } = data {
            let take = if limit == 0 {
                dev.len()
            } else {
                limit.min(dev.len())
            };
            examples.extend(dev.into_iter().take(take));
        }
    }

    let out = out_path(settings, "out", "attention.jsonl");
    let count = evalviz::export_attention(&model, &examples, &out)?;
    println!("records={count} out={}", out.display());
    Ok(())
}

fn cmd_similarity(settings: &Settings) -> Result<(), CliError> {
    let ckpt = settings.require_path("checkpoint")?;
    let model = load_model(&ckpt)?;
    let mut names = Vec::new();
    let mut queries = Vec::new();
    for spec in &model.tasks {
        if spec.kind != TaskKind::Classification {
            continue;
        }
        let q = match model.kind {
            SchemeKind::Sa => model.queries[spec.id]
                .as_ref()
                .expect("SA classification query")
                .to_vec(),
            // DA queries vary per input; the per-task bias is the static
            // component that identifies the task.
            SchemeKind::Da => {
                model.dyn_query.as_ref().expect("DA query params").biases[spec.id].to_vec()
            }
            _ => {
                return Err(CliError::Config(format!(
                    "scheme '{}' has no task queries",
                    model.kind.as_str()
                )))
            }
        };
        names.push(spec.name.clone());
        queries.push(q);
    }
    let matrix = evalviz::query_similarity(&queries)?;
    match settings.get_path("out") {
        Some(path) => {
            let mut out = std::io::BufWriter::new(fs::File::create(&path)?);
            evalviz::similarity_csv(&names, &matrix, &mut out)?;
            out.flush()?;
            println!("out={}", path.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            evalviz::similarity_csv(&names, &matrix, &mut stdout)?;
        }
    }
    Ok(())
}

fn cmd_param_count(settings: &Settings) -> Result<(), CliError> {
    let n_tasks = settings.get_usize("param_tasks", 16)?;
    let n_labels = settings.get_usize("param_labels", 2)?;
    if n_tasks == 0 || n_labels < 2 {
        return Err(CliError::Config(
            "param_tasks must be >= 1 and param_labels >= 2".to_string(),
        ));
    }
    let labels: Vec<String> = (0..n_labels).map(|i| format!("l{i}")).collect();
    let label_refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
    let defs: Vec<TaskDef> = (0..n_tasks)
        .map(|i| TaskDef::classification(&format!("task{i}"), &label_refs))
        .collect();
    for kind in SchemeKind::ALL {
        let model = MtlModel::zeros(kind, Vocab::new(), &defs, settings.d_e()?, settings.d_h()?)?;
        println!(
            "scheme={} params={} kilo={}",
            kind.as_str(),
            model.count_params(false),
            (model.count_params(false) as f64 / 1000.0).round() as usize
        );
    }
    Ok(())
}

fn cmd_gradcheck(_settings: &Settings) -> Result<(), CliError> {
    let entries = gradcheck::full_suite().map_err(|e| CliError::Check(e.to_string()))?;
    let mut failures = 0;
    for e in &entries {
        let status = if e.report.passed() { "ok" } else { "FAIL" };
        println!(
            "{status} {} checked={} max_rel={:.3e}",
            e.name, e.report.checked, e.report.max_rel_error
        );
        if !e.report.passed() {
            failures += 1;
            for m in e.report.mismatches.iter().take(3) {
                println!("     {m}");
            }
        }
    }
    if failures > 0 {
        return Err(CliError::Check(format!(
            "{failures} of {} gradient checks failed",
            entries.len()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct JsonlRecord<'a> {
    text: String,
    label: &'a str,
}

fn write_jsonl(path: &Path, examples: &[TextExample]) -> Result<(), CliError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        let record = JsonlRecord {
            text: ex.tokens.join(" "),
            label: SYNTH_LABELS[ex.label],
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| CliError::Data(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_conll(path: &Path, sequences: &[LabeledSequence]) -> Result<(), CliError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for seq in sequences {
        for (tok, tag) in seq.tokens.iter().zip(&seq.tags) {
            writeln!(out, "{tok} {} {}", SYNTH_TAGS[*tag], SYNTH_TAGS[*tag])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_gen_synthetic(settings: &Settings) -> Result<(), CliError> {
    let scfg = settings.synthetic_config()?;
    let synth = gen_synthetic(&scfg)?;
    let dir = out_path(settings, "out_dir", "synthetic");
    fs::create_dir_all(&dir)?;

    let mut conf =
        String::from("# Generated task definitions; paths resolve relative to this file.\n");
    for domain in &synth.domains {
        for (split, examples) in [
            ("train", &domain.train),
            ("dev", &domain.dev),
            ("test", &domain.test),
        ] {
            let file = format!("{}.{split}.jsonl", domain.name);
            write_jsonl(&dir.join(&file), examples)?;
            conf.push_str(&format!("task.{}.{split} = {file}\n", domain.name));
        }
        conf.push_str(&format!("task.{}.kind = classification\n", domain.name));
    }
    for (split, sequences) in [
        ("train", &synth.labeling.train),
        ("dev", &synth.labeling.dev),
        ("test", &synth.labeling.test),
    ] {
        let file = format!("tags.{split}.conll");
        write_conll(&dir.join(&file), sequences)?;
        conf.push_str(&format!("task.tags.{split} = {file}\n"));
    }
    conf.push_str("task.tags.kind = labeling\ntask.tags.tag_column = pos\n");
    fs::write(dir.join("tasks.conf"), conf)?;

    println!(
        "out_dir={} domains={} train_per_domain={} dev_per_domain={} test_per_domain={}",
        dir.display(),
        scfg.domains,
        scfg.train_per_domain,
        scfg.dev_per_domain,
        scfg.test_per_domain
    );
    Ok(())
}
