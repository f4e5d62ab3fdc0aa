use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use serde_json::json;

use e2el_core::autodiff::{grad_check_coords, Graph, ParamStore, DEFAULT_STEP};
use e2el_core::candidates::{candidate_recall, AliasIndex};
use e2el_core::config::RunConfig;
use e2el_core::corpus::{gold_set, parse_conll_aida, read_jsonl, write_jsonl, Document};
use e2el_core::embeddings::{read_cooccurrence, train_entity_embeddings, CharVocab, EntityVectors, WordVectors};
use e2el_core::encoder::Mode;
use e2el_core::eval::{evaluate, Task};
use e2el_core::exec::with_workers;
use e2el_core::inference::{annotate_corpus, disambiguate_corpus, read_annotations, score_corpus, select_threshold, write_annotations};
use e2el_core::model::{Model, Resources};
use e2el_core::rng::{stream, substream, Stream};
use e2el_core::trainer::{document_loss, load_checkpoint, save_checkpoint, train, LogRecord};
use e2el_core::{Error, Parallelism};

use crate::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    /// Bad input, configuration or arguments.
    Invalid(String),
    /// Failure while running a stage.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::NonFinite(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evaluate { pred, gold, mode, task, table } => evaluate_cmd(&pred, &gold, mode.into(), task.into(), table),
        Command::ImportConll { input, out } => {
            if !input.exists() {
                return Err(CliError::Invalid(format!("{} does not exist", input.display())));
            }
            let docs = parse_conll_aida(&input)?;
            write_jsonl(&docs, create(&out)?)?;
            info!("wrote {} documents to {}", docs.len(), out.display());
            Ok(())
        }
        command => {
            let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
            let workers = cfg.workers;
            with_workers(workers, move || match command {
                Command::BuildCandidates { out, recall } => build_candidates(&cfg, out, recall),
                Command::Train => train_cmd(&cfg),
                Command::Annotate { input, out, threshold, task } => annotate(&cfg, &input, &out, threshold, task.into()),
                Command::SelectThreshold { dev, write } => select_threshold_cmd(&cfg, dev, write),
                Command::GradCheck { doc, coords, tolerance } => grad_check_cmd(&cfg, doc, coords, tolerance),
                Command::TrainEntities { cooccurrence, out } => train_entities(&cfg, &cooccurrence, &out),
                Command::Evaluate { .. } | Command::ImportConll { .. } => unreachable!("handled above"),
            })
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let path = path.ok_or_else(|| CliError::Invalid("this command needs --config".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    // overridden paths are relative to the config file too
    cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
    cfg.validate()?;
    Ok(cfg)
}

fn parallelism(cfg: &RunConfig) -> Parallelism {
    if cfg.workers == 1 {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn open_input(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Invalid(format!("cannot open {}: {e}", path.display())))
}

fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    Ok(read_jsonl(open_input(path)?, &path.display().to_string())?)
}

/// Writes to standard output; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    emit(&format!("{text}\n"))
}

fn load_index(cfg: &RunConfig) -> Result<AliasIndex> {
    if cfg.paths.candidate_index.is_some() {
        return Ok(AliasIndex::load_binary(cfg.input("candidate_index")?)?);
    }
    let counts = &cfg.paths.candidate_counts;
    if counts.is_empty() {
        return Err(CliError::Invalid(
            "set paths.candidate_index or paths.candidate_counts".into(),
        ));
    }
    if let Some(p) = counts.iter().find(|p| !p.exists()) {
        return Err(CliError::Invalid(format!("candidate counts {} do not exist", p.display())));
    }
    let paths: Vec<&Path> = counts.iter().map(PathBuf::as_path).collect();
    Ok(AliasIndex::build_index(&paths, cfg.index.max_candidates, cfg.index.max_span_len)?)
}

fn load_resources(cfg: &RunConfig) -> Result<Resources> {
    let words = WordVectors::load(cfg.input("word_vectors")?)?;
    let entities = EntityVectors::load(cfg.input("entity_vectors")?)?;
    let index = load_index(cfg)?;
    let missing = entities.warn_missing(index.entities());
    if missing > 0 {
        info!("{missing} candidate entities have no vector");
    }
    Ok(Resources { words, entities, index })
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.paths
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Invalid("paths.checkpoint is not set".into()))
}

fn load_model(cfg: &RunConfig, res: &Resources) -> Result<(Model<f32>, f64)> {
    let path = cfg.input("checkpoint")?;
    Ok(load_checkpoint(cfg.model.clone(), res, open_input(path)?)?)
}

fn build_candidates(cfg: &RunConfig, out: Option<PathBuf>, recall: Option<PathBuf>) -> Result<()> {
    // always build from the count files, never from an existing index
    let mut cfg = cfg.clone();
    let configured = cfg.paths.candidate_index.take();
    let out = out
        .or(configured)
        .ok_or_else(|| CliError::Invalid("give --out or set paths.candidate_index".into()))?;
    let index = load_index(&cfg)?;
    let mut w = create(&out)?;
    index.write_binary(&mut w)?;
    w.flush()?;
    let mut report = json!({
        "index": out.display().to_string(),
        "surfaces": index.len(),
        "max_candidates": index.max_candidates(),
        "max_span_len": index.max_span_len(),
    });
    if let Some(path) = recall {
        let docs = read_corpus(&path)?;
        let at: Vec<_> = [30, 10].iter().map(|&k| candidate_recall(&docs, &index, k)).collect();
        report["recall"] = serde_json::to_value(at).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    print_json(&report)
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let res = load_resources(cfg)?;
    let train_docs = read_corpus(cfg.input("train")?)?;
    let dev_docs = match cfg.paths.dev {
        Some(_) => read_corpus(cfg.input("dev")?)?,
        None => Vec::new(),
    };
    let ckpt = checkpoint_path(cfg)?;
    let chars = CharVocab::from_tokens(train_docs.iter().flat_map(|d| d.tokens.iter().map(String::as_str)));
    let model = Model::new(cfg.model.clone(), chars, &res, cfg.seed)?;
    info!(
        "training on {} documents ({} dev), {} parameters",
        train_docs.len(),
        dev_docs.len(),
        model.params.total_size()
    );

    let mut log = match &cfg.paths.train_log {
        Some(p) => Some(create(p)?),
        None => None,
    };
    let mut log_err = None;
    let outcome = train(model, &train_docs, &dev_docs, &res, &cfg.train, parallelism(cfg), |rec: &LogRecord| {
        if let (Some(w), None) = (log.as_mut(), &log_err) {
            let line = serde_json::to_string(rec).expect("log record serializes");
            if let Err(e) = writeln!(w, "{line}") {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }

    let mut w = create(ckpt)?;
    save_checkpoint(&outcome.model, outcome.threshold, &mut w)?;
    w.flush()?;
    print_json(&json!({
        "checkpoint": ckpt.display().to_string(),
        "steps": outcome.steps,
        "threshold": finite_or_null(outcome.threshold),
        "best_dev_macro_f1": outcome.best_dev_macro_f1,
    }))
}

fn finite_or_null(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        serde_json::Value::Null
    }
}

fn annotate(cfg: &RunConfig, input: &Path, out: &Path, threshold: Option<f64>, task: Task) -> Result<()> {
    let res = load_resources(cfg)?;
    let (model, stored) = load_model(cfg, &res)?;
    let docs = read_corpus(input)?;
    let par = parallelism(cfg);
    let anns = match task {
        Task::El => annotate_corpus(&model, &docs, &res, threshold.unwrap_or(stored), par)?,
        Task::Ed => {
            let (anns, unlinked) = disambiguate_corpus(&model, &docs, &res, par)?;
            if unlinked > 0 {
                info!("{unlinked} gold spans have no candidates");
            }
            anns
        }
    };
    let mut w = create(out)?;
    write_annotations(&anns, &mut w)?;
    w.flush()?;
    info!("wrote {} annotations for {} documents", anns.len(), docs.len());
    Ok(())
}

fn evaluate_cmd(pred: &Path, gold: &Path, mode: e2el_core::eval::MatchMode, task: Task, table: bool) -> Result<()> {
    let anns = read_annotations(open_input(pred)?, &pred.display().to_string())?;
    let docs: Vec<Document> = read_corpus(gold)?;
    if docs.iter().any(|d| d.gold.is_none()) {
        return Err(CliError::Invalid(format!("{}: every document needs gold mentions", gold.display())));
    }
    let report = evaluate(&anns, &gold_set(&docs), mode, task)?;
    if table {
        emit(&report.table())
    } else {
        print_json(&serde_json::to_value(&report).map_err(|e| CliError::Runtime(e.to_string()))?)
    }
}

fn select_threshold_cmd(cfg: &RunConfig, dev: Option<PathBuf>, write: bool) -> Result<()> {
    let res = load_resources(cfg)?;
    let (model, _) = load_model(cfg, &res)?;
    let dev_path = match dev {
        Some(p) => p,
        None => cfg.input("dev")?.to_path_buf(),
    };
    let docs = read_corpus(&dev_path)?;
    let par = parallelism(cfg);
    let scored = score_corpus(&model, &docs, &res, par)?;
    let choice = select_threshold(&scored, &gold_set(&docs), par)?;
    if write {
        let mut w = create(checkpoint_path(cfg)?)?;
        save_checkpoint(&model, choice.delta, &mut w)?;
        w.flush()?;
    }
    print_json(&json!({
        "delta": finite_or_null(choice.delta),
        "micro_f1": choice.micro_f1,
    }))
}

fn grad_check_cmd(cfg: &RunConfig, doc_index: usize, coords: usize, tolerance: f64) -> Result<()> {
    let res = load_resources(cfg)?;
    let docs = read_corpus(cfg.input("train")?)?;
    let doc = docs
        .get(doc_index)
        .ok_or_else(|| CliError::Invalid(format!("--doc {doc_index}: corpus has {} documents", docs.len())))?;
    let chars = CharVocab::from_tokens(doc.tokens.iter().map(String::as_str));
    let model: Model<f64> = Model::new(cfg.model.clone(), chars, &res, cfg.seed)?;
    let spans = res.spans(doc, cfg.train.regime, cfg.model.coreference);
    let gamma = cfg.train.gamma;
    let build = |g: &mut Graph<f64>, store: &ParamStore<f64>| {
        let mut local = model.clone();
        local.params = store.clone();
        let mut rng = stream(0, Stream::Dropout);
        let (loss, _) = document_loss(g, &local, doc, &spans, &res, gamma, Mode::Eval, &mut rng)?;
        loss.ok_or_else(|| Error::InvalidArgument(format!("document {:?} has no scorable spans", doc.doc_id)))
    };

    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for (k, id) in model.params.ids().enumerate() {
        let n = model.params.get(id).len();
        let picked: Vec<usize> = if coords == 0 || coords >= n {
            (0..n).collect()
        } else {
            let mut rng = substream(cfg.seed, Stream::Synthetic, k as u64);
            let mut v = sample(&mut rng, n, coords).into_vec();
            v.sort_unstable();
            v
        };
        let err = grad_check_coords(&model.params, id, &picked, DEFAULT_STEP, build)?;
        worst = worst.max(err);
        rows.push(json!({"param": model.params.name(id), "coords": picked.len(), "max_rel_error": err}));
    }
    print_json(&json!({"document": doc.doc_id, "max_rel_error": worst, "params": rows}))?;
    if worst > tolerance {
        return Err(CliError::Runtime(format!(
            "gradient check failed: relative error {worst:.3e} above {tolerance:.1e}"
        )));
    }
    Ok(())
}

fn train_entities(cfg: &RunConfig, cooccurrence: &Path, out: &Path) -> Result<()> {
    let words = WordVectors::load(cfg.input("word_vectors")?)?;
    let corpus = read_cooccurrence(open_input(cooccurrence)?, &cooccurrence.display().to_string())?;
    let vectors = train_entity_embeddings(&corpus, &words, &cfg.entities, parallelism(cfg))?;
    let mut w = create(out)?;
    vectors.table().write_text(&mut w)?;
    w.flush()?;
    info!("wrote {} entity vectors to {}", vectors.table().len(), out.display());
    Ok(())
}
