//! `adapterswap`: build, query, purge, audit and evaluate an adapter registry.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use adapterswap::eval::{
    access_control_eval, forgetting_eval, purge_eval, retrieval_eval, shard_tradeoff_eval, CorpusDoc, Desk, OutputDir,
};
use adapterswap::lm::{force_decode_nll, generate, pretrain, BaseModel};
use adapterswap::lora::{AdapterMix, Weighting};
use adapterswap::registry::{Store, UserCredential};
use adapterswap::Error;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{CliConfig, Overrides};

/// Writes a line to stdout, ignoring failures such as a closed pipe so that
/// a committed operation is still logged.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "adapterswap", version, about = "Access-controlled adapter registry")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Registry directory.
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    /// Directory for experiment CSVs.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Seed for corpus generation, pretraining and model init.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    Groups,
    Months,
    Neutral,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Experiment {
    Retrieval,
    Access,
    Purge,
    Forgetting,
    Shards,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    DensitySoftmax,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Uniform => Weighting::Uniform,
            WeightingArg::DensitySoftmax => Weighting::DensitySoftmax,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration.
    Config,
    /// Write a seeded synthetic corpus as JSON lines.
    GenCorpus {
        #[arg(long, value_enum, default_value = "groups")]
        kind: CorpusKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Store documents from a JSON-lines corpus and group them by label.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Split an access label into shards of at most `max_docs` documents.
    Shard {
        label: String,
        #[arg(long)]
        max_docs: usize,
    },
    /// Pretrain, freeze and register the base model.
    Pretrain {
        /// JSON-lines text corpus; defaults to the generated neutral corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train the adapter of one group, or of every group.
    TrainGroup { group: String },
    /// Fit the retriever on held-out documents of every group.
    FitRetriever,
    /// Route a prompt to the user's adapters and continue it.
    Query {
        #[arg(long)]
        user: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        weighting: Option<WeightingArg>,
        text: String,
    },
    /// Force-decode the second half of a stored document under its adapter.
    Complete {
        #[arg(long)]
        doc: String,
    },
    /// Delete a document and retrain its group's adapter.
    Purge {
        #[arg(long)]
        doc: String,
    },
    /// Check registry state against the files on disk.
    Audit,
    /// Run desk experiments and write CSVs to the output directory.
    Eval {
        #[arg(value_enum)]
        experiment: Experiment,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Config => "config",
            Command::GenCorpus { .. } => "gen-corpus",
            Command::Ingest { .. } => "ingest",
            Command::Shard { .. } => "shard",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainGroup { .. } => "train-group",
            Command::FitRetriever => "fit-retriever",
            Command::Query { .. } => "query",
            Command::Complete { .. } => "complete",
            Command::Purge { .. } => "purge",
            Command::Audit => "audit",
            Command::Eval { .. } => "eval",
        }
    }

    fn mutates(&self) -> bool {
        matches!(
            self,
            Command::Ingest { .. }
                | Command::Shard { .. }
                | Command::Pretrain { .. }
                | Command::TrainGroup { .. }
                | Command::FitRetriever
                | Command::Purge { .. }
        )
    }
}

/// Exit status with a stable machine-readable kind.
struct Failure {
    code: u8,
    kind: &'static str,
}

fn classify(err: &anyhow::Error) -> Failure {
    if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) {
        return match e {
            Error::NoAccessibleAdapters | Error::UnknownUser(_) => Failure { code: 3, kind: "access-denied" },
            Error::AlreadyPurged(_)
            | Error::ManifestMismatch { .. }
            | Error::BaseHashMismatch { .. }
            | Error::UntrainedGroup(_)
            | Error::Locked
            | Error::Format(_) => Failure { code: 4, kind: "stale-registry" },
            Error::Config(_) => Failure { code: 2, kind: "usage" },
            _ => Failure { code: 1, kind: "failed" },
        };
    }
    if err.chain().any(|c| c.downcast_ref::<serde_json::Error>().is_some()) {
        return Failure { code: 2, kind: "usage" };
    }
    if err.chain().any(|c| c.to_string().starts_with("audit:")) {
        return Failure { code: 4, kind: "stale-registry" };
    }
    Failure { code: 1, kind: "failed" }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    exit: u8,
    message: String,
}

#[derive(Serialize)]
struct OpRecord<'a> {
    command: &'a str,
    args: Vec<String>,
    config_hash: &'a str,
    timestamp: u64,
    outcome: String,
}

/// Appends one line to the registry's operation log.
fn log_op(registry: &Path, command: &str, config_hash: &str, outcome: String) -> Result<()> {
    std::fs::create_dir_all(registry)?;
    let record = OpRecord {
        command,
        args: std::env::args().skip(1).collect(),
        config_hash,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        outcome,
    };
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(registry.join("ops.jsonl"))?;
    writeln!(f, "{}", serde_json::to_string(&record)?)?;
    Ok(())
}

fn write_jsonl(path: &Path, docs: &[CorpusDoc]) -> Result<()> {
    let mut text = String::new();
    for d in docs {
        text.push_str(&serde_json::to_string(d)?);
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn open_store(cfg: &CliConfig) -> Result<Store> {
    if !cfg.paths.registry.join("registry.json").exists() {
        return Err(anyhow!(Error::Format(format!("no registry at {}", cfg.paths.registry.display()))));
    }
    Ok(Store::open(&cfg.paths.registry)?)
}

fn user(cfg: &CliConfig, id: &str) -> Result<UserCredential> {
    let labels = cfg.users.get(id).ok_or_else(|| Error::UnknownUser(id.to_string()))?;
    Ok(UserCredential::new(id, labels.iter().map(String::as_str)))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    say!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: &Command, cfg: &CliConfig) -> Result<()> {
    match command {
        Command::Config => say!("{}", cfg.canonical()?),
        Command::GenCorpus { kind, out } => {
            let spec = &cfg.corpus_spec;
            let docs = match kind {
                CorpusKind::Groups => spec.group_docs()?,
                CorpusKind::Months => spec.month_docs()?,
                CorpusKind::Neutral => spec
                    .neutral_docs()?
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| CorpusDoc {
                        doc_id: format!("neutral-{i:04}"),
                        label: "neutral".into(),
                        text: String::from_utf8_lossy(&t).into_owned(),
                    })
                    .collect(),
            };
            let path = out.as_ref().unwrap_or(&cfg.paths.corpus);
            write_jsonl(path, &docs)?;
            say!("wrote {} documents to {}", docs.len(), path.display());
        }
        Command::Ingest { corpus } => {
            let path = corpus.as_ref().unwrap_or(&cfg.paths.corpus);
            let docs = Store::read_corpus(path).with_context(|| format!("reading {}", path.display()))?;
            let store = Store::init(&cfg.paths.registry)?;
            let report = store.ingest(&docs)?;
            say!(
                "added {} unchanged {} deduplicated {} skipped-purged {} groups {}",
                report.added,
                report.unchanged,
                report.deduplicated,
                report.skipped_purged,
                report.groups.len()
            );
        }
        Command::Shard { label, max_docs } => {
            let store = open_store(cfg)?;
            for g in store.shard_group(label, *max_docs)? {
                say!("{} {} documents", g.group_id, g.document_ids.len());
            }
        }
        Command::Pretrain { corpus } => {
            let texts: Vec<Vec<u8>> = match corpus {
                Some(p) => Store::read_corpus(p)?.into_iter().map(|d| d.text.into_bytes()).collect(),
                None => cfg.corpus_spec.neutral_docs()?,
            };
            let mut base = BaseModel::new(cfg.model)?;
            let log = pretrain(&mut base, &texts, &cfg.pretrain)?;
            base.freeze();
            std::fs::create_dir_all(&cfg.paths.models_dir)?;
            base.save(&cfg.paths.models_dir.join("base.aswp"))?;
            let store = Store::init(&cfg.paths.registry)?;
            let hash = store.set_base(base)?;
            say!(
                "base {hash} steps {} held-out nll {:.4} -> {:.4} in {:.1}s",
                log.steps,
                log.initial_heldout_nll,
                log.final_heldout_nll,
                log.seconds
            );
        }
        Command::TrainGroup { group } => {
            let store = open_store(cfg)?;
            let groups: Vec<String> = if group == "all" {
                store.snapshot().registry.groups.keys().cloned().collect()
            } else {
                vec![group.clone()]
            };
            for g in groups {
                let (id, log) = store.train_group(&g, &cfg.adapter)?;
                say!(
                    "{g} -> {id} ({} docs, {} steps, loss {:.4}, {:.2}s)",
                    log.documents,
                    log.optimizer_steps,
                    log.final_loss,
                    log.seconds
                );
            }
        }
        Command::FitRetriever => {
            let store = open_store(cfg)?;
            let rec = store.fit_retriever(&cfg.retriever, &cfg.heldout)?;
            let held: usize = rec.heldout.values().map(Vec::len).sum();
            say!("retriever v{} over {} groups from {held} held-out documents", rec.version, rec.heldout.len());
        }
        Command::Query { user: id, k, weighting, text } => {
            let store = open_store(cfg)?;
            let cred = user(cfg, id)?;
            let k = k.unwrap_or(cfg.retrieval.k);
            let weighting = weighting.map_or(cfg.retrieval.weighting, Weighting::from);
            let snap = store.snapshot();
            let ranked = snap.route(&cred, text.as_bytes(), k, weighting)?;
            let mix = ranked.mix()?;
            let delta = snap.compose(&mix)?;
            let r = cfg.retrieval;
            let cont = generate(snap.base()?, Some(&delta), text.as_bytes(), r.max_new_tokens, r.temperature, 0)?;
            say!("{text}{}", String::from_utf8_lossy(&cont));
            say!("--- provenance");
            say!("user {id} k {k} weighting {}", serde_json::to_value(weighting)?.as_str().unwrap_or(""));
            for (e, (_, w)) in ranked.entries.iter().zip(&mix.entries) {
                say!("adapter {} group {} weight {w:.6} log_density {:.6}", e.adapter_id, e.group_id, e.log_density);
            }
        }
        Command::Complete { doc } => {
            let store = open_store(cfg)?;
            let snap = store.snapshot();
            let rec = snap.registry.document(doc)?;
            let rel = rec.stored_path.as_ref().ok_or_else(|| Error::AlreadyPurged(doc.clone()))?;
            let text = std::fs::read(cfg.paths.registry.join(rel))?;
            let group = snap.registry.group(&rec.group_id)?;
            let adapter = group.adapter_id.clone().ok_or_else(|| Error::UntrainedGroup(group.group_id.clone()))?;
            let delta = snap.compose(&AdapterMix::single(&adapter))?;
            let base = force_decode_nll(snap.base()?, None, &text, doc)?;
            let adapted = force_decode_nll(snap.base()?, Some(&delta), &text, doc)?;
            say!("adapter {adapter} group {}", group.group_id);
            say!("base perplexity {:.4} adapter perplexity {:.4}", base.perplexity, adapted.perplexity);
            print_json(&adapted)?;
        }
        Command::Purge { doc } => {
            let store = open_store(cfg)?;
            print_json(&store.purge_document(doc)?)?;
        }
        Command::Audit => {
            let store = open_store(cfg)?;
            let report = store.audit()?;
            say!("{} violations", report.violations.len());
            for v in &report.violations {
                say!("{} {} {}", v.kind, v.subject, v.detail);
            }
            if !report.is_clean() {
                bail!("audit: {} violations", report.violations.len());
            }
        }
        Command::Eval { experiment } => {
            let exp = &cfg.experiment;
            let out_dir = &cfg.paths.output_dir;
            let desk = Desk::build(exp, &out_dir.join("work"))?;
            let mut out = OutputDir::create(out_dir, exp)?;
            let all = *experiment == Experiment::All;
            if all || *experiment == Experiment::Retrieval {
                for r in retrieval_eval(&desk, &mut out)?.rows {
                    say!(
                        "retrieval {} perplexity {:.4} accuracy {}",
                        r.condition,
                        r.perplexity,
                        r.accuracy.map_or("-".into(), |a| format!("{a:.4}"))
                    );
                }
            }
            if all || *experiment == Experiment::Access {
                let res = access_control_eval(&desk, &mut out)?;
                for r in res.rows {
                    say!("access {} perplexity {:.4}", r.condition, r.perplexity);
                }
                say!("access trials {} restricted selections {}", res.trials.trials, res.trials.restricted_selections);
            }
            if all || *experiment == Experiment::Purge {
                for r in purge_eval(&desk, &mut out)?.rows {
                    say!("purge {} perplexity {:.4}", r.condition, r.perplexity);
                }
            }
            if all || *experiment == Experiment::Forgetting {
                for r in forgetting_eval(&desk, &mut out)?.rows {
                    say!("forgetting stage {} {} perplexity {:.4}", r.stage, r.strategy, r.perplexity);
                }
            }
            if all || *experiment == Experiment::Shards {
                for r in shard_tradeoff_eval(&desk, &mut out)?.rows {
                    say!(
                        "shards size {} adapters {} perplexity {:.4}",
                        r.shard_size,
                        r.adapter_count,
                        r.mean_perplexity
                    );
                }
            }
            say!("results in {} (config {})", out.path().display(), &exp.hash()?[..12]);
        }
    }
    Ok(())
}

fn fail(err: &anyhow::Error) -> ExitCode {
    let f = classify(err);
    let line = ErrorLine { error: f.kind, exit: f.code, message: format!("{err:#}").replace('\n', " ") };
    eprintln!("{}", serde_json::to_string(&line).unwrap_or_else(|_| format!("{err:#}")));
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = write!(std::io::stdout(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message =
                e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            let line = ErrorLine { error: "usage", exit: 2, message };
            eprintln!("{}", serde_json::to_string(&line).unwrap_or_default());
            return ExitCode::from(2);
        }
    };
    let (k, weighting) = match &cli.command {
        Command::Query { k, weighting, .. } => (*k, weighting.map(Weighting::from)),
        _ => (None, None),
    };
    let corpus = match &cli.command {
        Command::Ingest { corpus } => corpus.clone(),
        _ => None,
    };
    let flags = Overrides {
        registry: cli.registry.clone(),
        output_dir: cli.output_dir.clone(),
        corpus,
        seed: cli.seed,
        k,
        weighting,
    };
    let cfg = match CliConfig::load(cli.config.as_deref(), &flags) {
        Ok(c) => c,
        Err(e) => {
            let line = ErrorLine { error: "usage", exit: 2, message: format!("{e:#}") };
            eprintln!("{}", serde_json::to_string(&line).unwrap_or_default());
            return ExitCode::from(2);
        }
    };
    let hash = match cfg.hash() {
        Ok(h) => h,
        Err(e) => return fail(&e),
    };
    if !matches!(cli.command, Command::Config) {
        say!("config-hash {hash}");
    }
    let result = run(&cli.command, &cfg);
    if cli.command.mutates() {
        let outcome = match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("error: {e:#}"),
        };
        if let Err(e) = log_op(&cfg.paths.registry, cli.command.name(), &hash, outcome) {
            return fail(&e.context("writing the operation log"));
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
