//! `ecrc` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// A problem with the user's input, reported with exit status 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser)]
#[command(name = "ecrc", version, about = "Emotion and cause recognition over multi-turn conversations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Each flag overrides the key of the
/// same name (with `-` as `_`) from `--config`.
#[derive(Args, Debug, Default)]
pub struct Settings {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// Worker threads; results do not depend on this
    #[arg(long)]
    threads: Option<String>,
    /// graph, graph-node, or graph-node-edge
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    /// adam or sgd
    #[arg(long)]
    optimizer: Option<String>,
    /// Hidden layer widths, comma separated
    #[arg(long)]
    hidden: Option<String>,
    /// Train:test ratio, e.g. 8:2
    #[arg(long)]
    split: Option<String>,
    /// hash, file, or bilm
    #[arg(long)]
    sentence_source: Option<String>,
    #[arg(long)]
    sentence_file: Option<String>,
    #[arg(long)]
    bilm_model: Option<String>,
    #[arg(long)]
    bilm_trainable: Option<String>,
    /// hash or file
    #[arg(long)]
    word_source: Option<String>,
    #[arg(long)]
    word_file: Option<String>,
    #[arg(long)]
    hash_seed: Option<String>,
    #[arg(long)]
    sentence_dim: Option<String>,
    #[arg(long)]
    word_dim: Option<String>,
    /// Tokens kept per utterance for embeddings and tags
    #[arg(long)]
    max_len: Option<String>,
    /// Label vocabulary sidecar
    #[arg(long)]
    labels: Option<String>,
    /// Tagged-corpus sidecar with POS tags
    #[arg(long)]
    pos_tags: Option<String>,
    #[arg(long)]
    bilm_layers: Option<String>,
    #[arg(long)]
    bilm_dim: Option<String>,
    #[arg(long)]
    bilm_steps: Option<String>,
    #[arg(long)]
    bilm_lr: Option<String>,
    #[arg(long)]
    synth_conversations: Option<String>,
    #[arg(long)]
    synth_utterances: Option<String>,
}

impl Settings {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("seed", self.seed.clone()),
            ("threads", self.threads.clone()),
            ("variant", self.variant.clone()),
            ("epochs", self.epochs.clone()),
            ("batch_size", self.batch_size.clone()),
            ("lr", self.lr.clone()),
            ("dropout", self.dropout.clone()),
            ("optimizer", self.optimizer.clone()),
            ("hidden", self.hidden.clone()),
            ("split", self.split.clone()),
            ("sentence_source", self.sentence_source.clone()),
            ("sentence_file", self.sentence_file.clone()),
            ("bilm_model", self.bilm_model.clone()),
            ("bilm_trainable", self.bilm_trainable.clone()),
            ("word_source", self.word_source.clone()),
            ("word_file", self.word_file.clone()),
            ("hash_seed", self.hash_seed.clone()),
            ("sentence_dim", self.sentence_dim.clone()),
            ("word_dim", self.word_dim.clone()),
            ("max_len", self.max_len.clone()),
            ("labels", self.labels.clone()),
            ("pos_tags", self.pos_tags.clone()),
            ("bilm_layers", self.bilm_layers.clone()),
            ("bilm_dim", self.bilm_dim.clone()),
            ("bilm_steps", self.bilm_steps.clone()),
            ("bilm_lr", self.bilm_lr.clone()),
            ("synth_conversations", self.synth_conversations.clone()),
            ("synth_utterances", self.synth_utterances.clone()),
        ]
    }

    fn resolve(&self) -> Result<RunConfig, Invalid> {
        RunConfig::resolve(self.config.as_deref(), &self.flags(), |k| std::env::var(k).ok())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and report statistics
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Generate a label-planted synthetic corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Write embedding tables for a corpus, optionally training a biLM first
    Embed {
        #[arg(long)]
        data: PathBuf,
        /// Train a biLM on the corpus and save it here
        #[arg(long)]
        train_bilm: Option<PathBuf>,
        #[arg(long)]
        sentence_out: Option<PathBuf>,
        #[arg(long)]
        word_out: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Write the graph of every conversation in a corpus
    BuildGraphs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train on the train side of a seeded split
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Loss history; defaults to the checkpoint path with `.loss` appended
        #[arg(long)]
        history: Option<PathBuf>,
        /// Also write the held-out conversations here
        #[arg(long)]
        test_out: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Report metrics of a checkpoint on a corpus
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Machine-readable metrics
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Predict labels for conversations from a file or standard input
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus file; standard input when absent or `-`
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Print one conversation's graph
    InspectGraph {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        /// Featurize as this checkpoint does
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Compare analytic gradients against finite differences
    Gradcheck {
        /// Input width then hidden widths
        #[arg(long, default_value = "5,4,4")]
        dims: String,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[command(flatten)]
        settings: Settings,
    },
}

impl Command {
    fn settings(&self) -> &Settings {
        match self {
            Command::Ingest { settings, .. }
            | Command::Synth { settings, .. }
            | Command::Embed { settings, .. }
            | Command::BuildGraphs { settings, .. }
            | Command::Train { settings, .. }
            | Command::Eval { settings, .. }
            | Command::Predict { settings, .. }
            | Command::InspectGraph { settings, .. }
            | Command::Gradcheck { settings, .. } => settings,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<ecrc::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.command.settings().resolve()?;
    eprint!("{}", cfg.describe());
    let threads: usize = cfg.get("threads")?;
    if threads == 0 {
        return Err(Invalid("threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    match cli.command {
        Command::Ingest { data, .. } => commands::ingest(&cfg, &data),
        Command::Synth { out, .. } => commands::synth(&cfg, &out),
        Command::Embed {
            data,
            train_bilm,
            sentence_out,
            word_out,
            ..
        } => commands::embed(&cfg, &data, train_bilm.as_deref(), sentence_out.as_deref(), word_out.as_deref()),
        Command::BuildGraphs { data, out, .. } => commands::build_graphs(&cfg, &data, &out),
        Command::Train {
            data,
            checkpoint,
            history,
            test_out,
            ..
        } => commands::train(&cfg, &data, &checkpoint, history, test_out.as_deref()),
        Command::Eval { checkpoint, data, json, .. } => commands::eval(&cfg, &checkpoint, &data, json.as_deref()),
        Command::Predict { checkpoint, input, .. } => commands::predict(&cfg, &checkpoint, input.as_deref()),
        Command::InspectGraph { data, id, checkpoint, .. } => commands::inspect_graph(&cfg, &data, &id, checkpoint.as_deref()),
        Command::Gradcheck { dims, step, tol, .. } => commands::gradcheck(&cfg, &dims, step, tol),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
