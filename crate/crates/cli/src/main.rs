//! `dnsgt`: the DNS-GT pipeline from raw captures to evaluation reports.

mod analysis;
mod data;
mod manifest;
mod pipeline;
mod train;

use clap::{Parser, Subcommand};

/// Invalid argument combinations detected after parsing (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

#[derive(Debug, Parser)]
#[command(
    name = "dnsgt",
    version,
    about = "Graph-attention transformer embeddings for DNS traffic"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter hosts and clean a capture into per-host query streams
    Preprocess(pipeline::PreprocessArgs),
    /// Pack per-host streams into query sequences
    Sequence(pipeline::SequenceArgs),
    /// Build the host and domain vocabulary from a sequence file
    BuildVocab(pipeline::BuildVocabArgs),
    /// Masked-language-model pre-training (or a Word2Vec baseline)
    Pretrain(train::PretrainArgs),
    /// Fine-tune a checkpoint on domain or host labels
    Finetune(train::FinetuneArgs),
    /// Score a corpus and write a metric report
    Eval(analysis::EvalArgs),
    /// Print the predicted domain at every position of a sequence
    Infer(analysis::InferArgs),
    /// Export the domain embedding table
    Embed(analysis::EmbedArgs),
    /// Context sensitivity and embedding distance analysis
    Analyze(analysis::AnalyzeArgs),
    /// Generate a seeded synthetic corpus and its pipeline config
    Synth(pipeline::SynthArgs),
    /// Cold start, latency and throughput per batch size
    Bench(analysis::BenchArgs),
}

fn run(cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::Preprocess(a) => pipeline::preprocess(a),
        Command::Sequence(a) => pipeline::sequence(a),
        Command::BuildVocab(a) => pipeline::build_vocab(a),
        Command::Pretrain(a) => train::pretrain_cmd(a),
        Command::Finetune(a) => train::finetune_cmd(a),
        Command::Eval(a) => analysis::eval(a),
        Command::Infer(a) => analysis::infer(a),
        Command::Embed(a) => analysis::embed(a),
        Command::Analyze(a) => analysis::analyze(a),
        Command::Synth(a) => pipeline::synth(a),
        Command::Bench(a) => analysis::bench_cmd(a),
    }
}

fn error_kind(e: &dnsgt_core::Error) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric())
        .next()
        .unwrap_or("Error")
        .to_string()
}

/// Exit code and kind: core errors map through their own code, usage
/// errors to 1, anything else is a data error.
fn classify(err: &anyhow::Error) -> (i32, String) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dnsgt_core::Error>() {
            return (e.exit_code(), error_kind(e));
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return (1, "Usage".into());
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return (2, "Json".into());
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (2, "Io".into());
        }
    }
    (2, "Error".into())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(&cli.command) {
        let (code, kind) = classify(&err);
        let line = serde_json::json!({
            "error": kind,
            "message": format!("{err:#}"),
            "exit_code": code,
        });
        eprintln!("{line}");
        std::process::exit(code);
    }
}
