//! `chunkkv`: run the tiered KV-cache pipeline on synthetic or corpus
//! workloads and write a JSON or CSV report.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chunkkv_core::harness::{
    emit_report, read_corpus_file, synthetic_workload, Batch, EncoderChoice, Harness,
    ReportDocument, ReportFormat, RunConfig, SweepSpec,
};
use chunkkv_core::Error;
use clap::Parser;

const EXIT_CONFIG: u8 = 2;
const EXIT_SKIPPED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "chunkkv", version, about)]
struct Args {
    /// Fraction of the score range, from the bottom, stored as INT2.
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Fraction of the score range, from the top, kept at FP16.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 32)]
    chunk_size: usize,
    /// Quantization group size along the head dimension.
    #[arg(long, default_value_t = 32)]
    group_size: usize,
    /// bow, tfidf or file:PATH (JSON lines of {"id", "vector"}).
    #[arg(long, default_value = "bow")]
    encoder: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Context length of the synthetic workload.
    #[arg(long, default_value_t = 4096)]
    context_len: usize,
    #[arg(long, default_value_t = 128)]
    decode_steps: usize,
    #[arg(long, default_value_t = 32)]
    head_dim: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 1024)]
    vocab_size: usize,
    /// JSON lines of {"id", "context", "query"}; a synthetic workload is
    /// generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Parameter grid, e.g. "alpha=0,0.3,0.6;beta=0.1" or "chunk=16,32,64".
    #[arg(long)]
    sweep: Option<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    format: String,
    /// Leave wall-clock timings out of the report.
    #[arg(long)]
    no_timing: bool,
}

impl Args {
    fn run_config(&self) -> Result<RunConfig, Error> {
        Ok(RunConfig {
            alpha: self.alpha,
            beta: self.beta,
            chunk_size: self.chunk_size,
            group_size: self.group_size,
            encoder: self.encoder.parse::<EncoderChoice>()?,
            seed: self.seed,
            head_dim: self.head_dim,
            n_heads: self.n_heads,
            vocab_size: self.vocab_size,
            context_len: self.context_len,
            decode_steps: self.decode_steps,
            ..RunConfig::default()
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(skipped) => {
            log::warn!("{skipped} corpus line(s) skipped");
            ExitCode::from(EXIT_SKIPPED)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .downcast_ref::<Error>()
                .is_some_and(|e| matches!(e, Error::Config(_)));
            ExitCode::from(if config_error { EXIT_CONFIG } else { 1 })
        }
    }
}

/// Returns the number of skipped corpus lines.
fn run(args: &Args) -> anyhow::Result<usize> {
    let config = args.run_config()?;
    let format: ReportFormat = args.format.parse()?;
    let sweep = args
        .sweep
        .as_deref()
        .map(str::parse::<SweepSpec>)
        .transpose()?;
    let harness = Harness::new(config.clone())?;

    let (workloads, skipped_lines) = match &args.corpus {
        Some(path) => {
            let corpus = read_corpus_file(path)?;
            (corpus.workloads, corpus.skipped_lines)
        }
        None => (
            vec![synthetic_workload(config.seed, config.context_len)],
            Vec::new(),
        ),
    };
    log::info!("running {} workload(s)", workloads.len());

    let Batch {
        mut reports,
        skipped,
    } = harness.run_corpus(&workloads, sweep.as_ref())?;
    if args.no_timing {
        for r in &mut reports {
            r.timing = None;
        }
    }
    let skipped = skipped_lines
        .iter()
        .map(|l| format!("corpus line {l}: malformed"))
        .chain(skipped)
        .collect();
    let doc = ReportDocument::new(config, reports, skipped);

    match &args.out {
        Some(path) => {
            let file =
                File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            emit_report(&doc, format, &mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            emit_report(&doc, format, stdout.lock())?;
        }
    }
    Ok(skipped_lines.len())
}
