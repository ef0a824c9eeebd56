//! Run reports and their JSON / CSV serializations.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::kv_store::MemoryReport;
use crate::retrieval::Tier;

pub const PROVENANCE: &str = "desk-scale CPU run of a seeded single-layer toy model; \
latencies are wall-clock per decode step on this machine and are not comparable \
to GPU time-per-output-token figures; accuracy is reported as distance to an \
all-FP16 run of the same model, not as task scores";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TierBreakdown<T> {
    pub int2: T,
    pub int4: T,
    pub fp16: T,
}

impl TierBreakdown<usize> {
    pub fn from_tiers(tiers: &[Tier]) -> Self {
        let [int2, int4, fp16] = crate::retrieval::tier_counts(tiers);
        Self { int2, int4, fp16 }
    }

    /// Fractions over full chunks; all zero when there are none.
    pub fn fractions(&self) -> TierBreakdown<f64> {
        let n = (self.int2 + self.int4 + self.fp16) as f64;
        if n == 0.0 {
            return TierBreakdown::default();
        }
        TierBreakdown {
            int2: self.int2 as f64 / n,
            int4: self.int4 as f64 / n,
            fp16: self.fp16 as f64 / n,
        }
    }
}

/// Distance of a run's outputs from the all-FP16 baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub decode_steps: usize,
    /// Cosine distance of the hidden state at the first decode step.
    pub first_step_cosine_distance: f64,
    /// Cosine distance of the final hidden state, decoding with the
    /// baseline's input tokens.
    pub final_cosine_distance: f64,
    pub final_max_abs_diff: f64,
    pub mean_cosine_distance: f64,
    /// Share of steps where the teacher-forced prediction matches the baseline.
    pub token_agreement: f64,
    /// First step at which free-running generation departs from the
    /// baseline, if it does.
    pub token_divergence_step: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub search_us: u64,
    pub prefill_us: u64,
    pub median_step_us: f64,
    pub mean_step_us: f64,
    pub baseline_median_step_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub workload_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub chunk_size: usize,
    pub group_size: usize,
    pub encoder: String,
    pub seed: u64,
    pub context_tokens: usize,
    pub query_tokens: usize,
    pub num_chunks: usize,
    pub tail_tokens: usize,
    pub tier_counts: TierBreakdown<usize>,
    pub tier_fractions: TierBreakdown<f64>,
    pub t_low: Option<f64>,
    pub t_high: Option<f64>,
    pub s_min: Option<f64>,
    pub s_max: Option<f64>,
    pub scores: Vec<f64>,
    pub tiers: Vec<Tier>,
    pub zero_norm_chunks: Vec<usize>,
    /// Summed over heads.
    pub memory: MemoryReport,
    pub compression_ratio: f64,
    pub accuracy: Accuracy,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<Timing>,
}

/// Everything written to a JSON report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub provenance: String,
    pub config: RunConfig,
    pub runs: Vec<RunReport>,
    /// Corpus lines or sweep points that were not run.
    pub skipped: Vec<String>,
}

impl ReportDocument {
    /// Runs are sorted by id so output does not depend on scheduling.
    pub fn new(config: RunConfig, mut runs: Vec<RunReport>, skipped: Vec<String>) -> Self {
        runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Self {
            provenance: PROVENANCE.to_owned(),
            config,
            runs,
            skipped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!(
                "unknown format `{other}`, expected json or csv"
            ))),
        }
    }
}

const CSV_HEADER: [&str; 27] = [
    "run_id",
    "workload_id",
    "alpha",
    "beta",
    "chunk_size",
    "group_size",
    "encoder",
    "seed",
    "context_tokens",
    "num_chunks",
    "tail_tokens",
    "int2_chunks",
    "int4_chunks",
    "fp16_chunks",
    "int2_fraction",
    "int4_fraction",
    "fp16_fraction",
    "t_low",
    "t_high",
    "total_bytes",
    "fp16_baseline_bytes",
    "compression_ratio",
    "first_step_cosine_distance",
    "final_cosine_distance",
    "token_agreement",
    "token_divergence_step",
    "median_step_us",
];

pub fn emit_report<W: Write>(doc: &ReportDocument, format: ReportFormat, w: W) -> Result<()> {
    match format {
        ReportFormat::Json => write_json(doc, w),
        ReportFormat::Csv => write_csv(&doc.runs, w),
    }
}

pub fn write_json<W: Write>(doc: &ReportDocument, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, doc)?;
    w.write_all(b"\n").map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

/// One row per run with the scalar metrics; per-chunk lists are JSON-only.
pub fn write_csv<W: Write>(runs: &[RunReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in runs {
        out.write_record([
            r.run_id.clone(),
            r.workload_id.clone(),
            r.alpha.to_string(),
            r.beta.to_string(),
            r.chunk_size.to_string(),
            r.group_size.to_string(),
            r.encoder.clone(),
            r.seed.to_string(),
            r.context_tokens.to_string(),
            r.num_chunks.to_string(),
            r.tail_tokens.to_string(),
            r.tier_counts.int2.to_string(),
            r.tier_counts.int4.to_string(),
            r.tier_counts.fp16.to_string(),
            r.tier_fractions.int2.to_string(),
            r.tier_fractions.int4.to_string(),
            r.tier_fractions.fp16.to_string(),
            opt(r.t_low),
            opt(r.t_high),
            r.memory.total_bytes().to_string(),
            r.memory.fp16_baseline_bytes.to_string(),
            r.compression_ratio.to_string(),
            r.accuracy.first_step_cosine_distance.to_string(),
            r.accuracy.final_cosine_distance.to_string(),
            r.accuracy.token_agreement.to_string(),
            r.accuracy
                .token_divergence_step
                .map(|s| s.to_string())
                .unwrap_or_default(),
            r.timing
                .as_ref()
                .map(|t| t.median_step_us.to_string())
                .unwrap_or_default(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}
