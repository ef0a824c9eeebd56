//! End-to-end runs: workload in, report out.
//!
//! A run prefills the toy model over context and query at full precision,
//! scores the context chunks against the query, builds one tiered cache per
//! head and decodes greedily. Every run is compared against an all-FP16
//! decode of the same prompt.

pub mod config;
pub mod report;
pub mod workload;

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::attention::{prefill_attention, PrefillOutput};
use crate::error::{Error, Result};
use crate::kv_store::{build_cache, ChunkedKVCache, MemoryReport};
use crate::retrieval::{
    quantization_search, segment_context, ChunkSet, Encoder, HashedBowEncoder, PrecomputedEncoder,
    SimilarityReport, TfIdfEncoder, Tier, Tokenizer, WhitespaceTokenizer,
};
use crate::tensor::cosine_distance;
use crate::toy_model::{
    divergence_step, generate, replay, AttentionPath, Generation, ToyModel, ToyModelConfig,
};

pub use config::{EncoderChoice, RunConfig, SweepSpec};
pub use report::{
    emit_report, Accuracy, ReportDocument, ReportFormat, RunReport, TierBreakdown, Timing,
};
pub use workload::{read_corpus, read_corpus_file, synthetic_workload, Corpus, Workload};

/// A workload after the parts of the pipeline that no tuning knob affects:
/// tokenization, prefill and the FP16 baseline decode.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub workload_id: String,
    pub context: Vec<String>,
    pub query: Vec<String>,
    pub model: ToyModel,
    pub prefill: PrefillOutput,
    pub baseline: Generation,
    pub prefill_time: Duration,
}

impl Prepared {
    pub fn prompt_len(&self) -> usize {
        self.context.len() + self.query.len()
    }
}

/// Output of decoding one tier assignment.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub memory: MemoryReport,
    pub accuracy: Accuracy,
    pub generation: Generation,
}

/// Outcome of a sweep or corpus run.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub reports: Vec<RunReport>,
    pub skipped: Vec<String>,
}

pub struct Harness {
    config: RunConfig,
    file_encoder: Option<Arc<PrecomputedEncoder>>,
}

impl Harness {
    /// Validates the configuration and loads a precomputed embeddings file
    /// if one is selected.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let file_encoder = match &config.encoder {
            EncoderChoice::File(path) => Some(Arc::new(PrecomputedEncoder::from_path(path)?)),
            _ => None,
        };
        Ok(Self {
            config,
            file_encoder,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn prepare(&self, workload: &Workload) -> Result<Prepared> {
        let cfg = &self.config;
        let context = WhitespaceTokenizer.tokenize(&workload.context);
        let query = WhitespaceTokenizer.tokenize(&workload.query);
        if context.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "workload `{}` has an empty context",
                workload.id
            )));
        }
        let model = ToyModel::new(ToyModelConfig {
            vocab_size: cfg.vocab_size,
            embed_dim: cfg.embed_dim(),
            n_heads: cfg.n_heads,
            seed: cfg.seed,
        })?;
        let ids: Vec<u32> = context
            .iter()
            .chain(&query)
            .map(|w| model.token_id(w))
            .collect();

        let started = Instant::now();
        let prefill = prefill_attention(&model.embed(&ids, 0), &model)?;
        let prefill_time = started.elapsed();

        let mut caches: Vec<ChunkedKVCache> = (0..model.n_heads())
            .map(|h| {
                let mut c = ChunkedKVCache::empty(model.head_dim(), cfg.chunk_size, cfg.group_size);
                for t in 0..ids.len() {
                    c.append_decode_token(prefill.k[h].row(t), prefill.v[h].row(t))?;
                }
                Ok(c)
            })
            .collect::<Result<_>>()?;
        let baseline = generate(
            &model,
            &mut caches,
            prefill.first_token(),
            ids.len(),
            cfg.decode_steps,
            AttentionPath::Mixed,
        )?;

        Ok(Prepared {
            workload_id: workload.id.clone(),
            context,
            query,
            model,
            prefill,
            baseline,
            prefill_time,
        })
    }

    /// Builds per-head caches for an explicit tier assignment and decodes.
    pub fn evaluate(
        &self,
        prepared: &Prepared,
        tiers: &[Tier],
        chunk_set: &ChunkSet,
        group_size: usize,
    ) -> Result<Evaluation> {
        let model = &prepared.model;
        let ctx = prepared.context.len();
        let total = prepared.prompt_len();
        let mut caches = (0..model.n_heads())
            .map(|h| {
                let k = prepared.prefill.k[h].slice_rows(0..ctx);
                let v = prepared.prefill.v[h].slice_rows(0..ctx);
                let mut c = build_cache(&k, &v, tiers, chunk_set, group_size)?;
                for t in ctx..total {
                    c.append_decode_token(
                        prepared.prefill.k[h].row(t),
                        prepared.prefill.v[h].row(t),
                    )?;
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let memory: MemoryReport = caches.iter().map(ChunkedKVCache::memory_footprint).sum();

        let mut forced_caches = caches.clone();
        let steps = prepared.baseline.tokens.len();
        let generation = generate(
            model,
            &mut caches,
            prepared.prefill.first_token(),
            total,
            steps,
            AttentionPath::Mixed,
        )?;
        let forced = replay(
            model,
            &mut forced_caches,
            &prepared.baseline.inputs,
            total,
            AttentionPath::Mixed,
        )?;

        let accuracy = compare(&prepared.baseline, &forced, &generation);
        Ok(Evaluation {
            memory,
            accuracy,
            generation,
        })
    }

    /// One full run of `cfg` over a prepared workload.
    pub fn run_prepared(
        &self,
        prepared: &Prepared,
        cfg: &RunConfig,
        run_id: &str,
    ) -> Result<RunReport> {
        cfg.validate()?;
        let chunk_set = segment_context(&prepared.context, cfg.chunk_size)?;

        let started = Instant::now();
        let similarity = if chunk_set.num_chunks == 0 {
            log::warn!("{run_id}: context shorter than one chunk; everything stays full precision");
            None
        } else {
            let encoder = self.encoder(cfg, prepared, &chunk_set)?;
            Some(quantization_search(
                encoder.as_ref(),
                &prepared.workload_id,
                &prepared.context,
                &prepared.query,
                &chunk_set,
                cfg.alpha,
                cfg.beta,
            )?)
        };
        let search_time = started.elapsed();

        let tiers = similarity
            .as_ref()
            .map(|s| s.tiers.clone())
            .unwrap_or_default();
        let eval = self.evaluate(prepared, &tiers, &chunk_set, cfg.group_size)?;
        let timing = Timing {
            search_us: search_time.as_micros() as u64,
            prefill_us: prepared.prefill_time.as_micros() as u64,
            median_step_us: median_us(&eval.generation.step_times),
            mean_step_us: mean_us(&eval.generation.step_times),
            baseline_median_step_us: median_us(&prepared.baseline.step_times),
        };
        let counts = TierBreakdown::from_tiers(&tiers);
        let field = |f: fn(&SimilarityReport) -> f64| similarity.as_ref().map(f);
        Ok(RunReport {
            run_id: run_id.to_owned(),
            workload_id: prepared.workload_id.clone(),
            alpha: cfg.alpha,
            beta: cfg.beta,
            chunk_size: cfg.chunk_size,
            group_size: cfg.group_size,
            encoder: cfg.encoder.to_string(),
            seed: cfg.seed,
            context_tokens: prepared.context.len(),
            query_tokens: prepared.query.len(),
            num_chunks: chunk_set.num_chunks,
            tail_tokens: chunk_set.tail_len(),
            tier_counts: counts,
            tier_fractions: counts.fractions(),
            t_low: field(|s| s.t_low),
            t_high: field(|s| s.t_high),
            s_min: field(|s| s.s_min),
            s_max: field(|s| s.s_max),
            scores: similarity
                .as_ref()
                .map(|s| s.scores.clone())
                .unwrap_or_default(),
            zero_norm_chunks: similarity.map(|s| s.zero_norm_chunks).unwrap_or_default(),
            tiers,
            memory: eval.memory,
            compression_ratio: eval.memory.ratio(),
            accuracy: eval.accuracy,
            timing: Some(timing),
        })
    }

    pub fn run_single(&self, workload: &Workload) -> Result<RunReport> {
        let prepared = self.prepare(workload)?;
        self.run_prepared(&prepared, &self.config, &workload.id)
    }

    /// Runs every point of the grid against one workload. Points whose
    /// alpha and beta are incompatible are skipped, not fatal.
    pub fn run_sweep(&self, sweep: &SweepSpec, workload: &Workload) -> Result<Batch> {
        let prepared = self.prepare(workload)?;
        let points = sweep.expand(&self.config);
        let width = points.len().to_string().len();
        let results: Vec<_> = points
            .par_iter()
            .enumerate()
            .map(|(i, cfg)| {
                let run_id = format!("{}#{i:0width$}", workload.id);
                match cfg.validate() {
                    Err(e) => Ok(Err(format!("{run_id}: {e}"))),
                    Ok(()) => self.run_prepared(&prepared, cfg, &run_id).map(Ok),
                }
            })
            .collect::<Result<_>>()?;
        let mut batch = Batch::default();
        for r in results {
            match r {
                Ok(report) => batch.reports.push(report),
                Err(reason) => {
                    log::warn!("skipping sweep point {reason}");
                    batch.skipped.push(reason);
                }
            }
        }
        Ok(batch)
    }

    /// Runs independent workloads in parallel, optionally sweeping each.
    pub fn run_corpus(&self, workloads: &[Workload], sweep: Option<&SweepSpec>) -> Result<Batch> {
        let batches = workloads
            .par_iter()
            .map(|w| match sweep {
                Some(s) => self.run_sweep(s, w),
                None => self.run_single(w).map(|r| Batch {
                    reports: vec![r],
                    skipped: Vec::new(),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Batch::default();
        for b in batches {
            out.reports.extend(b.reports);
            out.skipped.extend(b.skipped);
        }
        out.reports.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(out)
    }

    fn encoder(
        &self,
        cfg: &RunConfig,
        prepared: &Prepared,
        chunks: &ChunkSet,
    ) -> Result<Arc<dyn Encoder>> {
        Ok(match &cfg.encoder {
            EncoderChoice::Bow => Arc::new(HashedBowEncoder::new(cfg.bow_dim, cfg.seed)?),
            EncoderChoice::Tfidf => {
                let mut docs: Vec<&[String]> =
                    chunks.chunks().map(|r| &prepared.context[r]).collect();
                docs.push(&prepared.query);
                Arc::new(TfIdfEncoder::fit(&docs))
            }
            EncoderChoice::File(_) => match &self.file_encoder {
                Some(e) => e.clone(),
                None => Arc::new(PrecomputedEncoder::default()),
            },
        })
    }
}

/// Distances between a run and the baseline. Hidden states come from the
/// teacher-forced replay so each step sees the same inputs.
fn compare(baseline: &Generation, forced: &Generation, free: &Generation) -> Accuracy {
    let steps = baseline.hidden_states.len();
    let dists: Vec<f64> = baseline
        .hidden_states
        .iter()
        .zip(&forced.hidden_states)
        .map(|(a, b)| cosine_distance(a, b))
        .collect();
    let final_max_abs_diff = match (baseline.final_hidden(), forced.final_hidden()) {
        (Some(a), Some(b)) => a
            .iter()
            .zip(b)
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .fold(0.0, f64::max),
        _ => 0.0,
    };
    let agree = baseline
        .tokens
        .iter()
        .zip(&forced.tokens)
        .filter(|(a, b)| a == b)
        .count();
    Accuracy {
        decode_steps: steps,
        first_step_cosine_distance: dists.first().copied().unwrap_or(0.0),
        final_cosine_distance: dists.last().copied().unwrap_or(0.0),
        final_max_abs_diff,
        mean_cosine_distance: if steps == 0 {
            0.0
        } else {
            dists.iter().sum::<f64>() / steps as f64
        },
        token_agreement: if steps == 0 {
            1.0
        } else {
            agree as f64 / steps as f64
        },
        token_divergence_step: divergence_step(&baseline.tokens, &free.tokens),
    }
}

fn median_us(times: &[Duration]) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    let mut us: Vec<f64> = times.iter().map(|t| t.as_secs_f64() * 1e6).collect();
    us.sort_by(f64::total_cmp);
    let mid = us.len() / 2;
    if us.len() % 2 == 0 {
        (us[mid - 1] + us[mid]) / 2.0
    } else {
        us[mid]
    }
}

fn mean_us(times: &[Duration]) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    times.iter().map(|t| t.as_secs_f64() * 1e6).sum::<f64>() / times.len() as f64
}
