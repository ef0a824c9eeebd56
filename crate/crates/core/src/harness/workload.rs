//! Inputs to a run: JSON-lines corpora or seeded synthetic text.

use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (context, query) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub id: String,
    pub context: String,
    pub query: String,
}

/// Corpus records that parsed, and the 1-based line numbers that did not.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub workloads: Vec<Workload>,
    pub skipped_lines: Vec<usize>,
}

/// Reads `{"id", "context", "query"}` records, one per line. Blank lines
/// are ignored; malformed lines are logged and skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Workload>(&line) {
            Ok(w) => corpus.workloads.push(w),
            Err(e) => {
                log::warn!("corpus line {}: skipped: {e}", i + 1);
                corpus.skipped_lines.push(i + 1);
            }
        }
    }
    Ok(corpus)
}

pub fn read_corpus_file(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(std::io::BufReader::new(file))
}

const TOPICS: usize = 24;
const TOPIC_WORDS: usize = 40;
const FILLER_WORDS: usize = 200;
const SEGMENT: usize = 32;
const QUERY_LEN: usize = 24;

/// Seeded synthetic long-context workload.
///
/// The context is a run of 32-word segments, each drawn mostly from one of
/// a few dozen topic vocabularies mixed with shared filler words. The query
/// samples words from two topics that appear in the context, so only a few
/// regions are relevant to it.
pub fn synthetic_workload(seed: u64, context_len: usize) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let topic_word = |t: usize, i: usize| format!("t{t}w{i}");
    let filler = |i: usize| format!("f{i}");

    let mut segment_topics = Vec::new();
    let mut words = Vec::with_capacity(context_len);
    while words.len() < context_len {
        let topic = rng.gen_range(0..TOPICS);
        segment_topics.push(topic);
        for _ in 0..SEGMENT.min(context_len - words.len()) {
            if rng.gen_bool(0.6) {
                words.push(topic_word(topic, rng.gen_range(0..TOPIC_WORDS)));
            } else {
                words.push(filler(rng.gen_range(0..FILLER_WORDS)));
            }
        }
    }

    segment_topics.sort_unstable();
    segment_topics.dedup();
    let chosen: Vec<usize> = segment_topics
        .choose_multiple(&mut rng, 2.min(segment_topics.len()))
        .copied()
        .collect();
    let query: Vec<String> = (0..QUERY_LEN)
        .map(|i| topic_word(chosen[i % chosen.len()], rng.gen_range(0..TOPIC_WORDS)))
        .collect();

    Workload {
        id: format!("synthetic-{seed}"),
        context: words.join(" "),
        query: query.join(" "),
    }
}
