use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::validate_alpha_beta;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum EncoderChoice {
    /// Hashed bag-of-words.
    #[default]
    Bow,
    /// TF-IDF fitted on each run's chunks and query.
    Tfidf,
    /// Precomputed embeddings, JSON lines of `{"id", "vector"}`.
    File(PathBuf),
}

impl fmt::Display for EncoderChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderChoice::Bow => f.write_str("bow"),
            EncoderChoice::Tfidf => f.write_str("tfidf"),
            EncoderChoice::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for EncoderChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bow" => Ok(EncoderChoice::Bow),
            "tfidf" => Ok(EncoderChoice::Tfidf),
            _ => match s.strip_prefix("file:") {
                Some(path) if !path.is_empty() => Ok(EncoderChoice::File(path.into())),
                _ => Err(Error::Config(format!(
                    "unknown encoder `{s}`, expected bow, tfidf or file:PATH"
                ))),
            },
        }
    }
}

impl Serialize for EncoderChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EncoderChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything that determines a run. Defaults follow the reference
/// evaluation settings: alpha 0.6, beta 0.1, chunk size 32, 128 output tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub beta: f64,
    pub chunk_size: usize,
    pub group_size: usize,
    pub encoder: EncoderChoice,
    pub seed: u64,
    pub head_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Context length in tokens for synthetic workloads.
    pub context_len: usize,
    pub decode_steps: usize,
    /// Dimension of the hashed bag-of-words encoder.
    pub bow_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.1,
            chunk_size: 32,
            group_size: 32,
            encoder: EncoderChoice::Bow,
            seed: 0,
            head_dim: 32,
            n_heads: 2,
            vocab_size: 1024,
            context_len: 4096,
            decode_steps: 128,
            bow_dim: 256,
        }
    }
}

impl RunConfig {
    pub fn embed_dim(&self) -> usize {
        self.head_dim * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        validate_alpha_beta(self.alpha, self.beta)?;
        if self.alpha + self.beta > 1.0 {
            return Err(Error::Config(format!(
                "alpha + beta = {} must not exceed 1",
                self.alpha + self.beta
            )));
        }
        for (name, v) in [
            ("chunk_size", self.chunk_size),
            ("group_size", self.group_size),
            ("head_dim", self.head_dim),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("bow_dim", self.bow_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Parameter grid for a sweep, e.g. `alpha=0,0.5,1;beta=0` or `chunk=8,16,32`.
///
/// Keys: `alpha`, `beta`, `chunk` (or `chunk_size`), `group` (or
/// `group_size`). Unlisted parameters keep the base configuration's value;
/// the grid is the cartesian product.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepSpec {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub chunk_size: Vec<usize>,
    pub group_size: Vec<usize>,
}

impl SweepSpec {
    /// Concrete configurations in grid order (alpha outermost).
    pub fn expand(&self, base: &RunConfig) -> Vec<RunConfig> {
        fn or_base<T: Copy>(xs: &[T], base: T) -> Vec<T> {
            if xs.is_empty() {
                vec![base]
            } else {
                xs.to_vec()
            }
        }
        let mut out = Vec::new();
        for &alpha in &or_base(&self.alpha, base.alpha) {
            for &beta in &or_base(&self.beta, base.beta) {
                for &chunk_size in &or_base(&self.chunk_size, base.chunk_size) {
                    for &group_size in &or_base(&self.group_size, base.group_size) {
                        out.push(RunConfig {
                            alpha,
                            beta,
                            chunk_size,
                            group_size,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

impl FromStr for SweepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SweepSpec::default();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("sweep term `{part}` has no `=`")))?;
            let values: Vec<&str> = values.split(',').map(str::trim).collect();
            let bad = |v: &str| Error::Config(format!("bad sweep value `{v}` for `{key}`"));
            match key.trim() {
                "alpha" => {
                    spec.alpha = values
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(v)))
                        .collect::<Result<_>>()?
                }
                "beta" => {
                    spec.beta = values
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(v)))
                        .collect::<Result<_>>()?
                }
                "chunk" | "chunk_size" => {
                    spec.chunk_size = values
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(v)))
                        .collect::<Result<_>>()?
                }
                "group" | "group_size" => {
                    spec.group_size = values
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(v)))
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::Config(format!("unknown sweep key `{other}`"))),
            }
        }
        if spec == SweepSpec::default() {
            return Err(Error::Config("empty sweep specification".into()));
        }
        Ok(spec)
    }
}
