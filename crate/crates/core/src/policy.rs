//! Tabular autoregressive softmax policy.
//!
//! The state for token `t` is a bucket index obtained by hashing the prompt
//! id together with the last `min(k, t)` emitted tokens; each bucket owns one
//! row of logits over the vocabulary. Log-probabilities, entropies and the
//! score function `d log pi / d logits = onehot - softmax` are exact.
//!
//! # Bucket hash
//!
//! 64-bit FNV-1a (offset `0xcbf29ce484222325`, prime `0x100000001b3`) over
//! the bytes
//!
//! ```text
//! prompt_id as u64 little-endian
//! n = min(k, history_len) as u32 little-endian
//! each of the last n tokens, oldest first, as u32 little-endian
//! ```
//!
//! reduced modulo the bucket count `H`.
//!
//! # Checkpoint format
//!
//! UTF-8 text, one item per line:
//!
//! ```text
//! gmpo-policy 1
//! buckets <H>
//! vocab <V>
//! context_order <k>
//! seed <seed>
//! <H rows of V space-separated logits>
//! ```
//!
//! Logits use Rust's shortest round-trip `f64` formatting, so a checkpoint
//! reloads bit-exactly.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::rollout::{PromptId, Rollout, Token};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const CHECKPOINT_MAGIC: &str = "gmpo-policy 1";

fn fnv1a(hash: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(hash, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Bucket for the state after `preceding` tokens of a response to `prompt`.
pub fn context_bucket(prompt: PromptId, preceding: &[Token], k: usize, buckets: usize) -> usize {
    let n = k.min(preceding.len());
    let mut h = fnv1a(FNV_OFFSET, &prompt.0.to_le_bytes());
    h = fnv1a(h, &(n as u32).to_le_bytes());
    for &tok in &preceding[preceding.len() - n..] {
        h = fnv1a(h, &(tok as u32).to_le_bytes());
    }
    (h % buckets as u64) as usize
}

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    row.iter().map(|l| l - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// `H x V` logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    buckets: usize,
    vocab: usize,
    context_order: usize,
    logits: Vec<f64>,
}

impl PolicyParams {
    /// All-zero logits, i.e. the uniform policy.
    pub fn uniform(buckets: usize, vocab: usize, context_order: usize) -> Result<Self> {
        Self::from_logits(buckets, vocab, context_order, vec![0.0; buckets * vocab])
    }

    pub fn from_logits(
        buckets: usize,
        vocab: usize,
        context_order: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::InvalidArgument("policy needs at least one bucket".into()));
        }
        if vocab < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must have at least 2 tokens, got {vocab}"
            )));
        }
        if logits.len() != buckets * vocab {
            return Err(Error::Shape {
                context: "logit table",
                expected: buckets * vocab,
                actual: logits.len(),
            });
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidValue("logit table contains non-finite entries".into()));
        }
        Ok(Self {
            buckets,
            vocab,
            context_order,
            logits,
        })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.logits[bucket * self.vocab..(bucket + 1) * self.vocab]
    }

    fn check_bucket(&self, bucket: usize) -> Result<()> {
        if bucket < self.buckets {
            Ok(())
        } else {
            Err(Error::Index {
                what: "bucket",
                index: bucket,
                limit: self.buckets,
            })
        }
    }

    fn check_token(&self, token: Token) -> Result<()> {
        if token < self.vocab {
            Ok(())
        } else {
            Err(Error::Index {
                what: "token",
                index: token,
                limit: self.vocab,
            })
        }
    }

    pub fn bucket(&self, prompt: PromptId, preceding: &[Token]) -> usize {
        context_bucket(prompt, preceding, self.context_order, self.buckets)
    }

    /// Bucket of every token position of `rollout`.
    pub fn rollout_buckets(&self, rollout: &Rollout) -> Vec<usize> {
        let tokens = rollout.tokens();
        (0..tokens.len())
            .map(|t| self.bucket(rollout.prompt(), &tokens[..t]))
            .collect()
    }

    pub fn log_prob(&self, bucket: usize, token: Token) -> Result<f64> {
        self.check_bucket(bucket)?;
        self.check_token(token)?;
        Ok(log_softmax(self.row(bucket))[token])
    }

    /// Log-probabilities of every token of `rollout` under this policy.
    pub fn rollout_logps(&self, rollout: &Rollout) -> Result<Vec<f64>> {
        self.rollout_buckets(rollout)
            .into_iter()
            .zip(rollout.tokens())
            .map(|(b, &tok)| self.log_prob(b, tok))
            .collect()
    }

    /// Gradient of `log pi(token | bucket)` with respect to the bucket's row.
    pub fn score(&self, bucket: usize, token: Token) -> Result<Vec<f64>> {
        self.check_bucket(bucket)?;
        self.check_token(token)?;
        let mut g: Vec<f64> = softmax(self.row(bucket)).into_iter().map(|p| -p).collect();
        g[token] += 1.0;
        Ok(g)
    }

    /// Shannon entropy of the bucket's distribution, in nats.
    pub fn entropy(&self, bucket: usize) -> Result<f64> {
        self.check_bucket(bucket)?;
        let h: f64 = log_softmax(self.row(bucket))
            .into_iter()
            .map(|lp| {
                let p = lp.exp();
                if p > 0.0 {
                    -p * lp
                } else {
                    0.0
                }
            })
            .sum();
        Ok(h.max(0.0))
    }

    /// Samples one response. `temperature = 0` is greedy decoding with a
    /// lowest-index tie-break. Recorded log-probs are always those of the
    /// untempered policy.
    pub fn sample_rollout(
        &self,
        prompt: PromptId,
        eos: Token,
        max_len: usize,
        temperature: f64,
        rng: &mut Stream,
    ) -> Result<Rollout> {
        self.check_token(eos)?;
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "temperature {temperature} must be finite and >= 0"
            )));
        }
        let mut tokens = Vec::with_capacity(max_len);
        let mut logps = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let row = self.row(self.bucket(prompt, &tokens));
            let lps = log_softmax(row);
            let tok = if temperature == 0.0 {
                argmax(row)
            } else {
                let scaled: Vec<f64> = row.iter().map(|l| l / temperature).collect();
                draw(&softmax(&scaled), rng)
            };
            tokens.push(tok);
            logps.push(lps[tok]);
            if tok == eos {
                break;
            }
        }
        Rollout::new(prompt, tokens, logps)
    }

    /// `params += step_size * gradient`.
    pub fn apply_gradient(&mut self, gradient: &Gradient, step_size: f64) -> Result<()> {
        if gradient.buckets != self.buckets || gradient.vocab != self.vocab {
            return Err(Error::Shape {
                context: "gradient",
                expected: self.logits.len(),
                actual: gradient.values.len(),
            });
        }
        for (l, g) in self.logits.iter_mut().zip(&gradient.values) {
            *l += step_size * g;
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, path: &Path, seed: u64) -> Result<()> {
        let mut out = String::with_capacity(self.logits.len() * 4 + 128);
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "buckets {}", self.buckets);
        let _ = writeln!(out, "vocab {}", self.vocab);
        let _ = writeln!(out, "context_order {}", self.context_order);
        let _ = writeln!(out, "seed {seed}");
        for row in self.logits.chunks(self.vocab) {
            let line: Vec<String> = row.iter().map(|l| format!("{l:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, returning the params and the recorded seed.
    pub fn read_checkpoint(path: &Path) -> Result<(Self, u64)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing checkpoint header".into()));
        }
        let mut header = |key: &str| -> Result<u64> {
            let line = lines.next().unwrap_or_default();
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(format!("expected `{key} <n>`, got {line:?}")))
        };
        let buckets = header("buckets")? as usize;
        let vocab = header("vocab")? as usize;
        let context_order = header("context_order")? as usize;
        let seed = header("seed")?;
        let mut logits = Vec::with_capacity(buckets * vocab);
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("row {i}: {e}")))?;
            if row.len() != vocab {
                return Err(bad(format!("row {i} has {} entries, expected {vocab}", row.len())));
            }
            logits.extend(row);
        }
        Ok((Self::from_logits(buckets, vocab, context_order, logits)?, seed))
    }
}

fn argmax(row: &[f64]) -> Token {
    let mut best = 0;
    for (i, &l) in row.iter().enumerate().skip(1) {
        if l > row[best] {
            best = i;
        }
    }
    best
}

fn draw(probs: &[f64], rng: &mut Stream) -> Token {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just below u.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Dense gradient with the shape of a logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    buckets: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            buckets: params.buckets,
            vocab: params.vocab,
            values: vec![0.0; params.logits.len()],
        }
    }

    pub fn from_values(buckets: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != buckets * vocab {
            return Err(Error::Shape {
                context: "gradient",
                expected: buckets * vocab,
                actual: values.len(),
            });
        }
        Ok(Self {
            buckets,
            vocab,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bucket: usize, token: Token) -> f64 {
        self.values[bucket * self.vocab + token]
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.values[bucket * self.vocab..(bucket + 1) * self.vocab]
    }

    /// Adds `coeff * score(bucket, token)`.
    pub fn add_score(&mut self, params: &PolicyParams, bucket: usize, token: Token, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let probs = softmax(params.row(bucket));
        let row = &mut self.values[bucket * self.vocab..(bucket + 1) * self.vocab];
        for (g, p) in row.iter_mut().zip(probs) {
            *g -= coeff * p;
        }
        row[token] += coeff;
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Frozen, cheaply shareable copy of a policy (old policy / reference).
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<PolicyParams>);

impl PolicySnapshot {
    pub fn new(params: &PolicyParams) -> Self {
        Self(Arc::new(params.clone()))
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

impl std::ops::Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}
