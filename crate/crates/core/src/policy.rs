//! Tabular context-window softmax policy.
//!
//! The policy conditions on the query id and the last `k` tokens of history
//! (prompt followed by the response so far). Each distinct context owns one
//! row of logits; rows that were never written are implicitly zero, i.e.
//! uniform.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::env;
use crate::error::{Error, Result};
use crate::types::{Query, Rollout, TokenId, Vocab};

/// Left padding for contexts shorter than the window.
pub const PAD: TokenId = TokenId::MAX;

pub const DEFAULT_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextKey {
    pub query_id: u64,
    pub recent: Vec<TokenId>,
}

impl ContextKey {
    /// Key for predicting the token that follows `prompt ++ prefix`.
    pub fn new(query_id: u64, prompt: &[TokenId], prefix: &[TokenId], window: usize) -> Self {
        let mut recent = vec![PAD; window];
        let history = prompt.iter().chain(prefix);
        let total = prompt.len() + prefix.len();
        let skip = total.saturating_sub(window);
        let start = window - (total - skip);
        for (slot, &tok) in recent[start..].iter_mut().zip(history.skip(skip)) {
            *slot = tok;
        }
        Self { query_id, recent }
    }

    fn encode_recent(&self) -> String {
        if self.recent.is_empty() {
            return "-".into();
        }
        self.recent
            .iter()
            .map(|&t| {
                if t == PAD {
                    "_".to_string()
                } else {
                    t.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Context keys for every position of a response.
pub fn rollout_keys(query: &Query, tokens: &[TokenId], window: usize) -> Vec<ContextKey> {
    (0..tokens.len())
        .map(|t| ContextKey::new(query.id, &query.prompt_tokens, &tokens[..t], window))
        .collect()
}

/// Sparse per-row map, used for both gradients and optimizer state.
pub type RowMap = BTreeMap<ContextKey, Vec<f64>>;

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocab,
    window: usize,
    table: BTreeMap<ContextKey, Vec<f64>>,
}

impl PolicyParams {
    pub fn new(vocab: Vocab, window: usize) -> Self {
        Self {
            vocab,
            window,
            table: BTreeMap::new(),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &Vec<f64>)> {
        self.table.iter()
    }

    pub fn row_count(&self) -> usize {
        self.table.len()
    }

    pub fn row(&self, key: &ContextKey) -> Option<&[f64]> {
        self.table.get(key).map(Vec::as_slice)
    }

    /// Mutable access to a row, materializing it as zeros if absent.
    pub fn row_mut(&mut self, key: &ContextKey) -> &mut Vec<f64> {
        let v = self.vocab.size();
        self.table
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; v])
    }

    pub fn set_row(&mut self, key: ContextKey, row: Vec<f64>) {
        assert_eq!(
            row.len(),
            self.vocab.size(),
            "row length must equal vocabulary size"
        );
        self.table.insert(key, row);
    }

    pub fn key(&self, query: &Query, prefix: &[TokenId]) -> ContextKey {
        ContextKey::new(query.id, &query.prompt_tokens, prefix, self.window)
    }

    pub fn logprobs(&self, key: &ContextKey) -> Vec<f64> {
        match self.table.get(key) {
            Some(row) => log_softmax(row),
            None => vec![-(self.vocab.size() as f64).ln(); self.vocab.size()],
        }
    }

    pub fn logprob(&self, key: &ContextKey, token: TokenId) -> f64 {
        self.logprobs(key)[token as usize]
    }

    /// Shannon entropy (nats) of the next-token distribution.
    pub fn token_entropy(&self, key: &ContextKey) -> f64 {
        let lp = self.logprobs(key);
        let h: f64 = lp
            .iter()
            .filter(|l| l.is_finite())
            .map(|&l| -l.exp() * l)
            .sum();
        h.clamp(0.0, (self.vocab.size() as f64).ln())
    }

    /// Gradient of `log pi(token | key)` with respect to the logit row of
    /// `key`: `one_hot(token) - softmax(row)`. All other rows have zero
    /// gradient.
    pub fn score(&self, key: &ContextKey, token: TokenId) -> Vec<f64> {
        let mut g: Vec<f64> = self.logprobs(key).iter().map(|l| -l.exp()).collect();
        g[token as usize] += 1.0;
        g
    }

    /// Log-probabilities of each response token under these parameters.
    pub fn sequence_logprobs(&self, query: &Query, tokens: &[TokenId]) -> Vec<f64> {
        (0..tokens.len())
            .map(|t| self.logprob(&self.key(query, &tokens[..t]), tokens[t]))
            .collect()
    }

    /// Samples a response at `temperature`, recording temperature-1.0
    /// log-probabilities as the behavior-policy values.
    pub fn sample_rollout<R: Rng + ?Sized>(
        &self,
        query: &Query,
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Rollout {
        assert!(max_len >= 1 && temperature > 0.0);
        self.decode(query, max_len, |lp| {
            let scaled: Vec<f64> = lp.iter().map(|l| l / temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).iter().map(|l| l.exp()).collect();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i as TokenId;
                }
            }
            // Rounding left the cumulative sum just short of 1.
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
        })
    }

    /// Argmax decoding, ties to the lowest token id.
    pub fn greedy_decode(&self, query: &Query, max_len: usize) -> Rollout {
        assert!(max_len >= 1);
        self.decode(query, max_len, |lp| {
            let mut best = 0;
            for (i, &l) in lp.iter().enumerate() {
                if l > lp[best] {
                    best = i;
                }
            }
            best as TokenId
        })
    }

    fn decode(
        &self,
        query: &Query,
        max_len: usize,
        mut pick: impl FnMut(&[f64]) -> TokenId,
    ) -> Rollout {
        let eos = self.vocab.eos_id();
        let mut tokens = Vec::with_capacity(max_len);
        let mut logprobs = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let lp = self.logprobs(&self.key(query, &tokens));
            let tok = pick(&lp);
            tokens.push(tok);
            logprobs.push(lp[tok as usize]);
            if tok == eos {
                break;
            }
        }
        let truncated = tokens.last() != Some(&eos);
        let reward = env::verify(query, &tokens);
        Rollout {
            query_id: query.id,
            tokens,
            old_logprobs: logprobs,
            reward,
            truncated,
        }
    }

    /// Diff-friendly checkpoint text: a short header, then one line per
    /// context key with the logits as round-trip decimal text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        let _ = writeln!(out, "tokens {}", self.vocab.tokens().join(" "));
        let _ = writeln!(out, "eos {}", self.vocab.eos_id());
        let _ = writeln!(out, "window {}", self.window);
        for (key, row) in &self.table {
            let _ = write!(out, "{} {}", key.query_id, key.encode_recent());
            for x in row {
                let _ = write!(out, " {x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        parse_checkpoint(text, "<policy>")
    }
}

pub const CHECKPOINT_MAGIC: &str = "rlvr-lab-policy v1";

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

/// Parses the text produced by [`PolicyParams::to_text`].
pub fn parse_checkpoint(text: &str, path: &str) -> Result<PolicyParams> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut header = |name: &str| -> Result<(usize, String)> {
        let (n, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("missing `{name}` line")))?;
        if name == "magic" {
            return Ok((n, line.to_string()));
        }
        let rest = line
            .strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| parse_err(path, n, format!("expected `{name} ...`")))?;
        Ok((n, rest.to_string()))
    };
    let (n, magic) = header("magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(parse_err(path, n, format!("expected `{CHECKPOINT_MAGIC}`")));
    }
    let (n, tokens) = header("tokens")?;
    let tokens: Vec<String> = tokens.split(' ').map(String::from).collect();
    let (ne, eos) = header("eos")?;
    let eos: TokenId = eos
        .parse()
        .map_err(|_| parse_err(path, ne, "eos must be an integer"))?;
    let vocab = Vocab::new(tokens, eos).map_err(|e| parse_err(path, n, e.to_string()))?;
    let (nw, window) = header("window")?;
    let window: usize = window
        .parse()
        .ok()
        .filter(|&w| w <= 64)
        .ok_or_else(|| parse_err(path, nw, "window must be an integer <= 64"))?;
    let v = vocab.size();
    let mut params = PolicyParams::new(vocab, window);
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let query_id: u64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err(path, n, "bad query id"))?;
        let recent_field = fields
            .next()
            .ok_or_else(|| parse_err(path, n, "missing context tokens"))?;
        let recent: Vec<TokenId> = if recent_field == "-" {
            Vec::new()
        } else {
            recent_field
                .split(',')
                .map(|t| match t {
                    "_" => Ok(PAD),
                    _ => t
                        .parse::<TokenId>()
                        .ok()
                        .filter(|&t| (t as usize) < v)
                        .ok_or_else(|| parse_err(path, n, format!("bad context token `{t}`"))),
                })
                .collect::<Result<_>>()?
        };
        if recent.len() != window {
            return Err(parse_err(
                path,
                n,
                format!("context has {} tokens, window is {window}", recent.len()),
            ));
        }
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(path, n, format!("bad logit `{f}`")))
            })
            .collect::<Result<_>>()?;
        if row.len() != v {
            return Err(parse_err(
                path,
                n,
                format!("expected {v} logits, found {}", row.len()),
            ));
        }
        let key = ContextKey { query_id, recent };
        if params.table.insert(key, row).is_some() {
            return Err(parse_err(path, n, "duplicate context key"));
        }
    }
    Ok(params)
}
