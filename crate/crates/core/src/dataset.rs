//! JSONL prompt datasets: `{"tokens": [..], "target": id, "meta": {..}}` or
//! `{"text": "..", "target_text": ".."}` resolved through a vocabulary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{Vocab, WeightSet, BOS_ID};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::transformer::{forward, greedy_argmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: usize,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

#[derive(Deserialize)]
struct RawExample {
    tokens: Option<Vec<usize>>,
    target: Option<usize>,
    text: Option<String>,
    target_text: Option<String>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn resolve(raw: RawExample, vocab: Option<&Vocab>) -> Result<Example> {
    let tokens = match (raw.tokens, &raw.text) {
        (Some(t), _) => t,
        (None, Some(text)) => {
            let v = vocab.ok_or_else(|| Error::Input("text examples need a vocabulary".into()))?;
            v.tokenize(text)?
        }
        (None, None) => return Err(Error::Input("example has neither tokens nor text".into())),
    };
    let target = match (raw.target, &raw.target_text) {
        (Some(t), _) => t,
        (None, Some(word)) => {
            let v = vocab.ok_or_else(|| Error::Input("target_text needs a vocabulary".into()))?;
            v.id(word.trim()).ok_or_else(|| Error::Tokenize(word.clone()))?
        }
        (None, None) => return Err(Error::Input("example has no target".into())),
    };
    if tokens.is_empty() {
        return Err(Error::Input("example has no tokens".into()));
    }
    Ok(Example {
        tokens,
        target,
        meta: raw.meta,
    })
}

/// Parses JSONL text; blank lines are skipped.
pub fn parse_dataset(text: &str, vocab: Option<&Vocab>) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let raw: RawExample =
                serde_json::from_str(line).map_err(|e| Error::Input(format!("dataset line {}: {e}", n + 1)))?;
            resolve(raw, vocab).map_err(|e| match e {
                Error::Input(m) => Error::Input(format!("dataset line {}: {m}", n + 1)),
                other => other,
            })
        })
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: Option<&Vocab>) -> Result<Vec<Example>> {
    parse_dataset(&std::fs::read_to_string(path)?, vocab)
}

pub fn dataset_to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    Ok(out)
}

/// `count` random prompts of `len` tokens (BOS first), each labelled with the
/// model's own greedy prediction so every example survives correctness
/// filtering.
pub fn synthetic_prompts<T: Scalar>(
    weights: &WeightSet<T>,
    count: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    let v = weights.config().vocab_size;
    if len < 2 || v < 2 {
        return Err(Error::Input("synthetic prompts need len >= 2 and vocab >= 2".into()));
    }
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .map(|i| {
            let mut tokens = vec![BOS_ID];
            tokens.extend((1..len).map(|_| 1 + rng.below(v - 1)));
            let trace = forward(&tokens, weights)?;
            let target = greedy_argmax(trace.last_logits())?;
            Ok(Example {
                tokens,
                target,
                meta: serde_json::json!({ "id": i }),
            })
        })
        .collect()
}
