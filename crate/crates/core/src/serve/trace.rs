//! Line-delimited JSON request traces, scenario generators and the seeded
//! token synthesis used when a trace does not spell out its prompts.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::TokenId;

pub const VOCAB_SIZE: u32 = 32000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub arrival_step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation: Option<u64>,
    /// Fresh prompt tokens. A conversation follow-up is prefixed by the
    /// earlier turns' history on top of these.
    pub prompt_len: usize,
    /// Explicit prompt. When present it is the whole prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<Vec<TokenId>>,
    pub output_len: usize,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
}

/// Parses a JSONL trace. Blank lines are skipped; line numbers are 1-based.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(raw).map_err(|e| {
            // the record is a single line, so only the column is informative
            let text = e.to_string();
            let msg = match text.rfind(" at line ") {
                Some(i) => format!("{} (column {})", &text[..i], e.column()),
                None => text,
            };
            TraceError::Parse { line, msg }
        })?;
        out.push(rec);
        lines.push(line);
    }
    validate(&out).map_err(|(idx, msg)| TraceError::Invalid { line: lines[idx], msg })?;
    Ok(out)
}

/// Checks record-level rules. Errors carry the index of the offending record.
pub fn validate(records: &[TraceRecord]) -> Result<(), (usize, String)> {
    let mut ids = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        if !ids.insert(r.id) {
            return Err((i, format!("duplicate request id {}", r.id)));
        }
        if r.output_len == 0 {
            return Err((i, "output_len must be at least 1".into()));
        }
        match &r.prompt_tokens {
            Some(t) if t.len() != r.prompt_len => {
                return Err((i, format!("prompt_tokens has {} tokens but prompt_len is {}", t.len(), r.prompt_len)))
            }
            Some(t) if t.is_empty() => return Err((i, "prompt must not be empty".into())),
            None if r.prompt_len == 0 && r.conversation.is_none() => {
                return Err((i, "prompt must not be empty".into()))
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        s.push('\n');
    }
    s
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix(seed: u64, id: u64) -> u64 {
    splitmix(seed ^ splitmix(id))
}

/// Fresh prompt tokens for a request without explicit ones.
pub fn synth_prompt(seed: u64, id: u64, len: usize) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id));
    (0..len).map(|_| rng.gen_range(0..VOCAB_SIZE)).collect()
}

/// The `pos`-th generated token of a request.
pub fn output_token(seed: u64, id: u64, pos: usize) -> TokenId {
    (mix(seed, id ^ splitmix(pos as u64 + 1)) % VOCAB_SIZE as u64) as TokenId
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SingleGen,
    MultiTurn,
    PrefixShare,
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_gen" => Ok(Scenario::SingleGen),
            "multi_turn" => Ok(Scenario::MultiTurn),
            "prefix_share" => Ok(Scenario::PrefixShare),
            other => Err(format!("unknown scenario `{other}` (single_gen|multi_turn|prefix_share)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioParams {
    /// Requests (single_gen, prefix_share) or conversations (multi_turn).
    pub requests: usize,
    pub turns: usize,
    pub seed: u64,
}

impl ScenarioParams {
    pub fn defaults(scenario: Scenario, seed: u64) -> Self {
        let requests = match scenario {
            Scenario::SingleGen => 16,
            Scenario::MultiTurn => 4,
            Scenario::PrefixShare => 8,
        };
        Self { requests, turns: 4, seed }
    }
}

pub const PREFIX_SHARED_TOKENS: usize = 12000;
pub const PREFIX_DISTINCT_TOKENS: usize = 4000;
pub const PREFIX_OUTPUT_TOKENS: usize = 10;
pub const TURN_TOKENS: usize = 2000;

pub fn generate(scenario: Scenario, p: ScenarioParams) -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    match scenario {
        Scenario::SingleGen => (0..p.requests as u64)
            .map(|id| TraceRecord {
                id,
                arrival_step: 0,
                conversation: None,
                prompt_len: rng.gen_range(6000..=8000),
                prompt_tokens: None,
                output_len: rng.gen_range(2000..=4000),
            })
            .collect(),
        Scenario::MultiTurn => {
            let mut out = Vec::new();
            for c in 0..p.requests as u64 {
                for t in 0..p.turns as u64 {
                    out.push(TraceRecord {
                        id: c * p.turns as u64 + t,
                        arrival_step: 0,
                        conversation: Some(c),
                        prompt_len: TURN_TOKENS,
                        prompt_tokens: None,
                        output_len: TURN_TOKENS,
                    });
                }
            }
            out
        }
        Scenario::PrefixShare => {
            let shared: Vec<TokenId> = (0..PREFIX_SHARED_TOKENS).map(|_| rng.gen_range(0..VOCAB_SIZE)).collect();
            (0..p.requests as u64)
                .map(|id| {
                    let mut tokens = shared.clone();
                    tokens.extend((0..PREFIX_DISTINCT_TOKENS).map(|_| rng.gen_range(0..VOCAB_SIZE)));
                    TraceRecord {
                        id,
                        // the first request finishes and is recorded before the rest arrive
                        arrival_step: if id == 0 { 0 } else { PREFIX_OUTPUT_TOKENS as u64 + 2 },
                        conversation: Some(0),
                        prompt_len: tokens.len(),
                        prompt_tokens: Some(tokens),
                        output_len: PREFIX_OUTPUT_TOKENS,
                    }
                })
                .collect()
        }
    }
}
