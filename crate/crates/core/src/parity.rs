//! Reference fixtures: token ids and greedy next tokens recorded by an
//! external implementation, checked against this engine.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::model::Checkpoint;
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParityPrompt {
    pub text: String,
    pub token_ids: Vec<TokenId>,
    pub greedy_next: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ParityFixture {
    #[serde(default)]
    pub source: String,
    pub prompts: Vec<ParityPrompt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mismatch {
    Tokens { index: usize, expected: Vec<TokenId>, found: Vec<TokenId> },
    Prediction { index: usize, expected: TokenId, found: TokenId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ParityReport {
    pub n_prompts: usize,
    pub mismatches: Vec<Mismatch>,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl ParityFixture {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MieError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| MieError::io(path, e))
    }

    /// Records this engine's own tokenization and greedy prediction.
    pub fn record(ckpt: &Checkpoint, vocab: &Vocab, texts: &[&str], source: &str) -> Result<Self> {
        let prompts = texts
            .iter()
            .map(|t| {
                let token_ids = vocab.encode(t);
                let greedy_next = ckpt.predict_next(&token_ids, &[])?;
                Ok(ParityPrompt {
                    text: t.to_string(),
                    token_ids,
                    greedy_next,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParityFixture {
            source: source.into(),
            prompts,
        })
    }
}

/// Tokenizer check when `vocab` is given, then the greedy prediction on the
/// fixture's own token ids (so a tokenizer mismatch does not mask a model
/// mismatch).
pub fn check(ckpt: Option<&Checkpoint>, vocab: Option<&Vocab>, fixture: &ParityFixture) -> Result<ParityReport> {
    let mut mismatches = Vec::new();
    for (index, p) in fixture.prompts.iter().enumerate() {
        if let Some(v) = vocab {
            let found = v.encode(&p.text);
            if found != p.token_ids {
                mismatches.push(Mismatch::Tokens {
                    index,
                    expected: p.token_ids.clone(),
                    found,
                });
            }
        }
        if let Some(c) = ckpt {
            let found = c.predict_next(&p.token_ids, &[])?;
            if found != p.greedy_next {
                mismatches.push(Mismatch::Prediction {
                    index,
                    expected: p.greedy_next,
                    found,
                });
            }
        }
    }
    Ok(ParityReport {
        n_prompts: fixture.prompts.len(),
        mismatches,
    })
}
