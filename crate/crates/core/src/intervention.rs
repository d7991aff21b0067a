//! Post-softmax attention-entry scaling.
//!
//! An [`InterventionSpec`] names a head, a scale `alpha` and two position
//! anchors. Anchors are resolved against a prompt's [`AnchorContext`] into
//! concrete `(layer, head, query, key, alpha)` tuples that the forward pass
//! applies as `A'[i, j] = alpha * A[i, j]`, with no renormalisation of the
//! row afterwards.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::model::HeadId;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Last,
    Cofa,
    Fact,
    SubjectStart,
    Index(usize),
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Anchor::Last => f.write_str("last"),
            Anchor::Cofa => f.write_str("cofa"),
            Anchor::Fact => f.write_str("fact"),
            Anchor::SubjectStart => f.write_str("subject_start"),
            Anchor::Index(i) => write!(f, "{i}"),
        }
    }
}

impl FromStr for Anchor {
    type Err = MieError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "last" => Anchor::Last,
            "cofa" => Anchor::Cofa,
            "fact" => Anchor::Fact,
            "subject_start" => Anchor::SubjectStart,
            other => Anchor::Index(
                other
                    .parse()
                    .map_err(|_| MieError::Parse(format!("unknown anchor `{other}`")))?,
            ),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    /// Scale only `A[query, key]`.
    SinglePair,
    /// Scale every `A[query, j]` for `j <= query`; the key anchor is ignored.
    AllKeys,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub head: HeadId,
    pub alpha: f32,
    pub query: Anchor,
    pub key: Anchor,
    pub mode: InterventionMode,
}

impl InterventionSpec {
    /// The default experiment: scale the last position's attention to the
    /// counterfactual token.
    pub fn last_to_cofa(head: HeadId, alpha: f32) -> Self {
        Self {
            head,
            alpha,
            query: Anchor::Last,
            key: Anchor::Cofa,
            mode: InterventionMode::SinglePair,
        }
    }

    pub fn with_alpha(self, alpha: f32) -> Self {
        Self { alpha, ..self }
    }

    /// Parses a comma-separated list such as
    /// `L10H7:alpha=10:q=last:k=cofa:mode=single_pair,L11H10:alpha=10`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse())
            .collect()
    }
}

impl fmt::Display for InterventionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            InterventionMode::SinglePair => "single_pair",
            InterventionMode::AllKeys => "all_keys",
        };
        write!(
            f,
            "{}:alpha={}:q={}:k={}:mode={mode}",
            self.head, self.alpha, self.query, self.key
        )
    }
}

impl FromStr for InterventionSpec {
    type Err = MieError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head: HeadId = parts
            .next()
            .ok_or_else(|| MieError::Parse("empty intervention spec".into()))?
            .parse()?;
        let mut spec = InterventionSpec::last_to_cofa(head, 1.0);
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| MieError::Parse(format!("expected key=value, got `{part}`")))?;
            match key {
                "alpha" => {
                    spec.alpha = value
                        .parse()
                        .map_err(|_| MieError::Parse(format!("bad alpha `{value}`")))?
                }
                "q" => spec.query = value.parse()?,
                "k" => spec.key = value.parse()?,
                "mode" => {
                    spec.mode = match value {
                        "single_pair" => InterventionMode::SinglePair,
                        "all_keys" => InterventionMode::AllKeys,
                        _ => return Err(MieError::Parse(format!("unknown mode `{value}`"))),
                    }
                }
                _ => return Err(MieError::Parse(format!("unknown intervention field `{key}`"))),
            }
        }
        if !spec.alpha.is_finite() || spec.alpha < 0.0 {
            return Err(MieError::Parse(format!(
                "alpha must be finite and non-negative, got {}",
                spec.alpha
            )));
        }
        Ok(spec)
    }
}

/// Token positions a spec's anchors can refer to in one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorContext {
    pub len: usize,
    pub cofa: Option<usize>,
    pub fact: Option<usize>,
    /// Half-open token span `[start, end)` of the subject's first occurrence.
    pub subject: Option<(usize, usize)>,
}

impl AnchorContext {
    pub fn last(&self) -> usize {
        self.len - 1
    }

    /// Locates anchors in an encoded prompt. `cofa` and `fact` resolve to
    /// the first occurrence of each token id.
    pub fn locate(
        vocab: &Vocab,
        tokens: &[TokenId],
        cofa: TokenId,
        fact: TokenId,
        subject: Option<&str>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(MieError::contract("anchor context for an empty prompt"));
        }
        let first = |id: TokenId| tokens.iter().position(|&t| t == id);
        let subject = match subject {
            Some(s) if !s.is_empty() => subject_span(vocab, tokens, s)?,
            _ => None,
        };
        Ok(Self {
            len: tokens.len(),
            cofa: first(cofa),
            fact: first(fact),
            subject,
        })
    }

    pub fn position(&self, anchor: Anchor) -> Result<usize> {
        let missing = || MieError::UnresolvableAnchor {
            anchor: anchor.to_string(),
        };
        let pos = match anchor {
            Anchor::Last => self.last(),
            Anchor::Cofa => self.cofa.ok_or_else(missing)?,
            Anchor::Fact => self.fact.ok_or_else(missing)?,
            Anchor::SubjectStart => self.subject.ok_or_else(missing)?.0,
            Anchor::Index(i) => i,
        };
        if pos >= self.len {
            return Err(missing());
        }
        Ok(pos)
    }
}

fn subject_span(vocab: &Vocab, tokens: &[TokenId], subject: &str) -> Result<Option<(usize, usize)>> {
    let text = vocab.decode_bytes(tokens)?;
    let needle = subject.as_bytes();
    let Some(start) = text.windows(needle.len()).position(|w| w == needle) else {
        return Ok(None);
    };
    let end = start + needle.len();
    let offsets = vocab.token_offsets(tokens)?;
    // token i covers bytes offsets[i]..offsets[i + 1]
    let first = (0..tokens.len())
        .find(|&i| offsets[i + 1] > start)
        .expect("start lies inside the text");
    let last = (0..tokens.len())
        .find(|&i| offsets[i + 1] >= end)
        .expect("end lies inside the text");
    Ok(Some((first, last + 1)))
}

/// A fully resolved scaling of one attention entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedIntervention {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub key: usize,
    pub alpha: f32,
}

pub fn resolve(spec: &InterventionSpec, ctx: &AnchorContext) -> Result<Vec<ResolvedIntervention>> {
    let query = ctx.position(spec.query)?;
    let entry = |key| ResolvedIntervention {
        layer: spec.head.layer,
        head: spec.head.head,
        query,
        key,
        alpha: spec.alpha,
    };
    match spec.mode {
        InterventionMode::SinglePair => {
            let key = ctx.position(spec.key)?;
            if key > query {
                return Err(MieError::Causality { query, key });
            }
            Ok(vec![entry(key)])
        }
        InterventionMode::AllKeys => Ok((0..=query).map(entry).collect()),
    }
}

pub fn resolve_all(specs: &[InterventionSpec], ctx: &AnchorContext) -> Result<Vec<ResolvedIntervention>> {
    let mut out = Vec::new();
    for spec in specs {
        out.extend(resolve(spec, ctx)?);
    }
    Ok(out)
}

/// Scales the targeted entries of one head's `T × T` pattern in place.
/// Entries named more than once are scaled once per mention.
pub fn apply(pattern: &mut Tensor, layer: usize, head: usize, resolved: &[ResolvedIntervention]) {
    let t = pattern.cols();
    let data = pattern.data_mut();
    for r in resolved.iter().filter(|r| r.layer == layer && r.head == head) {
        data[r.query * t + r.key] *= r.alpha;
    }
}

/// Checks tuples against a model shape and a sequence length.
pub fn validate(
    resolved: &[ResolvedIntervention],
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
) -> Result<()> {
    for r in resolved {
        if r.layer >= n_layers || r.head >= n_heads {
            return Err(MieError::contract(format!(
                "intervention on L{}H{} outside a {n_layers}x{n_heads} model",
                r.layer, r.head
            )));
        }
        if r.query >= seq_len {
            return Err(MieError::contract(format!(
                "intervention query {} beyond sequence length {seq_len}",
                r.query
            )));
        }
        if r.key > r.query {
            return Err(MieError::Causality {
                query: r.query,
                key: r.key,
            });
        }
        if !r.alpha.is_finite() || r.alpha < 0.0 {
            return Err(MieError::contract(format!("alpha {} is not a finite non-negative scale", r.alpha)));
        }
    }
    Ok(())
}
