//! Reads a head's OV circuit as tokens: decompose the OV matrix and
//! unembed the directions it writes into the residual stream.

use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::model::{Checkpoint, HeadId};
use crate::tensor::{self, Tensor};
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdTokenReport {
    pub head: HeadId,
    pub singular_values: Vec<f64>,
    /// One list per reported direction, `k` entries each, logit descending.
    pub top_tokens: Vec<Vec<(TokenId, f64)>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvdLensOptions {
    /// Multiply directions by the final layernorm gain before unembedding.
    pub fold_ln_gain: bool,
}

/// With `OV = U·diag(S)·Vᵀ` and `x ↦ x·OV`, the head writes along the
/// columns of `V`; each is unembedded and its sign flipped so the
/// largest-magnitude logit is positive.
pub fn ov_svd_tokens(
    ckpt: &Checkpoint,
    head: HeadId,
    k: usize,
    n_vectors: usize,
    opts: SvdLensOptions,
) -> Result<SvdTokenReport> {
    let cfg = &ckpt.config;
    head.validate(cfg)?;
    if k == 0 || k > cfg.d_vocab {
        return Err(MieError::contract(format!("k = {k} must be in 1..={}", cfg.d_vocab)));
    }
    if n_vectors > cfg.d_head {
        return Err(MieError::contract(format!(
            "{n_vectors} vectors requested but the OV rank is at most d_head = {}",
            cfg.d_head
        )));
    }
    let ov = ckpt.ov_matrix(head)?;
    let svd = tensor::svd(&ov)?;
    let e = ckpt.unembedding();
    let mut top_tokens = Vec::with_capacity(n_vectors);
    for i in 0..n_vectors {
        let dir: Vec<f32> = (0..cfg.d_model)
            .map(|r| {
                let v = svd.v.at(r, i);
                if opts.fold_ln_gain {
                    v * ckpt.lnf_g[r]
                } else {
                    v
                }
            })
            .collect();
        top_tokens.push(top_k_logits(e, &dir, k));
    }
    Ok(SvdTokenReport {
        head,
        singular_values: svd.s[..n_vectors.min(svd.s.len())].to_vec(),
        top_tokens,
    })
}

fn top_k_logits(e: &Tensor, dir: &[f32], k: usize) -> Vec<(TokenId, f64)> {
    let mut logits: Vec<f64> = (0..e.rows()).map(|t| tensor::dot(e.row(t), dir)).collect();
    let pivot = logits
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        logits.iter_mut().for_each(|x| *x = -*x);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|t| (t as TokenId, logits[t])).collect()
}

impl SvdTokenReport {
    /// Plain-text table, one line per direction.
    pub fn to_table(&self, vocab: Option<&Vocab>) -> String {
        let mut out = format!("{}\n", self.head);
        for (i, (s, toks)) in self.singular_values.iter().zip(&self.top_tokens).enumerate() {
            let words: Vec<String> = toks
                .iter()
                .map(|(t, l)| {
                    let name = vocab
                        .and_then(|v| v.decode(&[*t]).ok())
                        .map(|s| format!("{s:?}"))
                        .unwrap_or_else(|| format!("#{t}"));
                    format!("{name}({l:.3})")
                })
                .collect();
            out.push_str(&format!("{i:>3} s={s:.4}  {}\n", words.join(" ")));
        }
        out
    }
}
