//! Logit attribution: how much each residual-stream component writes toward
//! a token's logit, and the per-head factual/counterfactual difference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::model::{Checkpoint, ForwardTrace, HeadId};
use crate::tensor;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub fact: TokenId,
    pub cofa: TokenId,
}

impl TokenPair {
    pub fn swapped(self) -> Self {
        Self {
            fact: self.cofa,
            cofa: self.fact,
        }
    }
}

/// How a component's residual write is read out as a logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LnMode {
    /// Plain dot product with the unembedding row.
    Raw,
    /// Through the final layernorm, linearised at the observed scale: centre,
    /// divide by the position's scale, multiply by the gain, then unembed.
    #[default]
    Frozen,
}

impl std::str::FromStr for LnMode {
    type Err = MieError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(LnMode::Raw),
            "frozen" => Ok(LnMode::Frozen),
            _ => Err(MieError::Parse(format!("ln mode must be raw or frozen, got `{s}`"))),
        }
    }
}

/// One additive term of the final logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Embed,
    Head(HeadId),
    Mlp(usize),
    /// Final layernorm bias plus unembedding bias.
    Bias,
}

/// All components in a fixed order: embed, heads layer-major, MLPs, bias.
pub fn components(ckpt: &Checkpoint) -> Vec<Component> {
    let cfg = &ckpt.config;
    let mut out = vec![Component::Embed];
    out.extend(cfg.heads().map(Component::Head));
    out.extend((0..cfg.n_layers).map(Component::Mlp));
    out.push(Component::Bias);
    out
}

fn component_row<'a>(trace: &'a ForwardTrace, c: Component, position: usize) -> Option<&'a [f32]> {
    match c {
        Component::Embed => Some(trace.embed_contribution.row(position)),
        Component::Head(h) => Some(trace.head_output(h).row(position)),
        Component::Mlp(l) => Some(trace.mlp_contribution[l].row(position)),
        Component::Bias => None,
    }
}

fn check(ckpt: &Checkpoint, trace: &ForwardTrace, c: Component, position: usize, token: TokenId) -> Result<()> {
    if position >= trace.seq_len() {
        return Err(MieError::contract(format!(
            "position {position} beyond sequence length {}",
            trace.seq_len()
        )));
    }
    if token as usize >= ckpt.config.d_vocab {
        return Err(MieError::InvalidToken {
            id: token,
            vocab: ckpt.config.d_vocab,
        });
    }
    match c {
        Component::Head(h) => h.validate(&ckpt.config),
        Component::Mlp(l) if l >= ckpt.config.n_layers => {
            Err(MieError::contract(format!("mlp layer {l} out of range")))
        }
        _ => Ok(()),
    }
}

/// The logit `c` contributes to `token` at `position`.
pub fn block_logit(
    ckpt: &Checkpoint,
    trace: &ForwardTrace,
    c: Component,
    position: usize,
    token: TokenId,
    mode: LnMode,
) -> Result<f64> {
    check(ckpt, trace, c, position, token)?;
    let u = ckpt.unembedding().row(token as usize);
    let Some(x) = component_row(trace, c, position) else {
        return Ok(match mode {
            LnMode::Raw => ckpt.unembed_b[token as usize] as f64,
            LnMode::Frozen => tensor::dot(&ckpt.lnf_b, u) + ckpt.unembed_b[token as usize] as f64,
        });
    };
    Ok(match mode {
        LnMode::Raw => tensor::dot(x, u),
        LnMode::Frozen => {
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
            let scale = trace.ln_scales[position];
            x.iter()
                .zip(&ckpt.lnf_g)
                .zip(u)
                .map(|((&xv, &g), &uv)| (xv as f64 - mean) * g as f64 * uv as f64)
                .sum::<f64>()
                / scale
        }
    })
}

/// `BlockLogit(cofa) - BlockLogit(fact)` at the final position; positive
/// means the head pushes toward the counterfactual token.
pub fn delta_cofa(
    ckpt: &Checkpoint,
    trace: &ForwardTrace,
    head: HeadId,
    pair: TokenPair,
    mode: LnMode,
) -> Result<f64> {
    let pos = trace.seq_len() - 1;
    let c = Component::Head(head);
    Ok(block_logit(ckpt, trace, c, pos, pair.cofa, mode)? - block_logit(ckpt, trace, c, pos, pair.fact, mode)?)
}

/// Every head's `delta_cofa` for one trace, layer-major.
pub fn head_deltas(ckpt: &Checkpoint, trace: &ForwardTrace, pair: TokenPair, mode: LnMode) -> Result<Vec<f64>> {
    ckpt.config
        .heads()
        .map(|h| delta_cofa(ckpt, trace, h, pair, mode))
        .collect()
}

/// Logit of `token` read from the residual stream after the embedding and
/// after each block, through the real final layernorm. The last entry
/// equals the model's final logit.
pub fn cumulative_logit_lens(ckpt: &Checkpoint, trace: &ForwardTrace, position: usize, token: TokenId) -> Result<Vec<f64>> {
    check(ckpt, trace, Component::Embed, position, token)?;
    let cfg = &ckpt.config;
    let u = ckpt.unembedding().row(token as usize);
    let read = |r: &[f32]| {
        let y = tensor::layer_norm(r, &ckpt.lnf_g, &ckpt.lnf_b, cfg.layernorm_eps);
        tensor::dot(&y, u) + ckpt.unembed_b[token as usize] as f64
    };
    let mut resid: Vec<f64> = trace.embed_contribution.row(position).iter().map(|&v| v as f64).collect();
    let snapshot = |r: &[f64]| r.iter().map(|&v| v as f32).collect::<Vec<f32>>();
    let mut out = vec![read(&snapshot(&resid))];
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            for (r, &c) in resid.iter_mut().zip(trace.head_output(HeadId::new(l, h)).row(position)) {
                *r += c as f64;
            }
        }
        for (r, &c) in resid.iter_mut().zip(trace.mlp_contribution[l].row(position)) {
            *r += c as f64;
        }
        out.push(read(&snapshot(&resid)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionCell {
    pub head: HeadId,
    pub mean_delta: f64,
    /// Population standard deviation.
    pub std_delta: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionGrid {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Layer-major, one cell per head.
    pub cells: Vec<AttributionCell>,
}

impl AttributionGrid {
    pub fn cell(&self, head: HeadId) -> &AttributionCell {
        &self.cells[head.layer * self.n_heads + head.head]
    }

    /// The head with the most negative mean, i.e. the strongest supporter
    /// of the factual token. Ties go to the earliest head.
    pub fn most_factual(&self) -> HeadId {
        self.cells
            .iter()
            .fold(None::<&AttributionCell>, |best, c| match best {
                Some(b) if b.mean_delta <= c.mean_delta => Some(b),
                _ => Some(c),
            })
            .expect("grid is never empty")
            .head
    }

    /// The head with the largest `|mean_delta|`.
    pub fn strongest(&self) -> HeadId {
        self.cells
            .iter()
            .fold(None::<&AttributionCell>, |best, c| match best {
                Some(b) if b.mean_delta.abs() >= c.mean_delta.abs() => Some(b),
                _ => Some(c),
            })
            .expect("grid is never empty")
            .head
    }
}

/// One tokenised prompt with its competing answer tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub tokens: Vec<TokenId>,
    pub pair: TokenPair,
}

/// Mean and population std of `delta_cofa` per head over `probes`.
pub fn attribution_grid(ckpt: &Checkpoint, probes: &[Probe], mode: LnMode) -> Result<AttributionGrid> {
    if probes.is_empty() {
        return Err(MieError::contract("attribution over an empty slice"));
    }
    let per_entry: Vec<Vec<f64>> = probes
        .par_iter()
        .map(|p| {
            let trace = ckpt.forward(&p.tokens, &[])?;
            head_deltas(ckpt, &trace, p.pair, mode)
        })
        .collect::<Result<_>>()?;
    Ok(grid_from_deltas(&ckpt.config, &per_entry))
}

/// Aggregates per-entry head deltas (each layer-major) into a grid.
pub fn grid_from_deltas(cfg: &crate::model::ModelConfig, per_entry: &[Vec<f64>]) -> AttributionGrid {
    let n = per_entry.len();
    let cells = cfg
        .heads()
        .enumerate()
        .map(|(k, head)| {
            let mean = per_entry.iter().map(|d| d[k]).sum::<f64>() / n as f64;
            let var = per_entry.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / n as f64;
            AttributionCell {
                head,
                mean_delta: mean,
                std_delta: var.sqrt(),
                n,
            }
        })
        .collect();
    AttributionGrid {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy() -> Checkpoint {
        let mut ckpt = Checkpoint::random(ModelConfig::new(2, 4, 64, 256, 32), false, 0.2, 3).unwrap();
        for (i, v) in ckpt.lnf_b.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin() * 0.1;
        }
        for (i, v) in ckpt.lnf_g.iter_mut().enumerate() {
            *v = 1.0 + (i as f32 * 0.11).cos() * 0.2;
        }
        for (i, v) in ckpt.unembed_b.iter_mut().enumerate() {
            *v = (i as f32 * 0.05).cos() * 0.3;
        }
        ckpt
    }

    #[test]
    fn frozen_components_sum_to_logit() {
        let ckpt = toy();
        let tokens: Vec<TokenId> = vec![4, 77, 200, 13, 13, 9, 250];
        let trace = ckpt.forward(&tokens, &[]).unwrap();
        for pos in [0, 3, 6] {
            for tok in [0u32, 13, 255] {
                let sum: f64 = components(&ckpt)
                    .into_iter()
                    .map(|c| block_logit(&ckpt, &trace, c, pos, tok, LnMode::Frozen).unwrap())
                    .sum();
                let want = trace.final_logits.at(pos, tok as usize) as f64;
                assert!((sum - want).abs() <= 1e-3 * want.abs().max(1e-2), "{sum} vs {want}");
            }
        }
    }

    #[test]
    fn orthogonal_and_zero_contributions_vanish() {
        let mut ckpt = toy();
        let tokens = [1, 2, 3];
        let trace = ckpt.forward(&tokens, &[]).unwrap();
        let head = HeadId::new(1, 1);
        // force the unembedding row of token 5 orthogonal to this head's write at position 2
        let x: Vec<f32> = trace.head_output(head).row(2).to_vec();
        let u = ckpt.unembed.as_mut().unwrap();
        let nx = tensor::dot(&x, &x);
        let proj = tensor::dot(u.row(5), &x) / nx;
        for (uv, &xv) in u.row_mut(5).iter_mut().zip(&x) {
            *uv -= (proj * xv as f64) as f32;
        }
        let raw = block_logit(&ckpt, &trace, Component::Head(head), 2, 5, LnMode::Raw).unwrap();
        assert!(raw.abs() < 1e-5, "{raw}");

        let mut zeroed = trace.clone();
        zeroed.head_contribution[0] = crate::tensor::Tensor::zeros(&[3, 64]);
        for mode in [LnMode::Raw, LnMode::Frozen] {
            let v = block_logit(&ckpt, &zeroed, Component::Head(HeadId::new(0, 0)), 1, 9, mode).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn delta_is_antisymmetric_and_zero_on_equal_tokens() {
        let ckpt = toy();
        let trace = ckpt.forward(&[10, 20, 30, 40], &[]).unwrap();
        let pair = TokenPair { fact: 7, cofa: 99 };
        for h in ckpt.config.heads() {
            for mode in [LnMode::Raw, LnMode::Frozen] {
                let d = delta_cofa(&ckpt, &trace, h, pair, mode).unwrap();
                assert_eq!(d, -delta_cofa(&ckpt, &trace, h, pair.swapped(), mode).unwrap());
                assert_eq!(delta_cofa(&ckpt, &trace, h, TokenPair { fact: 7, cofa: 7 }, mode).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn cumulative_lens_ends_at_final_logit() {
        let ckpt = toy();
        let trace = ckpt.forward(&[3, 1, 4, 1, 5], &[]).unwrap();
        let lens = cumulative_logit_lens(&ckpt, &trace, 4, 42).unwrap();
        assert_eq!(lens.len(), 3);
        let want = trace.final_logits.at(4, 42) as f64;
        assert!((lens[2] - want).abs() < 1e-4 * want.abs().max(1.0));
    }

    #[test]
    fn grid_single_and_duplicated_entries() {
        let ckpt = toy();
        let probe = Probe {
            tokens: vec![5, 6, 7, 8],
            pair: TokenPair { fact: 1, cofa: 2 },
        };
        let one = attribution_grid(&ckpt, std::slice::from_ref(&probe), LnMode::Frozen).unwrap();
        let trace = ckpt.forward(&probe.tokens, &[]).unwrap();
        for c in &one.cells {
            assert_eq!(c.mean_delta, delta_cofa(&ckpt, &trace, c.head, probe.pair, LnMode::Frozen).unwrap());
            assert_eq!(c.std_delta, 0.0);
            assert_eq!(c.n, 1);
        }
        let many = attribution_grid(&ckpt, &vec![probe; 5], LnMode::Frozen).unwrap();
        for (a, b) in one.cells.iter().zip(&many.cells) {
            assert!((a.mean_delta - b.mean_delta).abs() <= 1e-12 * a.mean_delta.abs().max(1.0));
            assert!(b.std_delta <= 1e-12 * a.mean_delta.abs().max(1.0));
        }
        assert!(attribution_grid(&ckpt, &[], LnMode::Frozen).is_err());
    }

    #[test]
    fn grid_matches_streaming_oracle() {
        let cfg = ModelConfig::new(1, 2, 4, 8, 4);
        let deltas: Vec<Vec<f64>> = (0..37)
            .map(|i| vec![(i as f64 * 0.7).sin() * 3.0, (i as f64).sqrt() - 2.0])
            .collect();
        let grid = grid_from_deltas(&cfg, &deltas);
        for k in 0..2 {
            // Welford
            let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for d in &deltas {
                n += 1.0;
                let delta = d[k] - mean;
                mean += delta / n;
                m2 += delta * (d[k] - mean);
            }
            assert!((grid.cells[k].mean_delta - mean).abs() < 1e-6);
            assert!((grid.cells[k].std_delta - (m2 / n).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn head_selection_helpers() {
        let cfg = ModelConfig::new(1, 3, 6, 8, 4);
        let grid = grid_from_deltas(&cfg, &[vec![0.5, -2.0, 3.0]]);
        assert_eq!(grid.most_factual(), HeadId::new(0, 1));
        assert_eq!(grid.strongest(), HeadId::new(0, 2));
    }
}
