//! Experiments over datasets: prediction classification, intervention
//! sweeps, random-head baselines, induction scores and category heatmaps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{self, AttributionCell, LnMode, TokenPair};
use crate::dataset::{self, DatasetEntry, TokenizedEntry};
use crate::error::{MieError, Result};
use crate::intervention::{self, InterventionSpec, ResolvedIntervention};
use crate::model::{Checkpoint, HeadId};
use crate::tensor;
use crate::tokenizer::{TokenId, Vocab};

pub const DEFAULT_ALPHAS: [f32; 6] = [0.0, 1.0, 2.0, 5.0, 10.0, 100.0];
pub const DEFAULT_BASELINE_SEEDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Factual,
    Counterfactual,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub label: Label,
    pub predicted_token: TokenId,
}

pub fn classify_pair(pair: TokenPair, predicted: TokenId) -> Outcome {
    let label = if predicted == pair.fact {
        Label::Factual
    } else if predicted == pair.cofa {
        Label::Counterfactual
    } else {
        Label::Other
    };
    Outcome {
        label,
        predicted_token: predicted,
    }
}

/// Classifies against the entry's targets looked up with a leading space.
/// Entries whose targets are not single tokens classify as `Other`.
pub fn classify(entry: &DatasetEntry, predicted: TokenId, vocab: &Vocab) -> Outcome {
    match entry.token_pair(vocab) {
        Some(pair) => classify_pair(pair, predicted),
        None => Outcome {
            label: Label::Other,
            predicted_token: predicted,
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub factual: usize,
    pub counterfactual: usize,
    pub other: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.factual + self.counterfactual + self.other
    }

    pub fn add(&mut self, label: Label) {
        match label {
            Label::Factual => self.factual += 1,
            Label::Counterfactual => self.counterfactual += 1,
            Label::Other => self.other += 1,
        }
    }

    pub fn from_outcomes(outcomes: &[Outcome]) -> Self {
        let mut c = Counts::default();
        outcomes.iter().for_each(|o| c.add(o.label));
        c
    }

    pub fn factual_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.factual as f64 / self.total() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub alpha: f32,
    pub counts: Counts,
    pub n_total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub results: Vec<SweepResult>,
    /// `(entry index, reason)` for entries left out of every α.
    pub excluded: Vec<(usize, String)>,
    /// Per α, per included entry, when requested.
    pub outcomes: Option<Vec<Vec<Outcome>>>,
}

impl SweepReport {
    pub fn at(&self, alpha: f32) -> Option<&SweepResult> {
        self.results.iter().find(|r| r.alpha == alpha)
    }
}

/// Greedy prediction for every entry without interventions.
pub fn clean_outcomes(ckpt: &Checkpoint, entries: &[TokenizedEntry]) -> Result<Vec<Outcome>> {
    entries
        .par_iter()
        .map(|e| Ok(classify_pair(e.pair, ckpt.predict_next(&e.tokens, &[])?)))
        .collect()
}

/// Factual accuracy of plain fact queries: `base_prompt` should be
/// completed with `target_true`.
pub fn base_prompt_accuracy(ckpt: &Checkpoint, entries: &[DatasetEntry], vocab: &Vocab) -> Result<Counts> {
    let outcomes: Vec<Outcome> = entries
        .par_iter()
        .map(|e| {
            let tokens = vocab.encode(&e.base_prompt);
            Ok(classify(e, ckpt.predict_next(&tokens, &[])?, vocab))
        })
        .collect::<Result<_>>()?;
    Ok(Counts::from_outcomes(&outcomes))
}

/// Runs every α on the same set of entries. `specs` are templates whose α
/// is replaced by each sweep value; entries where any anchor fails to
/// resolve are excluded from all α values.
pub fn alpha_sweep(
    ckpt: &Checkpoint,
    entries: &[TokenizedEntry],
    specs: &[InterventionSpec],
    alphas: &[f32],
    keep_outcomes: bool,
) -> Result<SweepReport> {
    let mut included: Vec<(&TokenizedEntry, Vec<ResolvedIntervention>)> = Vec::new();
    let mut excluded = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match intervention::resolve_all(specs, &e.anchors) {
            Ok(r) => included.push((e, r)),
            Err(err @ (MieError::UnresolvableAnchor { .. } | MieError::Causality { .. })) => {
                excluded.push((i, err.to_string()))
            }
            Err(err) => return Err(err),
        }
    }
    let mut results = Vec::with_capacity(alphas.len());
    let mut all_outcomes = Vec::new();
    for &alpha in alphas {
        let outcomes: Vec<Outcome> = included
            .par_iter()
            .map(|(e, resolved)| {
                let scaled: Vec<ResolvedIntervention> = resolved
                    .iter()
                    .map(|r| ResolvedIntervention { alpha, ..*r })
                    .collect();
                Ok(classify_pair(e.pair, ckpt.predict_next(&e.tokens, &scaled)?))
            })
            .collect::<Result<_>>()?;
        let counts = Counts::from_outcomes(&outcomes);
        results.push(SweepResult {
            alpha,
            counts,
            n_total: outcomes.len(),
        });
        if keep_outcomes {
            all_outcomes.push(outcomes);
        }
    }
    Ok(SweepReport {
        results,
        excluded,
        outcomes: keep_outcomes.then_some(all_outcomes),
    })
}

/// Largest factual count over `alphas` minus the count at α = 1.
pub fn factual_gain(report: &SweepReport, alphas: &[f32]) -> Option<i64> {
    let base = report.at(1.0)?.counts.factual as i64;
    alphas
        .iter()
        .filter_map(|&a| report.at(a))
        .map(|r| r.counts.factual as i64 - base)
        .max()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub seed: u64,
    pub heads: Vec<HeadId>,
    pub sweep: SweepReport,
}

/// For each head of interest, one replacement head sampled from the same
/// layer, never one of the heads of interest.
pub fn sample_replacements(heads_of_interest: &[HeadId], n_heads: usize, seed: u64) -> Result<Vec<HeadId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    heads_of_interest
        .iter()
        .map(|h| {
            let pool: Vec<HeadId> = (0..n_heads)
                .map(|i| HeadId::new(h.layer, i))
                .filter(|c| !heads_of_interest.contains(c))
                .collect();
            pool.choose(&mut rng).copied().ok_or_else(|| {
                MieError::contract(format!("layer {} has no head outside the heads of interest", h.layer))
            })
        })
        .collect()
}

/// Repeats `alpha_sweep` with each spec's head swapped for a random head
/// from the same layer, once per seed.
pub fn random_baseline(
    ckpt: &Checkpoint,
    entries: &[TokenizedEntry],
    specs: &[InterventionSpec],
    seeds: &[u64],
    alphas: &[f32],
) -> Result<Vec<BaselineRun>> {
    let heads: Vec<HeadId> = specs.iter().map(|s| s.head).collect();
    seeds
        .iter()
        .map(|&seed| {
            let replacements = sample_replacements(&heads, ckpt.config.n_heads, seed)?;
            let swapped: Vec<InterventionSpec> = specs
                .iter()
                .zip(&replacements)
                .map(|(s, &head)| InterventionSpec { head, ..s.clone() })
                .collect();
            Ok(BaselineRun {
                seed,
                heads: replacements,
                sweep: alpha_sweep(ckpt, entries, &swapped, alphas, false)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionConfig {
    pub seq_len: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Key offset relative to the previous occurrence; 1 scores attention
    /// to the token that followed it.
    pub offset: usize,
    /// Tokens to sample from; all of the vocabulary when `None`.
    pub token_pool: Option<Vec<TokenId>>,
}

impl InductionConfig {
    pub fn new(seq_len: usize, n_samples: usize, seed: u64) -> Self {
        Self {
            seq_len,
            n_samples,
            seed,
            offset: 1,
            token_pool: None,
        }
    }
}

/// Random sequences `s` of length `2L` with `s[t] = s[t - L]`.
pub fn repeated_sequences(cfg: &InductionConfig, d_vocab: usize) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_samples)
        .map(|_| {
            let half: Vec<TokenId> = (0..cfg.seq_len)
                .map(|_| match &cfg.token_pool {
                    Some(pool) => pool[rng.gen_range(0..pool.len())],
                    None => rng.gen_range(0..d_vocab as TokenId),
                })
                .collect();
            half.iter().chain(&half).copied().collect()
        })
        .collect()
}

/// Per head (layer-major), the mean over `t ∈ [L, 2L)` and samples of
/// `A[t, t - L + offset]`.
pub fn induction_score(ckpt: &Checkpoint, cfg: &InductionConfig) -> Result<Vec<f64>> {
    let l = cfg.seq_len;
    if l == 0 || cfg.n_samples == 0 {
        return Err(MieError::contract("induction scoring needs a positive length and sample count"));
    }
    if 2 * l > ckpt.config.n_ctx {
        return Err(MieError::contract(format!(
            "2 * {l} exceeds the context length {}",
            ckpt.config.n_ctx
        )));
    }
    if cfg.offset > l {
        return Err(MieError::contract("offset must not exceed the sequence length"));
    }
    if matches!(&cfg.token_pool, Some(p) if p.is_empty()) {
        return Err(MieError::contract("empty token pool"));
    }
    let seqs = repeated_sequences(cfg, ckpt.config.d_vocab);
    let per_sample: Vec<Vec<f64>> = seqs
        .par_iter()
        .map(|s| {
            let trace = ckpt.forward(s, &[])?;
            Ok(trace
                .attention
                .iter()
                .map(|a| (l..2 * l).map(|t| a.at(t, t - l + cfg.offset) as f64).sum::<f64>() / l as f64)
                .collect())
        })
        .collect::<Result<_>>()?;
    let n_heads = ckpt.config.n_layers * ckpt.config.n_heads;
    Ok((0..n_heads)
        .map(|k| per_sample.iter().map(|s| s[k]).sum::<f64>() / cfg.n_samples as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryField {
    Subject,
    #[default]
    Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub heads: Vec<HeadId>,
    pub categories: Vec<String>,
    /// `cells[h][c]` for `heads[h]` on `categories[c]`.
    pub cells: Vec<Vec<AttributionCell>>,
    /// Population std of each head's per-category means.
    pub category_std: Vec<f64>,
}

impl Heatmap {
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|row| row.iter().map(|c| c.mean_delta).collect())
            .collect()
    }

    /// Per category, the head with the most negative mean.
    pub fn most_factual_per_category(&self) -> Vec<HeadId> {
        (0..self.categories.len())
            .map(|c| {
                let mut best = 0;
                for h in 1..self.heads.len() {
                    if self.cells[h][c].mean_delta < self.cells[best][c].mean_delta {
                        best = h;
                    }
                }
                self.heads[best]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapOptions {
    pub field: CategoryField,
    /// Every head when `None`.
    pub heads: Option<Vec<HeadId>>,
    pub truncate_to: Option<usize>,
    pub seed: u64,
    pub ln_mode: LnMode,
}

/// Mean `delta_cofa` per (head, category) over equal-size category slices.
pub fn category_heatmap(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    entries: &[DatasetEntry],
    categories: &[String],
    opts: &HeatmapOptions,
) -> Result<Heatmap> {
    if categories.is_empty() {
        return Err(MieError::contract("no categories requested"));
    }
    let heads: Vec<HeadId> = match &opts.heads {
        Some(h) => {
            for head in h {
                head.validate(&ckpt.config)?;
            }
            h.clone()
        }
        None => ckpt.config.heads().collect(),
    };
    let mut columns = Vec::with_capacity(categories.len());
    for cat in categories {
        let (subject, answer) = match opts.field {
            CategoryField::Subject => (Some(cat.as_str()), None),
            CategoryField::Answer => (None, Some(cat.as_str())),
        };
        let slice = dataset::filter_category(entries, subject, answer, opts.truncate_to, opts.seed)?;
        let probes: Vec<_> = slice
            .iter()
            .map(|e| TokenizedEntry::new(e, vocab).map(|t| t.probe()))
            .collect::<Result<_>>()?;
        let grid = attribution::attribution_grid(ckpt, &probes, opts.ln_mode)?;
        columns.push(heads.iter().map(|&h| grid.cell(h).clone()).collect::<Vec<_>>());
    }
    let cells: Vec<Vec<AttributionCell>> = (0..heads.len())
        .map(|h| columns.iter().map(|col| col[h].clone()).collect())
        .collect();
    let category_std = cells
        .iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().map(|c| c.mean_delta).sum::<f64>() / n;
            (row.iter().map(|c| (c.mean_delta - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    Ok(Heatmap {
        heads,
        categories: categories.to_vec(),
        cells,
        category_std,
    })
}

/// Argmax with the same tie rule as the model's greedy decoding.
pub fn greedy(logits: &[f32]) -> Result<TokenId> {
    Ok(tensor::argmax(logits)? as TokenId)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_toy_dataset, toy_vocab};
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    #[test]
    fn classification_labels() {
        let pair = TokenPair { fact: 3, cofa: 7 };
        assert_eq!(classify_pair(pair, 7).label, Label::Counterfactual);
        assert_eq!(classify_pair(pair, 3).label, Label::Factual);
        assert_eq!(classify_pair(pair, 11).label, Label::Other);
        let vocab = Vocab::bpe_from_words(&[" English", " Indonesian", " the"]).unwrap();
        let e = DatasetEntry::redefine("The official language of Australia is", " English", " Indonesian");
        let id = |w: &str| vocab.single_token_id(w).unwrap();
        assert_eq!(classify(&e, id("Indonesian"), &vocab).label, Label::Counterfactual);
        assert_eq!(classify(&e, id("English"), &vocab).label, Label::Factual);
        assert_eq!(classify(&e, id("the"), &vocab).label, Label::Other);
    }

    fn toy_setup() -> (Checkpoint, Vec<TokenizedEntry>) {
        let vocab = toy_vocab().unwrap();
        let (table, _) = make_toy_dataset(16, &vocab, 4).unwrap();
        let entries = dataset::toy_entries(&table, 12, 5);
        let ckpt = Checkpoint::random(ModelConfig::new(2, 4, 32, vocab.len(), 16), false, 0.3, 6).unwrap();
        let tok = entries.iter().map(|e| TokenizedEntry::new(e, &vocab).unwrap()).collect();
        (ckpt, tok)
    }

    #[test]
    fn alpha_one_equals_clean() {
        let (ckpt, entries) = toy_setup();
        let specs = [InterventionSpec::last_to_cofa(HeadId::new(1, 2), 1.0)];
        let rep = alpha_sweep(&ckpt, &entries, &specs, &DEFAULT_ALPHAS, true).unwrap();
        let clean = clean_outcomes(&ckpt, &entries).unwrap();
        let at_one = DEFAULT_ALPHAS.iter().position(|&a| a == 1.0).unwrap();
        assert_eq!(rep.outcomes.as_ref().unwrap()[at_one], clean);
        for r in &rep.results {
            assert_eq!(r.counts.total(), r.n_total);
            assert_eq!(r.n_total, entries.len());
        }
    }

    #[test]
    fn unresolvable_entries_are_excluded_everywhere() {
        let (ckpt, mut entries) = toy_setup();
        entries[0].anchors.cofa = None;
        let specs = [InterventionSpec::last_to_cofa(HeadId::new(0, 0), 1.0)];
        let rep = alpha_sweep(&ckpt, &entries, &specs, &[0.0, 1.0], false).unwrap();
        assert_eq!(rep.excluded.len(), 1);
        assert!(rep.results.iter().all(|r| r.n_total == entries.len() - 1));
    }

    #[test]
    fn replacements_avoid_heads_of_interest() {
        let hoi = [HeadId::new(1, 0), HeadId::new(1, 3), HeadId::new(0, 2)];
        for seed in 0..20 {
            let r = sample_replacements(&hoi, 4, seed).unwrap();
            for (a, b) in hoi.iter().zip(&r) {
                assert_eq!(a.layer, b.layer);
                assert!(!hoi.contains(b));
            }
            assert_eq!(r, sample_replacements(&hoi, 4, seed).unwrap());
        }
        assert!(sample_replacements(&[HeadId::new(0, 0)], 1, 0).is_err());
    }

    #[test]
    fn baseline_is_deterministic() {
        let (ckpt, entries) = toy_setup();
        let specs = [InterventionSpec::last_to_cofa(HeadId::new(1, 2), 1.0)];
        let a = random_baseline(&ckpt, &entries, &specs, &[0, 1], &[0.0, 10.0]).unwrap();
        let b = random_baseline(&ckpt, &entries, &specs, &[0, 1], &[0.0, 10.0]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|run| run.heads[0] != HeadId::new(1, 2)));
    }

    fn one_head_model(l: usize) -> Checkpoint {
        // a single head whose pattern we control through queries and keys
        let cfg = ModelConfig::new(1, 1, 2 * l + 2, 8, 2 * l);
        Checkpoint::random(cfg, false, 0.0, 0).unwrap()
    }

    #[test]
    fn uniform_head_scores_match_closed_form() {
        let l = 5;
        let ckpt = one_head_model(l);
        // all-zero weights give equal scores, so each row is uniform over j <= t
        let cfg = InductionConfig::new(l, 3, 1);
        let s = induction_score(&ckpt, &cfg).unwrap();
        let want = (l..2 * l).map(|t| 1.0 / (t as f64 + 1.0)).sum::<f64>() / l as f64;
        assert!((s[0] - want).abs() < 1e-6, "{} vs {want}", s[0]);
    }

    #[test]
    fn perfect_induction_head_scores_one() {
        let l = 4;
        let n = 2 * l;
        let mut ckpt = one_head_model(l);
        let d = ckpt.config.d_model;
        // one-hot positions: query at t looks for key position t - l + 1
        let mut pos = Tensor::zeros(&[n, d]);
        for t in 0..n {
            pos.data_mut()[t * d + t] = 1.0;
        }
        ckpt.positional_embedding = pos;
        ckpt.token_embedding = Tensor::zeros(&[8, d]);
        let w = &mut ckpt.layers[0];
        w.ln1_g = vec![1.0; d];
        let mut wq = Tensor::zeros(&[d, d]);
        let mut wk = Tensor::zeros(&[d, d]);
        for t in l..n {
            wq.data_mut()[t * d + t] = 1.0;
            wk.data_mut()[(t - l + 1) * d + t] = 1.0;
        }
        for v in wq.data_mut() {
            *v *= 400.0;
        }
        w.w_q = wq;
        w.w_k = wk;
        let s = induction_score(&ckpt, &InductionConfig::new(l, 2, 0)).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-4, "{}", s[0]);
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let ckpt = Checkpoint::random(ModelConfig::new(2, 4, 32, 64, 20), false, 0.5, 2).unwrap();
        let s = induction_score(&ckpt, &InductionConfig::new(10, 4, 3)).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(induction_score(&ckpt, &InductionConfig::new(11, 1, 0)).is_err());
    }

    #[test]
    fn heatmap_columns() {
        let vocab = toy_vocab().unwrap();
        let (table, _) = make_toy_dataset(16, &vocab, 4).unwrap();
        let entries = dataset::toy_entries(&table, 40, 5);
        let ckpt = Checkpoint::random(ModelConfig::new(2, 4, 32, vocab.len(), 16), false, 0.3, 6).unwrap();
        let opts = HeatmapOptions {
            field: CategoryField::Answer,
            heads: None,
            truncate_to: Some(8),
            seed: 1,
            ln_mode: LnMode::Frozen,
        };
        let cats = vec!["language".to_string()];
        let hm = category_heatmap(&ckpt, &vocab, &entries, &cats, &opts).unwrap();
        let slice = dataset::filter_category(&entries, None, Some("language"), Some(8), 1).unwrap();
        let probes: Vec<_> = slice.iter().map(|e| TokenizedEntry::new(e, &vocab).unwrap().probe()).collect();
        let grid = attribution::attribution_grid(&ckpt, &probes, LnMode::Frozen).unwrap();
        for (h, head) in hm.heads.iter().enumerate() {
            assert_eq!(hm.cells[h][0], *grid.cell(*head));
            assert_eq!(hm.category_std[h], 0.0);
        }
        let twice = vec!["city".to_string(), "city".to_string()];
        let hm = category_heatmap(&ckpt, &vocab, &entries, &twice, &opts).unwrap();
        for row in &hm.cells {
            assert_eq!(row[0], row[1]);
        }
    }
}
