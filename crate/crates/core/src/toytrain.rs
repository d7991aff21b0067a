//! Trains small models of the engine's architecture on a synthetic corpus
//! of facts, repeated sequences and redefinition prompts. Gradients are
//! derived by hand for the fixed topology and checked against finite
//! differences.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, FactTable, Pattern};
use crate::error::{MieError, Result};
use crate::model::{tensor_layout, Checkpoint, ModelConfig};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub facts: f64,
    pub repeats: f64,
    pub redefinitions: f64,
    /// Runs of distinct words from one category, see `CorpusConfig::list_len`.
    #[serde(default)]
    pub lists: f64,
}

impl MixWeights {
    fn validate(&self) -> Result<()> {
        let w = [self.facts, self.repeats, self.redefinitions, self.lists];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MieError::contract(format!("mix weights must be non-negative and sum to 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_facts: usize,
    /// Seed for the fact table.
    pub world_seed: u64,
    pub mix: MixWeights,
    /// Facts per plain fact sequence, inclusive range.
    pub facts_per_sequence: (usize, usize),
    /// Half length of repeated sequences, inclusive range.
    pub repeat_half: (usize, usize),
    /// Probability that a redefinition prompt is answered with the true
    /// object instead of the counterfactual one.
    pub redefine_fact_rate: f64,
    /// Probability that all facts in one sequence share a category (and so
    /// a relation verb).
    pub same_category_rate: f64,
    /// Draw each redefinition prompt's two sentence patterns at random
    /// instead of always using the plain form.
    pub vary_structure: bool,
    /// Probability that a sentence after the first in a fact sequence uses
    /// a subject outside the table, paired with a random object of the
    /// sequence's category not yet mentioned in it.
    pub novel_subject_rate: f64,
    /// Probability that a repeated sequence's first half is drawn from the
    /// objects of one category instead of the whole word pool.
    pub category_repeat_rate: f64,
    /// Repeated sequences follow a prefix of distinct filler words whose
    /// length is uniform in `0..=repeat_prefix_max`, so the repeat does not
    /// always start at position 0.
    pub repeat_prefix_max: usize,
    /// Length range of category word lists, inclusive.
    #[serde(default = "default_list_len")]
    pub list_len: (usize, usize),
}

fn default_list_len() -> (usize, usize) {
    (4, 12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub tied_unembedding: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub init_std: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub corpus: CorpusConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.mix.validate()?;
        let c = &self.corpus;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(MieError::contract("steps and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0 && self.init_std >= 0.0) {
            return Err(MieError::contract("learning rate and adam eps must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(MieError::contract("adam betas must lie in [0, 1)"));
        }
        if c.facts_per_sequence.0 == 0 || c.facts_per_sequence.0 > c.facts_per_sequence.1 {
            return Err(MieError::contract("bad facts_per_sequence range"));
        }
        if c.repeat_half.0 < 2 || c.repeat_half.0 > c.repeat_half.1 {
            return Err(MieError::contract("bad repeat_half range"));
        }
        if [c.redefine_fact_rate, c.same_category_rate, c.novel_subject_rate, c.category_repeat_rate]
            .iter()
            .any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(MieError::contract("rates must be probabilities"));
        }
        if c.list_len.0 < 2 || c.list_len.0 > c.list_len.1 || c.list_len.1 > self.model.n_ctx {
            return Err(MieError::contract("bad list_len range"));
        }
        if 2 * c.repeat_half.1 + c.repeat_prefix_max > self.model.n_ctx || 4 * c.facts_per_sequence.1 > self.model.n_ctx {
            return Err(MieError::contract("corpus sequences exceed the context length"));
        }
        if c.vary_structure && self.model.n_ctx < LONGEST_REDEFINITION {
            return Err(MieError::contract("restructured prompts exceed the context length"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Token length of the longest restructured toy redefinition prompt.
const LONGEST_REDEFINITION: usize = 17;

/// One training sequence; `targets[t]` is the label for the prediction made
/// at position `t`, or `None` when that position carries no loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<Option<TokenId>>,
}

impl Example {
    /// Standard language modelling: every position from the first predicts
    /// its successor.
    pub fn next_token(tokens: Vec<TokenId>) -> Self {
        let mut targets: Vec<Option<TokenId>> = tokens[1..].iter().map(|&t| Some(t)).collect();
        targets.push(None);
        Self { tokens, targets }
    }

    /// Only the final position is trained, toward `answer`.
    pub fn final_answer(tokens: Vec<TokenId>, answer: TokenId) -> Self {
        let mut targets = vec![None; tokens.len()];
        *targets.last_mut().expect("non-empty") = Some(answer);
        Self { tokens, targets }
    }
}

/// Seeded stream of training batches.
pub struct Corpus {
    cfg: CorpusConfig,
    batch_size: usize,
    table: FactTable,
    vocab: Vocab,
    pool: Vec<TokenId>,
    category_pools: Vec<Vec<TokenId>>,
    novel_subjects: Vec<&'static str>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleKind {
    Facts,
    Repeat,
    /// Distinct words of one category in random order.
    List,
    Redefinition,
}

impl Corpus {
    pub fn table(&self) -> &FactTable {
        &self.table
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn pick_kind(&mut self) -> ExampleKind {
        let m = &self.cfg.mix;
        let kinds = [
            (m.facts, ExampleKind::Facts),
            (m.repeats, ExampleKind::Repeat),
            (m.lists, ExampleKind::List),
            (m.redefinitions, ExampleKind::Redefinition),
        ];
        let x: f64 = self.rng.gen();
        let mut acc = 0.0;
        for (w, k) in kinds {
            acc += w;
            if x < acc {
                return k;
            }
        }
        kinds.iter().rev().find(|(w, _)| *w > 0.0).map_or(ExampleKind::Facts, |(_, k)| *k)
    }

    pub fn example(&mut self, kind: ExampleKind) -> Example {
        match kind {
            ExampleKind::Facts => {
                let (lo, hi) = self.cfg.facts_per_sequence;
                let n = self.rng.gen_range(lo..=hi);
                let facts = &self.table.facts;
                let first = self.rng.gen_range(0..facts.len());
                let category = facts[first].category.clone();
                let same = self.rng.gen::<f64>() < self.cfg.same_category_rate;
                let mut rest: Vec<usize> = (0..facts.len())
                    .filter(|&i| i != first && (!same || facts[i].category == category))
                    .collect();
                rest.shuffle(&mut self.rng);
                let mut mentioned: Vec<String> = Vec::new();
                let mut sentences = Vec::with_capacity(n);
                for (k, i) in std::iter::once(first).chain(rest.into_iter().take(n - 1)).enumerate() {
                    let f = &facts[i];
                    let novel = k > 0 && !self.novel_subjects.is_empty() && self.rng.gen::<f64>() < self.cfg.novel_subject_rate;
                    let (subject, object) = if novel {
                        let subject = *self.novel_subjects.choose(&mut self.rng).expect("non-empty");
                        let pool: Vec<&str> = self
                            .table
                            .objects_in(&f.category)
                            .into_iter()
                            .filter(|o| !mentioned.iter().any(|m| m == o))
                            .collect();
                        match pool.choose(&mut self.rng) {
                            Some(o) => (subject.to_string(), o.to_string()),
                            None => (f.subject.clone(), f.object.clone()),
                        }
                    } else {
                        (f.subject.clone(), f.object.clone())
                    };
                    sentences.push(format!("{subject} {} {object}.", f.relation));
                    mentioned.push(object);
                }
                Example::next_token(self.vocab.encode(&sentences.join(" ")))
            }
            ExampleKind::Repeat => {
                let (lo, hi) = self.cfg.repeat_half;
                let pool = if self.rng.gen::<f64>() < self.cfg.category_repeat_rate {
                    self.category_pools.choose(&mut self.rng).unwrap_or(&self.pool)
                } else {
                    &self.pool
                };
                let half = self.rng.gen_range(lo..=hi).min(pool.len());
                let first: Vec<TokenId> = pool.choose_multiple(&mut self.rng, half).copied().collect();
                let n_prefix = self.rng.gen_range(0..=self.cfg.repeat_prefix_max);
                let fillers: Vec<TokenId> = self.pool.iter().copied().filter(|t| !first.contains(t)).collect();
                let prefix = fillers.choose_multiple(&mut self.rng, n_prefix);
                Example::next_token(prefix.copied().chain(first.iter().copied()).chain(first.iter().copied()).collect())
            }
            ExampleKind::List => {
                let pool = self.category_pools.choose(&mut self.rng).unwrap_or(&self.pool);
                let (lo, hi) = self.cfg.list_len;
                let n = self.rng.gen_range(lo..=hi).min(pool.len());
                Example::next_token(pool.choose_multiple(&mut self.rng, n).copied().collect())
            }
            ExampleKind::Redefinition => {
                let i = self.rng.gen_range(0..self.table.facts.len());
                let new = dataset::counterfactual_for(&self.table, i, &mut self.rng);
                let f = &self.table.facts[i];
                let mut entry = dataset::DatasetEntry::redefine(&f.base_prompt(), &f.object, &new);
                if self.cfg.vary_structure {
                    entry.subject = Some(f.subject.clone());
                    let first = *Pattern::ALL.choose(&mut self.rng).expect("three patterns");
                    let second = *Pattern::ALL.choose(&mut self.rng).expect("three patterns");
                    let report = dataset::apply_structure(&[entry], first, second).expect("toy prompts decompose");
                    entry = report.entries.into_iter().next().expect("toy prompts decompose");
                }
                let tokens = self.vocab.encode(&entry.prompt);
                let pair = entry.token_pair(&self.vocab).expect("toy targets are single tokens");
                let answer = if self.rng.gen::<f64>() < self.cfg.redefine_fact_rate {
                    pair.fact
                } else {
                    pair.cofa
                };
                Example::final_answer(tokens, answer)
            }
        }
    }

    pub fn next_batch(&mut self) -> Vec<Example> {
        (0..self.batch_size)
            .map(|_| {
                let kind = self.pick_kind();
                self.example(kind)
            })
            .collect()
    }
}

/// Builds the fact world and the batch stream described by `cfg`.
pub fn make_corpus(cfg: &TrainConfig, vocab: &Vocab) -> Result<Corpus> {
    cfg.validate()?;
    let (table, _) = dataset::make_toy_dataset(cfg.corpus.n_facts, vocab, cfg.corpus.world_seed)?;
    if table.facts.is_empty() && (cfg.corpus.mix.facts > 0.0 || cfg.corpus.mix.redefinitions > 0.0) {
        return Err(MieError::contract("fact and redefinition data need at least one fact"));
    }
    if vocab.len() > cfg.model.d_vocab {
        return Err(MieError::contract(format!(
            "vocabulary has {} tokens but the model only {}",
            vocab.len(),
            cfg.model.d_vocab
        )));
    }
    let pool = repeat_pool(vocab);
    let novel_subjects = dataset::toy::SUBJECTS
        .iter()
        .copied()
        .filter(|s| table.facts.iter().all(|f| f.subject != *s))
        .collect();
    let category_pools = [&dataset::toy::LANGUAGES[..], &dataset::toy::CITIES[..]]
        .iter()
        .map(|words| words.iter().filter_map(|w| vocab.single_token_id(w)).collect())
        .collect();
    Ok(Corpus {
        cfg: cfg.corpus.clone(),
        batch_size: cfg.batch_size,
        table,
        vocab: vocab.clone(),
        pool,
        category_pools,
        novel_subjects,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de),
    })
}

/// Space-prefixed toy words, the tokens repeated sequences are drawn from.
pub fn repeat_pool(vocab: &Vocab) -> Vec<TokenId> {
    let mut pool: Vec<TokenId> = dataset::toy::SUBJECTS
        .iter()
        .chain(&dataset::toy::LANGUAGES)
        .chain(&dataset::toy::CITIES)
        .chain(&dataset::toy::FILLER)
        .chain(&[dataset::toy::LANGUAGE_RELATION, dataset::toy::CITY_RELATION])
        .filter_map(|w| vocab.single_token_id(w))
        .collect();
    pool.sort_unstable();
    pool.dedup();
    pool
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w_q: Range<usize>,
    b_q: Range<usize>,
    w_k: Range<usize>,
    b_k: Range<usize>,
    w_v: Range<usize>,
    b_v: Range<usize>,
    w_o: Range<usize>,
    b_o: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w_in: Range<usize>,
    b_in: Range<usize>,
    w_out: Range<usize>,
    b_out: Range<usize>,
}

#[derive(Debug, Clone)]
struct Index {
    token: Range<usize>,
    pos: Range<usize>,
    layers: Vec<LayerIdx>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    unembed: Range<usize>,
    unembed_b: Range<usize>,
}

/// All weights in one flat `f64` vector laid out in checkpoint file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub tied: bool,
    pub data: Vec<f64>,
}

impl Params {
    fn index(&self) -> Index {
        let layout = tensor_layout(&self.config, self.tied);
        let mut ranges = Vec::with_capacity(layout.len());
        let mut off = 0;
        for (_, shape) in &layout {
            let n: usize = shape.iter().product();
            ranges.push(off..off + n);
            off += n;
        }
        let mut it = ranges.into_iter();
        let mut next = || it.next().expect("layout length");
        let token = next();
        let pos = next();
        let layers = (0..self.config.n_layers)
            .map(|_| LayerIdx {
                ln1_g: next(),
                ln1_b: next(),
                w_q: next(),
                b_q: next(),
                w_k: next(),
                b_k: next(),
                w_v: next(),
                b_v: next(),
                w_o: next(),
                b_o: next(),
                ln2_g: next(),
                ln2_b: next(),
                w_in: next(),
                b_in: next(),
                w_out: next(),
                b_out: next(),
            })
            .collect();
        let lnf_g = next();
        let lnf_b = next();
        let unembed = if self.tied { token.clone() } else { next() };
        let unembed_b = next();
        Index {
            token,
            pos,
            layers,
            lnf_g,
            lnf_b,
            unembed,
            unembed_b,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let data = ckpt
            .named_tensors()
            .into_iter()
            .flat_map(|(_, _, d)| d.iter().map(|&x| x as f64))
            .collect();
        Self {
            config: ckpt.config.clone(),
            tied: ckpt.is_tied(),
            data,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut off = 0;
        let tensors = tensor_layout(&self.config, self.tied)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = self.data[off..off + n].iter().map(|&x| x as f32).collect();
                off += n;
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Checkpoint::from_named(self.config.clone(), self.tied, tensors)
    }
}

/// `a (m×k) · b (k×n)`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out (k×n) += aᵀ (k×m) · b (m×n)`.
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a (m×n) · bᵀ` with `b` stored `k×n`, giving `m×k`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = arow.iter().zip(&b[j * n..(j + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn add_rows(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn col_sums_acc(x: &[f64], width: usize, out: &mut [f64]) {
    for row in x.chunks_exact(width) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn ln_forward(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> (Vec<f64>, LnCache) {
    let d = g.len();
    let t = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let h = (row[c] - mean) * r;
            xhat[i * d + c] = h;
            out[i * d + c] = h * g[c] + b[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn ln_backward(dy: &[f64], cache: &LnCache, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let d = g.len();
    let mut dx = vec![0.0; dy.len()];
    for i in 0..cache.rstd.len() {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            let dxh = dyr[c] * g[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            dx[i * d + c] = cache.rstd[i] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    ln1: LnCache,
    a1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `n_heads` row-major `T×T` patterns.
    p: Vec<f64>,
    z: Vec<f64>,
    ln2: LnCache,
    a2: Vec<f64>,
    h: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    y: Vec<f64>,
    logits: Vec<f64>,
}

fn forward(p: &Params, idx: &Index, tokens: &[TokenId]) -> Cache {
    let cfg = &p.config;
    let (t, d, nh, dh, dm, v) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp(), cfg.d_vocab);
    let w = |r: &Range<usize>| &p.data[r.clone()];
    let eps = cfg.layernorm_eps as f64;
    let mut x = vec![0.0; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &w(&idx.token)[tok as usize * d..(tok as usize + 1) * d];
        let pe = &w(&idx.pos)[i * d..(i + 1) * d];
        for c in 0..d {
            x[i * d + c] = te[c] + pe[c];
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for li in &idx.layers {
        let (a1, ln1) = ln_forward(&x, w(&li.ln1_g), w(&li.ln1_b), eps);
        let mut q = mm(&a1, w(&li.w_q), t, d, d);
        add_rows(&mut q, w(&li.b_q));
        let mut k = mm(&a1, w(&li.w_k), t, d, d);
        add_rows(&mut k, w(&li.b_k));
        let mut vv = mm(&a1, w(&li.w_v), t, d, d);
        add_rows(&mut vv, w(&li.b_v));
        let mut pat = vec![0.0; nh * t * t];
        let mut z = vec![0.0; t * d];
        for h in 0..nh {
            let off = h * dh;
            let ph = &mut pat[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut ph[i * t..(i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in row.iter_mut().take(i + 1) {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut().take(i + 1) {
                    *r /= sum;
                }
                let zi = &mut z[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let a = row[j];
                    for (o, &val) in zi.iter_mut().zip(&vv[j * d + off..j * d + off + dh]) {
                        *o += a * val;
                    }
                }
            }
        }
        let mut attn = mm(&z, w(&li.w_o), t, d, d);
        add_rows(&mut attn, w(&li.b_o));
        x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);
        let (a2, ln2) = ln_forward(&x, w(&li.ln2_g), w(&li.ln2_b), eps);
        let mut h = mm(&a2, w(&li.w_in), t, d, dm);
        add_rows(&mut h, w(&li.b_in));
        let act: Vec<f64> = h.iter().map(|&x| gelu(x)).collect();
        let mut out = mm(&act, w(&li.w_out), t, dm, d);
        add_rows(&mut out, w(&li.b_out));
        x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
        layers.push(LayerCache {
            ln1,
            a1,
            q,
            k,
            v: vv,
            p: pat,
            z,
            ln2,
            a2,
            h,
            act,
        });
    }
    let (y, lnf) = ln_forward(&x, w(&idx.lnf_g), w(&idx.lnf_b), eps);
    let mut logits = mm_nt(&y, w(&idx.unembed), t, d, v);
    add_rows(&mut logits, w(&idx.unembed_b));
    Cache { layers, lnf, y, logits }
}

/// Summed cross-entropy over labelled positions and, when `dlogits_out`
/// is given, the gradient of that sum with respect to the logits.
fn cross_entropy(logits: &[f64], targets: &[Option<TokenId>], v: usize, mut dlogits_out: Option<&mut Vec<f64>>) -> (f64, usize) {
    let mut loss = 0.0;
    let mut n = 0;
    if let Some(d) = dlogits_out.as_deref_mut() {
        *d = vec![0.0; logits.len()];
    }
    for (i, tgt) in targets.iter().enumerate() {
        let Some(tgt) = tgt else { continue };
        let row = &logits[i * v..(i + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[*tgt as usize];
        n += 1;
        if let Some(d) = dlogits_out.as_deref_mut() {
            for (o, x) in d[i * v..(i + 1) * v].iter_mut().zip(row) {
                *o = (x - lse).exp();
            }
            d[i * v + *tgt as usize] -= 1.0;
        }
    }
    (loss, n)
}

fn backward(p: &Params, idx: &Index, tokens: &[TokenId], cache: &Cache, dlogits: &[f64], grad: &mut [f64]) {
    let cfg = &p.config;
    let (t, d, nh, dh, dm, v) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp(), cfg.d_vocab);
    let w = |r: &Range<usize>| &p.data[r.clone()];
    // unembedding
    mm_tn_acc(dlogits, &cache.y, t, v, d, &mut grad[idx.unembed.clone()]);
    col_sums_acc(dlogits, v, &mut grad[idx.unembed_b.clone()]);
    let dy = mm(dlogits, w(&idx.unembed), t, v, d);
    let mut dgf = vec![0.0; d];
    let mut dbf = vec![0.0; d];
    let mut dx = ln_backward(&dy, &cache.lnf, w(&idx.lnf_g), &mut dgf, &mut dbf);
    add_into(&mut grad[idx.lnf_g.clone()], &dgf);
    add_into(&mut grad[idx.lnf_b.clone()], &dbf);

    let scale = 1.0 / (dh as f64).sqrt();
    for (li, lc) in idx.layers.iter().zip(&cache.layers).rev() {
        // mlp
        mm_tn_acc(&lc.act, &dx, t, dm, d, &mut grad[li.w_out.clone()]);
        col_sums_acc(&dx, d, &mut grad[li.b_out.clone()]);
        let mut dh_ = mm_nt(&dx, w(&li.w_out), t, d, dm);
        dh_.iter_mut().zip(&lc.h).for_each(|(g, &x)| *g *= gelu_grad(x));
        mm_tn_acc(&lc.a2, &dh_, t, d, dm, &mut grad[li.w_in.clone()]);
        col_sums_acc(&dh_, dm, &mut grad[li.b_in.clone()]);
        let da2 = mm_nt(&dh_, w(&li.w_in), t, dm, d);
        let (mut dg2, mut db2) = (vec![0.0; d], vec![0.0; d]);
        let dx_ln2 = ln_backward(&da2, &lc.ln2, w(&li.ln2_g), &mut dg2, &mut db2);
        add_into(&mut grad[li.ln2_g.clone()], &dg2);
        add_into(&mut grad[li.ln2_b.clone()], &db2);
        dx.iter_mut().zip(&dx_ln2).for_each(|(a, b)| *a += b);

        // attention
        mm_tn_acc(&lc.z, &dx, t, d, d, &mut grad[li.w_o.clone()]);
        col_sums_acc(&dx, d, &mut grad[li.b_o.clone()]);
        let dz = mm_nt(&dx, w(&li.w_o), t, d, d);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        for h in 0..nh {
            let off = h * dh;
            let ph = &lc.p[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let dzi = &dz[i * d + off..i * d + off + dh];
                let prow = &ph[i * t..(i + 1) * t];
                let mut dp = vec![0.0; i + 1];
                for j in 0..=i {
                    let vj = &lc.v[j * d + off..j * d + off + dh];
                    dp[j] = dzi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let a = prow[j];
                    for (o, &g) in dv[j * d + off..j * d + off + dh].iter_mut().zip(dzi) {
                        *o += a * g;
                    }
                }
                let dot: f64 = (0..=i).map(|j| dp[j] * prow[j]).sum();
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * lc.k[j * d + off + c];
                        dk[j * d + off + c] += ds * lc.q[i * d + off + c];
                    }
                }
            }
        }
        mm_tn_acc(&lc.a1, &dq, t, d, d, &mut grad[li.w_q.clone()]);
        col_sums_acc(&dq, d, &mut grad[li.b_q.clone()]);
        mm_tn_acc(&lc.a1, &dk, t, d, d, &mut grad[li.w_k.clone()]);
        col_sums_acc(&dk, d, &mut grad[li.b_k.clone()]);
        mm_tn_acc(&lc.a1, &dv, t, d, d, &mut grad[li.w_v.clone()]);
        col_sums_acc(&dv, d, &mut grad[li.b_v.clone()]);
        let mut da1 = mm_nt(&dq, w(&li.w_q), t, d, d);
        for (src, wr) in [(&dk, &li.w_k), (&dv, &li.w_v)] {
            let part = mm_nt(src, w(wr), t, d, d);
            da1.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        let (mut dg1, mut db1) = (vec![0.0; d], vec![0.0; d]);
        let dx_ln1 = ln_backward(&da1, &lc.ln1, w(&li.ln1_g), &mut dg1, &mut db1);
        add_into(&mut grad[li.ln1_g.clone()], &dg1);
        add_into(&mut grad[li.ln1_b.clone()], &db1);
        dx.iter_mut().zip(&dx_ln1).for_each(|(a, b)| *a += b);
    }

    for (i, &tok) in tokens.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let te = idx.token.start + tok as usize * d;
        add_into(&mut grad[te..te + d], row);
        let pe = idx.pos.start + i * d;
        add_into(&mut grad[pe..pe + d], row);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Mean cross-entropy over every labelled position in `batch`.
pub fn batch_loss(p: &Params, batch: &[Example]) -> f64 {
    let idx = p.index();
    let (sum, n) = batch
        .iter()
        .map(|ex| {
            let cache = forward(p, &idx, &ex.tokens);
            cross_entropy(&cache.logits, &ex.targets, p.config.d_vocab, None)
        })
        .fold((0.0, 0), |(a, b), (c, e)| (a + c, b + e));
    sum / n.max(1) as f64
}

/// Mean loss and its gradient. Per-example gradients are reduced in batch
/// order, so the result does not depend on the thread count.
pub fn loss_and_grad(p: &Params, batch: &[Example]) -> (f64, Vec<f64>) {
    let idx = p.index();
    let v = p.config.d_vocab;
    let parts: Vec<(f64, usize, Vec<f64>)> = batch
        .par_iter()
        .map(|ex| {
            let cache = forward(p, &idx, &ex.tokens);
            let mut dlogits = Vec::new();
            let (loss, n) = cross_entropy(&cache.logits, &ex.targets, v, Some(&mut dlogits));
            let mut grad = vec![0.0; p.data.len()];
            if n > 0 {
                backward(p, &idx, &ex.tokens, &cache, &dlogits, &mut grad);
            }
            (loss, n, grad)
        })
        .collect();
    let n_total: usize = parts.iter().map(|x| x.1).sum::<usize>().max(1);
    let mut grad = vec![0.0; p.data.len()];
    let mut loss = 0.0;
    for (l, _, g) in &parts {
        loss += l;
        add_into(&mut grad, g);
    }
    let inv = 1.0 / n_total as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, grad)
}

/// Gaussian matrices, unit layernorm gains, zero biases.
pub fn init_params(cfg: &TrainConfig) -> Result<Params> {
    let ckpt = Checkpoint::random(cfg.model.clone(), cfg.tied_unembedding, cfg.init_std as f32, cfg.seed)?;
    Ok(Params::from_checkpoint(&ckpt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Params,
    /// Loss before each step's update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.params.to_checkpoint()
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l:.6}\n"));
        }
        out
    }
}

/// Adam on the mean next-token cross-entropy.
pub fn train(cfg: &TrainConfig, corpus: &mut Corpus) -> Result<TrainOutcome> {
    train_with(cfg, corpus, |_, _| {})
}

/// As [`train`], calling `log(step, loss)` after every step.
pub fn train_with(cfg: &TrainConfig, corpus: &mut Corpus, mut log: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut p = init_params(cfg)?;
    let n = p.data.len();
    let (mut m, mut s) = (vec![0.0; n], vec![0.0; n]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = corpus.next_batch();
        let (loss, mut grad) = loss_and_grad(&p, &batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(MieError::Divergence { step, loss });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let f = clip / norm;
                grad.iter_mut().for_each(|g| *g *= f);
            }
        }
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            s[i] = cfg.beta2 * s[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            p.data[i] -= cfg.learning_rate * (m[i] / bc1) / ((s[i] / bc2).sqrt() + cfg.adam_eps);
        }
        losses.push(loss);
        log(step, loss);
    }
    Ok(TrainOutcome { params: p, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub tied_unembedding: bool,
    pub init_std: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub step: f64,
    /// Tensors whose gradient norm is below this in both estimates are
    /// compared in absolute rather than relative terms.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(1, 2, 8, 16, 8),
            tied_unembedding: false,
            init_std: 0.5,
            batch_size: 2,
            seq_len: 6,
            step: 1e-3,
            floor: 1e-4,
        }
    }
}

/// Random batch for gradient checking: full next-token targets.
pub fn random_batch(cfg: &GradCheckConfig, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.batch_size)
        .map(|_| {
            let tokens = (0..cfg.seq_len)
                .map(|_| rng.gen_range(0..cfg.model.d_vocab as TokenId))
                .collect();
            Example::next_token(tokens)
        })
        .collect()
}

/// Worst per-tensor relative error between analytic and central-difference
/// gradients, on a random model and batch drawn from `seed`.
pub fn grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<f64> {
    Ok(grad_check_report(cfg, seed)?.worst())
}

pub fn grad_check_report(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let ckpt = Checkpoint::random(cfg.model.clone(), cfg.tied_unembedding, cfg.init_std as f32, seed)?;
    let mut p = Params::from_checkpoint(&ckpt);
    // break the symmetry of unit gains and zero biases
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for x in p.data.iter_mut() {
        *x += rng.gen_range(-0.1..0.1);
    }
    let batch = random_batch(cfg, seed.wrapping_add(2));
    Ok(grad_check_on(&p, &batch, cfg.step, cfg.floor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `(tensor name, ‖a − n‖ / max(‖a‖, ‖n‖, floor))` in layout order.
    pub per_tensor: Vec<(String, f64)>,
    /// Worst single-entry `|a − n|`.
    pub max_abs_diff: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

pub fn grad_check_on(p: &Params, batch: &[Example], step: f64, floor: f64) -> GradCheckReport {
    let (_, analytic) = loss_and_grad(p, batch);
    let mut probe = p.clone();
    let numeric: Vec<f64> = (0..p.data.len())
        .map(|i| {
            let orig = probe.data[i];
            probe.data[i] = orig + step;
            let up = batch_loss(&probe, batch);
            probe.data[i] = orig - step;
            let down = batch_loss(&probe, batch);
            probe.data[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut off = 0;
    let per_tensor = tensor_layout(&p.config, p.tied)
        .into_iter()
        .map(|(name, shape)| {
            let r = off..off + shape.iter().product::<usize>();
            off = r.end;
            let (a, n) = (&analytic[r.clone()], &numeric[r]);
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            (name, norm(&diff) / norm(a).max(norm(n)).max(floor))
        })
        .collect();
    let max_abs_diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    GradCheckReport {
        per_tensor,
        max_abs_diff,
    }
}
