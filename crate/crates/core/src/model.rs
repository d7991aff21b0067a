//! GPT-2 topology decoder (pre-layernorm, learned positions, optional tied
//! unembedding) with a forward pass that records every head's attention
//! pattern and its additive write to the residual stream.
//!
//! Weights follow the row-vector convention `y = x · W + b`, so `W` is
//! `in × out` (the layout GPT-2's `Conv1D` uses). Head `h` owns columns
//! `h*d_head..(h+1)*d_head` of the Q/K/V projections and the same rows of
//! the output projection.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::intervention::{self, ResolvedIntervention};
use crate::tensor::{self, dot, matmul, Tensor};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_vocab: usize,
    pub n_ctx: usize,
    pub layernorm_eps: f32,
}

impl ModelConfig {
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, d_vocab: usize, n_ctx: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads.max(1),
            d_vocab,
            n_ctx,
            layernorm_eps: 1e-5,
        }
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_vocab == 0 || self.n_ctx == 0 {
            return Err(MieError::contract(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 || self.d_head * self.n_heads != self.d_model {
            return Err(MieError::contract(format!(
                "d_model {} must equal n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.layernorm_eps > 0.0 && self.layernorm_eps.is_finite()) {
            return Err(MieError::contract("layernorm_eps must be positive"));
        }
        Ok(())
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.n_layers).flat_map(move |l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
    }
}

/// `L{layer}H{head}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers || self.head >= cfg.n_heads {
            return Err(MieError::contract(format!(
                "{self} outside a model with {} layers and {} heads",
                cfg.n_layers, cfg.n_heads
            )));
        }
        Ok(())
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = MieError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || MieError::Parse(format!("expected a head like L10H7, got `{s}`"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (l, h) = rest.split_once('H').ok_or_else(bad)?;
        Ok(HeadId::new(l.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub w_q: Tensor,
    pub b_q: Vec<f32>,
    pub w_k: Tensor,
    pub b_k: Vec<f32>,
    pub w_v: Tensor,
    pub b_v: Vec<f32>,
    pub w_o: Tensor,
    pub b_o: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub w_in: Tensor,
    pub b_in: Vec<f32>,
    pub w_out: Tensor,
    pub b_out: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f32>,
    pub lnf_b: Vec<f32>,
    /// `None` when the unembedding is tied to `token_embedding`.
    pub unembed: Option<Tensor>,
    pub unembed_b: Vec<f32>,
}

/// Name and shape of every tensor in the on-disk format, in file order.
pub fn tensor_layout(cfg: &ModelConfig, tied: bool) -> Vec<(String, Vec<usize>)> {
    let (d, v, m) = (cfg.d_model, cfg.d_vocab, cfg.d_mlp());
    let mut out = vec![
        ("embed.token".to_string(), vec![v, d]),
        ("embed.pos".to_string(), vec![cfg.n_ctx, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.q.w"), vec![d, d]),
            (p("attn.q.b"), vec![d]),
            (p("attn.k.w"), vec![d, d]),
            (p("attn.k.b"), vec![d]),
            (p("attn.v.w"), vec![d, d]),
            (p("attn.v.b"), vec![d]),
            (p("attn.o.w"), vec![d, d]),
            (p("attn.o.b"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.in.w"), vec![d, m]),
            (p("mlp.in.b"), vec![m]),
            (p("mlp.out.w"), vec![m, d]),
            (p("mlp.out.b"), vec![d]),
        ]);
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    if !tied {
        out.push(("unembed.w".to_string(), vec![v, d]));
    }
    out.push(("unembed.b".to_string(), vec![v]));
    out
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MIE1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    config: ModelConfig,
    tied_unembedding: bool,
}

impl Checkpoint {
    pub fn is_tied(&self) -> bool {
        self.unembed.is_none()
    }

    /// The `d_vocab × d_model` matrix whose rows are token read-out directions.
    pub fn unembedding(&self) -> &Tensor {
        self.unembed.as_ref().unwrap_or(&self.token_embedding)
    }

    /// GPT-2 style initialisation: N(0, std) matrices, unit layernorm gains,
    /// zero biases.
    pub fn random(config: ModelConfig, tied: bool, std: f32, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = tensor_layout(&config, tied)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".g") {
                    vec![1.0; n]
                } else if name.ends_with(".b") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| std * Distribution::<f32>::sample(&StandardNormal, &mut rng)).collect()
                };
                (name, Tensor::new(shape, data).expect("layout shapes are positive"))
            })
            .collect();
        Self::from_named(config, tied, tensors)
    }

    /// Assembles a checkpoint from `(name, tensor)` pairs, validating that
    /// exactly the layout's tensors are present with the expected shapes.
    pub fn from_named(config: ModelConfig, tied: bool, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut map: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(MieError::Format(format!("duplicate tensor `{name}`")));
            }
        }
        let layout = tensor_layout(&config, tied);
        for (name, shape) in &layout {
            let t = map
                .get(name)
                .ok_or_else(|| MieError::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(MieError::TensorShape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
        }
        if map.len() != layout.len() {
            let mut extra: Vec<_> = map
                .keys()
                .filter(|k| !layout.iter().any(|(n, _)| n == *k))
                .cloned()
                .collect();
            extra.sort();
            return Err(MieError::Format(format!("unexpected tensors {extra:?}")));
        }
        let mut take = |name: String| map.remove(&name).expect("checked above");
        let vec = |t: Tensor| t.into_data();
        let token_embedding = take("embed.token".into());
        let positional_embedding = take("embed.pos".into());
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut t = |s: &str| take(format!("blocks.{l}.{s}"));
            layers.push(LayerWeights {
                ln1_g: vec(t("ln1.g")),
                ln1_b: vec(t("ln1.b")),
                w_q: t("attn.q.w"),
                b_q: vec(t("attn.q.b")),
                w_k: t("attn.k.w"),
                b_k: vec(t("attn.k.b")),
                w_v: t("attn.v.w"),
                b_v: vec(t("attn.v.b")),
                w_o: t("attn.o.w"),
                b_o: vec(t("attn.o.b")),
                ln2_g: vec(t("ln2.g")),
                ln2_b: vec(t("ln2.b")),
                w_in: t("mlp.in.w"),
                b_in: vec(t("mlp.in.b")),
                w_out: t("mlp.out.w"),
                b_out: vec(t("mlp.out.b")),
            });
        }
        let lnf_g = vec(take("ln_f.g".into()));
        let lnf_b = vec(take("ln_f.b".into()));
        let unembed = (!tied).then(|| take("unembed.w".into()));
        let unembed_b = vec(take("unembed.b".into()));
        Ok(Self {
            config,
            token_embedding,
            positional_embedding,
            layers,
            lnf_g,
            lnf_b,
            unembed,
            unembed_b,
        })
    }

    /// `(name, shape, data)` for every tensor in file order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let layout = tensor_layout(&self.config, self.is_tied());
        let mut data: Vec<&[f32]> = vec![self.token_embedding.data(), self.positional_embedding.data()];
        for w in &self.layers {
            data.extend([
                &w.ln1_g[..],
                &w.ln1_b,
                w.w_q.data(),
                &w.b_q,
                w.w_k.data(),
                &w.b_k,
                w.w_v.data(),
                &w.b_v,
                w.w_o.data(),
                &w.b_o,
                &w.ln2_g,
                &w.ln2_b,
                w.w_in.data(),
                &w.b_in,
                w.w_out.data(),
                &w.b_out,
            ]);
        }
        data.push(&self.lnf_g);
        data.push(&self.lnf_b);
        if let Some(u) = &self.unembed {
            data.push(u.data());
        }
        data.push(&self.unembed_b);
        layout
            .into_iter()
            .zip(data)
            .map(|((name, shape), d)| (name, shape, d))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tied_unembedding: self.is_tied(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, shape, data) in self.named_tensors() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| MieError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| MieError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MieError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(MieError::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(MieError::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = r.u64("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| MieError::Format(format!("header: {e}")))?;
        let layout = tensor_layout(&header.config, header.tied_unembedding);
        let mut tensors = Vec::with_capacity(layout.len());
        while r.pos < bytes.len() {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| MieError::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            if let Some((_, expected)) = layout.iter().find(|(n, _)| *n == name) {
                if &shape != expected {
                    return Err(MieError::TensorShape {
                        name,
                        found: shape,
                        expected: expected.clone(),
                    });
                }
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| MieError::Format(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        Self::from_named(header.config, header.tied_unembedding, tensors)
    }

    /// Runs the model over `tokens`, applying `interventions` to the
    /// post-softmax patterns as they are produced.
    pub fn forward(&self, tokens: &[TokenId], interventions: &[ResolvedIntervention]) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(MieError::contract("forward on an empty token list"));
        }
        if t_len > cfg.n_ctx {
            return Err(MieError::ContextOverflow {
                len: t_len,
                n_ctx: cfg.n_ctx,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.d_vocab) {
            return Err(MieError::InvalidToken { id, vocab: cfg.d_vocab });
        }
        intervention::validate(interventions, cfg.n_layers, cfg.n_heads, t_len)?;

        let (d, dh, nh) = (cfg.d_model, cfg.d_head, cfg.n_heads);
        let eps = cfg.layernorm_eps;

        let mut embed = Vec::with_capacity(t_len * d);
        for (pos, &id) in tokens.iter().enumerate() {
            let te = self.token_embedding.row(id as usize);
            let pe = self.positional_embedding.row(pos);
            embed.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        let embed = Tensor::new(vec![t_len, d], embed)?;
        let mut resid = embed.clone();

        let mut attention = Vec::with_capacity(cfg.n_layers * nh);
        let mut head_contribution = Vec::with_capacity(cfg.n_layers * nh);
        let mut mlp_contribution = Vec::with_capacity(cfg.n_layers);
        let scale = 1.0 / (dh as f64).sqrt();
        let b_o_share = 1.0 / nh as f32;

        for (l, w) in self.layers.iter().enumerate() {
            let x = layer_norm_rows(&resid, &w.ln1_g, &w.ln1_b, eps);
            let q = add_bias(matmul(&x, &w.w_q)?, &w.b_q);
            let k = add_bias(matmul(&x, &w.w_k)?, &w.b_k);
            let v = add_bias(matmul(&x, &w.w_v)?, &w.b_v);
            let mut block_out = vec![0.0f64; t_len * d];
            for h in 0..nh {
                let cols = h * dh..(h + 1) * dh;
                let mut scores = Tensor::zeros(&[t_len, t_len]);
                for i in 0..t_len {
                    let qi = &q.row(i)[cols.clone()];
                    let row = scores.row_mut(i);
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if j > i {
                            f32::NEG_INFINITY
                        } else {
                            (dot(qi, &k.row(j)[cols.clone()]) * scale) as f32
                        };
                    }
                }
                let mut pattern = tensor::softmax_rows(&scores)?;
                intervention::apply(&mut pattern, l, h, interventions);

                let mut z = vec![0.0f32; t_len * dh];
                for i in 0..t_len {
                    let mut acc = vec![0.0f64; dh];
                    for j in 0..=i {
                        let a = pattern.at(i, j) as f64;
                        if a == 0.0 {
                            continue;
                        }
                        for (o, &vv) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                            *o += a * vv as f64;
                        }
                    }
                    for (o, a) in z[i * dh..(i + 1) * dh].iter_mut().zip(acc) {
                        *o = a as f32;
                    }
                }
                let z = Tensor::new(vec![t_len, dh], z)?;
                let w_o_h = w.w_o.slice_rows(h * dh, (h + 1) * dh);
                let mut contrib = matmul(&z, &w_o_h)?;
                for i in 0..t_len {
                    for (c, &b) in contrib.row_mut(i).iter_mut().zip(&w.b_o) {
                        *c += b * b_o_share;
                    }
                }
                for (acc, &c) in block_out.iter_mut().zip(contrib.data()) {
                    *acc += c as f64;
                }
                attention.push(pattern);
                head_contribution.push(contrib);
            }
            for (r, a) in resid.data_mut().iter_mut().zip(&block_out) {
                *r = (*r as f64 + a) as f32;
            }

            let x = layer_norm_rows(&resid, &w.ln2_g, &w.ln2_b, eps);
            let mut hidden = add_bias(matmul(&x, &w.w_in)?, &w.b_in);
            for hv in hidden.data_mut() {
                *hv = tensor::gelu_scalar(*hv);
            }
            let out = add_bias(matmul(&hidden, &w.w_out)?, &w.b_out);
            for (r, &o) in resid.data_mut().iter_mut().zip(out.data()) {
                *r += o;
            }
            mlp_contribution.push(out);
        }

        let mut ln_scales = Vec::with_capacity(t_len);
        let mut normed = Vec::with_capacity(t_len * d);
        for i in 0..t_len {
            let (y, s) = tensor::layer_norm_with_scale(resid.row(i), &self.lnf_g, &self.lnf_b, eps);
            normed.extend(y);
            ln_scales.push(s);
        }
        let normed = Tensor::new(vec![t_len, d], normed)?;
        let final_logits = self.unembed_rows(&normed);

        Ok(ForwardTrace {
            n_layers: cfg.n_layers,
            n_heads: nh,
            tokens: tokens.to_vec(),
            attention,
            head_contribution,
            mlp_contribution,
            embed_contribution: embed,
            residual_final: resid,
            final_logits,
            ln_scales,
        })
    }

    fn unembed_rows(&self, x: &Tensor) -> Tensor {
        let u = self.unembedding();
        let (t_len, v) = (x.rows(), u.rows());
        let mut out = vec![0.0f32; t_len * v];
        for i in 0..t_len {
            let xi = x.row(i);
            for (tok, o) in out[i * v..(i + 1) * v].iter_mut().enumerate() {
                *o = (dot(xi, u.row(tok)) + self.unembed_b[tok] as f64) as f32;
            }
        }
        Tensor::new(vec![t_len, v], out).expect("positive shape")
    }

    /// Greedy next token after `tokens`.
    pub fn predict_next(&self, tokens: &[TokenId], interventions: &[ResolvedIntervention]) -> Result<TokenId> {
        let trace = self.forward(tokens, interventions)?;
        Ok(tensor::argmax(trace.last_logits())? as TokenId)
    }

    /// The head's value-then-output map as a `d_model × d_model` matrix
    /// acting on row vectors: `x ↦ x · OV`. Biases are excluded.
    pub fn ov_matrix(&self, head: HeadId) -> Result<Tensor> {
        head.validate(&self.config)?;
        let dh = self.config.d_head;
        let w = &self.layers[head.layer];
        let w_v = w.w_v.slice_cols(head.head * dh, (head.head + 1) * dh);
        let w_o = w.w_o.slice_rows(head.head * dh, (head.head + 1) * dh);
        matmul(&w_v, &w_o)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            MieError::Truncated {
                what: what.to_string(),
            }
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn layer_norm_rows(x: &Tensor, g: &[f32], b: &[f32], eps: f32) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        out.extend(tensor::layer_norm(x.row(i), g, b, eps));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn add_bias(mut x: Tensor, b: &[f32]) -> Tensor {
    for i in 0..x.rows() {
        for (v, &bb) in x.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
    x
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub n_layers: usize,
    pub n_heads: usize,
    pub tokens: Vec<TokenId>,
    /// Post-softmax, post-intervention `T × T` patterns indexed `layer * n_heads + head`.
    pub attention: Vec<Tensor>,
    /// Each head's `T × d_model` write to the residual stream, including its
    /// `1/n_heads` share of the output bias.
    pub head_contribution: Vec<Tensor>,
    /// Per layer `T × d_model`.
    pub mlp_contribution: Vec<Tensor>,
    /// Token plus positional embedding, `T × d_model`.
    pub embed_contribution: Tensor,
    /// Residual stream entering the final layernorm.
    pub residual_final: Tensor,
    pub final_logits: Tensor,
    /// `sqrt(var + eps)` of the final layernorm at each position.
    pub ln_scales: Vec<f64>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn pattern(&self, head: HeadId) -> &Tensor {
        &self.attention[head.layer * self.n_heads + head.head]
    }

    pub fn head_output(&self, head: HeadId) -> &Tensor {
        &self.head_contribution[head.layer * self.n_heads + head.head]
    }

    pub fn last_logits(&self) -> &[f32] {
        self.final_logits.row(self.seq_len() - 1)
    }
}
