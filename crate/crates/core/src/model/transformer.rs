use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::params::{ParamGroup, ParamStore};
use crate::data::PaddedIds;
use crate::error::{Error, Result};
use crate::numerics::{AttentionSpec, Graph, Pooling, Tensor, Var, NORM_EPS};

/// Which embedding table feeds the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    fn table(self) -> &'static str {
        match self {
            Side::Source => "embed.src",
            Side::Target => "embed.tgt",
        }
    }
}

/// Parameters plus the architecture they were built for.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    projection_calls: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone())
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::raw(vec![fan_in, fan_out], data)
}

fn group_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt)
}

fn linear(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{name}.w"), glorot(rng, fan_in, fan_out));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn norm(p: &mut ParamStore, name: &str, width: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[width], 1.0));
    p.insert(format!("{name}.b"), Tensor::zeros(&[width]));
}

fn attention_block(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, h: usize) {
    for part in ["q", "k", "v", "o"] {
        linear(p, rng, &format!("{name}.{part}"), h, h);
    }
}

impl Model {
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Self {
        Self {
            config,
            params,
            projection_calls: AtomicU64::new(0),
        }
    }

    /// Fresh embeddings, encoder and decoder; no projection head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut m = Self::from_params(config, ParamStore::new());
        m.init_embeddings(seed);
        m.init_encoder(seed);
        m.init_decoder(seed);
        Ok(m)
    }

    pub fn init_embeddings(&mut self, seed: u64) {
        let c = &self.config;
        let mut rng = group_rng(seed, 1);
        let normal = Normal::new(0.0, 1.0 / (c.embed_dim as f64).sqrt()).unwrap();
        for (name, rows) in [("embed.src", c.source_vocab), ("embed.tgt", c.target_vocab)] {
            let data = (0..rows * c.embed_dim).map(|_| normal.sample(&mut rng)).collect();
            self.params.insert(name, Tensor::raw(vec![rows, c.embed_dim], data));
        }
    }

    pub fn init_encoder(&mut self, seed: u64) {
        let c = self.config.clone();
        let mut rng = group_rng(seed, 2);
        let p = &mut self.params;
        if c.embed_dim != c.dim {
            linear(p, &mut rng, "enc.in", c.embed_dim, c.dim);
        }
        for l in 0..c.depth {
            norm(p, &format!("enc.{l}.ln1"), c.dim);
            attention_block(p, &mut rng, &format!("enc.{l}.attn"), c.dim);
            norm(p, &format!("enc.{l}.ln2"), c.dim);
            linear(p, &mut rng, &format!("enc.{l}.ff1"), c.dim, c.ffn_dim);
            linear(p, &mut rng, &format!("enc.{l}.ff2"), c.ffn_dim, c.dim);
        }
        norm(p, "enc.ln", c.dim);
    }

    /// (Re)initializes the decoder from `seed`, replacing any existing one.
    pub fn init_decoder(&mut self, seed: u64) {
        self.params.remove_group(ParamGroup::Decoder);
        let c = self.config.clone();
        let mut rng = group_rng(seed, 3);
        let p = &mut self.params;
        if c.embed_dim != c.dim {
            linear(p, &mut rng, "dec.in", c.embed_dim, c.dim);
        }
        for l in 0..c.depth {
            norm(p, &format!("dec.{l}.ln1"), c.dim);
            attention_block(p, &mut rng, &format!("dec.{l}.self"), c.dim);
            norm(p, &format!("dec.{l}.ln2"), c.dim);
            attention_block(p, &mut rng, &format!("dec.{l}.cross"), c.dim);
            norm(p, &format!("dec.{l}.ln3"), c.dim);
            linear(p, &mut rng, &format!("dec.{l}.ff1"), c.dim, c.ffn_dim);
            linear(p, &mut rng, &format!("dec.{l}.ff2"), c.ffn_dim, c.dim);
        }
        norm(p, "dec.ln", c.dim);
        linear(p, &mut rng, "dec.out", c.dim, c.target_vocab);
    }

    /// (Re)initializes the projection head ρ from `seed`.
    pub fn init_projection(&mut self, seed: u64) {
        self.params.remove_group(ParamGroup::Projection);
        let c = self.config.clone();
        let mut rng = group_rng(seed, 4);
        linear(&mut self.params, &mut rng, "proj.0", c.dim, c.proj_dim);
        linear(&mut self.params, &mut rng, "proj.1", c.proj_dim, c.proj_dim);
        linear(&mut self.params, &mut rng, "proj.2", c.proj_dim, c.proj_dim);
    }

    pub fn has_decoder(&self) -> bool {
        self.params.has_group(ParamGroup::Decoder)
    }

    pub fn has_projection(&self) -> bool {
        self.params.has_group(ParamGroup::Projection)
    }

    /// How many times the projection head has been evaluated on this model.
    pub fn projection_calls(&self) -> u64 {
        self.projection_calls.load(Ordering::Relaxed)
    }

    /// Starts a forward pass. Parameters in `trainable` get gradients.
    pub fn session(&self, trainable: &[ParamGroup]) -> Session<'_> {
        Session {
            graph: Graph::new(),
            model: self,
            bound: HashMap::new(),
            trainable: trainable.to_vec(),
            dropout: None,
            attention: Vec::new(),
        }
    }
}

/// Encoder output ω̃ with its padding mask.
#[derive(Debug, Clone)]
pub struct Latent {
    /// `[batch, len, dim]`
    pub values: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Kind of attention recorded for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::EncoderSelf => "encoder_self",
            AttentionKind::DecoderSelf => "decoder_self",
            AttentionKind::DecoderCross => "decoder_cross",
        }
    }
}

/// One forward pass over a model: owns the tape and parameter bindings.
pub struct Session<'m> {
    pub graph: Graph,
    model: &'m Model,
    bound: HashMap<usize, Var>,
    trainable: Vec<ParamGroup>,
    dropout: Option<(f64, ChaCha8Rng)>,
    attention: Vec<(AttentionKind, usize, Var)>,
}

impl<'m> Session<'m> {
    /// Enables dropout with a seeded mask stream. A rate of 0 is a no-op.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        let rate = self.model.config.dropout;
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Graph leaf for a parameter; created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .model
            .params
            .position(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if let Some(&v) = self.bound.get(&i) {
            return Ok(v);
        }
        let track = self.trainable.contains(&ParamGroup::of(name));
        let v = self.graph.leaf(self.model.params.by_index(i).1.clone(), track);
        self.bound.insert(i, v);
        Ok(v)
    }

    /// `(parameter index, leaf)` pairs bound so far.
    pub fn bindings(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().map(|(&i, &v)| (i, v))
    }

    /// Attention nodes recorded so far as `(kind, layer, node)`.
    pub fn attention_nodes(&self) -> &[(AttentionKind, usize, Var)] {
        &self.attention
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_bias(y, b)
    }

    fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.g"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.graph.layer_norm(x, g, b, NORM_EPS)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - *rate);
        let value = self.graph.value(x);
        let mask: Vec<f64> = (0..value.len())
            .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
            .collect();
        let m = self.graph.constant(Tensor::raw(value.shape().to_vec(), mask));
        self.graph.mul(x, m)
    }

    fn feed_forward(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.ff1"))?;
        let h = self.graph.relu(h);
        self.linear(h, &format!("{name}.ff2"))
    }

    #[allow(clippy::too_many_arguments)]
    fn multi_head(
        &mut self,
        query: Var,
        memory: Var,
        name: &str,
        spec: AttentionSpec,
        kind: AttentionKind,
        layer: usize,
    ) -> Result<Var> {
        let q = self.linear(query, &format!("{name}.q"))?;
        let k = self.linear(memory, &format!("{name}.k"))?;
        let v = self.linear(memory, &format!("{name}.v"))?;
        let a = self.graph.attention(q, k, v, spec)?;
        self.attention.push((kind, layer, a));
        self.linear(a, &format!("{name}.o"))
    }

    fn embed(&mut self, ids: &PaddedIds, table: &str, input: &str) -> Result<Var> {
        let c = &self.model.config;
        let (n, h, max_len) = (c.embed_dim, c.dim, c.max_len);
        if ids.len > max_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max_len {max_len}",
                ids.len
            )));
        }
        let t = self.param(table)?;
        let e = self.graph.embedding(t, &ids.ids, &[ids.batch, ids.len])?;
        let mut x = self.graph.scale(e, (n as f64).sqrt());
        if n != h {
            x = self.linear(x, input)?;
        }
        let pe = self.graph.constant(positional_encoding(ids.batch, ids.len, h));
        let x = self.graph.add(x, pe)?;
        self.dropout(x)
    }

    /// Runs the shared encoder over one language's ids.
    pub fn encode(&mut self, ids: &PaddedIds, side: Side) -> Result<Latent> {
        let depth = self.model.config.depth;
        let heads = self.model.config.heads;
        let mut x = self.embed(ids, side.table(), "enc.in")?;
        for l in 0..depth {
            let spec = AttentionSpec {
                batch: ids.batch,
                query_len: ids.len,
                key_len: ids.len,
                heads,
                key_mask: ids.mask.clone(),
                causal: false,
            };
            let h = self.layer_norm(x, &format!("enc.{l}.ln1"))?;
            let a = self.multi_head(h, h, &format!("enc.{l}.attn"), spec, AttentionKind::EncoderSelf, l)?;
            let a = self.dropout(a)?;
            x = self.graph.add(x, a)?;
            let h = self.layer_norm(x, &format!("enc.{l}.ln2"))?;
            let f = self.feed_forward(h, &format!("enc.{l}"))?;
            let f = self.dropout(f)?;
            x = self.graph.add(x, f)?;
        }
        let values = self.layer_norm(x, "enc.ln")?;
        Ok(Latent {
            values,
            mask: ids.mask.clone(),
            batch: ids.batch,
            len: ids.len,
        })
    }

    /// Decoder logits `[batch, prefix.len, target_vocab]` given the full latent
    /// sequence.
    pub fn decode(&mut self, latent: &Latent, prefix: &PaddedIds) -> Result<Var> {
        if prefix.batch != latent.batch {
            return Err(Error::Dimension {
                op: "decode",
                lhs: vec![latent.batch, latent.len],
                rhs: vec![prefix.batch, prefix.len],
            });
        }
        let depth = self.model.config.depth;
        let heads = self.model.config.heads;
        let mut x = self.embed(prefix, "embed.tgt", "dec.in")?;
        for l in 0..depth {
            let self_spec = AttentionSpec {
                batch: prefix.batch,
                query_len: prefix.len,
                key_len: prefix.len,
                heads,
                key_mask: prefix.mask.clone(),
                causal: true,
            };
            let h = self.layer_norm(x, &format!("dec.{l}.ln1"))?;
            let a = self.multi_head(h, h, &format!("dec.{l}.self"), self_spec, AttentionKind::DecoderSelf, l)?;
            let a = self.dropout(a)?;
            x = self.graph.add(x, a)?;

            let cross_spec = AttentionSpec {
                batch: prefix.batch,
                query_len: prefix.len,
                key_len: latent.len,
                heads,
                key_mask: latent.mask.clone(),
                causal: false,
            };
            let h = self.layer_norm(x, &format!("dec.{l}.ln2"))?;
            let a = self.multi_head(
                h,
                latent.values,
                &format!("dec.{l}.cross"),
                cross_spec,
                AttentionKind::DecoderCross,
                l,
            )?;
            let a = self.dropout(a)?;
            x = self.graph.add(x, a)?;

            let h = self.layer_norm(x, &format!("dec.{l}.ln3"))?;
            let f = self.feed_forward(h, &format!("dec.{l}"))?;
            let f = self.dropout(f)?;
            x = self.graph.add(x, f)?;
        }
        let x = self.layer_norm(x, "dec.ln")?;
        self.linear(x, "dec.out")
    }

    /// Sentence embeddings σ `[batch × dim]`.
    pub fn pool(&mut self, latent: &Latent, kind: Pooling) -> Result<Var> {
        self.graph.pool(latent.values, &latent.mask, latent.len, kind)
    }

    /// Projection network ρ: three linear maps, the first two followed by
    /// batch normalization and ReLU.
    pub fn project(&mut self, sigma: Var) -> Result<Var> {
        self.model.projection_calls.fetch_add(1, Ordering::Relaxed);
        let rows = self.graph.value(sigma).rows();
        if rows < 2 {
            return Err(Error::BatchTooSmall { op: "project", rows });
        }
        let mut x = sigma;
        for layer in 0..2 {
            x = self.linear(x, &format!("proj.{layer}"))?;
            x = self.graph.batch_norm(x, NORM_EPS)?;
            x = self.graph.relu(x);
        }
        self.linear(x, "proj.2")
    }
}

/// Sinusoidal position table tiled over the batch: `[batch, len, width]`.
pub fn positional_encoding(batch: usize, len: usize, width: usize) -> Tensor {
    let mut row = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            row[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    let data = row.iter().copied().cycle().take(batch * len * width).collect();
    Tensor::raw(vec![batch, len, width], data)
}
