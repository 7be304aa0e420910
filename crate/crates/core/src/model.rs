//! GPT-2-style decoder: configuration, parameters, key/value cache and the
//! forward pass.
//!
//! Block order is pre-norm (`ln → attn → residual → ln → mlp → residual`)
//! with a final layernorm before the output projection. Linear weights are
//! stored `[in × out]` and applied as `x · W + b`. All model arithmetic is
//! f32; next-token distributions are computed in f64 from f32 logits.
//!
//! Input and output token embeddings are kept as separate tensors. They are
//! equal after loading; conditioning may swap in a modified input table
//! through [`Transformer::with_input_embedding`] without touching the shared
//! [`Weights`].

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, gelu, layer_norm, linear, softmax_in_place, CAUSAL_MASK};

pub type TokenId = u32;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default = "default_layernorm_eps")]
    pub layernorm_eps: f32,
}

fn default_layernorm_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        context_len: usize,
        embed_dim: usize,
        n_layers: usize,
        n_heads: usize,
    ) -> Result<Self> {
        let config = Self {
            vocab_size,
            context_len,
            embed_dim,
            n_layers,
            n_heads,
            layernorm_eps: default_layernorm_eps(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::validation("vocab_size must be at least 2"));
        }
        if self.context_len < 1 {
            return Err(Error::validation("context_len must be at least 1"));
        }
        if self.n_layers < 1 {
            return Err(Error::validation("n_layers must be at least 1"));
        }
        if self.n_heads < 1 || self.embed_dim < 1 {
            return Err(Error::validation("embed_dim and n_heads must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::validation(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(self.layernorm_eps.is_finite() && self.layernorm_eps > 0.0) {
            return Err(Error::validation("layernorm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    /// `[d × 3d]`, output columns ordered q | k | v.
    pub qkv_weight: Vec<f32>,
    pub qkv_bias: Vec<f32>,
    pub attn_proj_weight: Vec<f32>,
    pub attn_proj_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub mlp_fc_weight: Vec<f32>,
    pub mlp_fc_bias: Vec<f32>,
    pub mlp_proj_weight: Vec<f32>,
    pub mlp_proj_bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[V × d]`, looked up for model input.
    pub token_embedding_in: Vec<f32>,
    /// `[V × d]`, used for the output projection.
    pub token_embedding_out: Vec<f32>,
    /// `[T × d]`
    pub position_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f32>,
    pub final_ln_bias: Vec<f32>,
}

impl LayerWeights {
    fn zeros(d: usize) -> Self {
        Self {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            qkv_weight: vec![0.0; d * 3 * d],
            qkv_bias: vec![0.0; 3 * d],
            attn_proj_weight: vec![0.0; d * d],
            attn_proj_bias: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            mlp_fc_weight: vec![0.0; d * 4 * d],
            mlp_fc_bias: vec![0.0; 4 * d],
            mlp_proj_weight: vec![0.0; 4 * d * d],
            mlp_proj_bias: vec![0.0; d],
        }
    }

    fn tensors(&self) -> [(&'static str, &Vec<f32>); 12] {
        [
            ("ln_1.weight", &self.ln1_gain),
            ("ln_1.bias", &self.ln1_bias),
            ("attn.c_attn.weight", &self.qkv_weight),
            ("attn.c_attn.bias", &self.qkv_bias),
            ("attn.c_proj.weight", &self.attn_proj_weight),
            ("attn.c_proj.bias", &self.attn_proj_bias),
            ("ln_2.weight", &self.ln2_gain),
            ("ln_2.bias", &self.ln2_bias),
            ("mlp.c_fc.weight", &self.mlp_fc_weight),
            ("mlp.c_fc.bias", &self.mlp_fc_bias),
            ("mlp.c_proj.weight", &self.mlp_proj_weight),
            ("mlp.c_proj.bias", &self.mlp_proj_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f32>); 12] {
        [
            ("ln_1.weight", &mut self.ln1_gain),
            ("ln_1.bias", &mut self.ln1_bias),
            ("attn.c_attn.weight", &mut self.qkv_weight),
            ("attn.c_attn.bias", &mut self.qkv_bias),
            ("attn.c_proj.weight", &mut self.attn_proj_weight),
            ("attn.c_proj.bias", &mut self.attn_proj_bias),
            ("ln_2.weight", &mut self.ln2_gain),
            ("ln_2.bias", &mut self.ln2_bias),
            ("mlp.c_fc.weight", &mut self.mlp_fc_weight),
            ("mlp.c_fc.bias", &mut self.mlp_fc_bias),
            ("mlp.c_proj.weight", &mut self.mlp_proj_weight),
            ("mlp.c_proj.bias", &mut self.mlp_proj_bias),
        ]
    }
}

/// Canonical tensor names and shapes for a configuration. The tied token
/// embedding appears once, as `wte`.
pub fn tensor_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, t, d) = (config.vocab_size, config.context_len, config.embed_dim);
    let mut shapes = vec![
        ("wte".to_string(), vec![v, d]),
        ("wpe".to_string(), vec![t, d]),
    ];
    for layer in 0..config.n_layers {
        let per_layer: [(&str, Vec<usize>); 12] = [
            ("ln_1.weight", vec![d]),
            ("ln_1.bias", vec![d]),
            ("attn.c_attn.weight", vec![d, 3 * d]),
            ("attn.c_attn.bias", vec![3 * d]),
            ("attn.c_proj.weight", vec![d, d]),
            ("attn.c_proj.bias", vec![d]),
            ("ln_2.weight", vec![d]),
            ("ln_2.bias", vec![d]),
            ("mlp.c_fc.weight", vec![d, 4 * d]),
            ("mlp.c_fc.bias", vec![4 * d]),
            ("mlp.c_proj.weight", vec![4 * d, d]),
            ("mlp.c_proj.bias", vec![d]),
        ];
        for (name, shape) in per_layer {
            shapes.push((format!("h.{layer}.{name}"), shape));
        }
    }
    shapes.push(("ln_f.weight".to_string(), vec![d]));
    shapes.push(("ln_f.bias".to_string(), vec![d]));
    shapes
}

impl Weights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, t, d) = (config.vocab_size, config.context_len, config.embed_dim);
        Self {
            token_embedding_in: vec![0.0; v * d],
            token_embedding_out: vec![0.0; v * d],
            position_embedding: vec![0.0; t * d],
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::zeros(d))
                .collect(),
            final_ln_gain: vec![0.0; d],
            final_ln_bias: vec![0.0; d],
        }
    }

    /// Tensors in canonical order, `wte` standing for the input embedding.
    pub fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![
            ("wte".into(), &self.token_embedding_in),
            ("wpe".into(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("h.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.weight".into(), &self.final_ln_gain));
        out.push(("ln_f.bias".into(), &self.final_ln_bias));
        out
    }

    /// Mutable counterpart of [`Weights::named_tensors`]. Writing `wte`
    /// leaves `token_embedding_out` alone; call [`Weights::tie_embeddings`]
    /// afterwards.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out: Vec<(String, &mut Vec<f32>)> = vec![
            ("wte".into(), &mut self.token_embedding_in),
            ("wpe".into(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("h.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.weight".into(), &mut self.final_ln_gain));
        out.push(("ln_f.bias".into(), &mut self.final_ln_bias));
        out
    }

    pub fn tie_embeddings(&mut self) {
        self.token_embedding_out
            .clone_from(&self.token_embedding_in);
    }

    /// Checks tensor sizes against `config`, finiteness, and that the
    /// embeddings are still tied.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if self.layers.len() != config.n_layers {
            return Err(Error::validation(format!(
                "expected {} layers, found {}",
                config.n_layers,
                self.layers.len()
            )));
        }
        for ((name, shape), (_, data)) in tensor_shapes(config).iter().zip(self.named_tensors()) {
            let numel: usize = shape.iter().product();
            if data.len() != numel {
                return Err(Error::validation(format!(
                    "tensor {name} has {} elements, shape {shape:?} needs {numel}",
                    data.len()
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "tensor {name} has non-finite values"
                )));
            }
        }
        if self.token_embedding_out != self.token_embedding_in {
            return Err(Error::validation(
                "input and output token embeddings are not tied",
            ));
        }
        Ok(())
    }
}

/// One position's keys and values across all layers, each `[L][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvColumn {
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

/// Per-layer attention keys and values. Each layer stores `[t × d]` rows
/// with head `h` occupying columns `h·(d/H)..(h+1)·(d/H)`. The position
/// index used when each row was computed is tracked alongside, since
/// prefix handling can decouple positions from row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    positions: Vec<usize>,
    embed_dim: usize,
    capacity: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            positions: Vec::new(),
            embed_dim: config.embed_dim,
            capacity: config.context_len,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    pub fn layer_keys_mut(&mut self, layer: usize) -> &mut [f32] {
        &mut self.keys[layer]
    }

    pub fn layer_values_mut(&mut self, layer: usize) -> &mut [f32] {
        &mut self.values[layer]
    }

    pub fn column(&self, index: usize) -> KvColumn {
        let d = self.embed_dim;
        let range = index * d..(index + 1) * d;
        KvColumn {
            keys: self
                .keys
                .iter()
                .map(|k| k[range.clone()].to_vec())
                .collect(),
            values: self
                .values
                .iter()
                .map(|v| v[range.clone()].to_vec())
                .collect(),
        }
    }

    /// Drops every column from `len` onwards.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len() {
            return;
        }
        let d = self.embed_dim;
        for (k, v) in self.keys.iter_mut().zip(self.values.iter_mut()) {
            k.truncate(len * d);
            v.truncate(len * d);
        }
        self.positions.truncate(len);
    }

    /// Appends a column computed elsewhere (for example in a sibling cache).
    pub fn push_column(&mut self, column: &KvColumn, position: usize) -> Result<()> {
        if self.len() >= self.capacity {
            return Err(Error::Capacity {
                what: "kv cache",
                needed: self.len() + 1,
                capacity: self.capacity,
            });
        }
        for (layer, (k, v)) in column.keys.iter().zip(&column.values).enumerate() {
            self.keys[layer].extend_from_slice(k);
            self.values[layer].extend_from_slice(v);
        }
        self.positions.push(position);
        Ok(())
    }
}

/// Row-major `[len × V]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    pub len: usize,
    pub vocab_size: usize,
    pub data: Vec<f32>,
}

impl LogitsMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn last(&self) -> &[f32] {
        self.row(self.len - 1)
    }
}

/// A decoder bound to shared weights plus a session-local input embedding.
#[derive(Debug, Clone)]
pub struct Transformer<'w> {
    config: &'w ModelConfig,
    weights: &'w Weights,
    input_embedding: Cow<'w, [f32]>,
}

impl<'w> Transformer<'w> {
    pub fn new(config: &'w ModelConfig, weights: &'w Weights) -> Self {
        Self {
            config,
            weights,
            input_embedding: Cow::Borrowed(&weights.token_embedding_in),
        }
    }

    /// Replaces the input token embedding for this session only.
    pub fn with_input_embedding(mut self, table: Vec<f32>) -> Result<Self> {
        if table.len() != self.config.vocab_size * self.config.embed_dim {
            return Err(Error::validation(
                "input embedding table has the wrong size",
            ));
        }
        self.input_embedding = Cow::Owned(table);
        Ok(self)
    }

    pub fn config(&self) -> &'w ModelConfig {
        self.config
    }

    pub fn weights(&self) -> &'w Weights {
        self.weights
    }

    pub fn input_embedding(&self) -> &[f32] {
        &self.input_embedding
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::Vocabulary {
                id: token,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, token: TokenId, position: usize, out: &mut [f32]) {
        let d = self.config.embed_dim;
        let tok = &self.input_embedding[token as usize * d..(token as usize + 1) * d];
        let pos = &self.weights.position_embedding[position * d..(position + 1) * d];
        for ((o, &a), &b) in out.iter_mut().zip(tok).zip(pos) {
            *o = a + b;
        }
    }

    fn output_logits(&self, hidden: &[f32], logits: &mut [f32]) {
        let d = self.config.embed_dim;
        let mut normed = vec![0.0; d];
        layer_norm(
            hidden,
            &self.weights.final_ln_gain,
            &self.weights.final_ln_bias,
            self.config.layernorm_eps,
            &mut normed,
        );
        for (l, row) in logits
            .iter_mut()
            .zip(self.weights.token_embedding_out.chunks_exact(d))
        {
            *l = dot(&normed, row);
        }
    }

    fn mlp(&self, layer: &LayerWeights, x: &mut [f32]) {
        let d = self.config.embed_dim;
        let mut h = vec![0.0; d];
        layer_norm(
            x,
            &layer.ln2_gain,
            &layer.ln2_bias,
            self.config.layernorm_eps,
            &mut h,
        );
        let mut fc = vec![0.0; 4 * d];
        linear(&h, &layer.mlp_fc_weight, &layer.mlp_fc_bias, &mut fc);
        fc.iter_mut().for_each(|v| *v = gelu(*v));
        let mut proj = vec![0.0; d];
        linear(&fc, &layer.mlp_proj_weight, &layer.mlp_proj_bias, &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }
    }

    /// Runs the whole sequence at positions `0..len` with causal masking.
    /// Row `i` of the result holds next-token logits after position `i`.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<(LogitsMatrix, KVCache)> {
        let cfg = self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::usage("forward_full needs at least one token"));
        }
        if n > cfg.context_len {
            return Err(Error::Capacity {
                what: "sequence",
                needed: n,
                capacity: cfg.context_len,
            });
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let (d, hd, eps) = (cfg.embed_dim, cfg.head_dim(), cfg.layernorm_eps);
        let scale = 1.0 / (hd as f32).sqrt();

        let mut x = vec![0.0f32; n * d];
        for (i, (&tok, row)) in tokens.iter().zip(x.chunks_exact_mut(d)).enumerate() {
            self.embed(tok, i, row);
        }

        let mut cache = KVCache::new(cfg);
        let mut h = vec![0.0f32; d];
        let mut qkv = vec![0.0f32; n * 3 * d];
        let mut attn = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; n];
        let mut proj = vec![0.0f32; d];

        for (li, layer) in self.weights.layers.iter().enumerate() {
            for (xi, qkv_row) in x.chunks_exact(d).zip(qkv.chunks_exact_mut(3 * d)) {
                layer_norm(xi, &layer.ln1_gain, &layer.ln1_bias, eps, &mut h);
                linear(&h, &layer.qkv_weight, &layer.qkv_bias, qkv_row);
            }
            attn.iter_mut().for_each(|v| *v = 0.0);
            for head in 0..cfg.n_heads {
                let off = head * hd;
                for i in 0..n {
                    let q = &qkv[i * 3 * d + off..i * 3 * d + off + hd];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &qkv[j * 3 * d + d + off..j * 3 * d + d + off + hd];
                        *s = dot(q, k) * scale;
                        if j > i {
                            *s += CAUSAL_MASK;
                        }
                    }
                    softmax_in_place(&mut scores);
                    let out = &mut attn[i * d + off..i * d + off + hd];
                    for (j, &a) in scores.iter().enumerate() {
                        let v = &qkv[j * 3 * d + 2 * d + off..j * 3 * d + 2 * d + off + hd];
                        for (o, &vv) in out.iter_mut().zip(v) {
                            *o += a * vv;
                        }
                    }
                }
            }
            for (xi, ai) in x.chunks_exact_mut(d).zip(attn.chunks_exact(d)) {
                linear(
                    ai,
                    &layer.attn_proj_weight,
                    &layer.attn_proj_bias,
                    &mut proj,
                );
                for (a, b) in xi.iter_mut().zip(&proj) {
                    *a += b;
                }
                self.mlp(layer, xi);
            }
            let keys = &mut cache.keys[li];
            let values = &mut cache.values[li];
            for row in qkv.chunks_exact(3 * d) {
                keys.extend_from_slice(&row[d..2 * d]);
                values.extend_from_slice(&row[2 * d..]);
            }
        }
        cache.positions = (0..n).collect();

        let v = cfg.vocab_size;
        let mut data = vec![0.0f32; n * v];
        for (xi, out) in x.chunks_exact(d).zip(data.chunks_exact_mut(v)) {
            self.output_logits(xi, out);
        }
        Ok((
            LogitsMatrix {
                len: n,
                vocab_size: v,
                data,
            },
            cache,
        ))
    }

    fn check_step(&self, cache: &KVCache, token: TokenId, position: usize) -> Result<()> {
        let cap = self.config.context_len;
        if cache.len() + 1 > cap {
            return Err(Error::Capacity {
                what: "kv cache",
                needed: cache.len() + 1,
                capacity: cap,
            });
        }
        if position >= cap {
            return Err(Error::Capacity {
                what: "position",
                needed: position + 1,
                capacity: cap,
            });
        }
        self.check_token(token)
    }

    /// Feeds one token at an explicit position, appending one column to
    /// `cache`; returns the final hidden state (before the last layernorm).
    fn step_hidden(
        &self,
        cache: &mut KVCache,
        token: TokenId,
        position: usize,
    ) -> Result<Vec<f32>> {
        self.check_step(cache, token, position)?;
        let cfg = self.config;
        let (d, hd, eps) = (cfg.embed_dim, cfg.head_dim(), cfg.layernorm_eps);
        let scale = 1.0 / (hd as f32).sqrt();
        let t = cache.len() + 1;

        let mut x = vec![0.0f32; d];
        self.embed(token, position, &mut x);
        let mut h = vec![0.0f32; d];
        let mut qkv = vec![0.0f32; 3 * d];
        let mut attn = vec![0.0f32; d];
        let mut scores = vec![0.0f32; t];
        let mut proj = vec![0.0f32; d];

        for (li, layer) in self.weights.layers.iter().enumerate() {
            layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias, eps, &mut h);
            linear(&h, &layer.qkv_weight, &layer.qkv_bias, &mut qkv);
            cache.keys[li].extend_from_slice(&qkv[d..2 * d]);
            cache.values[li].extend_from_slice(&qkv[2 * d..]);
            let keys = &cache.keys[li];
            let values = &cache.values[li];

            attn.iter_mut().for_each(|v| *v = 0.0);
            for head in 0..cfg.n_heads {
                let off = head * hd;
                let q = &qkv[off..off + hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(q, &keys[j * d + off..j * d + off + hd]) * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[off..off + hd];
                for (j, &a) in scores.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&values[j * d + off..j * d + off + hd]) {
                        *o += a * vv;
                    }
                }
            }
            linear(
                &attn,
                &layer.attn_proj_weight,
                &layer.attn_proj_bias,
                &mut proj,
            );
            for (a, b) in x.iter_mut().zip(&proj) {
                *a += b;
            }
            self.mlp(layer, &mut x);
        }
        cache.positions.push(position);
        Ok(x)
    }

    /// Incremental decode: appends exactly one KV column per layer and
    /// returns next-token logits.
    pub fn forward_step(
        &self,
        cache: &mut KVCache,
        token: TokenId,
        position: usize,
    ) -> Result<Vec<f32>> {
        let hidden = self.step_hidden(cache, token, position)?;
        let mut logits = vec![0.0f32; self.config.vocab_size];
        self.output_logits(&hidden, &mut logits);
        Ok(logits)
    }

    /// Like [`Transformer::forward_step`] but skips the output projection.
    pub fn forward_step_kv(
        &self,
        cache: &mut KVCache,
        token: TokenId,
        position: usize,
    ) -> Result<()> {
        self.step_hidden(cache, token, position).map(|_| ())
    }

    /// Feeds `tokens` one at a time with positions starting at
    /// `start_position`, returning the logits after the last one.
    pub fn extend(
        &self,
        cache: &mut KVCache,
        tokens: &[TokenId],
        start_position: usize,
    ) -> Result<Option<Vec<f32>>> {
        let mut last = None;
        for (i, &tok) in tokens.iter().enumerate() {
            if i + 1 == tokens.len() {
                last = Some(self.forward_step(cache, tok, start_position + i)?);
            } else {
                self.forward_step_kv(cache, tok, start_position + i)?;
            }
        }
        Ok(last)
    }
}

pub fn forward_full(
    weights: &Weights,
    config: &ModelConfig,
    tokens: &[TokenId],
) -> Result<(LogitsMatrix, KVCache)> {
    Transformer::new(config, weights).forward_full(tokens)
}

pub fn forward_step(
    weights: &Weights,
    config: &ModelConfig,
    cache: &mut KVCache,
    token: TokenId,
    position: usize,
) -> Result<Vec<f32>> {
    Transformer::new(config, weights).forward_step(cache, token, position)
}
