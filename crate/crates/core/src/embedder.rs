//! Joint text/image embedding model trained contrastively on the scene domain.
//!
//! Text side: token table -> per-token `tanh` feature map -> weighted mean pool
//! -> linear projection -> L2 normalisation. Per-token weights scale each
//! token's contribution to the pool, which is the amplification knob used by
//! attention refinement. Image side: average pool -> SiLU MLP -> L2 normalisation.

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ParamBlob};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Block, LayoutBuilder};
use crate::scene::{self, Image, PartialSceneSpec, SceneSpec, SlotValue};

pub const NULL_TOKEN: &str = "<null>";
pub const UNK_TOKEN: &str = "<unk>";

const FILLER_WORDS: &[&str] = &[
    "a", "an", "the", "image", "showing", "object", "placed", "on", "in", "with", "background",
    "shape", "no", "salient",
];

/// Closed vocabulary: null and unknown markers, slot words, then filler words.
pub fn default_vocab() -> Vec<String> {
    let mut vocab = vec![NULL_TOKEN.to_string(), UNK_TOKEN.to_string()];
    for slot in scene::Slot::ALL {
        vocab.extend(slot.values().into_iter().map(String::from));
    }
    vocab.extend(FILLER_WORDS.iter().map(|w| w.to_string()));
    vocab
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub image_hidden: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub pool: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            dim: 32,
            token_dim: 32,
            text_hidden: 64,
            image_hidden: 128,
            image_height: scene::IMAGE_SIZE,
            image_width: scene::IMAGE_SIZE,
            image_channels: scene::CHANNELS,
            pool: 2,
        }
    }
}

impl EmbedderConfig {
    fn pooled_len(&self) -> usize {
        (self.image_height / self.pool) * (self.image_width / self.pool) * self.image_channels
    }

    fn image_len(&self) -> usize {
        self.image_height * self.image_width * self.image_channels
    }
}

#[derive(Debug, Clone)]
struct Layout {
    table: Block,
    tok_w: Block,
    tok_b: Block,
    proj_w: Block,
    proj_b: Block,
    img_w1: Block,
    img_b1: Block,
    img_w2: Block,
    img_b2: Block,
    total: usize,
}

impl Layout {
    fn new(cfg: &EmbedderConfig, vocab_len: usize) -> Self {
        let mut b = LayoutBuilder::default();
        let table = b.matrix(vocab_len, cfg.token_dim);
        let tok_w = b.matrix(cfg.text_hidden, cfg.token_dim);
        let tok_b = b.vector(cfg.text_hidden);
        let proj_w = b.matrix(cfg.dim, cfg.text_hidden);
        let proj_b = b.vector(cfg.dim);
        let img_w1 = b.matrix(cfg.image_hidden, cfg.pooled_len());
        let img_b1 = b.vector(cfg.image_hidden);
        let img_w2 = b.matrix(cfg.dim, cfg.image_hidden);
        let img_b2 = b.vector(cfg.dim);
        Layout { table, tok_w, tok_b, proj_w, proj_b, img_w1, img_b1, img_w2, img_b2, total: b.total() }
    }
}

/// Trainable stand-in for a pretrained joint text-image encoder.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    config: EmbedderConfig,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    layout: Layout,
    params: Vec<f64>,
}

struct TextCache {
    vectors: Vec<Vec<f64>>,
    weights: Vec<f64>,
    weight_sum: f64,
    features: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    norm: f64,
    out: Vec<f64>,
}

/// Gradient of `1 - similarity(embed_text(tokens, weights), target)`.
#[derive(Debug, Clone)]
pub struct TextGrad {
    pub loss: f64,
    /// One gradient vector per token position, with respect to that position's token vector.
    pub token_grads: Vec<Vec<f64>>,
    pub weight_grads: Vec<f64>,
}

impl TextGrad {
    pub fn token_grad_norms(&self) -> Vec<f64> {
        self.token_grads.iter().map(|g| nn::l2_norm(g)).collect()
    }
}

impl EmbeddingModel {
    pub fn new(config: EmbedderConfig, vocab: Vec<String>, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.token_dim == 0 || config.pool == 0 {
            return Err(Error::InvalidArgument("embedder dimensions must be positive".into()));
        }
        if !vocab.iter().any(|w| w == UNK_TOKEN) {
            return Err(Error::InvalidArgument(format!("vocabulary must contain {UNK_TOKEN}")));
        }
        let layout = Layout::new(&config, vocab.len());
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nn::init_normal(&mut params, &layout.table, 1.0, &mut rng);
        nn::init_normal(&mut params, &layout.tok_w, 1.0 / (config.token_dim as f64).sqrt(), &mut rng);
        nn::init_normal(&mut params, &layout.proj_w, 1.0 / (config.text_hidden as f64).sqrt(), &mut rng);
        nn::init_normal(&mut params, &layout.img_w1, 1.0 / (config.pooled_len() as f64).sqrt(), &mut rng);
        nn::init_normal(&mut params, &layout.img_w2, 1.0 / (config.image_hidden as f64).sqrt(), &mut rng);
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(EmbeddingModel { config, vocab, index, layout, params })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.index[UNK_TOKEN])
    }

    /// Token-table rows for each position of `tokens` (unknown words share the UNK row).
    pub fn token_vectors(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        let table = self.layout.table.mat(&self.params);
        tokens.iter().map(|t| table.row(self.token_id(t)).to_vec()).collect()
    }

    fn check_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::EmptyTokens);
        }
        match weights {
            None => Ok(vec![1.0; n]),
            Some(w) if w.len() != n => Err(Error::InvalidArgument(format!(
                "expected {n} token weights, got {}",
                w.len()
            ))),
            Some(w) => {
                if let Some((index, &weight)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                    return Err(Error::InvalidWeight { index, weight });
                }
                Ok(w.to_vec())
            }
        }
    }

    fn text_forward(&self, vectors: Vec<Vec<f64>>, weights: Vec<f64>) -> TextCache {
        let tok_w = self.layout.tok_w.mat(&self.params);
        let tok_b = self.layout.tok_b.vec(&self.params);
        let hidden = self.config.text_hidden;
        let weight_sum: f64 = weights.iter().sum();
        let mut pooled = vec![0.0; hidden];
        let features: Vec<Vec<f64>> = vectors
            .iter()
            .zip(&weights)
            .map(|(e, &w)| {
                let f: Vec<f64> = (0..hidden)
                    .map(|k| (nn::dot(tok_w.row(k).as_slice().unwrap(), e) + tok_b[k]).tanh())
                    .collect();
                for (p, v) in pooled.iter_mut().zip(&f) {
                    *p += w * v / weight_sum;
                }
                f
            })
            .collect();
        let proj_w = self.layout.proj_w.mat(&self.params);
        let proj_b = self.layout.proj_b.vec(&self.params);
        let u: Vec<f64> = (0..self.config.dim)
            .map(|k| nn::dot(proj_w.row(k).as_slice().unwrap(), &pooled) + proj_b[k])
            .collect();
        let norm = nn::l2_norm(&u).max(1e-12);
        let out = u.iter().map(|v| v / norm).collect();
        TextCache { vectors, weights, weight_sum, features, pooled, norm, out }
    }

    /// Back-propagates `g_out` through the text tower. Accumulates parameter
    /// gradients into `param_grad` when given; returns per-position token-vector
    /// gradients and per-position weight gradients.
    fn text_backward(
        &self,
        cache: &TextCache,
        g_out: &[f64],
        mut param_grad: Option<&mut [f64]>,
        token_ids: Option<&[usize]>,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let dim = self.config.dim;
        let hidden = self.config.text_hidden;
        let v = &cache.out;
        let vg = nn::dot(v, g_out);
        let g_u: Vec<f64> = (0..dim).map(|k| (g_out[k] - v[k] * vg) / cache.norm).collect();
        let proj_w = self.layout.proj_w.mat(&self.params);
        let mut g_p = vec![0.0; hidden];
        for k in 0..dim {
            for (j, gp) in g_p.iter_mut().enumerate() {
                *gp += proj_w[[k, j]] * g_u[k];
            }
        }
        if let Some(grad) = param_grad.as_deref_mut() {
            let mut gw = self.layout.proj_w.mat_mut(grad);
            for k in 0..dim {
                for j in 0..hidden {
                    gw[[k, j]] += g_u[k] * cache.pooled[j];
                }
            }
            let mut gb = self.layout.proj_b.vec_mut(grad);
            for k in 0..dim {
                gb[k] += g_u[k];
            }
        }
        let tok_w = self.layout.tok_w.mat(&self.params);
        let td = self.config.token_dim;
        let mut token_grads = Vec::with_capacity(cache.vectors.len());
        let mut weight_grads = Vec::with_capacity(cache.vectors.len());
        for (pos, (feat, &w)) in cache.features.iter().zip(&cache.weights).enumerate() {
            let diff: f64 = feat.iter().zip(&cache.pooled).zip(&g_p).map(|((f, p), g)| (f - p) * g).sum();
            weight_grads.push(diff / cache.weight_sum);
            let g_pre: Vec<f64> = (0..hidden)
                .map(|k| w / cache.weight_sum * g_p[k] * (1.0 - feat[k] * feat[k]))
                .collect();
            let mut g_e = vec![0.0; td];
            for k in 0..hidden {
                let row = tok_w.row(k);
                for d in 0..td {
                    g_e[d] += row[d] * g_pre[k];
                }
            }
            if let Some(grad) = param_grad.as_deref_mut() {
                let e = &cache.vectors[pos];
                {
                    let mut gw = self.layout.tok_w.mat_mut(grad);
                    for k in 0..hidden {
                        for d in 0..td {
                            gw[[k, d]] += g_pre[k] * e[d];
                        }
                    }
                }
                {
                    let mut gb = self.layout.tok_b.vec_mut(grad);
                    for k in 0..hidden {
                        gb[k] += g_pre[k];
                    }
                }
                if let Some(ids) = token_ids {
                    let mut gt = self.layout.table.mat_mut(grad);
                    let mut row = gt.row_mut(ids[pos]);
                    for d in 0..td {
                        row[d] += g_e[d];
                    }
                }
            }
            token_grads.push(g_e);
        }
        (token_grads, weight_grads)
    }

    /// Unit-norm text embedding. Weights, when given, must be positive and
    /// one per token; all-ones weights are equivalent to none.
    pub fn embed_text(&self, tokens: &[String], weights: Option<&[f64]>) -> Result<Vec<f64>> {
        let w = Self::check_weights(tokens.len(), weights)?;
        Ok(self.text_forward(self.token_vectors(tokens), w).out)
    }

    /// Text embedding from explicit per-position token vectors.
    pub fn embed_text_vectors(&self, vectors: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
        let w = Self::check_weights(vectors.len(), weights)?;
        self.check_vectors(vectors)?;
        Ok(self.text_forward(vectors.to_vec(), w).out)
    }

    fn check_vectors(&self, vectors: &[Vec<f64>]) -> Result<()> {
        if vectors.iter().any(|v| v.len() != self.config.token_dim) {
            return Err(Error::InvalidArgument("token vector dimension mismatch".into()));
        }
        Ok(())
    }

    /// Loss `1 - similarity(text, target)` and its gradient with respect to
    /// each position's token vector and weight.
    pub fn similarity_loss_grad(
        &self,
        tokens: &[String],
        weights: Option<&[f64]>,
        target: &[f64],
    ) -> Result<TextGrad> {
        self.similarity_loss_grad_vectors(&self.token_vectors(tokens), weights, target)
    }

    pub fn similarity_loss_grad_vectors(
        &self,
        vectors: &[Vec<f64>],
        weights: Option<&[f64]>,
        target: &[f64],
    ) -> Result<TextGrad> {
        let w = Self::check_weights(vectors.len(), weights)?;
        self.check_vectors(vectors)?;
        if target.len() != self.config.dim {
            return Err(Error::InvalidArgument("target dimension mismatch".into()));
        }
        let cache = self.text_forward(vectors.to_vec(), w);
        let loss = 1.0 - nn::dot(&cache.out, target);
        let g_out: Vec<f64> = target.iter().map(|t| -t).collect();
        let (token_grads, weight_grads) = self.text_backward(&cache, &g_out, None, None);
        Ok(TextGrad { loss, token_grads, weight_grads })
    }

    /// Gradient of `1 - similarity(text, target)` with respect to all model parameters.
    pub fn similarity_loss_param_grad(&self, tokens: &[String], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        let w = Self::check_weights(tokens.len(), None)?;
        let ids: Vec<usize> = tokens.iter().map(|t| self.token_id(t)).collect();
        let cache = self.text_forward(self.token_vectors(tokens), w);
        let loss = 1.0 - nn::dot(&cache.out, target);
        let g_out: Vec<f64> = target.iter().map(|t| -t).collect();
        let mut grad = vec![0.0; self.params.len()];
        self.text_backward(&cache, &g_out, Some(&mut grad), Some(&ids));
        Ok((loss, grad))
    }

    fn pool_image(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        if pixels.len() != self.config.image_len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} image values, got {}",
                self.config.image_len(),
                pixels.len()
            )));
        }
        let c = &self.config;
        Ok(nn::avg_pool(pixels, c.image_height, c.image_width, c.image_channels, c.pool))
    }

    pub fn embed_image(&self, img: &Image) -> Vec<f64> {
        self.embed_image_raw(img.as_slice()).expect("domain images match the default embedder shape")
    }

    pub fn embed_image_raw(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        let x = self.pool_image(pixels)?;
        let xs = Array2::from_shape_vec((1, x.len()), x).expect("shape");
        let (out, _) = self.image_forward(&xs);
        Ok(out.row(0).to_vec())
    }

    /// Batched image tower. Returns unit embeddings and the cache for backward.
    fn image_forward(&self, xs: &Array2<f64>) -> (Array2<f64>, ImageCache) {
        let w1 = self.layout.img_w1.mat(&self.params);
        let b1 = self.layout.img_b1.vec(&self.params);
        let w2 = self.layout.img_w2.mat(&self.params);
        let b2 = self.layout.img_b2.vec(&self.params);
        let pre = xs.dot(&w1.t()) + &b1;
        let hid = pre.mapv(nn::silu);
        let u = hid.dot(&w2.t()) + &b2;
        let norms: Vec<f64> = u.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
        let mut out = u.clone();
        for (mut row, n) in out.axis_iter_mut(Axis(0)).zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        (out.clone(), ImageCache { xs: xs.clone(), pre, hid, out, norms })
    }

    fn image_backward(&self, cache: &ImageCache, g_out: &Array2<f64>, grad: &mut [f64]) {
        let mut g_u = g_out.clone();
        for (i, mut row) in g_u.axis_iter_mut(Axis(0)).enumerate() {
            let v = cache.out.row(i);
            let vg = v.dot(&g_out.row(i));
            for k in 0..row.len() {
                row[k] = (row[k] - v[k] * vg) / cache.norms[i];
            }
        }
        let w2 = self.layout.img_w2.mat(&self.params);
        let g_hid = g_u.dot(&w2);
        let g_pre = g_hid * &cache.pre.mapv(nn::silu_grad);
        {
            let mut gw2 = self.layout.img_w2.mat_mut(grad);
            gw2 += &g_u.t().dot(&cache.hid);
        }
        {
            let mut gb2 = self.layout.img_b2.vec_mut(grad);
            gb2 += &g_u.sum_axis(Axis(0));
        }
        {
            let mut gw1 = self.layout.img_w1.mat_mut(grad);
            gw1 += &g_pre.t().dot(&cache.xs);
        }
        let mut gb1 = self.layout.img_b1.vec_mut(grad);
        gb1 += &g_pre.sum_axis(Axis(0));
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        let ck = EmbedderCheckpoint {
            format: EMBEDDER_FORMAT.into(),
            version: checkpoint::VERSION,
            dim: self.config.dim,
            config: self.config,
            vocab: self.vocab.clone(),
            parameters: ParamBlob::encode(&self.params),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: EmbedderCheckpoint = serde_json::from_str(text)?;
        if ck.format != EMBEDDER_FORMAT || ck.version != checkpoint::VERSION {
            return Err(Error::Checkpoint(format!("unsupported {} v{}", ck.format, ck.version)));
        }
        let mut model = EmbeddingModel::new(ck.config, ck.vocab, 0)?;
        let params = ck.parameters.decode()?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }
}

struct ImageCache {
    xs: Array2<f64>,
    pre: Array2<f64>,
    hid: Array2<f64>,
    out: Array2<f64>,
    norms: Vec<f64>,
}

const EMBEDDER_FORMAT: &str = "cogen-embedder";

#[derive(Serialize, Deserialize)]
struct EmbedderCheckpoint {
    format: String,
    version: u32,
    dim: usize,
    config: EmbedderConfig,
    vocab: Vec<String>,
    parameters: ParamBlob,
}

/// Cosine similarity of two vectors, clamped to [-1, 1].
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = nn::l2_norm(a);
    let nb = nn::l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (nn::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// One text/image training pair. `scene`, when known, lets other in-batch
/// pairs whose text is consistent with it count as positives.
#[derive(Debug, Clone)]
pub struct ContrastivePair {
    pub text: String,
    pub image: Image,
    pub scene: Option<SceneSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub logit_scale: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { epochs: 40, batch_size: 64, lr: 2e-3, logit_scale: 10.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveRun {
    pub model: EmbeddingModel,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn text_constraints(text: &str) -> PartialSceneSpec {
    let mut spec = PartialSceneSpec::default();
    for w in scene::tokenize(text) {
        if let Some(v) = SlotValue::from_word(&w) {
            spec.set(v);
        }
    }
    spec
}

/// Symmetric in-batch contrastive objective and its gradient.
///
/// Returns the loss and accumulates the parameter gradient into `grad`.
fn contrastive_step(
    model: &EmbeddingModel,
    batch: &[&ContrastivePair],
    logit_scale: f64,
    grad: &mut [f64],
) -> f64 {
    let pooled_len = model.config.pooled_len();
    let mut xs = Array2::zeros((batch.len(), pooled_len));
    for (i, p) in batch.iter().enumerate() {
        let x = model.pool_image(p.image.as_slice()).expect("domain image");
        xs.row_mut(i).assign(&ndarray::ArrayView1::from(&x));
    }
    let texts: Vec<&str> = batch.iter().map(|p| p.text.as_str()).collect();
    let scenes: Vec<Option<SceneSpec>> = batch.iter().map(|p| p.scene).collect();
    contrastive_core(model, &texts, &scenes, xs, logit_scale, grad)
}

/// Objective over already-pooled image rows `xs`.
fn contrastive_core(
    model: &EmbeddingModel,
    texts: &[&str],
    scenes: &[Option<SceneSpec>],
    xs: Array2<f64>,
    logit_scale: f64,
    grad: &mut [f64],
) -> f64 {
    let b = texts.len();
    let tokens: Vec<Vec<String>> = texts.iter().map(|t| scene::tokenize(t)).collect();
    let caches: Vec<TextCache> = tokens
        .iter()
        .map(|t| model.text_forward(model.token_vectors(t), vec![1.0; t.len()]))
        .collect();
    let (img_emb, img_cache) = model.image_forward(&xs);

    // positives[i][j]: image j satisfies text i
    let constraints: Vec<PartialSceneSpec> = texts.iter().map(|t| text_constraints(t)).collect();
    let positive = |i: usize, j: usize| -> bool {
        if i == j || texts[i] == texts[j] {
            return true;
        }
        match scenes[j] {
            Some(s) => constraints[i].consistent_with(&s),
            None => false,
        }
    };

    let mut logits = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            logits[[i, j]] = logit_scale * nn::dot(&caches[i].out, img_emb.row(j).as_slice().unwrap());
        }
    }
    let mut g_logits = Array2::<f64>::zeros((b, b));
    let mut loss = 0.0;
    // text -> image (rows)
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let pos: Vec<usize> = (0..b).filter(|&j| positive(i, j)).collect();
        let q = 1.0 / pos.len() as f64;
        for j in 0..b {
            let p = (row[j] - max).exp() / z;
            g_logits[[i, j]] += p / (2.0 * b as f64);
        }
        for &j in &pos {
            loss -= q * (row[j] - max - z.ln()) / (2.0 * b as f64);
            g_logits[[i, j]] -= q / (2.0 * b as f64);
        }
    }
    // image -> text (columns)
    for j in 0..b {
        let col = logits.column(j);
        let max = col.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
        let pos: Vec<usize> = (0..b).filter(|&i| positive(i, j)).collect();
        let q = 1.0 / pos.len() as f64;
        for i in 0..b {
            let p = (col[i] - max).exp() / z;
            g_logits[[i, j]] += p / (2.0 * b as f64);
        }
        for &i in &pos {
            loss -= q * (col[i] - max - z.ln()) / (2.0 * b as f64);
            g_logits[[i, j]] -= q / (2.0 * b as f64);
        }
    }

    let dim = model.config.dim;
    let mut g_img = Array2::<f64>::zeros((b, dim));
    for i in 0..b {
        let mut g_text = vec![0.0; dim];
        for j in 0..b {
            let g = g_logits[[i, j]] * logit_scale;
            if g == 0.0 {
                continue;
            }
            let m = img_emb.row(j);
            for k in 0..dim {
                g_text[k] += g * m[k];
                g_img[[j, k]] += g * caches[i].out[k];
            }
        }
        let ids: Vec<usize> = tokens[i].iter().map(|t| model.token_id(t)).collect();
        model.text_backward(&caches[i], &g_text, Some(grad), Some(&ids));
    }
    model.image_backward(&img_cache, &g_img, grad);
    loss
}

/// Trains `model` with the symmetric in-batch contrastive objective.
/// Deterministic for a given seed.
pub fn train_contrastive(
    mut model: EmbeddingModel,
    pairs: &[ContrastivePair],
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<ContrastiveRun> {
    if cfg.batch_size < 2 || pairs.len() < 2 {
        return Err(Error::TooFewPairs(pairs.len().min(cfg.batch_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), model.params.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&ContrastivePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let mut grad = vec![0.0; model.params.len()];
            total += contrastive_step(&model, &batch, cfg.logit_scale, &mut grad);
            batches += 1;
            opt.step(&mut model.params, &grad);
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok(ContrastiveRun { model, epoch_losses })
}

/// Contrastive loss and full parameter gradient on one batch (exposed for gradient checks).
pub fn contrastive_loss_grad(
    model: &EmbeddingModel,
    pairs: &[ContrastivePair],
    logit_scale: f64,
) -> Result<(f64, Vec<f64>)> {
    if pairs.len() < 2 {
        return Err(Error::TooFewPairs(pairs.len()));
    }
    let batch: Vec<&ContrastivePair> = pairs.iter().collect();
    let mut grad = vec![0.0; model.params.len()];
    let loss = contrastive_step(model, &batch, logit_scale, &mut grad);
    Ok((loss, grad))
}
