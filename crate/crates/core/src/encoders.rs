//! Vision and text encoders, the shared projection, and batch normalization
//! whose running statistics can be frozen independently of its affine weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NormStats, Var};
use crate::nn::{key_padding_bias, Binder, ParamSet};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of the four conv blocks.
    pub vision_widths: [usize; 4],
    pub pool_heads: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub text_ffn: usize,
    pub fusion_width: usize,
    pub fusion_heads: usize,
    pub fusion_layers: usize,
    pub fusion_ffn: usize,
    pub bn_momentum: f32,
    pub bn_eps: f32,
    pub init_tau: f64,
    /// One temperature for every contrastive term, or one per term.
    pub shared_temperature: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            vision_widths: [8, 16, 32, 64],
            pool_heads: 4,
            embed_dim: 64,
            max_len: 32,
            text_width: 64,
            text_heads: 4,
            text_layers: 2,
            text_ffn: 128,
            fusion_width: 64,
            fusion_heads: 4,
            fusion_layers: 2,
            fusion_ffn: 128,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            init_tau: 0.07,
            shared_temperature: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return cfg(format!("model.image_size must be a multiple of 16, got {}", self.image_size));
        }
        if self.vision_widths.contains(&0) || self.embed_dim == 0 {
            return cfg("model widths must be positive".into());
        }
        if !self.vision_widths[3].is_multiple_of(self.pool_heads) {
            return cfg("model.pool_heads must divide the last vision width".into());
        }
        if !self.text_width.is_multiple_of(self.text_heads) || !self.fusion_width.is_multiple_of(self.fusion_heads) {
            return cfg("attention heads must divide their width".into());
        }
        if self.max_len < 2 {
            return cfg("model.max_len must be at least 2".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || self.bn_eps <= 0.0 {
            return cfg("model.bn_momentum must lie in (0, 1] and bn_eps be positive".into());
        }
        if !(self.init_tau > 0.0 && self.init_tau.is_finite()) {
            return cfg(format!("model.init_tau = {}", self.init_tau));
        }
        Ok(())
    }

    /// Side length of the pre-pooling feature map.
    pub fn feature_extent(&self) -> usize {
        self.image_size / 16
    }

    pub fn feature_channels(&self) -> usize {
        self.vision_widths[3]
    }
}

/// Running statistics of one batch-norm layer. The affine weight and bias are
/// ordinary parameters and keep training when `frozen` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub epsilon: f32,
    pub frozen: bool,
}

impl BnLayerState {
    pub fn new(channels: usize, momentum: f32, epsilon: f32) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Batch norm inside a tape.
///
/// Training and not frozen: batch statistics, running estimates updated with
/// momentum. Frozen or eval: running estimates, left untouched.
pub fn batchnorm_forward(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Var,
    state: &mut BnLayerState,
    training: bool,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != state.channels() {
        return Err(Error::Input(format!(
            "batch norm with {} channels got input {:?}",
            state.channels(),
            shape
        )));
    }
    if training && !state.frozen {
        if shape[0] == 0 {
            return Err(Error::Degenerate("batch norm in training mode on an empty batch".into()));
        }
        let (y, moments) = g.batch_norm(x, weight, bias, NormStats::Batch, state.epsilon);
        let m = moments.expect("batch statistics");
        let mom = state.momentum;
        for c in 0..state.channels() {
            state.running_mean[c] = (1.0 - mom) * state.running_mean[c] + mom * m.mean[c];
            state.running_var[c] = (1.0 - mom) * state.running_var[c] + mom * m.var_unbiased[c];
        }
        Ok(y)
    } else {
        let (y, _) = g.batch_norm(
            x,
            weight,
            bias,
            NormStats::Fixed {
                mean: &state.running_mean,
                var: &state.running_var,
            },
            state.epsilon,
        );
        Ok(y)
    }
}

/// Tensor-level convenience wrapper around [`batchnorm_forward`].
pub fn batchnorm_tensor(
    x: &Tensor,
    state: &mut BnLayerState,
    weight: &[f32],
    bias: &[f32],
    training: bool,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::from_vec(&[weight.len()], weight.to_vec()));
    let b = g.constant(Tensor::from_vec(&[bias.len()], bias.to_vec()));
    let y = batchnorm_forward(&mut g, xv, w, b, state, training)?;
    Ok(g.value(y).clone())
}

/// `B×D` projected embeddings whose rows have unit L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix(Tensor);

impl EmbeddingMatrix {
    pub const NORM_TOLERANCE: f32 = 1e-5;

    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(Error::Input(format!("embedding matrix must be 2-D, got {:?}", t.shape())));
        }
        for i in 0..t.dim(0) {
            let n = t.row(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > Self::NORM_TOLERANCE as f64 {
                return Err(Error::Input(format!("embedding row {i} has norm {n}")));
            }
        }
        Ok(Self(t))
    }

    pub fn rows(&self) -> usize {
        self.0.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.0.dim(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.0.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// `normalize(features · projection)` row-wise.
pub fn project_and_normalize(features: &Tensor, projection: &Tensor) -> Result<EmbeddingMatrix> {
    if features.ndim() != 2 || projection.ndim() != 2 || features.dim(1) != projection.dim(0) {
        return Err(Error::Input(format!(
            "cannot project {:?} with {:?}",
            features.shape(),
            projection.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let w = g.constant(projection.clone());
    let y = g.linear(x, w, None);
    let y = g.l2_normalize(y)?;
    EmbeddingMatrix::new(g.value(y).clone())
}

/// Registers every vision-encoder parameter under `vision.`.
pub fn init_vision_params<R: Rng + ?Sized>(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut R) {
    let mut c_in = cfg.in_channels;
    for (i, &c_out) in cfg.vision_widths.iter().enumerate() {
        let fan_in = c_in * 9;
        let std = (2.0 / fan_in as f32).sqrt();
        params.insert(format!("vision.block{i}.conv.w"), Tensor::randn(&[c_out, fan_in], std, rng));
        params.insert(format!("vision.block{i}.bn.weight"), Tensor::full(&[c_out], 1.0));
        params.insert(format!("vision.block{i}.bn.bias"), Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
    let c = cfg.feature_channels();
    let positions = cfg.feature_extent().pow(2);
    params.insert("vision.pool.pos", Tensor::randn(&[positions, c], 0.02, rng));
    params.insert("vision.pool.query", Tensor::randn(&[c], 1.0 / (c as f32).sqrt(), rng));
    params.add_linear("vision.pool.k", c, c, rng);
    params.add_linear("vision.pool.v", c, c, rng);
    params.add_linear("vision.pool.o", c, c, rng);
    params.insert(
        "vision.proj",
        Tensor::randn(&[c, cfg.embed_dim], 1.0 / (c as f32).sqrt(), rng),
    );
}

pub fn init_bn_states(cfg: &ModelConfig) -> Vec<BnLayerState> {
    cfg.vision_widths
        .iter()
        .map(|&c| BnLayerState::new(c, cfg.bn_momentum, cfg.bn_eps))
        .collect()
}

/// Registers every text-encoder parameter under `text.`.
pub fn init_text_params<R: Rng + ?Sized>(cfg: &ModelConfig, vocab_size: usize, params: &mut ParamSet, rng: &mut R) {
    let w = cfg.text_width;
    params.insert("text.tok_emb", Tensor::randn(&[vocab_size, w], 0.02, rng));
    params.insert("text.pos_emb", Tensor::randn(&[cfg.max_len, w], 0.02, rng));
    for l in 0..cfg.text_layers {
        params.add_transformer_block(&format!("text.block{l}"), w, cfg.text_ffn, rng);
    }
    params.add_layer_norm("text.ln_f", w);
    params.insert(
        "text.proj",
        Tensor::randn(&[w, cfg.embed_dim], 1.0 / (w as f32).sqrt(), rng),
    );
}

fn validate_images(images: &Tensor, cfg: &ModelConfig) -> Result<()> {
    let expect = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if images.ndim() != 4 || images.shape()[1..] != expect {
        return Err(Error::Input(format!(
            "image batch {:?} does not match [B, {}, {}, {}]",
            images.shape(),
            expect[0],
            expect[1],
            expect[2]
        )));
    }
    if images.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Input("NaN in image batch".into()));
    }
    Ok(())
}

/// Conv stack up to the pre-pooling `[B, C, S/16, S/16]` map. Updates (or
/// reads) the batch-norm running statistics in `bn` according to `training`.
pub fn vision_features(
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    bn: &mut [BnLayerState],
    images: &Tensor,
    training: bool,
) -> Result<Var> {
    validate_images(images, cfg)?;
    let mut x = b.g.constant(images.clone());
    for (i, state) in bn.iter_mut().enumerate() {
        let w = b.p(&format!("vision.block{i}.conv.w"));
        x = b.g.conv3x3(x, w);
        let weight = b.p(&format!("vision.block{i}.bn.weight"));
        let bias = b.p(&format!("vision.block{i}.bn.bias"));
        x = batchnorm_forward(&mut b.g, x, weight, bias, state, training)?;
        x = b.g.relu(x);
        x = b.g.avg_pool2(x);
    }
    Ok(x)
}

/// Flattens a `[B, C, H, W]` map into `[B, H·W, C]` tokens.
pub fn spatial_tokens(g: &mut Graph, feature_map: Var) -> Var {
    let s = g.shape(feature_map).to_vec();
    let t = g.permute(feature_map, &[0, 2, 3, 1]);
    g.reshape(t, &[s[0], s[2] * s[3], s[1]])
}

/// Single learned-query multi-head attention pooling of the feature map.
/// `drop_mask` (same extent as the map) is applied first: the DropBlock
/// insertion point.
pub fn attention_pool(b: &mut Binder<'_>, cfg: &ModelConfig, feature_map: Var, drop_mask: Option<Vec<f32>>) -> Var {
    let mut fmap = feature_map;
    if let Some(mask) = drop_mask {
        fmap = b.g.mul_const(fmap, mask);
    }
    let tokens = spatial_tokens(&mut b.g, fmap);
    let shape = b.g.shape(tokens).to_vec();
    let (batch, positions, c) = (shape[0], shape[1], shape[2]);
    let heads = cfg.pool_heads;
    let dh = c / heads;
    let pos = b.p("vision.pool.pos");
    let tokens = b.g.add_broadcast(tokens, pos);
    let k = b.linear(tokens, "vision.pool.k");
    let v = b.linear(tokens, "vision.pool.v");
    let k = b.g.reshape(k, &[batch, positions, heads, dh]);
    let q = b.p("vision.pool.query");
    let q = b.g.reshape(q, &[heads, dh]);
    let scores = b.g.mul_broadcast(k, q);
    let scores = b.g.sum_last(scores);
    let scores = b.g.permute(scores, &[0, 2, 1]);
    let scores = b.g.scale(scores, 1.0 / (dh as f32).sqrt());
    let attn = b.g.softmax(scores);
    let attn = b.g.reshape(attn, &[batch * heads, 1, positions]);
    let v = b.g.reshape(v, &[batch, positions, heads, dh]);
    let v = b.g.permute(v, &[0, 2, 1, 3]);
    let v = b.g.reshape(v, &[batch * heads, positions, dh]);
    let pooled = b.g.bmm(attn, v, false);
    let pooled = b.g.reshape(pooled, &[batch, c]);
    b.linear(pooled, "vision.pool.o")
}

/// `features · proj` followed by row normalization, inside the tape.
pub fn project(b: &mut Binder<'_>, features: Var, proj: &str) -> Result<Var> {
    let w = b.p(proj);
    let y = b.g.linear(features, w, None);
    b.g.l2_normalize(y)
}

/// Validates token ids and returns per-position key validity (`false` = PAD).
pub fn token_validity(tokens: &[usize], batch: usize, len: usize, vocab_size: usize) -> Result<Vec<Vec<bool>>> {
    if tokens.len() != batch * len {
        return Err(Error::Input(format!("{} token ids for a {batch}x{len} batch", tokens.len())));
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Input(format!("token id {t} outside vocabulary of {vocab_size}")));
    }
    Ok(tokens
        .chunks_exact(len.max(1))
        .map(|row| row.iter().map(|&t| t != crate::datagen::PAD).collect())
        .collect())
}

/// Text transformer over `[B, L]` ids. `prompt` optionally names a `[P, W]`
/// parameter appended after the tokens as extra always-visible positions.
/// Returns per-position features `[B, L(+P), W]`.
pub fn text_features(
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    vocab_size: usize,
    tokens: &[usize],
    batch: usize,
    prompt: Option<&str>,
) -> Result<Var> {
    let len = cfg.max_len;
    let mut valid = token_validity(tokens, batch, len, vocab_size)?;
    let table = b.p("text.tok_emb");
    let x = b.g.embedding(table, tokens, &[batch, len]);
    let pos = b.p("text.pos_emb");
    let mut x = b.g.add_broadcast(x, pos);
    if let Some(name) = prompt {
        let p = b.p(name);
        let (plen, w) = (b.g.shape(p)[0], b.g.shape(p)[1]);
        let zeros = b.g.constant(Tensor::zeros(&[batch, plen, w]));
        let extra = b.g.add_broadcast(zeros, p);
        x = b.g.concat1(&[x, extra]);
        for row in &mut valid {
            row.extend(std::iter::repeat_n(true, plen));
        }
    }
    let bias = key_padding_bias(&valid, cfg.text_heads);
    for l in 0..cfg.text_layers {
        x = b.transformer_block(x, &format!("text.block{l}"), cfg.text_heads, Some(&bias));
    }
    Ok(b.layer_norm(x, "text.ln_f"))
}

/// Feature at the CLS position, `[B, W]`.
pub fn cls_feature(g: &mut Graph, features: Var) -> Var {
    let s = g.shape(features).to_vec();
    let cls = g.narrow1(features, 0, 1);
    g.reshape(cls, &[s[0], s[2]])
}
