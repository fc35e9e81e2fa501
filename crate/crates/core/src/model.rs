//! The full pre-training model: parameters, batch-norm state and the
//! convenience forwards used outside the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::Sample;
use crate::encoders::{
    attention_pool, cls_feature, init_bn_states, init_text_params, init_vision_params, project, text_features,
    vision_features, BnLayerState, EmbeddingMatrix, ModelConfig,
};
use crate::fusion::{init_fusion_params, FusionDims};
use crate::nn::{Binder, ParamSet};
use crate::perturb::{dropblock_mask, row_dropout_mask, PerturbConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Contrastive terms that may own a temperature.
pub const TEMPERATURE_TERMS: [&str; 4] = ["itc", "itc_pert_image", "itc_pert_text", "i2i"];

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
    pub bn: Vec<BnLayerState>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size <= crate::datagen::UNK {
            return Err(Error::Config(format!("vocabulary of {vocab_size} ids is too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut params = ParamSet::new();
        init_vision_params(&config, &mut params, &mut rng);
        init_text_params(&config, vocab_size, &mut params, &mut rng);
        let dims = fusion_dims(&config, config.fusion_layers);
        init_fusion_params("fusion", &dims, &mut params, &mut rng);
        params.add_linear("fusion.head", config.fusion_width, vocab_size, &mut rng);
        let log_tau = Tensor::full(&[1], config.init_tau.ln() as f32);
        if config.shared_temperature {
            params.insert("temperature.shared", log_tau);
        } else {
            for term in TEMPERATURE_TERMS {
                params.insert(format!("temperature.{term}"), log_tau.clone());
            }
        }
        Ok(Self {
            bn: init_bn_states(&config),
            config,
            vocab_size,
            params,
        })
    }

    pub fn fusion_dims(&self) -> FusionDims {
        fusion_dims(&self.config, self.config.fusion_layers)
    }

    /// Parameter holding `log τ` for a contrastive term.
    pub fn temperature_key(&self, term: &str) -> String {
        if self.config.shared_temperature {
            "temperature.shared".to_string()
        } else {
            format!("temperature.{term}")
        }
    }

    pub fn log_tau(&self, term: &str) -> f64 {
        self.params.get(&self.temperature_key(term)).map_or(f64::NAN, |t| t.data()[0] as f64)
    }

    pub fn freeze_bn(&mut self) {
        for s in &mut self.bn {
            s.frozen = true;
        }
    }

    /// Image forward outside the training tape. In training mode unfrozen
    /// batch-norm layers update their running statistics. With
    /// `perturb_features`, DropBlock is applied to the pre-pool map.
    pub fn encode_image<R: Rng + ?Sized>(
        &mut self,
        images: &Tensor,
        training: bool,
        perturb_features: Option<&PerturbConfig>,
        rng: &mut R,
    ) -> Result<(Tensor, EmbeddingMatrix)> {
        let mut b = Binder::new(&self.params, false);
        let fmap = vision_features(&mut b, &self.config, &mut self.bn, images, training)?;
        let mask = match perturb_features {
            Some(p) if training && p.dropblock_p > 0.0 => Some(dropblock_mask(
                b.g.shape(fmap),
                p.dropblock_p,
                p.dropblock_size,
                p.dropblock_rescale,
                rng,
            )?),
            _ => None,
        };
        let pooled = attention_pool(&mut b, &self.config, fmap, mask);
        let emb = project(&mut b, pooled, "vision.proj")?;
        Ok((b.g.value(fmap).clone(), EmbeddingMatrix::new(b.g.value(emb).clone())?))
    }

    /// Text forward outside the training tape; returns `[B, L, W]` token
    /// features and the (optionally dropout-perturbed) embedding.
    pub fn encode_text<R: Rng + ?Sized>(
        &self,
        tokens: &[usize],
        batch: usize,
        training: bool,
        perturb_features: Option<&PerturbConfig>,
        rng: &mut R,
    ) -> Result<(Tensor, EmbeddingMatrix)> {
        let mut b = Binder::new(&self.params, false);
        let feats = text_features(&mut b, &self.config, self.vocab_size, tokens, batch, None)?;
        let mut cls = cls_feature(&mut b.g, feats);
        if let Some(p) = perturb_features {
            if training && p.text_dropout_p > 0.0 {
                let mask = row_dropout_mask(batch, self.config.text_width, p.text_dropout_p, rng)?;
                cls = b.g.mul_const(cls, mask);
            }
        }
        let emb = project(&mut b, cls, "text.proj")?;
        Ok((b.g.value(feats).clone(), EmbeddingMatrix::new(b.g.value(emb).clone())?))
    }

    /// Eval-mode image embeddings, computed in chunks.
    pub fn image_embeddings(&self, images: &Tensor, chunk: usize) -> Result<EmbeddingMatrix> {
        let rows = self.eval_chunks(images, chunk, |b, fmap| {
            let pooled = attention_pool(b, &self.config, fmap, None);
            project(b, pooled, "vision.proj")
        })?;
        EmbeddingMatrix::new(rows)
    }

    /// Eval-mode attention-pooled features before projection, `[N, C]`.
    pub fn pooled_image_features(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        self.eval_chunks(images, chunk, |b, fmap| Ok(attention_pool(b, &self.config, fmap, None)))
    }

    fn eval_chunks(
        &self,
        images: &Tensor,
        chunk: usize,
        head: impl Fn(&mut Binder<'_>, crate::autograd::Var) -> Result<crate::autograd::Var>,
    ) -> Result<Tensor> {
        let n = images.dim(0);
        let per = images.len() / n.max(1);
        let chunk = chunk.max(1);
        let mut out = Vec::new();
        let mut width = 0;
        let mut bn = self.bn.clone();
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::from_vec(&shape, images.data()[start * per..end * per].to_vec());
            let mut b = Binder::new(&self.params, false);
            let fmap = vision_features(&mut b, &self.config, &mut bn, &part, false)?;
            let y = head(&mut b, fmap)?;
            width = b.g.shape(y)[1];
            out.extend_from_slice(b.g.value(y).data());
        }
        Ok(Tensor::from_vec(&[n, width], out))
    }

    /// Eval-mode text embeddings, computed in chunks.
    pub fn text_embeddings(&self, tokens: &[usize], chunk: usize) -> Result<EmbeddingMatrix> {
        let len = self.config.max_len;
        let n = tokens.len() / len;
        let mut out = Vec::with_capacity(n * self.config.embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let (_, e) = self.encode_text(&tokens[start * len..end * len], end - start, false, None, &mut rng)?;
            out.extend_from_slice(e.tensor().data());
        }
        EmbeddingMatrix::new(Tensor::from_vec(&[n, self.config.embed_dim], out))
    }
}

pub fn fusion_dims(config: &ModelConfig, layers: usize) -> FusionDims {
    FusionDims {
        image_channels: config.feature_channels(),
        image_positions: config.feature_extent().pow(2),
        text_width: config.text_width,
        width: config.fusion_width,
        heads: config.fusion_heads,
        layers,
        ffn: config.fusion_ffn,
    }
}

/// Stacks sample images into a `[B, C, S, S]` batch.
pub fn image_batch(samples: &[&Sample], channels: usize, size: usize) -> Result<Tensor> {
    let per = channels * size * size;
    let mut data = Vec::with_capacity(samples.len() * per);
    for s in samples {
        if s.image.len() != per {
            return Err(Error::Input(format!(
                "sample {} has {} pixels, expected {per}",
                s.id,
                s.image.len()
            )));
        }
        data.extend_from_slice(&s.image);
    }
    Ok(Tensor::from_vec(&[samples.len(), channels, size, size], data))
}

/// Concatenated token ids of a batch, checked against `max_len`.
pub fn token_batch(samples: &[&Sample], max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len() * max_len);
    for s in samples {
        if s.tokens.len() != max_len {
            return Err(Error::Input(format!(
                "sample {} has {} tokens, model expects {max_len}",
                s.id,
                s.tokens.len()
            )));
        }
        out.extend_from_slice(&s.tokens);
    }
    Ok(out)
}
