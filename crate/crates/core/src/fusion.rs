//! Token masking and the multimodal fusion transformer with its masked-token
//! prediction head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::datagen::{CLS, MASK, PAD, UNK};
use crate::encoders::spatial_tokens;
use crate::nn::{key_padding_bias, Binder, ParamSet};
use crate::{Error, Result};

/// How a selected position is corrupted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Every selected position becomes `[MASK]`.
    #[default]
    Plain,
    /// 80% `[MASK]`, 10% a random word, 10% unchanged.
    Bert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskingOutcome {
    pub batch: usize,
    pub seq_len: usize,
    pub masked_tokens: Vec<usize>,
    pub mask_positions: Vec<bool>,
    /// Original id at masked positions, PAD elsewhere.
    pub targets: Vec<usize>,
}

impl MaskingOutcome {
    pub fn num_masked(&self) -> usize {
        self.mask_positions.iter().filter(|&&m| m).count()
    }

    /// Writes the targets back into the masked sequence.
    pub fn restore(&self) -> Vec<usize> {
        self.masked_tokens
            .iter()
            .zip(&self.mask_positions)
            .zip(&self.targets)
            .map(|((&t, &m), &orig)| if m { orig } else { t })
            .collect()
    }
}

fn eligible(id: usize) -> bool {
    id != PAD && id != CLS
}

/// Selects each non-special position independently with probability `rate`.
///
/// When the whole batch draws no position, one eligible position chosen
/// uniformly is masked so the objective stays defined.
pub fn mask_tokens<R: Rng + ?Sized>(
    tokens: &[usize],
    seq_len: usize,
    rate: f64,
    vocab_size: usize,
    strategy: MaskStrategy,
    rng: &mut R,
) -> Result<MaskingOutcome> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mask rate {rate} must lie in (0, 1)")));
    }
    if seq_len == 0 || !tokens.len().is_multiple_of(seq_len) {
        return Err(Error::Input(format!("{} tokens do not form rows of {seq_len}", tokens.len())));
    }
    let batch = tokens.len() / seq_len;
    for (i, row) in tokens.chunks_exact(seq_len).enumerate() {
        if !row.iter().any(|&t| eligible(t)) {
            return Err(Error::Degenerate(format!("sequence {i} has no maskable position")));
        }
    }
    let mut mask_positions: Vec<bool> = tokens
        .iter()
        .map(|&t| eligible(t) && rng.gen::<f64>() < rate)
        .collect();
    if !mask_positions.iter().any(|&m| m) {
        let candidates: Vec<usize> = (0..tokens.len()).filter(|&i| eligible(tokens[i])).collect();
        mask_positions[candidates[rng.gen_range(0..candidates.len())]] = true;
    }
    let mut masked_tokens = tokens.to_vec();
    let mut targets = vec![PAD; tokens.len()];
    for i in 0..tokens.len() {
        if !mask_positions[i] {
            continue;
        }
        targets[i] = tokens[i];
        masked_tokens[i] = match strategy {
            MaskStrategy::Plain => MASK,
            MaskStrategy::Bert => {
                let u = rng.gen::<f64>();
                if u < 0.8 {
                    MASK
                } else if u < 0.9 && vocab_size > UNK + 1 {
                    rng.gen_range(UNK + 1..vocab_size)
                } else {
                    tokens[i]
                }
            }
        };
    }
    Ok(MaskingOutcome {
        batch,
        seq_len,
        masked_tokens,
        mask_positions,
        targets,
    })
}

/// Shape of one fusion stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionDims {
    pub image_channels: usize,
    pub image_positions: usize,
    pub text_width: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
}

pub fn init_fusion_params<R: Rng + ?Sized>(prefix: &str, dims: &FusionDims, params: &mut ParamSet, rng: &mut R) {
    params.add_linear(&format!("{prefix}.img_in"), dims.image_channels, dims.width, rng);
    params.insert(
        format!("{prefix}.img_pos"),
        crate::tensor::Tensor::randn(&[dims.image_positions, dims.width], 0.02, rng),
    );
    params.add_linear(&format!("{prefix}.txt_in"), dims.text_width, dims.width, rng);
    for l in 0..dims.layers {
        params.add_transformer_block(&format!("{prefix}.block{l}"), dims.width, dims.ffn, rng);
    }
    params.add_layer_norm(&format!("{prefix}.ln_f"), dims.width);
}

/// Joint encoding of image positions followed by text positions:
/// `[B, P + L, width]`. `text_valid` hides PAD keys.
pub fn fuse(
    b: &mut Binder<'_>,
    prefix: &str,
    dims: &FusionDims,
    image_feature_map: Var,
    text_features: Var,
    text_valid: &[Vec<bool>],
) -> Result<Var> {
    let fs = b.g.shape(image_feature_map).to_vec();
    let ts = b.g.shape(text_features).to_vec();
    if fs.len() != 4 || ts.len() != 3 || fs[0] != ts[0] {
        return Err(Error::Input(format!("fusion inputs {fs:?} and {ts:?} disagree")));
    }
    if fs[1] != dims.image_channels || fs[2] * fs[3] != dims.image_positions || ts[2] != dims.text_width {
        return Err(Error::Input(format!("fusion inputs {fs:?} and {ts:?} do not match {dims:?}")));
    }
    if text_valid.len() != ts[0] || text_valid.iter().any(|r| r.len() != ts[1]) {
        return Err(Error::Input("text validity mask does not match text features".into()));
    }
    let img = spatial_tokens(&mut b.g, image_feature_map);
    let img = b.linear(img, &format!("{prefix}.img_in"));
    let pos = b.p(&format!("{prefix}.img_pos"));
    let img = b.g.add_broadcast(img, pos);
    let txt = b.linear(text_features, &format!("{prefix}.txt_in"));
    let mut x = b.g.concat1(&[img, txt]);
    let valid: Vec<Vec<bool>> = text_valid
        .iter()
        .map(|row| std::iter::repeat_n(true, dims.image_positions).chain(row.iter().copied()).collect())
        .collect();
    let bias = key_padding_bias(&valid, dims.heads);
    for l in 0..dims.layers {
        x = b.transformer_block(x, &format!("{prefix}.block{l}"), dims.heads, Some(&bias));
    }
    Ok(b.layer_norm(x, &format!("{prefix}.ln_f")))
}

/// Vocabulary logits `[B, L, V]` at every text position, through the
/// `fusion.head` linear layer.
pub fn fuse_and_predict(
    b: &mut Binder<'_>,
    dims: &FusionDims,
    image_feature_map: Var,
    masked_token_features: Var,
    text_valid: &[Vec<bool>],
) -> Result<Var> {
    let fused = fuse(b, "fusion", dims, image_feature_map, masked_token_features, text_valid)?;
    let len = b.g.shape(masked_token_features)[1];
    let text = b.g.narrow1(fused, dims.image_positions, len);
    Ok(b.linear(text, "fusion.head"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masking_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = vec![CLS, 5, 6, 7, PAD, PAD, CLS, 8, 9, PAD, PAD, PAD];
        for _ in 0..1000 {
            let m = mask_tokens(&tokens, 6, 0.15, 20, MaskStrategy::Plain, &mut rng).unwrap();
            assert!(m.num_masked() >= 1);
            for i in 0..tokens.len() {
                if !eligible(tokens[i]) {
                    assert!(!m.mask_positions[i]);
                }
                if m.mask_positions[i] {
                    assert_eq!(m.masked_tokens[i], MASK);
                } else {
                    assert_eq!(m.masked_tokens[i], tokens[i]);
                }
            }
            assert_eq!(m.restore(), tokens);
        }
    }

    #[test]
    fn masking_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            mask_tokens(&[CLS, PAD], 2, 0.15, 20, MaskStrategy::Plain, &mut rng),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            mask_tokens(&[CLS, 5], 2, 0.0, 20, MaskStrategy::Plain, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bert_strategy_keeps_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens: Vec<usize> = (0..400).map(|i| if i % 10 == 0 { CLS } else { 4 + i % 7 }).collect();
        let m = mask_tokens(&tokens, 10, 0.5, 20, MaskStrategy::Bert, &mut rng).unwrap();
        assert_eq!(m.restore(), tokens);
        let kept = (0..tokens.len())
            .filter(|&i| m.mask_positions[i] && m.masked_tokens[i] != MASK)
            .count();
        assert!(kept > 0);
    }
}
