//! Named parameter storage and the layer builders shared by every module.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autograd::{Grads, Graph, Var};
use crate::tensor::Tensor;

/// Learnable tensors keyed by dotted names (`vision.block0.conv.w`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every entry whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn add_linear<R: Rng + ?Sized>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let std = (1.0 / fan_in as f32).sqrt();
        self.insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn add_layer_norm(&mut self, prefix: &str, width: usize) {
        self.insert(format!("{prefix}.weight"), Tensor::full(&[width], 1.0));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]));
    }

    pub fn add_attention<R: Rng + ?Sized>(&mut self, prefix: &str, width: usize, rng: &mut R) {
        for part in ["q", "k", "v", "o"] {
            self.add_linear(&format!("{prefix}.{part}"), width, width, rng);
        }
    }

    pub fn add_transformer_block<R: Rng + ?Sized>(&mut self, prefix: &str, width: usize, ffn: usize, rng: &mut R) {
        self.add_layer_norm(&format!("{prefix}.ln1"), width);
        self.add_attention(&format!("{prefix}.attn"), width, rng);
        self.add_layer_norm(&format!("{prefix}.ln2"), width);
        self.add_linear(&format!("{prefix}.ffn1"), width, ffn, rng);
        self.add_linear(&format!("{prefix}.ffn2"), ffn, width, rng);
    }
}

/// A tape plus the parameters bound into it by name, each bound at most once.
pub struct Binder<'p> {
    pub g: Graph,
    params: &'p ParamSet,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    /// With `trainable == false` parameters enter the tape as constants and no
    /// gradient work is done for them.
    pub fn new(params: &'p ParamSet, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.g.leaf(t, self.trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound parameter, zero-filled for parameters the loss
    /// does not reach.
    pub fn collect_grads(&self, grads: &mut Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.bound {
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(self.g.shape(*v)));
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        self.g.linear(x, w, Some(b))
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        self.g.layer_norm(x, w, b, 1e-5)
    }

    /// Multi-head self-attention over `[B, L, W]`. `key_bias` is an additive
    /// `[B·heads, L, L]` constant (use it to hide padding keys).
    pub fn self_attention(&mut self, x: Var, prefix: &str, heads: usize, key_bias: Option<&Tensor>) -> Var {
        let shape = self.g.shape(x).to_vec();
        let (b, l, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(w % heads, 0, "width {w} not divisible by {heads} heads");
        let dh = w / heads;
        let split = |binder: &mut Self, part: &str| {
            let y = binder.linear(x, &format!("{prefix}.{part}"));
            let y = binder.g.reshape(y, &[b, l, heads, dh]);
            let y = binder.g.permute(y, &[0, 2, 1, 3]);
            binder.g.reshape(y, &[b * heads, l, dh])
        };
        let q = split(self, "q");
        let k = split(self, "k");
        let v = split(self, "v");
        let scores = self.g.bmm(q, k, true);
        let mut scores = self.g.scale(scores, 1.0 / (dh as f32).sqrt());
        if let Some(bias) = key_bias {
            scores = self.g.add_const(scores, bias);
        }
        let attn = self.g.softmax(scores);
        let ctx = self.g.bmm(attn, v, false);
        let ctx = self.g.reshape(ctx, &[b, heads, l, dh]);
        let ctx = self.g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = self.g.reshape(ctx, &[b, l, w]);
        self.linear(ctx, &format!("{prefix}.o"))
    }

    /// Pre-norm transformer block.
    pub fn transformer_block(&mut self, x: Var, prefix: &str, heads: usize, key_bias: Option<&Tensor>) -> Var {
        let h = self.layer_norm(x, &format!("{prefix}.ln1"));
        let h = self.self_attention(h, &format!("{prefix}.attn"), heads, key_bias);
        let x = self.g.add(x, h);
        let h = self.layer_norm(x, &format!("{prefix}.ln2"));
        let h = self.linear(h, &format!("{prefix}.ffn1"));
        let h = self.g.gelu(h);
        let h = self.linear(h, &format!("{prefix}.ffn2"));
        self.g.add(x, h)
    }
}

/// Additive attention bias hiding invalid keys: `valid` is `[B][L]`.
pub fn key_padding_bias(valid: &[Vec<bool>], heads: usize) -> Tensor {
    let b = valid.len();
    let l = valid.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(b * heads * l * l);
    for row in valid {
        for _ in 0..heads * l {
            data.extend(row.iter().map(|&ok| if ok { 0.0 } else { -1e9 }));
        }
    }
    Tensor::from_vec(&[b * heads, l, l], data)
}
