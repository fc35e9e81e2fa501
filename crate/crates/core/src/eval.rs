//! Downstream protocols: cross-modal retrieval, linear probing and
//! visual question answering as classification.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{tokenize, Attributes, Intensity, Position, Sample, Shape, Size, Vocabulary, NUM_CLASSES};
use crate::encoders::{cls_feature, text_features, token_validity, vision_features, EmbeddingMatrix};
use crate::fusion::{fuse, init_fusion_params};
use crate::losses::masked_cross_entropy;
use crate::model::{fusion_dims, image_batch, Model};
use crate::nn::Binder;
use crate::tensor::Tensor;
use crate::trainer::AdamW;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "I2T")]
    ImageToText,
    #[serde(rename = "T2I")]
    TextToImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub direction: Direction,
    pub k_values: Vec<usize>,
    pub recall_at_k: Vec<f64>,
    pub n_queries: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&x| x == k).map(|i| self.recall_at_k[i])
    }
}

/// Zero-based rank of `target` among `scores`; candidates scoring the same
/// rank ahead when their index is lower.
fn rank_of(scores: &[f32], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

fn recall(sim: &[f32], n: usize, ks: &[usize], direction: Direction) -> RecallReport {
    let mut hits = vec![0usize; ks.len()];
    let mut scores = vec![0.0f32; n];
    for q in 0..n {
        for (c, s) in scores.iter_mut().enumerate() {
            *s = match direction {
                Direction::ImageToText => sim[q * n + c],
                Direction::TextToImage => sim[c * n + q],
            };
        }
        let r = rank_of(&scores, q);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if r < k {
                *h += 1;
            }
        }
    }
    RecallReport {
        direction,
        k_values: ks.to_vec(),
        recall_at_k: hits.iter().map(|&h| h as f64 / n as f64).collect(),
        n_queries: n,
    }
}

/// Recall@K in both directions; row `i` of each matrix is the true pair.
pub fn retrieval_recall(
    image_embs: &EmbeddingMatrix,
    text_embs: &EmbeddingMatrix,
    ks: &[usize],
) -> Result<(RecallReport, RecallReport)> {
    let n = image_embs.rows();
    if text_embs.rows() != n || text_embs.dim() != image_embs.dim() {
        return Err(Error::Input(format!(
            "{}x{} image and {}x{} text embeddings",
            n,
            image_embs.dim(),
            text_embs.rows(),
            text_embs.dim()
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Config(format!("recall@{k} over {n} candidates")));
    }
    let d = image_embs.dim();
    let mut sim = vec![0.0f32; n * n];
    crate::tensor::gemm(
        n,
        d,
        n,
        image_embs.tensor().data(),
        d,
        1,
        text_embs.tensor().data(),
        1,
        d,
        &mut sim,
        0.0,
    );
    Ok((
        recall(&sim, n, ks, Direction::ImageToText),
        recall(&sim, n, ks, Direction::TextToImage),
    ))
}

/// Area under the ROC curve via the Mann–Whitney statistic; ties count 0.5.
/// `None` when either class is empty.
pub fn mann_whitney_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `None` for classes absent from (or filling) the held-out split.
    pub per_class_auc: Vec<Option<f64>>,
    pub macro_auc: f64,
}

fn standardize(train: &[Vec<f64>], test: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let f = train[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; f];
    for r in train {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; f];
    for r in train {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|s| s.sqrt().max(1e-8)).collect();
    let apply = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    };
    (apply(train), apply(test))
}

/// Multinomial logistic regression on fixed features, full-batch Adam.
pub fn linear_probe_on_features(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.is_empty() || test_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::Input("probe splits are empty or mismatched".into()));
    }
    let first = train_y[0];
    if train_y.iter().all(|&y| y == first) {
        return Err(Error::Degenerate("probe training split holds a single class".into()));
    }
    if let Some(&y) = train_y.iter().chain(test_y).find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {y} outside {classes} classes")));
    }
    let (xs, ts) = standardize(train_x, test_x);
    let f = xs[0].len();
    let n = xs.len() as f64;
    let np = (f + 1) * classes;
    let mut w = vec![0.0f64; np];
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let row = &w[c * (f + 1)..(c + 1) * (f + 1)];
                row[f] + row[..f].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    let softmax = |z: Vec<f64>| -> Vec<f64> {
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    for t in 1..=config.epochs {
        let mut g = vec![0.0; np];
        for (x, &y) in xs.iter().zip(train_y) {
            let p = softmax(logits(&w, x));
            for c in 0..classes {
                let d = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
                let row = &mut g[c * (f + 1)..(c + 1) * (f + 1)];
                for (gi, xi) in row[..f].iter_mut().zip(x) {
                    *gi += d * xi;
                }
                row[f] += d;
            }
        }
        for i in 0..np {
            let gi = g[i] + config.l2 * w[i];
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
            let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
            w[i] -= config.lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    let probs: Vec<Vec<f64>> = ts.iter().map(|x| softmax(logits(&w, x))).collect();
    let per_class_auc: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = test_y.iter().map(|&y| y == c).collect();
            mann_whitney_auc(&scores, &pos)
        })
        .collect();
    let present: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Degenerate("held-out split holds a single class".into()));
    }
    let macro_auc = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ProbeReport { per_class_auc, macro_auc })
}

/// Linear probe on the frozen vision encoder's pooled features.
pub fn linear_probe_auc(model: &Model, train: &[Sample], test: &[Sample], config: &ProbeConfig) -> Result<ProbeReport> {
    let before: Vec<(String, Vec<u32>)> = model.params.iter().map(|(k, t)| (k.clone(), t.to_bits())).collect();
    let features = |split: &[Sample]| -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&Sample> = split.iter().collect();
        let images = image_batch(&refs, model.config.in_channels, model.config.image_size)?;
        let pooled = model.pooled_image_features(&images, 128)?;
        Ok((0..pooled.dim(0)).map(|i| pooled.row(i).iter().map(|&v| v as f64).collect()).collect())
    };
    let train_x = features(train)?;
    let test_x = features(test)?;
    let train_y: Vec<usize> = train.iter().map(|s| s.label).collect();
    let test_y: Vec<usize> = test.iter().map(|s| s.label).collect();
    let report = linear_probe_on_features(&train_x, &train_y, &test_x, &test_y, NUM_CLASSES, config)?;
    let after: Vec<(String, Vec<u32>)> = model.params.iter().map(|(k, t)| (k.clone(), t.to_bits())).collect();
    assert!(before == after, "linear probe mutated encoder parameters");
    Ok(report)
}

/// Number of learnable prompt tokens appended to every question.
pub const PROMPT_TOKENS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaQuestion {
    pub sample: usize,
    pub text: String,
    pub tokens: Vec<usize>,
    pub answer: usize,
    pub closed: bool,
}

/// Fixed answer vocabulary: `no`, `yes`, then every attribute value word.
pub fn answer_vocabulary() -> Vec<String> {
    let mut out = vec!["no".to_string(), "yes".to_string()];
    out.extend(Size::ALL.iter().map(|v| v.word().to_string()));
    out.extend(Intensity::ALL.iter().map(|v| v.word().to_string()));
    out.extend(Shape::ALL.iter().map(|v| v.word().to_string()));
    out.extend(Position::ALL.iter().map(|v| v.word().to_string()));
    out
}

fn attribute_words(attrs: &Attributes, kind: usize) -> (&'static str, &'static str, Vec<&'static str>) {
    match kind {
        0 => ("shape", attrs.shape.word(), Shape::ALL.iter().map(|v| v.word()).collect()),
        1 => ("intensity", attrs.intensity.word(), Intensity::ALL.iter().map(|v| v.word()).collect()),
        2 => ("position", attrs.position.word(), Position::ALL.iter().map(|v| v.word()).collect()),
        _ => ("size", attrs.size.word(), Size::ALL.iter().map(|v| v.word()).collect()),
    }
}

/// One closed (`is it <value>`, balanced yes/no) and one open
/// (`what <attribute>`) question per sample, attribute chosen at random.
pub fn generate_questions(samples: &[Sample], vocab: &Vocabulary, max_len: usize, seed: u64) -> Result<Vec<VqaQuestion>> {
    let answers = answer_vocabulary();
    let answer_id = |w: &str| -> Result<usize> {
        answers
            .iter()
            .position(|a| a == w)
            .ok_or_else(|| Error::Config(format!("answer `{w}` missing from the answer vocabulary")))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len() * 2);
    for (i, s) in samples.iter().enumerate() {
        let (_, truth, values) = attribute_words(&s.attributes, rng.gen_range(0..4));
        let asked = if rng.gen_bool(0.5) {
            truth
        } else {
            *values.iter().filter(|&&v| v != truth).collect::<Vec<_>>().choose(&mut rng).expect("alternatives")
        };
        let text = format!("is it {asked}");
        out.push(VqaQuestion {
            sample: i,
            tokens: tokenize(&text, vocab, max_len)?,
            text,
            answer: answer_id(if asked == truth { "yes" } else { "no" })?,
            closed: true,
        });
        let (name, truth, _) = attribute_words(&s.attributes, rng.gen_range(0..4));
        let text = format!("what {name}");
        out.push(VqaQuestion {
            sample: i,
            tokens: tokenize(&text, vocab, max_len)?,
            text,
            answer: answer_id(truth)?,
            closed: false,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    pub open_acc: f64,
    pub closed_acc: f64,
    pub overall_acc: f64,
    pub n_open: usize,
    pub n_closed: usize,
}

impl VqaReport {
    pub fn from_predictions(predictions: &[usize], questions: &[VqaQuestion]) -> Result<Self> {
        if predictions.len() != questions.len() || questions.is_empty() {
            return Err(Error::Input("predictions do not match questions".into()));
        }
        let (mut open, mut closed, mut n_open, mut n_closed) = (0usize, 0usize, 0usize, 0usize);
        for (p, q) in predictions.iter().zip(questions) {
            let hit = usize::from(*p == q.answer);
            if q.closed {
                closed += hit;
                n_closed += 1;
            } else {
                open += hit;
                n_open += 1;
            }
        }
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Ok(Self {
            open_acc: frac(open, n_open),
            closed_acc: frac(closed, n_closed),
            overall_acc: frac(open + closed, n_open + n_closed),
            n_open,
            n_closed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqaConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Prompt, fusion layer and answer head.
    pub head_lr: f64,
    /// Pre-trained encoders.
    pub encoder_lr: f64,
    pub seed: u64,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            head_lr: 5e-4,
            encoder_lr: 5e-5,
            seed: 0,
        }
    }
}

/// Fine-tunes a copy of `model` with 20 appended prompt tokens, a one-layer
/// fusion transformer and a two-layer MLP head, then scores `test`.
pub fn vqa_finetune_eval(
    model: &Model,
    train_samples: &[Sample],
    train_questions: &[VqaQuestion],
    test_samples: &[Sample],
    test_questions: &[VqaQuestion],
    config: &VqaConfig,
) -> Result<VqaReport> {
    let answers = answer_vocabulary().len();
    for q in train_questions.iter().chain(test_questions) {
        if q.answer >= answers {
            return Err(Error::Config(format!("answer id {} outside the answer vocabulary", q.answer)));
        }
        if q.tokens.len() != model.config.max_len {
            return Err(Error::Config(format!("question of {} tokens for max_len {}", q.tokens.len(), model.config.max_len)));
        }
    }
    if config.batch_size < 2 {
        return Err(Error::Config("vqa.batch_size must be >= 2".into()));
    }
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cfg = m.config.clone();
    let dims = fusion_dims(&cfg, 1);
    m.params.insert("vqa.prompt", Tensor::randn(&[PROMPT_TOKENS, cfg.text_width], 0.02, &mut rng));
    init_fusion_params("vqa.fusion", &dims, &mut m.params, &mut rng);
    m.params.add_linear("vqa.head1", cfg.fusion_width, cfg.fusion_width, &mut rng);
    m.params.add_linear("vqa.head2", cfg.fusion_width, answers, &mut rng);
    for s in &mut m.bn {
        s.frozen = false;
    }
    let mut opt = AdamW::new(0.0);
    let n = train_questions.len();
    let steps_per_epoch = n / config.batch_size;
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for k in 0..steps_per_epoch {
            let qs: Vec<&VqaQuestion> = order[k * config.batch_size..(k + 1) * config.batch_size]
                .iter()
                .map(|&i| &train_questions[i])
                .collect();
            let (logits_value, grads) = {
                let crate::model::Model { params, bn, .. } = &mut m;
                let mut b = Binder::new(params, true);
                let logits = vqa_forward(&mut b, &cfg, model.vocab_size, bn, train_samples, &qs, true)?;
                let values: Vec<f64> = b.g.value(logits).data().iter().map(|&v| v as f64).collect();
                let targets: Vec<usize> = qs.iter().map(|q| q.answer).collect();
                let ce = masked_cross_entropy(&values, answers, &targets, &vec![true; qs.len()])?;
                let grad = Tensor::from_vec(b.g.shape(logits), ce.d_logits.iter().map(|&v| v as f32).collect());
                let node = b.g.external(&[logits], ce.value as f32, vec![grad]);
                let mut gs = b.g.backward(node);
                (ce.value, b.collect_grads(&mut gs))
            };
            if !logits_value.is_finite() {
                return Err(Error::NonFinite { component: "vqa" });
            }
            opt.step(&mut m.params, &grads, |name| {
                if name.starts_with("vqa.") {
                    config.head_lr
                } else {
                    config.encoder_lr
                }
            });
        }
    }
    let mut predictions = Vec::with_capacity(test_questions.len());
    let mut bn = m.bn.clone();
    for chunk in test_questions.chunks(128) {
        let qs: Vec<&VqaQuestion> = chunk.iter().collect();
        let mut b = Binder::new(&m.params, false);
        let logits = vqa_forward(&mut b, &cfg, model.vocab_size, &mut bn, test_samples, &qs, false)?;
        let v = b.g.value(logits);
        for r in 0..qs.len() {
            let row = v.row(r);
            let best = (0..answers).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            predictions.push(best);
        }
    }
    VqaReport::from_predictions(&predictions, test_questions)
}

/// Question sequence length seen by the text encoder once the prompt is appended.
pub fn prompted_length(max_len: usize) -> usize {
    max_len + PROMPT_TOKENS
}

fn vqa_forward(
    b: &mut Binder<'_>,
    cfg: &crate::encoders::ModelConfig,
    vocab_size: usize,
    bn: &mut [crate::encoders::BnLayerState],
    samples: &[Sample],
    questions: &[&VqaQuestion],
    training: bool,
) -> Result<crate::autograd::Var> {
    let imgs: Vec<&Sample> = questions
        .iter()
        .map(|q| samples.get(q.sample).ok_or_else(|| Error::Input(format!("question refers to sample {}", q.sample))))
        .collect::<Result<_>>()?;
    let images = image_batch(&imgs, cfg.in_channels, cfg.image_size)?;
    let tokens: Vec<usize> = questions.iter().flat_map(|q| q.tokens.iter().copied()).collect();
    let n = questions.len();
    let fmap = vision_features(b, cfg, bn, &images, training)?;
    let feats = text_features(b, cfg, vocab_size, &tokens, n, Some("vqa.prompt"))?;
    debug_assert_eq!(b.g.shape(feats)[1], prompted_length(cfg.max_len));
    let mut valid = token_validity(&tokens, n, cfg.max_len, vocab_size)?;
    for row in &mut valid {
        row.extend(std::iter::repeat_n(true, PROMPT_TOKENS));
    }
    let dims = fusion_dims(cfg, 1);
    let fused = fuse(b, "vqa.fusion", &dims, fmap, feats, &valid)?;
    let cls = b.g.narrow1(fused, dims.image_positions, 1);
    let cls = cls_feature(&mut b.g, cls);
    let h = b.linear(cls, "vqa.head1");
    let h = b.g.gelu(h);
    Ok(b.linear(h, "vqa.head2"))
}
