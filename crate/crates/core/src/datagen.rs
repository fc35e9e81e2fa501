//! Synthetic image–caption corpus whose captions name attributes that live in
//! absolute pixel intensity, shape, position and size.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Dim,
    Medium,
    Bright,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Upper,
    Lower,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Dim, Intensity::Medium, Intensity::Bright];
    pub fn word(self) -> &'static str {
        match self {
            Intensity::Dim => "dim",
            Intensity::Medium => "medium",
            Intensity::Bright => "bright",
        }
    }
    pub fn index(self) -> usize {
        self as usize
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Bar];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Bar => "bar",
        }
    }
    pub fn index(self) -> usize {
        self as usize
    }
}

impl Position {
    pub const ALL: [Position; 4] = [Position::Upper, Position::Lower, Position::Left, Position::Right];
    pub fn word(self) -> &'static str {
        match self {
            Position::Upper => "upper",
            Position::Lower => "lower",
            Position::Left => "left",
            Position::Right => "right",
        }
    }
    pub fn index(self) -> usize {
        self as usize
    }
    /// Anchor centre as fractions of the image extent `(x, y)`.
    pub fn anchor(self) -> (f32, f32) {
        match self {
            Position::Upper => (0.5, 0.25),
            Position::Lower => (0.5, 0.75),
            Position::Left => (0.25, 0.5),
            Position::Right => (0.75, 0.5),
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
    pub fn index(self) -> usize {
        self as usize
    }
    /// Nominal object radius as a fraction of the image extent.
    pub fn radius_fraction(self) -> f32 {
        match self {
            Size::Small => 1.0 / 12.0,
            Size::Large => 1.0 / 8.0,
        }
    }
}

/// Ground-truth attributes of the single object drawn in an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub intensity: Intensity,
    pub shape: Shape,
    pub position: Position,
    pub size: Size,
}

pub const NUM_CLASSES: usize = 9;

impl Attributes {
    /// Caption words in grammar order: size, intensity, shape, position.
    pub fn caption(&self) -> String {
        format!(
            "{} {} {} {}",
            self.size.word(),
            self.intensity.word(),
            self.shape.word(),
            self.position.word()
        )
    }

    /// Class index `shape × intensity` in `0..9`.
    pub fn label(&self) -> usize {
        self.shape.index() * 3 + self.intensity.index()
    }

    /// Every attribute combination the grammar can express.
    pub fn all() -> Vec<Attributes> {
        let mut out = Vec::new();
        for size in Size::ALL {
            for intensity in Intensity::ALL {
                for shape in Shape::ALL {
                    for position in Position::ALL {
                        out.push(Attributes {
                            intensity,
                            shape,
                            position,
                            size,
                        });
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Attributes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.caption())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_channels: usize,
    /// Pixel-value interval `[lo, hi]` of each intensity band, dim → bright.
    pub bands: [(f32, f32); 3],
    /// Background pixels are uniform in `[0, background_max]`.
    pub background_max: f32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            image_size: 64,
            n_channels: 1,
            bands: [(0.1, 0.3), (0.4, 0.6), (0.7, 0.9)],
            background_max: 0.05,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return cfg(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        if self.n_channels != 1 && self.n_channels != 3 {
            return cfg(format!("n_channels must be 1 or 3, got {}", self.n_channels));
        }
        if !(0.0..1.0).contains(&self.background_max) {
            return cfg(format!("background_max {} outside [0, 1)", self.background_max));
        }
        let mut prev_hi = self.background_max;
        for (i, &(lo, hi)) in self.bands.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi > 1.0 || lo >= hi {
                return cfg(format!("band {i} = [{lo}, {hi}] is not a proper sub-interval of [0, 1]"));
            }
            if lo <= prev_hi {
                return cfg(format!("band {i} = [{lo}, {hi}] overlaps the band or background below it"));
            }
            if hi - lo < 0.05 {
                return cfg(format!("band {i} = [{lo}, {hi}] is narrower than 0.05"));
            }
            prev_hi = hi;
        }
        Ok(())
    }

    pub fn band(&self, intensity: Intensity) -> (f32, f32) {
        self.bands[intensity.index()]
    }
}

/// One image–caption pair. `image` is `[channels, size, size]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Vec<f32>,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub attributes: Attributes,
    pub label: usize,
}

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;

/// Words used by visual-question templates in addition to the caption grammar.
pub const QUESTION_WORDS: [&str; 7] = ["is", "it", "what", "shape", "intensity", "position", "size"];

/// Dense token ids: the four reserved ids, the caption grammar, then question words.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::build()
    }
}

impl Vocabulary {
    pub fn build() -> Self {
        let mut words: Vec<String> = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"].iter().map(|s| s.to_string()).collect();
        let grammar = Size::ALL
            .iter()
            .map(|s| s.word())
            .chain(Intensity::ALL.iter().map(|i| i.word()))
            .chain(Shape::ALL.iter().map(|s| s.word()))
            .chain(Position::ALL.iter().map(|p| p.word()))
            .chain(QUESTION_WORDS);
        words.extend(grammar.map(str::to_string));
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of a plain word; reserved markers are not reachable this way.
    pub fn id(&self, word: &str) -> usize {
        match self.ids.get(word) {
            Some(&i) if i > UNK => i,
            _ => UNK,
        }
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id == PAD || id == CLS
    }
}

/// `[CLS] w₁ … wₙ [PAD]…` of length exactly `max_len`.
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let needed = words.len() + 1;
    if max_len < needed {
        return Err(Error::Truncation { needed, max_len });
    }
    let mut out = Vec::with_capacity(max_len);
    out.push(CLS);
    out.extend(words.iter().map(|w| vocab.id(w)));
    out.resize(max_len, PAD);
    Ok(out)
}

/// Inverse of [`tokenize`]: drops CLS and PAD, joins the rest with spaces.
pub fn detokenize(tokens: &[usize], vocab: &Vocabulary) -> String {
    tokens
        .iter()
        .filter(|&&t| t != CLS && t != PAD)
        .map(|&t| vocab.word(t).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Per-sample generator: the stream id is the sample index, so generation is
/// order independent.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws one image for `attrs`. Returns `[channels, size, size]` pixels.
pub fn render(attrs: &Attributes, spec: &CorpusSpec, rng: &mut impl Rng) -> Vec<f32> {
    let s = spec.image_size;
    let sf = s as f32;
    let (ax, ay) = attrs.position.anchor();
    let jitter = sf / 32.0;
    let cx = ax * sf + rng.gen_range(-jitter..=jitter);
    let cy = ay * sf + rng.gen_range(-jitter..=jitter);
    let r = attrs.size.radius_fraction() * sf * rng.gen_range(0.9..=1.1);
    let (lo, hi) = spec.band(attrs.intensity);
    let margin = (hi - lo) * 0.1;
    let level = rng.gen_range(lo + margin..=hi - margin);
    let noise = margin;
    let mut plane = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let inside = match attrs.shape {
                Shape::Circle => dx * dx + dy * dy <= r * r,
                Shape::Square => dx.abs() <= 0.9 * r && dy.abs() <= 0.9 * r,
                Shape::Bar => dx.abs() <= 1.4 * r && dy.abs() <= 0.45 * r,
            };
            plane[y * s + x] = if inside {
                (level + rng.gen_range(-noise..=noise)).clamp(lo, hi)
            } else {
                rng.gen_range(0.0..=spec.background_max)
            };
        }
    }
    let mut image = Vec::with_capacity(spec.n_channels * s * s);
    for _ in 0..spec.n_channels {
        image.extend_from_slice(&plane);
    }
    image
}

fn draw_attributes(rng: &mut impl Rng) -> Attributes {
    Attributes {
        intensity: Intensity::ALL[rng.gen_range(0..3)],
        shape: Shape::ALL[rng.gen_range(0..3)],
        position: Position::ALL[rng.gen_range(0..4)],
        size: Size::ALL[rng.gen_range(0..2)],
    }
}

pub fn generate_corpus(spec: &CorpusSpec, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.n_samples)
        .map(|id| {
            let mut rng = sample_rng(spec.seed, id);
            let attributes = draw_attributes(&mut rng);
            let image = render(&attributes, spec, &mut rng);
            let caption = attributes.caption();
            let tokens = tokenize(&caption, vocab, max_len)?;
            Ok(Sample {
                id,
                image,
                caption,
                tokens,
                label: attributes.label(),
                attributes,
            })
        })
        .collect()
}

/// Deterministic shuffled partition into (train, val, test).
pub fn split_corpus(
    corpus: &[Sample],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let (a, b, c) = fractions;
    for f in [a, b, c] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("split fraction {f} outside [0, 1]")));
        }
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {}, not 1", a + b + c)));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}
