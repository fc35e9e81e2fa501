//! A rule-based decoder recovers every caption attribute from the pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unimlip::datagen::{
    detokenize, generate_corpus, split_corpus, tokenize, Attributes, CorpusSpec, Intensity, Position, Sample, Shape,
    Size, Vocabulary, CLS, PAD,
};
use unimlip::perturb::{weak_augment, ImageDims, WeakAugConfig};
use unimlip::Error;

fn decode_intensity(image: &[f32], spec: &CorpusSpec) -> Intensity {
    // Interpolation only darkens the object's rim, so the upper quartile of
    // object pixels reflects its interior level.
    let mut object: Vec<f32> = image.iter().copied().filter(|&v| v > 1.5 * spec.background_max).collect();
    object.sort_by(f32::total_cmp);
    let level = object[object.len() * 3 / 4];
    *Intensity::ALL
        .iter()
        .find(|&&i| {
            let (lo, hi) = spec.band(i);
            (lo..=hi).contains(&level)
        })
        .expect("level inside some band")
}

fn decode(image: &[f32], spec: &CorpusSpec) -> Attributes {
    let s = spec.image_size;
    let thr = 1.5 * spec.background_max;
    let (mut n, mut sx, mut sy) = (0.0f32, 0.0f32, 0.0f32);
    let (mut x0, mut x1, mut y0, mut y1) = (s, 0, s, 0);
    for y in 0..s {
        for x in 0..s {
            if image[y * s + x] > thr {
                n += 1.0;
                sx += x as f32 + 0.5;
                sy += y as f32 + 0.5;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    let (cx, cy) = (sx / n - s as f32 / 2.0, sy / n - s as f32 / 2.0);
    let position = if cx.abs() > cy.abs() {
        if cx < 0.0 {
            Position::Left
        } else {
            Position::Right
        }
    } else if cy < 0.0 {
        Position::Upper
    } else {
        Position::Lower
    };
    let (w, h) = ((x1 - x0 + 1) as f32, (y1 - y0 + 1) as f32);
    let shape = if w / h > 2.0 {
        Shape::Bar
    } else if n / (w * h) > 0.9 {
        Shape::Square
    } else {
        Shape::Circle
    };
    // Area cut-offs midway between the small and large radius ranges, as a
    // fraction of the image area.
    let frac = n / (s * s) as f32;
    let cut = match shape {
        Shape::Circle => 0.0330,
        Shape::Square => 0.0342,
        Shape::Bar => 0.0264,
    };
    let size = if frac > cut { Size::Large } else { Size::Small };
    Attributes {
        intensity: decode_intensity(image, spec),
        shape,
        position,
        size,
    }
}

fn corpus(n: usize, seed: u64) -> (Vec<Sample>, CorpusSpec) {
    let spec = CorpusSpec {
        n_samples: n,
        seed,
        ..CorpusSpec::default()
    };
    (generate_corpus(&spec, &Vocabulary::build(), 8).unwrap(), spec)
}

#[test]
fn decoder_recovers_attributes_of_1000_images() {
    let (samples, spec) = corpus(1000, 4);
    for s in &samples {
        assert_eq!(decode(&s.image, &spec), s.attributes, "sample {}", s.id);
        assert_eq!(s.caption, s.attributes.caption());
        assert_eq!(s.label, s.attributes.label());
    }
}

#[test]
fn every_attribute_value_occurs() {
    let (samples, _) = corpus(1000, 5);
    for i in Intensity::ALL {
        assert!(samples.iter().any(|s| s.attributes.intensity == i));
    }
    for p in Position::ALL {
        assert!(samples.iter().any(|s| s.attributes.position == p));
    }
    let labels: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.label).collect();
    assert_eq!(labels.len(), 9);
}

#[test]
fn weak_augmentation_keeps_the_intensity_band() {
    let (samples, spec) = corpus(1000, 6);
    let dims = ImageDims::square(1, spec.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = WeakAugConfig {
        resize_p: 1.0,
        ..WeakAugConfig::default()
    };
    for s in &samples {
        let v = weak_augment(&s.image, dims, &cfg, &mut rng).unwrap();
        assert_eq!(decode_intensity(&v, &spec), s.attributes.intensity, "sample {}", s.id);
    }
}

#[test]
fn generation_is_seeded() {
    let (a, _) = corpus(20, 1);
    let (b, _) = corpus(20, 1);
    let (c, _) = corpus(20, 2);
    assert_eq!(a, b);
    assert_ne!(a, c);
    // Sample i does not depend on how many samples follow it.
    let (short, _) = corpus(5, 1);
    assert_eq!(short[..], a[..5]);
}

#[test]
fn tokens_round_trip() {
    let vocab = Vocabulary::build();
    for attrs in Attributes::all() {
        let caption = attrs.caption();
        let t = tokenize(&caption, &vocab, 8).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(t[0], CLS);
        assert_eq!(t[5..], [PAD, PAD, PAD]);
        assert_eq!(detokenize(&t, &vocab), caption);
    }
    assert!(matches!(
        tokenize("small dim circle upper", &vocab, 4),
        Err(Error::Truncation { needed: 5, max_len: 4 })
    ));
}

#[test]
fn split_partitions_the_corpus() {
    let (samples, _) = corpus(100, 3);
    let (tr, va, te) = split_corpus(&samples, (0.8, 0.1, 0.1), 9).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
    let mut ids: Vec<usize> = tr.iter().chain(&va).chain(&te).map(|s| s.id).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..100).collect::<Vec<_>>());
    assert!(split_corpus(&samples, (0.5, 0.1, 0.1), 9).is_err());
}
