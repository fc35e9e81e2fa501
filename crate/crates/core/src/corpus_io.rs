//! On-disk corpus splits.
//!
//! Each split `<name>` is two files:
//!
//! * `<name>.images.bin`: magic `UMLPIMG1`, dtype code `u32` (0 = f32 little
//!   endian), rank `u32` (always 4), extents `u64 × 4` as `[N, C, H, W]`,
//!   then the pixels row-major.
//! * `<name>.jsonl`: one object per sample, fields in the order `id`,
//!   `caption`, `tokens`, `attributes` (`intensity`, `shape`, `position`,
//!   `size`), `label`. Line `i` describes image `i`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Attributes, Sample};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"UMLPIMG1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: usize,
    caption: String,
    tokens: Vec<usize>,
    attributes: Attributes,
    label: usize,
}

pub fn images_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.images.bin"))
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Writes one split. `dims` is `[C, H, W]` of every image.
pub fn write_split(dir: &Path, split: &str, samples: &[Sample], dims: [usize; 3]) -> Result<()> {
    let per: usize = dims.iter().product();
    let mut img = BufWriter::new(File::create(images_path(dir, split))?);
    img.write_all(MAGIC)?;
    img.write_all(&0u32.to_le_bytes())?;
    img.write_all(&4u32.to_le_bytes())?;
    for d in [samples.len(), dims[0], dims[1], dims[2]] {
        img.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut man = BufWriter::new(File::create(manifest_path(dir, split))?);
    for s in samples {
        if s.image.len() != per {
            return Err(Error::Corpus(format!("sample {} has {} pixels, expected {per}", s.id, s.image.len())));
        }
        for v in &s.image {
            img.write_all(&v.to_le_bytes())?;
        }
        let line = ManifestLine {
            id: s.id,
            caption: s.caption.clone(),
            tokens: s.tokens.clone(),
            attributes: s.attributes,
            label: s.label,
        };
        serde_json::to_writer(&mut man, &line)?;
        man.write_all(b"\n")?;
    }
    img.flush()?;
    man.flush()?;
    Ok(())
}

/// Reads one split written by [`write_split`]; returns samples and `[C, H, W]`.
pub fn read_split(dir: &Path, split: &str) -> Result<(Vec<Sample>, [usize; 3])> {
    let path = images_path(dir, split);
    let mut raw = Vec::new();
    File::open(&path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.len() < 48 || &raw[..8] != MAGIC {
        return Err(Error::Corpus(format!("{} is not an image array file", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(raw[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(raw[o..o + 8].try_into().expect("8 bytes")) as usize;
    if u32_at(8) != 0 || u32_at(12) != 4 {
        return Err(Error::Corpus("unsupported dtype or rank in image header".into()));
    }
    let (n, c, h, w) = (u64_at(16), u64_at(24), u64_at(32), u64_at(40));
    let per = c * h * w;
    if raw.len() != 48 + n * per * 4 {
        return Err(Error::Corpus(format!("{} does not hold {n} images of {c}x{h}x{w}", path.display())));
    }
    let mpath = manifest_path(dir, split);
    let reader = BufReader::new(File::open(&mpath).map_err(|e| Error::Corpus(format!("{}: {e}", mpath.display())))?);
    let mut samples = Vec::with_capacity(n);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i >= n {
            return Err(Error::Corpus(format!("manifest has more lines than the {n} images")));
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let start = 48 + i * per * 4;
        let image = raw[start..start + per * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        samples.push(Sample {
            id: m.id,
            image,
            caption: m.caption,
            tokens: m.tokens,
            attributes: m.attributes,
            label: m.label,
        });
    }
    if samples.len() != n {
        return Err(Error::Corpus(format!("manifest lists {} samples, image file {n}", samples.len())));
    }
    Ok((samples, [c, h, w]))
}
