//! Binary key → array container and the training-state checkpoint built on it.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   8 bytes  "UMLPCKPT"
//! version u32
//! count   u32
//! entry*  name_len u32, name utf-8, dtype u8 (0 f32, 1 u64, 2 u8),
//!         ndim u32, dims u64 × ndim, payload
//! digest  32 bytes SHA-256 of everything above
//! ```
//!
//! Keys written by [`state_to_container`]:
//!
//! | key | contents |
//! |---|---|
//! | `param/<name>` | every model parameter, including `temperature.*` (log τ) |
//! | `bn/<i>/running_mean`, `bn/<i>/running_var` | f32 per channel |
//! | `bn/<i>/hyper` | f32 `[momentum, epsilon]` |
//! | `bn/<i>/frozen` | u8 flag |
//! | `optim/m/<name>`, `optim/v/<name>` | AdamW moments |
//! | `optim/hyper` | u64 bit patterns of the f64 `[beta1, beta2, eps, weight_decay]` |
//! | `state/counters` | u64 `[step, optimizer t, phase, phase1_done, phase_step, phase_total, strong_view_forwards, vocab_size]` |
//! | `rng/seed`, `rng/position` | u8 × 32 and u64 `[stream, word_pos_lo, word_pos_hi]` |
//! | `config/model` | u8 JSON of the model configuration |

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::encoders::{BnLayerState, ModelConfig};
use crate::model::Model;
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::trainer::{AdamW, TrainState};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"UMLPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

pub type Container = BTreeMap<String, Array>;

pub fn encode(container: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(container.len() as u32).to_le_bytes());
    for (name, arr) in container {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let (dtype, dims): (u8, Vec<usize>) = match arr {
            Array::F32 { shape, .. } => (0, shape.clone()),
            Array::U64(v) => (1, vec![v.len()]),
            Array::Bytes(v) => (2, vec![v.len()]),
        };
        out.push(dtype);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match arr {
            Array::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Array::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Array::Bytes(v) => out.extend_from_slice(v),
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if &body[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checkpoint digest mismatch (corrupted or truncated)".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Container::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let arr = match dtype {
            0 => {
                let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("extent overflow".into()))?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Array::F32 { shape: dims, data }
            }
            1 => Array::U64((0..n).map(|_| r.u64()).collect::<Result<_>>()?),
            2 => Array::Bytes(r.take(n)?.to_vec()),
            d => return Err(Error::Checkpoint(format!("unknown dtype {d} for `{name}`"))),
        };
        out.insert(name, arr);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
    }
    Ok(out)
}

fn f32_entry(t: &Tensor) -> Array {
    Array::F32 {
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

fn vec_entry(v: &[f32]) -> Array {
    Array::F32 {
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

pub fn state_to_container(state: &TrainState) -> Container {
    let mut c = Container::new();
    let m = &state.model;
    for (k, t) in m.params.iter() {
        c.insert(format!("param/{k}"), f32_entry(t));
    }
    for (i, s) in m.bn.iter().enumerate() {
        c.insert(format!("bn/{i}/running_mean"), vec_entry(&s.running_mean));
        c.insert(format!("bn/{i}/running_var"), vec_entry(&s.running_var));
        c.insert(format!("bn/{i}/hyper"), vec_entry(&[s.momentum, s.epsilon]));
        c.insert(format!("bn/{i}/frozen"), Array::Bytes(vec![u8::from(s.frozen)]));
    }
    let o = &state.optimizer;
    for (k, t) in o.m.iter() {
        c.insert(format!("optim/m/{k}"), f32_entry(t));
    }
    for (k, t) in o.v.iter() {
        c.insert(format!("optim/v/{k}"), f32_entry(t));
    }
    c.insert(
        "optim/hyper".into(),
        Array::U64(vec![o.beta1.to_bits(), o.beta2.to_bits(), o.eps.to_bits(), o.weight_decay.to_bits()]),
    );
    c.insert(
        "state/counters".into(),
        Array::U64(vec![
            state.step,
            o.t,
            state.phase as u64,
            u64::from(state.phase1_done),
            state.phase_step,
            state.phase_total,
            state.strong_view_forwards,
            m.vocab_size as u64,
        ]),
    );
    c.insert("rng/seed".into(), Array::Bytes(state.rng.get_seed().to_vec()));
    let wp = state.rng.get_word_pos();
    c.insert(
        "rng/position".into(),
        Array::U64(vec![state.rng.get_stream(), wp as u64, (wp >> 64) as u64]),
    );
    c.insert(
        "config/model".into(),
        Array::Bytes(serde_json::to_vec(&m.config).expect("model config serializes")),
    );
    c
}

fn missing(key: &str) -> Error {
    Error::Checkpoint(format!("missing or mistyped entry `{key}`"))
}

fn get_f32<'a>(c: &'a Container, key: &str) -> Result<(&'a [usize], &'a [f32])> {
    match c.get(key) {
        Some(Array::F32 { shape, data }) => Ok((shape, data)),
        _ => Err(missing(key)),
    }
}

fn get_u64<'a>(c: &'a Container, key: &str, len: usize) -> Result<&'a [u64]> {
    match c.get(key) {
        Some(Array::U64(v)) if v.len() == len => Ok(v),
        _ => Err(missing(key)),
    }
}

fn get_bytes<'a>(c: &'a Container, key: &str) -> Result<&'a [u8]> {
    match c.get(key) {
        Some(Array::Bytes(v)) => Ok(v),
        _ => Err(missing(key)),
    }
}

fn prefixed(c: &Container, prefix: &str) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    for (k, v) in c.range(prefix.to_string()..) {
        let Some(name) = k.strip_prefix(prefix) else { break };
        match v {
            Array::F32 { shape, data } => ps.insert(name, Tensor::from_vec(shape, data.clone())),
            _ => return Err(missing(k)),
        }
    }
    Ok(ps)
}

/// `found` must hold exactly the tensors of `reference`, shape for shape.
/// With `partial`, missing names are allowed (optimizer moments appear only
/// after a parameter's first update).
fn check_layout(found: &ParamSet, reference: &ParamSet, what: &str, partial: bool) -> Result<()> {
    for (name, t) in found.iter() {
        match reference.get(name) {
            Some(r) if r.shape() == t.shape() => {}
            Some(r) => {
                return Err(Error::Checkpoint(format!(
                    "{what} `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    r.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("unexpected {what} `{name}`"))),
        }
    }
    if !partial {
        if let Some((name, _)) = reference.iter().find(|(n, _)| !found.contains(n)) {
            return Err(Error::Checkpoint(format!("missing {what} `{name}`")));
        }
    }
    Ok(())
}

pub fn state_from_container(c: &Container) -> Result<TrainState> {
    let config: ModelConfig = serde_json::from_slice(get_bytes(c, "config/model")?)
        .map_err(|e| Error::Checkpoint(format!("model configuration: {e}")))?;
    let counters = get_u64(c, "state/counters", 8)?;
    let params = prefixed(c, "param/")?;
    let reference = Model::new(config.clone(), counters[7] as usize, 0)
        .map_err(|e| Error::Checkpoint(format!("stored configuration: {e}")))?;
    check_layout(&params, &reference.params, "parameter", false)?;
    let mut bn = Vec::new();
    for i in 0..config.vision_widths.len() {
        let (_, mean) = get_f32(c, &format!("bn/{i}/running_mean"))?;
        let (_, var) = get_f32(c, &format!("bn/{i}/running_var"))?;
        let (_, hyper) = get_f32(c, &format!("bn/{i}/hyper"))?;
        let frozen = get_bytes(c, &format!("bn/{i}/frozen"))?;
        let width = config.vision_widths[i];
        if hyper.len() != 2 || frozen.len() != 1 || mean.len() != width || var.len() != width {
            return Err(Error::Checkpoint(format!("malformed batch-norm entry {i}")));
        }
        bn.push(BnLayerState {
            running_mean: mean.to_vec(),
            running_var: var.to_vec(),
            momentum: hyper[0],
            epsilon: hyper[1],
            frozen: frozen[0] != 0,
        });
    }
    let hyper = get_u64(c, "optim/hyper", 4)?;
    let optimizer = AdamW {
        beta1: f64::from_bits(hyper[0]),
        beta2: f64::from_bits(hyper[1]),
        eps: f64::from_bits(hyper[2]),
        weight_decay: f64::from_bits(hyper[3]),
        t: counters[1],
        m: prefixed(c, "optim/m/")?,
        v: prefixed(c, "optim/v/")?,
    };
    check_layout(&optimizer.m, &params, "first moment", true)?;
    check_layout(&optimizer.v, &params, "second moment", true)?;
    let seed: [u8; 32] = get_bytes(c, "rng/seed")?
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let pos = get_u64(c, "rng/position", 3)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(pos[0]);
    rng.set_word_pos(pos[1] as u128 | ((pos[2] as u128) << 64));
    let phase = counters[2];
    if phase > 2 {
        return Err(Error::Checkpoint(format!("phase marker {phase}")));
    }
    let model = Model {
        config,
        vocab_size: counters[7] as usize,
        params,
        bn,
    };
    Ok(TrainState {
        model,
        optimizer,
        step: counters[0],
        phase: phase as u8,
        phase1_done: counters[3] != 0,
        phase_step: counters[4],
        phase_total: counters[5],
        rng,
        strong_view_forwards: counters[6],
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&state_to_container(state)))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    state_from_container(&decode(&bytes)?)
}

/// Replaces `state` only when `path` loads cleanly.
pub fn load_into(state: &mut TrainState, path: &Path) -> Result<()> {
    *state = load_checkpoint(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let mut c = Container::new();
        c.insert("a".into(), Array::F32 { shape: vec![2, 2], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5] });
        c.insert("b".into(), Array::U64(vec![u64::MAX, 0]));
        c.insert("c".into(), Array::Bytes(b"xyz".to_vec()));
        let bytes = encode(&c);
        assert_eq!(decode(&bytes).unwrap(), c);
        for cut in [0, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Checkpoint(_))));
        let mut wrong_version = bytes;
        wrong_version[8] = 9;
        assert!(matches!(decode(&wrong_version), Err(Error::Checkpoint(_))));
    }
}
