//! Single-file training snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LOGOCKPT" | version u32 | config_len u32 | config text
//! step u64 | epoch u64 | steps_per_epoch u64 | best_knn f64 (NaN if unset)
//! rng seed [32] | rng stream u64 | rng word_pos u128 | queue_head u64
//! array_count u32 | arrays...
//! sha256 of everything above [32]
//! ```
//!
//! Each array is `name_len u32 | name | ndim u32 | dims u64 * ndim | f32 data`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{pairs_to_text, parse_pairs, train_config_from_pairs, train_pairs};
use crate::encoder::NegativeQueue;
use crate::error::{io_err, Error, Result};
use crate::nn::{ParamSet, Sgd};
use crate::tensor::Tensor;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"LOGOCKPT";
pub const VERSION: u32 = 1;

fn push_set<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, set: &'a ParamSet<f32>) {
    for i in 0..set.len() {
        out.push((format!("{prefix}/{}", set.name(i)), set.get(i)));
    }
}

fn push_opt<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, opt: &'a Sgd<f32>, names: &ParamSet<f32>) {
    for (i, v) in opt.velocity.iter().enumerate() {
        out.push((format!("{prefix}/{}", names.name(i)), v));
    }
}

fn named_arrays(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (prefix, set) in state.encoder.groups() {
        push_set(&mut out, prefix, set);
    }
    push_set(&mut out, "regressor.params", &state.regressor.weights.params);
    push_set(&mut out, "regressor.buffers", &state.regressor.weights.buffers);
    push_opt(&mut out, "opt.encoder", &state.encoder_opt, &state.encoder.online.params);
    if let (Some(opt), Some(p)) = (&state.predictor_opt, &state.encoder.predictor) {
        push_opt(&mut out, "opt.predictor", opt, &p.params);
    }
    push_opt(&mut out, "opt.regressor", &state.regressor.optimizer, &state.regressor.weights.params);
    if let Some(q) = &state.queue {
        out.push(("queue.buffer".into(), q.buffer()));
    }
    out
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

/// Serializes the full training state.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    put_u32(&mut b, VERSION);
    let config = pairs_to_text(&train_pairs(&state.config));
    put_u32(&mut b, config.len() as u32);
    b.extend_from_slice(config.as_bytes());
    put_u64(&mut b, state.step);
    put_u64(&mut b, state.epoch);
    put_u64(&mut b, state.steps_per_epoch);
    b.extend_from_slice(&state.best_knn.unwrap_or(f64::NAN).to_le_bytes());
    b.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut b, state.rng.get_stream());
    b.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    put_u64(&mut b, state.queue.as_ref().map_or(u64::MAX, |q| q.head() as u64));
    let arrays = named_arrays(state);
    put_u32(&mut b, arrays.len() as u32);
    for (name, t) in arrays {
        put_u32(&mut b, name.len() as u32);
        b.extend_from_slice(name.as_bytes());
        put_u32(&mut b, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut b, d as u64);
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("archive ends early"))?;
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

/// Parses an archive produced by [`encode_checkpoint`]. Nothing is returned
/// unless the whole archive checks out.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("archive version {version}, this build reads version {VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or corrupted archive)"));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let clen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(clen)?).map_err(|_| corrupt("config echo is not UTF-8"))?;
    let config = train_config_from_pairs(&parse_pairs(text)?)?;
    let step = r.u64()?;
    let epoch = r.u64()?;
    let steps_per_epoch = r.u64()?;
    let best = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let head = r.u64()?;

    let mut state = TrainState::with_steps(config, steps_per_epoch)?;
    state.step = step;
    state.epoch = epoch;
    state.best_knn = (!best.is_nan()).then_some(best);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;

    let count = r.u32()? as usize;
    let mut stored = std::collections::BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| corrupt("array name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("array too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if stored.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(corrupt(format!("duplicate array {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after arrays"));
    }

    let expected: Vec<(String, Vec<usize>)> = named_arrays(&state)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != stored.len() {
        return Err(corrupt(format!("expected {} arrays, found {}", expected.len(), stored.len())));
    }
    for (name, shape) in &expected {
        let t = stored.get(name).ok_or_else(|| corrupt(format!("missing array {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(corrupt(format!("array {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    let mut take = |name: String| stored.remove(&name).expect("validated above");
    for (prefix, set) in state.encoder.groups_mut() {
        fill(set, prefix, &mut take);
    }
    fill(&mut state.regressor.weights.params, "regressor.params", &mut take);
    fill(&mut state.regressor.weights.buffers, "regressor.buffers", &mut take);
    fill_opt(&mut state.encoder_opt, &state.encoder.online.params, "opt.encoder", &mut take);
    if let (Some(opt), Some(p)) = (&mut state.predictor_opt, &state.encoder.predictor) {
        fill_opt(opt, &p.params, "opt.predictor", &mut take);
    }
    fill_opt(&mut state.regressor.optimizer, &state.regressor.weights.params, "opt.regressor", &mut take);
    if state.queue.is_some() {
        let head = usize::try_from(head).map_err(|_| corrupt("bad queue head"))?;
        state.queue = Some(NegativeQueue::from_parts(take("queue.buffer".into()), head)?);
    }
    Ok(state)
}

fn fill(set: &mut ParamSet<f32>, prefix: &str, take: &mut impl FnMut(String) -> Tensor<f32>) {
    for i in 0..set.len() {
        let t = take(format!("{prefix}/{}", set.name(i)));
        *set.get_mut(i) = t;
    }
}

fn fill_opt(opt: &mut Sgd<f32>, names: &ParamSet<f32>, prefix: &str, take: &mut impl FnMut(String) -> Tensor<f32>) {
    for (i, v) in opt.velocity.iter_mut().enumerate() {
        *v = take(format!("{prefix}/{}", names.name(i)));
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}
