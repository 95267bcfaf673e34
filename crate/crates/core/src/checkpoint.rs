//! Binary checkpoints of models and training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NELFCKPT"
//! version    u32
//! header_len u32
//! header     TOML text: model config, optional training section, and the
//!            ordered tensor table (name, rows, cols)
//! tensors    f32 values of every table entry, row-major, in table order
//! training   (training checkpoints only)
//!            rng seed [u8; 32], rng stream u64, rng word position u128,
//!            permutation cursor u64, permutation length u64, u32 entries,
//!            loss count u64, f64 losses
//! checksum   u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{LightFieldModel, ModelConfig};
use crate::net::{AdamConfig, AdamState, Dense, Mlp};
use crate::train::{Sampler, TrainConfig, TrainError, TrainState};

pub const MAGIC: &[u8; 8] = b"NELFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    config: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainSection {
    iteration: u64,
    config: TrainConfig,
    adam_color: AdamMeta,
    adam_embed: Option<AdamMeta>,
    permutation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainSection>,
    tensors: Vec<TensorInfo>,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::CorruptCheckpoint(msg.into())
}

fn push_net(prefix: &str, net: &Mlp<f32>, table: &mut Vec<TensorInfo>, data: &mut Vec<u8>) {
    for (l, layer) in net.layers.iter().enumerate() {
        let (r, c) = layer.weight.dim();
        table.push(TensorInfo { name: format!("{prefix}.{l}.weight"), rows: r, cols: c });
        table.push(TensorInfo { name: format!("{prefix}.{l}.bias"), rows: 1, cols: c });
        for &w in layer.weight.iter() {
            data.extend_from_slice(&w.to_le_bytes());
        }
        for &b in layer.bias.iter() {
            data.extend_from_slice(&b.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128, TrainError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, TrainError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    /// Rebuilds a network from consecutive table entries named `prefix.*`.
    fn net(&mut self, like: &Mlp<f32>, prefix: &str, table: &mut std::slice::Iter<TensorInfo>) -> Result<Mlp<f32>, TrainError> {
        let mut layers = Vec::with_capacity(like.layers.len());
        for (l, layer) in like.layers.iter().enumerate() {
            let (r, c) = layer.weight.dim();
            let w = table.next().ok_or_else(|| corrupt("tensor table too short"))?;
            let b = table.next().ok_or_else(|| corrupt("tensor table too short"))?;
            let want_w = TensorInfo { name: format!("{prefix}.{l}.weight"), rows: r, cols: c };
            let want_b = TensorInfo { name: format!("{prefix}.{l}.bias"), rows: 1, cols: c };
            if *w != want_w || *b != want_b {
                return Err(corrupt(format!("tensor table mismatch at {prefix}.{l}")));
            }
            let weight = Array2::from_shape_vec((r, c), self.f32s(r * c)?).expect("sized");
            let bias = Array1::from_vec(self.f32s(c)?);
            layers.push(Dense { weight, bias });
        }
        Ok(Mlp { shape: like.shape, layers })
    }
}

fn encode(header: &Header, body: &[u8], train_tail: &[u8]) -> Result<Vec<u8>, TrainError> {
    let text = toml::to_string(header).map_err(|e| corrupt(format!("header serialization: {e}")))?;
    let mut out = Vec::with_capacity(16 + text.len() + body.len() + train_tail.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(train_tail);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn model_tensors(model: &LightFieldModel<f32>, table: &mut Vec<TensorInfo>, body: &mut Vec<u8>) {
    if let Some(e) = &model.embed_net {
        push_net("embed", e, table, body);
    }
    push_net("color", &model.color_net, table, body);
}

pub fn model_to_bytes(model: &LightFieldModel<f32>) -> Result<Vec<u8>, TrainError> {
    let mut table = Vec::new();
    let mut body = Vec::new();
    model_tensors(model, &mut table, &mut body);
    encode(&Header { model: model.config.clone(), train: None, tensors: table }, &body, &[])
}

pub fn state_to_bytes(state: &TrainState) -> Result<Vec<u8>, TrainError> {
    let mut table = Vec::new();
    let mut body = Vec::new();
    model_tensors(&state.model, &mut table, &mut body);
    if let Some(a) = &state.adam_embed {
        push_net("adam_m.embed", &a.m, &mut table, &mut body);
        push_net("adam_v.embed", &a.v, &mut table, &mut body);
    }
    push_net("adam_m.color", &state.adam_color.m, &mut table, &mut body);
    push_net("adam_v.color", &state.adam_color.v, &mut table, &mut body);

    let mut tail = Vec::new();
    let rng = &state.sampler.rng;
    tail.extend_from_slice(&rng.get_seed());
    tail.extend_from_slice(&rng.get_stream().to_le_bytes());
    tail.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    let (perm, cursor) = state.sampler.permutation.clone().unwrap_or_default();
    tail.extend_from_slice(&(cursor as u64).to_le_bytes());
    tail.extend_from_slice(&(perm.len() as u64).to_le_bytes());
    for p in perm {
        tail.extend_from_slice(&p.to_le_bytes());
    }
    tail.extend_from_slice(&(state.losses.len() as u64).to_le_bytes());
    for l in &state.losses {
        tail.extend_from_slice(&l.to_le_bytes());
    }

    let meta = |a: &AdamState<f32>| AdamMeta { step: a.step, config: a.config };
    let header = Header {
        model: state.model.config.clone(),
        train: Some(TrainSection {
            iteration: state.iteration,
            config: state.config.clone(),
            adam_color: meta(&state.adam_color),
            adam_embed: state.adam_embed.as_ref().map(meta),
            permutation: state.sampler.permutation.is_some(),
        }),
        tensors: table,
    };
    encode(&header, &body, &tail)
}

/// Validates framing and checksum, returning the header and a reader
/// positioned at the first tensor.
fn open(bytes: &[u8]) -> Result<(Header, Reader<'_>), TrainError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(TrainError::VersionMismatch { found: version, expected: VERSION });
    }
    let (payload, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { bytes: payload, pos: 12 };
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| corrupt(format!("header: {e}")))?;
    Ok((header, r))
}

fn read_model(header: &Header, r: &mut Reader, table: &mut std::slice::Iter<TensorInfo>) -> Result<LightFieldModel<f32>, TrainError> {
    let shell = LightFieldModel::<f32>::from_parts(
        header.model.clone(),
        header.model.embed_shape().map(|s| Mlp::zeros(s)).transpose()?,
        Mlp::zeros(header.model.color_shape())?,
    )?;
    let embed = match &shell.embed_net {
        Some(e) => Some(r.net(e, "embed", table)?),
        None => None,
    };
    let color = r.net(&shell.color_net, "color", table)?;
    Ok(LightFieldModel::from_parts(header.model.clone(), embed, color)?)
}

/// Loads the model from either a model or a training checkpoint.
pub fn model_from_bytes(bytes: &[u8]) -> Result<LightFieldModel<f32>, TrainError> {
    let (header, mut r) = open(bytes)?;
    let mut table = header.tensors.iter();
    read_model(&header, &mut r, &mut table)
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<TrainState, TrainError> {
    let (header, mut r) = open(bytes)?;
    let train = header.train.clone().ok_or_else(|| corrupt("checkpoint holds no training state"))?;
    let mut table = header.tensors.iter();
    let model = read_model(&header, &mut r, &mut table)?;
    let adam_embed = match (&model.embed_net, &train.adam_embed) {
        (Some(e), Some(meta)) => Some(AdamState {
            m: r.net(e, "adam_m.embed", &mut table)?,
            v: r.net(e, "adam_v.embed", &mut table)?,
            step: meta.step,
            config: meta.config,
        }),
        (None, None) => None,
        _ => return Err(corrupt("optimizer state does not match model")),
    };
    let adam_color = AdamState {
        m: r.net(&model.color_net, "adam_m.color", &mut table)?,
        v: r.net(&model.color_net, "adam_v.color", &mut table)?,
        step: train.adam_color.step,
        config: train.adam_color.config,
    };
    if table.next().is_some() {
        return Err(corrupt("unexpected extra tensors"));
    }

    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let cursor = r.u64()? as usize;
    let n = r.u64()? as usize;
    let mut perm = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        perm.push(r.u32()?);
    }
    let n_loss = r.u64()? as usize;
    let mut losses = Vec::with_capacity(n_loss.min(1 << 24));
    for _ in 0..n_loss {
        losses.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
    }
    if r.pos != r.bytes.len() {
        return Err(corrupt("trailing bytes after training state"));
    }
    let sampler = Sampler { rng, permutation: train.permutation.then_some((perm, cursor)) };
    Ok(TrainState {
        config: train.config,
        model,
        adam_color,
        adam_embed,
        iteration: train.iteration,
        sampler,
        losses,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    fs::write(path, bytes).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

fn read(path: &Path) -> Result<Vec<u8>, TrainError> {
    fs::read(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

pub fn save_model(path: &Path, model: &LightFieldModel<f32>) -> Result<(), TrainError> {
    write(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<LightFieldModel<f32>, TrainError> {
    model_from_bytes(&read(path)?)
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<(), TrainError> {
    write(path, &state_to_bytes(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    state_from_bytes(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Vec3, VoxelGrid};
    use crate::model::{EmbeddingKind, NetSpec};

    fn state(kind: EmbeddingKind, grid: bool, permutation: bool) -> TrainState {
        let mut m = ModelConfig::new(kind, 2);
        m.embed_net = NetSpec::new(8, 2);
        m.color_net = NetSpec::new(8, 3);
        if grid {
            m.grid = Some(VoxelGrid::new(2, Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap());
        }
        let mut c = TrainConfig::new(m);
        c.permutation = permutation;
        c.total_iters = 3;
        c.ease_iters = 2;
        c.batch_size = 4;
        TrainState::new(c).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for (kind, grid, perm) in [
            (EmbeddingKind::None, false, false),
            (EmbeddingKind::Affine(3), true, true),
            (EmbeddingKind::Feature(2), false, true),
        ] {
            let mut s = state(kind, grid, perm);
            s.sampler.sample(10, 3).unwrap();
            s.losses = vec![0.5, 0.25];
            let a = state_to_bytes(&s).unwrap();
            let back = state_from_bytes(&a).unwrap();
            assert_eq!(back.model.color_net, s.model.color_net);
            assert_eq!(back.sampler, s.sampler);
            assert_eq!(state_to_bytes(&back).unwrap(), a);
            let m = model_to_bytes(&s.model).unwrap();
            assert_eq!(model_to_bytes(&model_from_bytes(&m).unwrap()).unwrap(), m);
            // the model can also be read out of a training checkpoint
            assert_eq!(model_from_bytes(&a).unwrap().embed_net, s.model.embed_net);
        }
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = state_to_bytes(&state(EmbeddingKind::Affine(2), false, false)).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 30] {
            assert!(matches!(state_from_bytes(&bytes[..cut]), Err(TrainError::CorruptCheckpoint(_))));
        }
        let mut flipped = bytes.clone();
        let i = flipped.len() - 40;
        flipped[i] ^= 1;
        assert!(matches!(state_from_bytes(&flipped), Err(TrainError::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = model_to_bytes(&state(EmbeddingKind::None, false, false).model).unwrap();
        bytes[8] = 9;
        assert!(matches!(model_from_bytes(&bytes), Err(TrainError::VersionMismatch { found: 9, expected: 1 })));
    }

    #[test]
    fn model_checkpoint_has_no_training_state() {
        let bytes = model_to_bytes(&state(EmbeddingKind::None, false, false).model).unwrap();
        assert!(matches!(state_from_bytes(&bytes), Err(TrainError::CorruptCheckpoint(_))));
    }
}
