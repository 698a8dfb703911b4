//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `PKMCKPT1`, a little-endian `u32` section count,
//! then one `(kind, offset, length, crc32)` entry of four `u32` per section,
//! then the section bodies. The config section is a length-prefixed UTF-8
//! JSON blob. Tensor sections hold a `u32` count followed by records of
//! `name_len, name, dtype, rank, dims..., data` in little-endian order.

use std::fs;
use std::path::Path;

use pkm_core::{Adam, DType, Parameters, Scalar, Tensor};
use pkm_lm::{LmError, ModelConfig, StepLog, TokenizeMode, TrainConfig, TrainState, Transformer, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"PKMCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum SectionKind {
    Config = 1,
    Params = 2,
    Buffers = 3,
    Values = 4,
    Optimizer = 5,
    Rng = 6,
    History = 7,
}

impl SectionKind {
    const ALL: [SectionKind; 7] = [
        SectionKind::Config,
        SectionKind::Params,
        SectionKind::Buffers,
        SectionKind::Values,
        SectionKind::Optimizer,
        SectionKind::Rng,
        SectionKind::History,
    ];

    fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u32 == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Config => "config",
            SectionKind::Params => "params",
            SectionKind::Buffers => "buffers",
            SectionKind::Values => "values",
            SectionKind::Optimizer => "optimizer",
            SectionKind::Rng => "rng",
            SectionKind::History => "history",
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {:?}, found {found:?}", String::from_utf8_lossy(MAGIC))]
    BadMagic { found: Vec<u8> },

    #[error("checksum mismatch in section '{section}': {detail}")]
    Checksum { section: String, detail: String },

    #[error("shape mismatch for tensor '{tensor}': expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("precision mismatch: checkpoint holds {found}, requested {expected}")]
    DTypeMismatch { expected: String, found: String },

    #[error("malformed section '{section}': {detail}")]
    Malformed { section: String, detail: String },

    #[error(transparent)]
    Model(#[from] LmError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn malformed<T>(section: SectionKind, detail: impl Into<String>) -> Result<T> {
    Err(CheckpointError::Malformed {
        section: section.name().into(),
        detail: detail.into(),
    })
}

/// Everything persisted alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub precision: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub dense_step: u64,
    pub value_row_updates: u64,
    pub vocab: Option<Vocab>,
    pub tokenize: Option<TokenizeMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub state: TrainState<T>,
    pub vocab: Option<Vocab>,
    pub tokenize: Option<TokenizeMode>,
}

#[derive(Debug, Clone, PartialEq)]
enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
struct Record {
    name: String,
    shape: Vec<usize>,
    data: Data,
}

impl Record {
    fn scalar<T: Scalar>(name: String, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => Data::F32(t.data().iter().map(|v| v.to_f32().expect("float")).collect()),
            _ => Data::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Record {
            name,
            shape: t.shape().to_vec(),
            data,
        }
    }

    fn dtype(&self) -> DType {
        match self.data {
            Data::F32(_) => DType::F32,
            Data::F64(_) => DType::F64,
            Data::U32(_) => DType::U32,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        put_u32(out, self.name.len() as u32);
        out.extend_from_slice(self.name.as_bytes());
        put_u32(out, self.dtype() as u32);
        put_u32(out, self.shape.len() as u32);
        for &d in &self.shape {
            put_u32(out, d as u32);
        }
        match &self.data {
            Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    /// Copies into `dst`, checking name-bound shape and element type.
    fn copy_into<T: Scalar>(&self, dst: &mut Tensor<T>) -> Result<()> {
        if self.shape != dst.shape() {
            return Err(CheckpointError::ShapeMismatch {
                tensor: self.name.clone(),
                expected: dst.shape().to_vec(),
                found: self.shape.clone(),
            });
        }
        match (&self.data, T::DTYPE) {
            (Data::F32(v), DType::F32) => {
                for (d, &x) in dst.data_mut().iter_mut().zip(v) {
                    *d = T::from_f32(x).expect("f32");
                }
            }
            (Data::F64(v), DType::F64) => {
                for (d, &x) in dst.data_mut().iter_mut().zip(v) {
                    *d = T::from_f64_lossy(x);
                }
            }
            _ => {
                return Err(CheckpointError::DTypeMismatch {
                    expected: T::NAME.into(),
                    found: format!("{:?} tensor '{}'", self.dtype(), self.name),
                })
            }
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: SectionKind,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return malformed(self.section, "unexpected end of section");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return malformed(self.section, format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }

    fn record(&mut self) -> Result<Record> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).or_else(|_| malformed(self.section, "tensor name is not UTF-8"))?;
        let code = self.u32()?;
        let Some(dtype) = DType::from_code(code) else {
            return malformed(self.section, format!("unknown dtype {code} for '{name}'"));
        };
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(dtype.width()).unwrap_or(usize::MAX))?;
        let data = match dtype {
            DType::F32 => Data::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
            DType::F64 => Data::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
            DType::U32 => Data::U32(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4"))).collect()),
        };
        Ok(Record { name, shape, data })
    }

    fn records(&mut self) -> Result<Vec<Record>> {
        let n = self.u32()? as usize;
        let out = (0..n).map(|_| self.record()).collect::<Result<_>>()?;
        self.done()?;
        Ok(out)
    }
}

fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, records.len() as u32);
    for r in records {
        r.encode(&mut out);
    }
    out
}

fn value_names(position: usize) -> [String; 4] {
    let p = format!("block{position}.memory");
    [
        format!("{p}.values"),
        format!("{p}.values_m"),
        format!("{p}.values_v"),
        format!("{p}.value_steps"),
    ]
}

/// Serializes a checkpoint to bytes.
pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let state = &ckpt.state;
    let model = &state.model;
    let meta = CheckpointMeta {
        precision: T::NAME.into(),
        model: model.config.clone(),
        train: state.config,
        step: state.step,
        dense_step: state.dense.step,
        value_row_updates: state.value_row_updates,
        vocab: ckpt.vocab.clone(),
        tokenize: ckpt.tokenize,
    };
    let json = serde_json::to_vec(&meta).expect("config serializes");
    let mut config = Vec::with_capacity(json.len() + 4);
    put_u32(&mut config, json.len() as u32);
    config.extend_from_slice(&json);

    let rec = |list: Vec<(String, &Tensor<T>)>| -> Vec<Record> {
        list.into_iter().map(|(n, t)| Record::scalar(n, t)).collect()
    };
    let params = encode_records(&rec(model.named_params("")));
    let buffers = encode_records(&rec(model.named_buffers("")));

    let mut values = Vec::new();
    for (pos, mem) in model.memories() {
        let [v, m, s, steps] = value_names(pos);
        let table = &mem.values;
        values.push(Record::scalar(v, &table.values));
        values.push(Record::scalar(m, &table.first_moment));
        values.push(Record::scalar(s, &table.second_moment));
        values.push(Record {
            name: steps,
            shape: vec![table.steps.len()],
            data: Data::U32(table.steps.clone()),
        });
    }
    let values = encode_records(&values);

    let names: Vec<String> = model.named_params("").into_iter().map(|(n, _)| n).collect();
    let mut optimizer = Vec::new();
    for (name, (m, v)) in names.iter().zip(state.dense.first_moment.iter().zip(&state.dense.second_moment)) {
        optimizer.push(Record::scalar(format!("m.{name}"), m));
        optimizer.push(Record::scalar(format!("v.{name}"), v));
    }
    let optimizer = encode_records(&optimizer);

    let mut rng = Vec::with_capacity(56);
    rng.extend_from_slice(&state.rng.get_seed());
    rng.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    rng.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let history: Vec<f64> = state
        .history
        .iter()
        .flat_map(|l| [l.step as f64, l.loss, l.lr, l.grad_norm])
        .collect();
    let history = encode_records(&[Record {
        name: "history".into(),
        shape: vec![state.history.len(), 4],
        data: Data::F64(history),
    }]);

    let bodies = [
        (SectionKind::Config, config),
        (SectionKind::Params, params),
        (SectionKind::Buffers, buffers),
        (SectionKind::Values, values),
        (SectionKind::Optimizer, optimizer),
        (SectionKind::Rng, rng),
        (SectionKind::History, history),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, bodies.len() as u32);
    let mut offset = MAGIC.len() + 4 + 16 * bodies.len();
    for (kind, body) in &bodies {
        put_u32(&mut out, *kind as u32);
        put_u32(&mut out, offset as u32);
        put_u32(&mut out, body.len() as u32);
        put_u32(&mut out, crc32fast::hash(body));
        offset += body.len();
    }
    for (_, body) in &bodies {
        out.extend_from_slice(body);
    }
    out
}

/// Verified section bodies, indexed by kind.
fn sections(bytes: &[u8]) -> Result<Vec<(SectionKind, &[u8])>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        // a prefix of the magic is a truncated checkpoint, not a foreign file
        if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
            return Err(CheckpointError::Checksum {
                section: "header".into(),
                detail: format!("file truncated to {} bytes", bytes.len()),
            });
        }
        return Err(CheckpointError::BadMagic {
            found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
        });
    }
    let truncated = |what: &str| CheckpointError::Checksum {
        section: "section table".into(),
        detail: format!("file truncated inside {what}"),
    };
    let word = |at: usize| -> Option<u32> { bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4"))) };
    let count = word(MAGIC.len()).ok_or_else(|| truncated("section count"))? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let base = MAGIC.len() + 4 + 16 * i;
        let entry: Vec<u32> = (0..4).map(|j| word(base + 4 * j)).collect::<Option<_>>().ok_or_else(|| truncated("section table"))?;
        let Some(kind) = SectionKind::from_code(entry[0]) else {
            return Err(CheckpointError::Malformed {
                section: "section table".into(),
                detail: format!("unknown section kind {}", entry[0]),
            });
        };
        let (offset, len, crc) = (entry[1] as usize, entry[2] as usize, entry[3]);
        let Some(body) = bytes.get(offset..offset.saturating_add(len)) else {
            return Err(CheckpointError::Checksum {
                section: kind.name().into(),
                detail: format!("section needs bytes {offset}..{} but file has {}", offset + len, bytes.len()),
            });
        };
        let actual = crc32fast::hash(body);
        if actual != crc {
            return Err(CheckpointError::Checksum {
                section: kind.name().into(),
                detail: format!("stored crc32 {crc:08x}, computed {actual:08x}"),
            });
        }
        out.push((kind, body));
    }
    for kind in SectionKind::ALL {
        if !out.iter().any(|(k, _)| *k == kind) {
            return malformed(kind, "section missing");
        }
    }
    Ok(out)
}

fn section<'a>(all: &[(SectionKind, &'a [u8])], kind: SectionKind) -> Reader<'a> {
    let bytes = all.iter().find(|(k, _)| *k == kind).expect("checked by sections()").1;
    Reader { bytes, pos: 0, section: kind }
}

/// Reads only the metadata blob.
pub fn decode_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let all = sections(bytes)?;
    let mut r = section(&all, SectionKind::Config);
    let n = r.u32()? as usize;
    let json = r.take(n)?;
    r.done()?;
    serde_json::from_slice(json).or_else(|e| malformed(SectionKind::Config, e.to_string()))
}

/// Assigns every record to the tensor of the same name.
fn restore<T: Scalar>(kind: SectionKind, records: Vec<Record>, targets: Vec<(String, &mut Tensor<T>)>) -> Result<()> {
    if records.len() != targets.len() {
        return malformed(kind, format!("{} tensors stored, model expects {}", records.len(), targets.len()));
    }
    for (rec, (name, dst)) in records.iter().zip(targets) {
        if rec.name != name {
            return malformed(kind, format!("expected tensor '{name}', found '{}'", rec.name));
        }
        rec.copy_into(dst)?;
    }
    Ok(())
}

/// Decodes a checkpoint. With `expected`, tensors are loaded into a model of
/// that configuration instead of the stored one.
pub fn decode<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let meta = decode_meta(bytes)?;
    if meta.precision != T::NAME {
        return Err(CheckpointError::DTypeMismatch {
            expected: T::NAME.into(),
            found: meta.precision,
        });
    }
    let all = sections(bytes)?;
    let model_config = expected.cloned().unwrap_or_else(|| meta.model.clone());
    let mut model = Transformer::<T>::new(model_config)?;

    restore(SectionKind::Params, section(&all, SectionKind::Params).records()?, model.named_params_mut(""))?;
    restore(SectionKind::Buffers, section(&all, SectionKind::Buffers).records()?, model.named_buffers_mut(""))?;

    let values = section(&all, SectionKind::Values).records()?;
    let positions: Vec<usize> = model.memories().map(|(p, _)| p).collect();
    if values.len() != 4 * positions.len() {
        return malformed(SectionKind::Values, format!("{} records for {} memories", values.len(), positions.len()));
    }
    for ((_, mem), chunk) in model.memories_mut().zip(values.chunks(4)) {
        let table = &mut mem.values;
        restore(
            SectionKind::Values,
            chunk[..3].to_vec(),
            vec![
                (chunk[0].name.clone(), &mut table.values),
                (chunk[1].name.clone(), &mut table.first_moment),
                (chunk[2].name.clone(), &mut table.second_moment),
            ],
        )?;
        let steps = &chunk[3];
        match &steps.data {
            Data::U32(v) if v.len() == table.steps.len() && steps.shape == [v.len()] => table.steps.clone_from(v),
            _ => {
                return Err(CheckpointError::ShapeMismatch {
                    tensor: steps.name.clone(),
                    expected: vec![table.steps.len()],
                    found: steps.shape.clone(),
                })
            }
        }
    }
    for (&p, chunk) in positions.iter().zip(values.chunks(4)) {
        let names = value_names(p);
        if chunk.iter().zip(&names).any(|(r, n)| &r.name != n) {
            return malformed(SectionKind::Values, format!("value tensors of layer {p} are misnamed"));
        }
    }

    let mut dense = Adam::new(meta.train.dense_adam());
    dense.step = meta.dense_step;
    let moments = section(&all, SectionKind::Optimizer).records()?;
    if !moments.is_empty() {
        let shapes: Vec<(String, Vec<usize>)> =
            model.named_params("").into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if moments.len() != 2 * shapes.len() {
            return malformed(SectionKind::Optimizer, format!("{} moments for {} parameters", moments.len(), shapes.len()));
        }
        for ((name, shape), pair) in shapes.iter().zip(moments.chunks(2)) {
            let mut m = Tensor::zeros(shape);
            let mut v = Tensor::zeros(shape);
            restore(
                SectionKind::Optimizer,
                pair.to_vec(),
                vec![(format!("m.{name}"), &mut m), (format!("v.{name}"), &mut v)],
            )?;
            dense.first_moment.push(m);
            dense.second_moment.push(v);
        }
    }

    let mut r = section(&all, SectionKind::Rng);
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.done()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let hist = section(&all, SectionKind::History).records()?;
    let history = match hist.as_slice() {
        [Record {
            data: Data::F64(v),
            shape,
            ..
        }] if shape.len() == 2 && shape[1] == 4 && v.len() == shape[0] * 4 => v
            .chunks_exact(4)
            .map(|c| StepLog {
                step: c[0] as u64,
                loss: c[1],
                lr: c[2],
                grad_norm: c[3],
            })
            .collect(),
        _ => return malformed(SectionKind::History, "expected one (n, 4) f64 tensor"),
    };

    let mut state = TrainState::from_model(model, meta.train)?;
    state.dense = dense;
    state.rng = rng;
    state.step = meta.step;
    state.history = history;
    state.value_row_updates = meta.value_row_updates;
    Ok(Checkpoint {
        state,
        vocab: meta.vocab,
        tokenize: meta.tokenize,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode(ckpt);
    let tmp = path.with_extension("tmp");
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&read_bytes(path)?, None)
}

/// Loads into a model built from `expected`, reporting the first tensor whose
/// stored shape disagrees.
pub fn load_checkpoint_as<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<T>> {
    decode(&read_bytes(path)?, Some(expected))
}

/// Stored precision (`"f32"` or `"f64"`).
pub fn peek_precision(path: &Path) -> Result<String> {
    Ok(decode_meta(&read_bytes(path)?)?.precision)
}
