//! On-disk formats: raw recordings (VTRX), spectro-temporal tensors (VTXF)
//! with a text sidecar, labeled datasets, checkpoints and training state.
//!
//! All binary fields are little-endian. Writers go through a temporary file
//! and a rename, so a failed write never leaves a truncated file behind.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::{self, KeyValues};
use crate::error::{Error, Result};
use crate::graph::TactileGraph;
use crate::network::Model;
use crate::preprocess::{Preprocessed, RawRecording, Wavelet};
use crate::synthdata::{DatasetStats, LabeledSample};
use crate::tensor::Mat;
use crate::training::{Adam, TrainState, TrainingConfig};

pub const VTRX_MAGIC: &[u8; 4] = b"VTRX";
pub const VTXF_MAGIC: &[u8; 4] = b"VTXF";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSTGCKPT";
pub const STATE_MAGIC: &[u8; 8] = b"SSTGSTAT";
pub const FORMAT_VERSION: u32 = 1;

/// `<path>.<ext>`, keeping the original extension.
pub fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sidecar(path, "tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], kind: &'static str) -> Self {
        Self { buf, pos: 0, kind }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            kind: self.kind,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn magic(&mut self, m: &[u8]) -> Result<()> {
        if self.take(m.len())? != m {
            return Err(self.err("bad magic"));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("string is not UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

// ---- raw recordings ----

/// Samples are stored node by node, each node as three contiguous axis
/// series of `T_raw` values.
pub fn encode_vtrx(rec: &RawRecording) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + rec.samples.len() * 4);
    out.extend_from_slice(VTRX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, rec.nodes)?;
    put_u32(&mut out, rec.len)?;
    out.extend_from_slice(&rec.sample_rate_hz.to_le_bytes());
    put_f32s(&mut out, &rec.samples);
    Ok(out)
}

pub fn decode_vtrx(bytes: &[u8]) -> Result<RawRecording> {
    let mut r = Reader::new(bytes, "VTRX");
    r.magic(VTRX_MAGIC)?;
    r.version()?;
    let n = r.u32()? as usize;
    let t = r.u32()? as usize;
    let rate = r.f64()?;
    let samples = r.f32s(n * 3 * t)?;
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    RawRecording::new(n, t, rate, samples)
}

pub fn write_vtrx(path: &Path, rec: &RawRecording) -> Result<()> {
    write_atomic(path, &encode_vtrx(rec)?)
}

pub fn read_vtrx(path: &Path) -> Result<RawRecording> {
    decode_vtrx(&read_file(path)?)
}

// ---- spectro-temporal tensors ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorShape {
    pub nodes: usize,
    pub bands: usize,
    pub steps: usize,
}

/// A VTXF body: `count` blocks of `N` matrices of `F×T`, plus whatever
/// trailing bytes followed them.
struct TensorFile<'a> {
    shape: TensorShape,
    blocks: Vec<Vec<Mat>>,
    trailing: &'a [u8],
}

fn encode_vtxf(blocks: &[&[Mat]]) -> Result<(Vec<u8>, TensorShape)> {
    let first = blocks
        .first()
        .and_then(|b| b.first())
        .ok_or_else(|| Error::InvalidInput("no tensors to write".into()))?;
    let shape = TensorShape {
        nodes: blocks[0].len(),
        bands: first.rows,
        steps: first.cols,
    };
    let mut out = Vec::with_capacity(24 + blocks.len() * shape.nodes * first.len() * 4);
    out.extend_from_slice(VTXF_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, blocks.len())?;
    put_u32(&mut out, shape.nodes)?;
    put_u32(&mut out, shape.bands)?;
    put_u32(&mut out, shape.steps)?;
    for (k, b) in blocks.iter().enumerate() {
        if b.len() != shape.nodes || b.iter().any(|m| m.shape() != (shape.bands, shape.steps)) {
            return Err(Error::Shape(format!("tensor {k} differs in shape from tensor 0")));
        }
        for m in b.iter() {
            put_f32s(&mut out, &m.data);
        }
    }
    Ok((out, shape))
}

fn decode_vtxf(bytes: &[u8]) -> Result<TensorFile<'_>> {
    let mut r = Reader::new(bytes, "VTXF");
    r.magic(VTXF_MAGIC)?;
    r.version()?;
    let count = r.u32()? as usize;
    let shape = TensorShape {
        nodes: r.u32()? as usize,
        bands: r.u32()? as usize,
        steps: r.u32()? as usize,
    };
    let per = shape.bands * shape.steps;
    if count.saturating_mul(shape.nodes).saturating_mul(per).saturating_mul(4) > r.remaining() {
        return Err(r.err(format!("header promises more data than the {} bytes present", r.remaining())));
    }
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b = Vec::with_capacity(shape.nodes);
        for _ in 0..shape.nodes {
            b.push(Mat::from_vec(shape.bands, shape.steps, r.f32s(per)?));
        }
        blocks.push(b);
    }
    Ok(TensorFile {
        shape,
        blocks,
        trailing: &bytes[r.pos..],
    })
}

fn read_meta(path: &Path) -> Result<KeyValues> {
    let p = sidecar(path, "meta");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    config::parse_kv(&text)
}

fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn meta_value<'a>(kv: &'a KeyValues, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format {
            kind: "metadata",
            reason: format!("missing key `{key}`"),
        })
}

fn meta_parse<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<T> {
    let v = meta_value(kv, key)?;
    v.parse().map_err(|_| Error::Format {
        kind: "metadata",
        reason: format!("bad value `{v}` for `{key}`"),
    })
}

fn meta_list<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<Vec<T>> {
    let v = meta_value(kv, key)?;
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| Error::Format {
                kind: "metadata",
                reason: format!("bad list entry `{s}` for `{key}`"),
            })
        })
        .collect()
}

/// Preprocessing output: VTXF file plus `<path>.meta` with wavelet, depth and
/// the per-segment normalization scalars.
pub fn write_preprocessed(path: &Path, p: &Preprocessed) -> Result<()> {
    let blocks: Vec<&[Mat]> = p.tensors.iter().map(|t| t.coeffs.as_slice()).collect();
    let (bytes, _) = encode_vtxf(&blocks)?;
    let t0 = &p.tensors[0];
    let mut kv = KeyValues::new();
    kv.insert("kind".into(), "tensors".into());
    kv.insert("wavelet".into(), t0.wavelet.name().into());
    kv.insert("depth".into(), t0.depth.to_string());
    kv.insert("scales".into(), join_f64(&p.scales));
    kv.insert(
        "degenerate".into(),
        p.degenerate.iter().map(|&d| (d as u8).to_string()).collect::<Vec<_>>().join(","),
    );
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar(path, "meta"), config::format_kv(&kv).as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSet {
    pub tensors: Vec<Vec<Mat>>,
    pub wavelet: Wavelet,
    pub depth: usize,
    pub scales: Vec<f64>,
}

pub fn read_preprocessed(path: &Path) -> Result<TensorSet> {
    let bytes = read_file(path)?;
    let f = decode_vtxf(&bytes)?;
    if !f.trailing.is_empty() {
        return Err(Error::Format {
            kind: "VTXF",
            reason: format!("{} trailing bytes", f.trailing.len()),
        });
    }
    let kv = read_meta(path)?;
    let scales: Vec<f64> = meta_list(&kv, "scales")?;
    if scales.len() != f.blocks.len() {
        return Err(Error::Format {
            kind: "metadata",
            reason: format!("{} scales for {} tensors", scales.len(), f.blocks.len()),
        });
    }
    Ok(TensorSet {
        tensors: f.blocks,
        wavelet: meta_value(&kv, "wavelet")?.parse()?,
        depth: meta_parse(&kv, "depth")?,
        scales,
    })
}

// ---- labeled datasets ----

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub graph: TactileGraph,
    pub shape: TensorShape,
}

/// VTXF tensors, then `count × N` label bytes; `<path>.meta` holds the graph
/// and generator settings and `<path>.stats` the dataset statistics.
pub fn write_dataset(path: &Path, samples: &[LabeledSample], g: &TactileGraph, generator: &KeyValues, stats: &DatasetStats) -> Result<()> {
    let blocks: Vec<&[Mat]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let (mut bytes, shape) = encode_vtxf(&blocks)?;
    if shape.nodes != g.node_count() {
        return Err(Error::Shape(format!("{} nodes in samples, {} in graph", shape.nodes, g.node_count())));
    }
    for (k, s) in samples.iter().enumerate() {
        if s.y.len() != shape.nodes || s.y.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput(format!("sample {k} has a malformed label vector")));
        }
        bytes.extend_from_slice(&s.y);
    }
    let mut kv = generator.clone();
    kv.insert("kind".into(), "dataset".into());
    kv.insert(
        "graph.coords".into(),
        g.coords().iter().map(|c| format!("{}:{}", c[0], c[1])).collect::<Vec<_>>().join(","),
    );
    kv.insert(
        "graph.edges".into(),
        g.edges().iter().map(|(j, i)| format!("{j}:{i}")).collect::<Vec<_>>().join(","),
    );
    kv.insert("graph.fingerprint".into(), g.fingerprint());
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar(path, "meta"), config::format_kv(&kv).as_bytes())?;
    write_atomic(&sidecar(path, "stats"), stats.to_text().as_bytes())
}

fn pairs<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<Vec<(T, T)>> {
    let v = meta_value(kv, key)?;
    let bad = || Error::Format {
        kind: "metadata",
        reason: format!("bad `{key}` entry"),
    };
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|p| {
            let (a, b) = p.split_once(':').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let f = decode_vtxf(&bytes)?;
    let n = f.shape.nodes;
    if f.trailing.len() != f.blocks.len() * n {
        return Err(Error::Format {
            kind: "dataset",
            reason: format!("label block has {} bytes, expected {}", f.trailing.len(), f.blocks.len() * n),
        });
    }
    if f.trailing.iter().any(|&b| b > 1) {
        return Err(Error::Format {
            kind: "dataset",
            reason: "labels must be 0 or 1".into(),
        });
    }
    let kv = read_meta(path)?;
    let coords: Vec<[f64; 2]> = pairs::<f64>(&kv, "graph.coords")?.into_iter().map(|(x, y)| [x, y]).collect();
    let edges: Vec<(usize, usize)> = pairs(&kv, "graph.edges")?;
    let graph = TactileGraph::from_edges(coords, &edges)?;
    if graph.node_count() != n {
        return Err(Error::Format {
            kind: "dataset",
            reason: format!("graph has {} nodes, tensors have {n}", graph.node_count()),
        });
    }
    let id = graph.fingerprint();
    let samples = f
        .blocks
        .into_iter()
        .zip(f.trailing.chunks_exact(n.max(1)))
        .map(|(x, y)| LabeledSample {
            x,
            y: y.to_vec(),
            graph_id: id.clone(),
        })
        .collect();
    Ok(Dataset {
        samples,
        graph,
        shape: f.shape,
    })
}

// ---- checkpoints ----

/// Magic, version, the training configuration as text, then the parameter
/// table (name, rows, cols, f64 values) in store order.
pub fn encode_checkpoint(model: &Model, cfg: &TrainingConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_string(&mut out, &config::training_to_text(cfg))?;
    put_u32(&mut out, model.store.len())?;
    for e in model.store.entries() {
        put_string(&mut out, &e.name)?;
        put_u32(&mut out, e.value.rows)?;
        put_u32(&mut out, e.value.cols)?;
        for v in &e.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, TrainingConfig)> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let cfg = config::parse_training(&r.string()?)?;
    let mut model = Model::new(cfg.model.clone())?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(r.err(format!("{count} parameters, architecture has {}", model.store.len())));
    }
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| r.err(format!("unknown parameter `{name}`")))?;
        if model.store.get(id).shape() != (rows, cols) {
            return Err(r.err(format!("parameter `{name}` is {rows}×{cols}, expected {:?}", model.store.get(id).shape())));
        }
        let data = r.f64s(rows * cols)?;
        model.store.set(id, Mat::from_vec(rows, cols, data));
    }
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    Ok((model, cfg))
}

pub fn write_checkpoint(path: &Path, model: &Model, cfg: &TrainingConfig) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, cfg)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, TrainingConfig)> {
    decode_checkpoint(&read_file(path)?)
}

/// Epoch, Adam step count and moments, and the run RNG position.
pub fn encode_train_state(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    out.extend_from_slice(&state.adam.t.to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    put_u32(&mut out, state.adam.m.len())?;
    for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
        put_u32(&mut out, m.len())?;
        for x in m.data.iter().chain(&v.data) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuild a [`TrainState`] around `model` (usually from the matching
/// checkpoint).
pub fn decode_train_state(bytes: &[u8], model: Model) -> Result<TrainState> {
    let mut r = Reader::new(bytes, "train state");
    r.magic(STATE_MAGIC)?;
    r.version()?;
    let epoch = r.u64()? as usize;
    let t = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(r.err(format!("{count} moment pairs, model has {} parameters", model.store.len())));
    }
    let mut adam = Adam::new(&model.store);
    adam.t = t;
    for k in 0..count {
        let len = r.u32()? as usize;
        let (rows, cols) = adam.m[k].shape();
        if len != rows * cols {
            return Err(r.err(format!("moment {k} has {len} entries, expected {}", rows * cols)));
        }
        adam.m[k] = Mat::from_vec(rows, cols, r.f64s(len)?);
        adam.v[k] = Mat::from_vec(rows, cols, r.f64s(len)?);
    }
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(TrainState { model, adam, epoch, rng })
}

pub fn write_train_state(path: &Path, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode_train_state(state)?)
}

/// Checkpoint plus its `.state` sidecar.
pub fn read_resumable(checkpoint: &Path) -> Result<(TrainState, TrainingConfig)> {
    let (model, cfg) = read_checkpoint(checkpoint)?;
    let state = decode_train_state(&read_file(&sidecar(checkpoint, "state"))?, model)?;
    Ok((state, cfg))
}
