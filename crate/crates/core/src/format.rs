//! On-disk artifacts: a JSON manifest plus a little-endian blob file.
//!
//! The manifest carries the format version, the artifact kind, the graph or
//! integer program, and a tensor table. Each table entry names a tensor, its
//! dtype, shape, quantization params (for code tensors) and its byte range in
//! the blob. Sections in the blob start on 64-byte boundaries. Float tensors
//! are stored as `f32`; 4-bit codes take one byte each.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError};
use crate::kernels::{plan_qconv_int_bias, IntModel, IntOp, KernelError};
use crate::ptq::{QuantizedWeight, WeightOnlyModel};
use crate::qat::{CalibrationStats, QatError, QatModel, TrainConfig};
use crate::quant::{QuantParams, RangeSpec};
use crate::tensor::{numel, QTensor, Tensor};

pub const FORMAT_VERSION: &str = "qtz-v1";
pub const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot access {}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version `{0}`, expected `{FORMAT_VERSION}`")]
    Version(String),
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("cannot store tensor `{name}`: {detail}")]
    Unencodable { name: String, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Qat(#[from] QatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    U8,
    I8,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 | DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Float,
    WeightOnly,
    Integer,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quant: Vec<QuantParams>,
    pub offset: usize,
    pub length: usize,
}

/// Training state that is not part of the float graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub act_momentum: f64,
    pub act_stats: BTreeMap<String, CalibrationStats>,
    pub layers: Vec<LayerState>,
    pub fc_weight_ranges: Vec<RangeSpec>,
    pub fc_bias_ranges: Vec<RangeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub frozen: bool,
    pub weight_ranges: Vec<RangeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: ArtifactKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<Graph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub int_model: Option<IntModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainState>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// Bytes of every layer weight tensor (float or codes).
    pub fn weight_payload(&self) -> usize {
        let names: Vec<&str> = match (&self.graph, &self.int_model) {
            (_, Some(m)) => m.layer_plans().map(|(n, _)| n).collect(),
            (Some(g), None) => g.nodes.iter().filter(|n| n.op.layer_kind().is_some()).map(|n| n.inputs[1].as_str()).collect(),
            _ => Vec::new(),
        };
        let is_weight = |e: &TensorEntry| match &self.int_model {
            Some(_) => e.name.strip_suffix(WEIGHT_SUFFIX).is_some_and(|l| names.contains(&l)),
            None => names.contains(&e.name.as_str()),
        };
        self.tensors.iter().filter(|e| is_weight(e)).map(|e| e.length).sum()
    }
}

/// Anything that can be written as an artifact.
#[derive(Debug, Clone)]
pub enum Artifact {
    Float(Graph),
    WeightOnly(WeightOnlyModel),
    Integer(IntModel),
    Checkpoint(QatModel),
}

impl Artifact {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Artifact::Float(_) => ArtifactKind::Float,
            Artifact::WeightOnly(_) => ArtifactKind::WeightOnly,
            Artifact::Integer(_) => ArtifactKind::Integer,
            Artifact::Checkpoint(_) => ArtifactKind::Checkpoint,
        }
    }

    /// Float graph view, if the artifact has one.
    pub fn graph(&self) -> Option<Graph> {
        match self {
            Artifact::Float(g) => Some(g.clone()),
            Artifact::WeightOnly(w) => Some(w.graph.clone()),
            Artifact::Checkpoint(m) => Some(m.to_graph(false)),
            Artifact::Integer(_) => None,
        }
    }
}

const WEIGHT_SUFFIX: &str = "/weight_codes";
const BIAS_SUFFIX: &str = "/bias_i32";

#[derive(Default)]
struct BlobWriter {
    blob: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, dtype: DType, shape: &[usize], quant: Vec<QuantParams>, bytes: Vec<u8>) {
        let pad = (ALIGN - self.blob.len() % ALIGN) % ALIGN;
        self.blob.resize(self.blob.len() + pad, 0);
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            quant,
            offset: self.blob.len(),
            length: bytes.len(),
        });
        self.blob.extend_from_slice(&bytes);
    }

    fn float(&mut self, name: &str, t: &Tensor) {
        let bytes = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        self.push(name, DType::F32, t.shape(), Vec::new(), bytes);
    }

    fn codes(&mut self, name: &str, q: &QTensor, params: &[QuantParams]) -> Result<(), FormatError> {
        let (lo, hi) = params.iter().fold((i32::MAX, i32::MIN), |(a, b), p| {
            let (l, h) = p.code_range();
            (a.min(l), b.max(h))
        });
        let bad = |detail: String| FormatError::Unencodable { name: name.to_string(), detail };
        let dtype = if lo >= 0 && hi <= u8::MAX as i32 {
            DType::U8
        } else if lo >= i8::MIN as i32 && hi <= i8::MAX as i32 {
            DType::I8
        } else {
            return Err(bad(format!("code range [{lo}, {hi}] does not fit in a byte")));
        };
        let mut bytes = Vec::with_capacity(q.len());
        for &c in q.data() {
            if c < lo || c > hi {
                return Err(bad(format!("code {c} outside [{lo}, {hi}]")));
            }
            bytes.push(match dtype {
                DType::U8 => c as u8,
                _ => (c as i8) as u8,
            });
        }
        self.push(name, dtype, q.shape(), params.to_vec(), bytes);
        Ok(())
    }

    fn ints(&mut self, name: &str, v: &[i32]) {
        let bytes = v.iter().flat_map(|c| c.to_le_bytes()).collect();
        self.push(name, DType::I32, &[v.len()], Vec::new(), bytes);
    }
}

/// Serializes an artifact into manifest bytes and blob bytes.
pub fn encode(a: &Artifact) -> Result<(Vec<u8>, Vec<u8>), FormatError> {
    let mut w = BlobWriter::default();
    let mut manifest = Manifest {
        format: FORMAT_VERSION.to_string(),
        kind: a.kind(),
        graph: None,
        int_model: None,
        train_state: None,
        tensors: Vec::new(),
    };
    match a {
        Artifact::Float(g) => {
            for (name, t) in &g.params {
                w.float(name, t);
            }
            manifest.graph = Some(g.clone());
        }
        Artifact::WeightOnly(m) => {
            for (name, t) in &m.graph.params {
                match m.weights.get(name) {
                    Some(q) => w.codes(name, &q.codes, &q.params)?,
                    None => w.float(name, t),
                }
            }
            manifest.graph = Some(m.graph.clone());
        }
        Artifact::Integer(m) => {
            for (name, plan) in m.layer_plans() {
                w.codes(&format!("{name}{WEIGHT_SUFFIX}"), &plan.w_q, &plan.qp_w)?;
                w.ints(&format!("{name}{BIAS_SUFFIX}"), &plan.bias_i32);
            }
            manifest.int_model = Some(m.clone());
        }
        Artifact::Checkpoint(m) => {
            let g = m.to_graph(false);
            for (name, t) in &g.params {
                w.float(name, t);
            }
            for (k, l) in m.convs.iter().enumerate() {
                let k = k + 1;
                if let Some(e) = &l.weight.w_ema {
                    w.float(&format!("ema/conv{k}/weight"), e);
                }
                if let Some(v) = &l.gamma_ema {
                    w.float(&format!("ema/bn{k}/gamma"), &Tensor::scalar_vec(v.clone()));
                }
                if let Some(v) = &l.beta_ema {
                    w.float(&format!("ema/bn{k}/beta"), &Tensor::scalar_vec(v.clone()));
                }
                w.float(&format!("train/bn{k}/batch_mean"), &Tensor::scalar_vec(l.bn.batch_mean.clone()));
                w.float(&format!("train/bn{k}/batch_variance"), &Tensor::scalar_vec(l.bn.batch_var.clone()));
            }
            if let Some(e) = &m.fc_weight.w_ema {
                w.float("ema/fc/weight", e);
            }
            if let Some(e) = &m.fc_bias.w_ema {
                w.float("ema/fc/bias", e);
            }
            manifest.train_state = Some(TrainState {
                step: m.step,
                act_momentum: m.act_momentum,
                act_stats: m.act_stats.clone(),
                layers: m
                    .convs
                    .iter()
                    .map(|l| LayerState { frozen: l.bn.frozen, weight_ranges: l.weight.ranges.clone() })
                    .collect(),
                fc_weight_ranges: m.fc_weight.ranges.clone(),
                fc_bias_ranges: m.fc_bias.ranges.clone(),
            });
            manifest.graph = Some(g);
        }
    }
    manifest.tensors = w.entries;
    Ok((serde_json::to_vec(&manifest)?, w.blob))
}

enum Decoded {
    Float(Tensor),
    Codes(QTensor, Vec<QuantParams>),
    Ints(Vec<i32>),
}

fn read_entry(e: &TensorEntry, blob: &[u8]) -> Result<Decoded, FormatError> {
    let corrupt = |m: String| FormatError::Corrupt(format!("tensor `{}`: {m}", e.name));
    let end = e.offset.checked_add(e.length).ok_or_else(|| corrupt("offset overflows".into()))?;
    if end > blob.len() {
        return Err(corrupt(format!("bytes {}..{end} exceed blob of {} bytes", e.offset, blob.len())));
    }
    if !e.offset.is_multiple_of(ALIGN) {
        return Err(corrupt(format!("offset {} is not {ALIGN}-byte aligned", e.offset)));
    }
    let n = numel(&e.shape);
    if n * e.dtype.size() != e.length {
        return Err(corrupt(format!("{} bytes for {n} elements of {:?}", e.length, e.dtype)));
    }
    let bytes = &blob[e.offset..end];
    let quads = || bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    Ok(match e.dtype {
        DType::F32 => Decoded::Float(Tensor::new(e.shape.clone(), quads().map(|b| f32::from_le_bytes(b) as f64).collect())),
        DType::I32 => Decoded::Ints(quads().map(i32::from_le_bytes).collect()),
        DType::U8 | DType::I8 => {
            if e.quant.is_empty() {
                return Err(corrupt("code tensor without quantization params".into()));
            }
            let data = bytes.iter().map(|&b| if e.dtype == DType::U8 { b as i32 } else { b as i8 as i32 }).collect();
            Decoded::Codes(QTensor::new(e.shape.clone(), data), e.quant.clone())
        }
    })
}

/// Parses manifest and blob bytes back into an artifact.
pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<Artifact, FormatError> {
    let m: Manifest = serde_json::from_slice(manifest)?;
    if m.format != FORMAT_VERSION {
        return Err(FormatError::Version(m.format));
    }
    let mut tensors = BTreeMap::new();
    for e in &m.tensors {
        if tensors.insert(e.name.clone(), read_entry(e, blob)?).is_some() {
            return Err(FormatError::Corrupt(format!("tensor `{}` listed twice", e.name)));
        }
    }
    let missing = |what: &str| FormatError::Corrupt(format!("{:?} artifact without {what}", m.kind));
    match m.kind {
        ArtifactKind::Float | ArtifactKind::WeightOnly | ArtifactKind::Checkpoint => {
            let mut g = m.graph.clone().ok_or_else(|| missing("graph"))?;
            let mut weights = BTreeMap::new();
            let mut extra = BTreeMap::new();
            for (name, t) in tensors {
                let is_param = g.nodes.iter().any(|n| n.inputs.contains(&name));
                let value = match t {
                    Decoded::Float(t) => t,
                    Decoded::Codes(codes, params) if m.kind == ArtifactKind::WeightOnly => {
                        let q = QuantizedWeight { codes, params };
                        let t = q.dequantize();
                        weights.insert(name.clone(), q);
                        t
                    }
                    _ => return Err(FormatError::Corrupt(format!("unexpected dtype for `{name}`"))),
                };
                if is_param {
                    g.params.insert(name, value);
                } else {
                    extra.insert(name, value);
                }
            }
            g.validate()?;
            match m.kind {
                ArtifactKind::Float => Ok(Artifact::Float(g)),
                ArtifactKind::WeightOnly => Ok(Artifact::WeightOnly(WeightOnlyModel { graph: g, weights })),
                _ => {
                    let st = m.train_state.ok_or_else(|| missing("train_state"))?;
                    restore_checkpoint(&g, st, extra).map(Artifact::Checkpoint)
                }
            }
        }
        ArtifactKind::Integer => {
            let mut model = m.int_model.ok_or_else(|| missing("int_model"))?;
            for op in &mut model.ops {
                let IntOp::Layer { name, plan, .. } = op else { continue };
                let wname = format!("{name}{WEIGHT_SUFFIX}");
                let bname = format!("{name}{BIAS_SUFFIX}");
                let Some(Decoded::Codes(w_q, qp_w)) = tensors.remove(&wname) else {
                    return Err(FormatError::Corrupt(format!("missing weight codes `{wname}`")));
                };
                let Some(Decoded::Ints(bias)) = tensors.remove(&bname) else {
                    return Err(FormatError::Corrupt(format!("missing bias `{bname}`")));
                };
                if qp_w != plan.qp_w {
                    return Err(FormatError::Corrupt(format!("`{name}`: weight params disagree with the plan")));
                }
                let rebuilt = plan_qconv_int_bias(
                    name,
                    plan.layer,
                    plan.stride,
                    plan.padding,
                    w_q,
                    &qp_w,
                    plan.qp_x,
                    plan.qp_y,
                    bias,
                    plan.activation,
                )?;
                if rebuilt.requant != plan.requant || rebuilt.z_w != plan.z_w || rebuilt.out_range != plan.out_range {
                    return Err(FormatError::Corrupt(format!("`{name}`: stored plan does not match its tensors")));
                }
                *plan = rebuilt;
            }
            Ok(Artifact::Integer(model))
        }
    }
}

fn restore_checkpoint(g: &Graph, st: TrainState, mut extra: BTreeMap<String, Tensor>) -> Result<QatModel, FormatError> {
    let cfg = TrainConfig { activation_momentum: st.act_momentum, ..TrainConfig::default() };
    let mut m = QatModel::from_graph(g, &cfg)?;
    if st.layers.len() != m.convs.len() {
        return Err(FormatError::Corrupt(format!("{} layer states for {} layers", st.layers.len(), m.convs.len())));
    }
    let mut take = |name: String| extra.remove(&name);
    for (k, (l, s)) in m.convs.iter_mut().zip(st.layers).enumerate() {
        let k = k + 1;
        l.bn.frozen = s.frozen;
        l.weight.ranges = s.weight_ranges;
        l.weight.w_ema = take(format!("ema/conv{k}/weight"));
        l.gamma_ema = take(format!("ema/bn{k}/gamma")).map(Tensor::into_data);
        l.beta_ema = take(format!("ema/bn{k}/beta")).map(Tensor::into_data);
        l.bn.batch_mean = take(format!("train/bn{k}/batch_mean"))
            .ok_or_else(|| FormatError::Corrupt(format!("missing batch mean of layer {k}")))?
            .into_data();
        l.bn.batch_var = take(format!("train/bn{k}/batch_variance"))
            .ok_or_else(|| FormatError::Corrupt(format!("missing batch variance of layer {k}")))?
            .into_data();
    }
    m.fc_weight.w_ema = take("ema/fc/weight".into());
    m.fc_bias.w_ema = take("ema/fc/bias".into());
    m.fc_weight.ranges = st.fc_weight_ranges;
    m.fc_bias.ranges = st.fc_bias_ranges;
    m.act_stats = st.act_stats;
    m.step = st.step;
    if let Some(name) = extra.keys().next() {
        return Err(FormatError::Corrupt(format!("unreferenced tensor `{name}`")));
    }
    Ok(m)
}

/// Blob file that accompanies the manifest at `path`.
pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

/// Byte counts of a written artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArtifactSize {
    pub manifest: usize,
    pub blob: usize,
    pub weight_payload: usize,
}

impl ArtifactSize {
    pub fn total(&self) -> usize {
        self.manifest + self.blob
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

/// Writes the manifest to `path` and the blob next to it.
pub fn save(path: &Path, a: &Artifact) -> Result<ArtifactSize, FormatError> {
    let (manifest, blob) = encode(a)?;
    let parsed: Manifest = serde_json::from_slice(&manifest)?;
    fs::write(path, &manifest).map_err(io_err(path))?;
    let bp = blob_path(path);
    fs::write(&bp, &blob).map_err(io_err(&bp))?;
    Ok(ArtifactSize { manifest: manifest.len(), blob: blob.len(), weight_payload: parsed.weight_payload() })
}

pub fn load(path: &Path) -> Result<Artifact, FormatError> {
    let manifest = fs::read(path).map_err(io_err(path))?;
    let bp = blob_path(path);
    let blob = fs::read(&bp).map_err(io_err(&bp))?;
    decode(&manifest, &blob)
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Sizes of an artifact already on disk.
pub fn artifact_size(path: &Path) -> Result<ArtifactSize, FormatError> {
    let m = read_manifest(path)?;
    let manifest = fs::metadata(path).map_err(io_err(path))?.len() as usize;
    let bp = blob_path(path);
    let blob = fs::metadata(&bp).map_err(io_err(&bp))?.len() as usize;
    Ok(ArtifactSize { manifest, blob, weight_payload: m.weight_payload() })
}
