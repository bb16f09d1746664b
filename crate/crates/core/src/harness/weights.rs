//! Binary weight files.
//!
//! Layout (all integers u32 little-endian):
//! `"UPVW"`, version, header length, header JSON, tensor count, then per
//! tensor: name length, UTF-8 name, rank, dims, and `prod(dims)` f32 LE values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::WatermarkConfig;
use crate::detection::DetectorNetwork;
use crate::error::{Error, Result};
use crate::generator::GeneratorNetwork;
use crate::nn::{Activation, DenseLayer, LstmLayer, LstmStack, Mlp, Params, Tensor};

pub const MAGIC: &[u8; 4] = b"UPVW";
pub const VERSION: u32 = 1;
const INIT: &str = "glorot_uniform";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Generator,
    Detector,
}

impl Architecture {
    fn name(self) -> &'static str {
        match self {
            Architecture::Generator => "generator",
            Architecture::Detector => "detector",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub architecture: Architecture,
    pub config: WatermarkConfig,
    /// Activation of every dense layer, in tensor order.
    pub activations: Vec<Activation>,
    pub init: String,
    #[serde(default)]
    pub lstm_depth: usize,
    #[serde(default)]
    pub lstm_hidden: usize,
    #[serde(default)]
    pub frozen_embedding: bool,
}

fn mlp_activations(m: &Mlp) -> impl Iterator<Item = Activation> + '_ {
    m.layers().iter().map(DenseLayer::activation)
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode(header: &WeightsHeader, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, VERSION);
    let json = serde_json::to_vec(header)?;
    write_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    write_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        write_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        write_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            write_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Cursor over file bytes; running past the end is an I/O error.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            let e = std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "weights file is truncated");
            return Err(Error::io(self.path, e));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads the header and the named tensors, in file order.
pub fn read_weights(path: impl AsRef<Path>) -> Result<(WeightsHeader, Vec<(String, Tensor)>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    let len = r.u32()? as usize;
    let header: WeightsHeader = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::MalformedWeights("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::MalformedWeights("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedWeights(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, tensors))
}

fn expect_arch(header: &WeightsHeader, want: Architecture) -> Result<()> {
    if header.architecture != want {
        return Err(Error::ArchitectureMismatch {
            found: header.architecture.name().into(),
            expected: want.name().into(),
        });
    }
    Ok(())
}

/// Pops tensors in file order, checking names.
struct TensorQueue {
    items: std::vec::IntoIter<(String, Tensor)>,
}

impl TensorQueue {
    fn next(&mut self, name: &str) -> Result<Tensor> {
        match self.items.next() {
            Some((n, t)) if n == name => Ok(t),
            Some((n, _)) => Err(Error::MalformedWeights(format!("expected tensor {name}, found {n}"))),
            None => Err(Error::MalformedWeights(format!("missing tensor {name}"))),
        }
    }

    fn mlp(&mut self, prefix: &str, acts: &mut impl Iterator<Item = Activation>, layers: usize) -> Result<Mlp> {
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let w = self.next(&format!("{prefix}.{i}.weight"))?;
            let b = self.next(&format!("{prefix}.{i}.bias"))?;
            let act = acts.next().ok_or_else(|| Error::MalformedWeights("too few activations".into()))?;
            out.push(DenseLayer::from_parts(w, b, act)?);
        }
        Mlp::new(out)
    }

    fn finish(mut self) -> Result<()> {
        match self.items.next() {
            Some((n, _)) => Err(Error::MalformedWeights(format!("unexpected tensor {n}"))),
            None => Ok(()),
        }
    }
}

fn count_layers(tensors: &[(String, Tensor)], prefix: &str) -> usize {
    tensors.iter().filter(|(n, _)| n.starts_with(prefix) && n.ends_with(".weight")).count()
}

fn arch_err(e: Error, want: &str) -> Error {
    match e {
        Error::ShapeMismatch { expected, actual } => Error::ArchitectureMismatch {
            found: format!("{actual:?}"),
            expected: format!("{want} {expected:?}"),
        },
        other => other,
    }
}

pub fn save_generator(net: &GeneratorNetwork, path: impl AsRef<Path>) -> Result<()> {
    let header = WeightsHeader {
        architecture: Architecture::Generator,
        config: net.config().clone(),
        activations: mlp_activations(net.embedding()).chain(mlp_activations(net.ffn())).collect(),
        init: INIT.into(),
        lstm_depth: 0,
        lstm_hidden: 0,
        frozen_embedding: false,
    };
    write_file(path.as_ref(), &encode(&header, &net.named_tensors())?)
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<GeneratorNetwork> {
    let (header, tensors) = read_weights(path)?;
    expect_arch(&header, Architecture::Generator)?;
    header.config.validate()?;
    let n_emb = count_layers(&tensors, "embedding.");
    let n_ffn = count_layers(&tensors, "ffn.");
    let mut acts = header.activations.iter().copied();
    let mut q = TensorQueue { items: tensors.into_iter() };
    let embedding = q.mlp("embedding", &mut acts, n_emb).map_err(|e| arch_err(e, "generator"))?;
    let ffn = q.mlp("ffn", &mut acts, n_ffn).map_err(|e| arch_err(e, "generator"))?;
    q.finish()?;
    GeneratorNetwork::from_parts(&header.config, embedding, ffn)
}

pub fn save_detector(det: &DetectorNetwork, config: &WatermarkConfig, path: impl AsRef<Path>) -> Result<()> {
    if config.vocab != *det.vocab() {
        return Err(Error::invariant("vocab_size", "detector and config vocabularies differ"));
    }
    let header = WeightsHeader {
        architecture: Architecture::Detector,
        config: config.clone(),
        activations: mlp_activations(det.embedding()).chain(std::iter::once(det.head().activation())).collect(),
        init: INIT.into(),
        lstm_depth: det.lstm().depth(),
        lstm_hidden: det.lstm().hidden_dim(),
        frozen_embedding: det.is_frozen(),
    };
    write_file(path.as_ref(), &encode(&header, &det.named_tensors())?)
}

/// Loads a detector and the config it was saved with.
pub fn load_detector(path: impl AsRef<Path>) -> Result<(DetectorNetwork, WatermarkConfig)> {
    let (header, tensors) = read_weights(path)?;
    expect_arch(&header, Architecture::Detector)?;
    header.config.validate()?;
    let n_emb = count_layers(&tensors, "embedding.");
    let mut acts = header.activations.iter().copied();
    let mut q = TensorQueue { items: tensors.into_iter() };
    let embedding = q.mlp("embedding", &mut acts, n_emb).map_err(|e| arch_err(e, "detector"))?;
    let mut layers = Vec::with_capacity(header.lstm_depth);
    for l in 0..header.lstm_depth {
        let wi = q.next(&format!("lstm.{l}.w_input"))?;
        let wh = q.next(&format!("lstm.{l}.w_hidden"))?;
        let b = q.next(&format!("lstm.{l}.bias"))?;
        layers.push(LstmLayer::from_parts(wi, wh, b).map_err(|e| arch_err(e, "detector"))?);
    }
    let lstm = LstmStack::new(layers).map_err(|e| arch_err(e, "detector"))?;
    let head_act = acts.next().ok_or_else(|| Error::MalformedWeights("too few activations".into()))?;
    let head = DenseLayer::from_parts(q.next("head.weight")?, q.next("head.bias")?, head_act)?;
    q.finish()?;
    let det = DetectorNetwork::from_parts(&header.config.vocab, embedding, header.frozen_embedding, lstm, head)?;
    Ok((det, header.config))
}
