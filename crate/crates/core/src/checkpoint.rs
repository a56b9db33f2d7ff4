//! Binary checkpoint format.
//!
//! ```text
//! magic        4 bytes   "FFAE"
//! version      u32 LE
//! kind         u8        0 ff/normalize, 1 ff/quantize, 2 bp/normalize, 3 bp/quantize
//! k            u32 LE
//! n            u32 LE
//! layer count  u32 LE    dense layers (classifier included); two tensors each
//! tensors      name length u32 LE, UTF-8 name, rank u32 LE,
//!              dims u64 LE each, values f64 LE row-major
//! ```
//!
//! Tensors are named `encoder.{i}.weight`, `encoder.{i}.bias`, likewise for
//! `decoder`, then `classifier.weight` and `classifier.bias` (forward-forward
//! only), and must appear in exactly that order. Weights are stored
//! `[out, in]`.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::channel::OutputStage;
use crate::error::{Error, Result};
use crate::layers::{Activation, DenseLayer};
use crate::models::{AnyModel, BpAutoencoder, CodeParams, FfAutoencoder};

pub const MAGIC: [u8; 4] = *b"FFAE";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 256;
const MAX_LAYERS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    FfNormalize = 0,
    FfQuantize = 1,
    BpNormalize = 2,
    BpQuantize = 3,
}

impl ModelKind {
    pub fn of(model: &AnyModel) -> Self {
        match (model, model.stage()) {
            (AnyModel::Ff(_), OutputStage::Normalize) => ModelKind::FfNormalize,
            (AnyModel::Ff(_), OutputStage::Quantize) => ModelKind::FfQuantize,
            (AnyModel::Bp(_), OutputStage::Normalize) => ModelKind::BpNormalize,
            (AnyModel::Bp(_), OutputStage::Quantize) => ModelKind::BpQuantize,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => ModelKind::FfNormalize,
            1 => ModelKind::FfQuantize,
            2 => ModelKind::BpNormalize,
            3 => ModelKind::BpQuantize,
            other => return Err(corrupt(format!("unknown model kind tag {other}"))),
        })
    }

    pub fn is_ff(self) -> bool {
        matches!(self, ModelKind::FfNormalize | ModelKind::FfQuantize)
    }

    pub fn stage(self) -> OutputStage {
        match self {
            ModelKind::FfNormalize | ModelKind::BpNormalize => OutputStage::Normalize,
            ModelKind::FfQuantize | ModelKind::BpQuantize => OutputStage::Quantize,
        }
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn named_layers(model: &AnyModel) -> Vec<(String, &DenseLayer)> {
    let mut out = Vec::new();
    let (encoder, decoder, classifier) = match model {
        AnyModel::Ff(m) => (m.encoder(), m.decoder(), Some(m.classifier())),
        AnyModel::Bp(m) => (m.encoder(), m.decoder(), None),
    };
    for (i, l) in encoder.iter().enumerate() {
        out.push((format!("encoder.{i}"), l));
    }
    for (i, l) in decoder.iter().enumerate() {
        out.push((format!("decoder.{i}"), l));
    }
    if let Some(c) = classifier {
        out.push(("classifier".to_string(), c));
    }
    out
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<'a>(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: impl Iterator<Item = &'a f64>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, dims.len() as u32);
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `model`. The output depends only on the parameters.
pub fn encode(model: &AnyModel) -> Vec<u8> {
    let layers = named_layers(model);
    let params = model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    buf.push(ModelKind::of(model) as u8);
    put_u32(&mut buf, params.k());
    put_u32(&mut buf, params.n() as u32);
    put_u32(&mut buf, layers.len() as u32);
    for (prefix, layer) in layers {
        let w = layer.weights();
        // Standard layout is an invariant of DenseLayer, so iteration is row-major.
        put_tensor(&mut buf, &format!("{prefix}.weight"), &[w.nrows(), w.ncols()], w.iter());
        put_tensor(&mut buf, &format!("{prefix}.bias"), &[layer.bias().len()], layer.bias().iter());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn name(&mut self) -> Result<&'a str> {
        let len = self.u32("tensor name length")? as usize;
        if len > MAX_NAME_LEN {
            return Err(corrupt(format!("tensor name length {len} exceeds {MAX_NAME_LEN}")));
        }
        std::str::from_utf8(self.take(len, "tensor name")?).map_err(|_| corrupt("tensor name is not UTF-8"))
    }

    /// Reads rank, dimensions and values of the tensor whose name was just read.
    fn tensor_body(&mut self, name: &str, expected_rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.u32("tensor rank")? as usize;
        if rank != expected_rank {
            return Err(corrupt(format!("tensor `{name}` has rank {rank}, expected {expected_rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(self.u64("tensor dimension")?)
                .map_err(|_| corrupt(format!("tensor `{name}` dimension does not fit in memory")))?;
            if d == 0 {
                return Err(corrupt(format!("tensor `{name}` has a zero dimension")));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| corrupt(format!("tensor `{name}` is too large")))?;
            dims.push(d);
        }
        if count.checked_mul(8).is_none_or(|b| b > self.remaining()) {
            return Err(corrupt(format!("truncated values of tensor `{name}`")));
        }
        let raw = self.take(count * 8, "tensor values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("tensor `{name}` contains non-finite values")));
        }
        Ok((dims, values))
    }

    /// Reads one weight/bias pair named `{prefix}.weight` and `{prefix}.bias`.
    fn layer_body(&mut self, prefix: &str) -> Result<(Array2<f64>, Array1<f64>)> {
        let (wd, wv) = self.tensor_body(&format!("{prefix}.weight"), 2)?;
        let bias_name = format!("{prefix}.bias");
        let name = self.name()?;
        if name != bias_name {
            return Err(corrupt(format!("expected tensor `{bias_name}`, found `{name}`")));
        }
        let (bd, bv) = self.tensor_body(&bias_name, 1)?;
        if bd[0] != wd[0] {
            return Err(corrupt(format!("`{prefix}` bias length {} does not match {} rows", bd[0], wd[0])));
        }
        let weights = Array2::from_shape_vec((wd[0], wd[1]), wv).map_err(|e| corrupt(e.to_string()))?;
        Ok((weights, Array1::from(bv)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Stack {
    Encoder,
    Decoder,
    Classifier,
}

/// Maps a weight tensor name onto the next expected position, enforcing the
/// canonical order.
fn next_position(name: &str, current: Option<(Stack, usize)>, is_ff: bool) -> Result<(Stack, usize)> {
    let expected = |stack: Stack, index: usize| match stack {
        Stack::Encoder => format!("encoder.{index}.weight"),
        Stack::Decoder => format!("decoder.{index}.weight"),
        Stack::Classifier => "classifier.weight".to_string(),
    };
    let candidates: Vec<(Stack, usize)> = match current {
        None => vec![(Stack::Encoder, 0)],
        Some((Stack::Encoder, i)) => vec![(Stack::Encoder, i + 1), (Stack::Decoder, 0)],
        Some((Stack::Decoder, i)) if is_ff => vec![(Stack::Decoder, i + 1), (Stack::Classifier, 0)],
        Some((Stack::Decoder, i)) => vec![(Stack::Decoder, i + 1)],
        Some((Stack::Classifier, _)) => vec![],
    };
    candidates
        .into_iter()
        .find(|&(s, i)| expected(s, i) == name)
        .ok_or_else(|| corrupt(format!("unexpected tensor `{name}`")))
}

/// Parses a checkpoint, rejecting anything [`encode`] would not produce.
pub fn decode(bytes: &[u8]) -> Result<AnyModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic (not an FFAE checkpoint)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let kind = ModelKind::from_tag(r.u8("model kind")?)?;
    let k = r.u32("k")?;
    let n = r.u32("n")? as usize;
    let params = CodeParams::new(k, n).map_err(|e| corrupt(e.to_string()))?;
    let layer_count = r.u32("layer count")? as usize;
    if layer_count > MAX_LAYERS {
        return Err(corrupt(format!("implausible layer count {layer_count}")));
    }

    let mut stacks: [Vec<(Array2<f64>, Array1<f64>)>; 3] = Default::default();
    let mut position = None;
    for _ in 0..layer_count {
        let name = r.name()?;
        let pos = next_position(name, position, kind.is_ff())?;
        let prefix = name.strip_suffix(".weight").expect("canonical weight name");
        stacks[pos.0 as usize].push(r.layer_body(prefix)?);
        position = Some(pos);
    }
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes", r.remaining())));
    }
    let [encoder, decoder, classifier] = stacks;
    assemble(params, kind, encoder, decoder, classifier).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(m),
        other => corrupt(other.to_string()),
    })
}

fn build(stack: Vec<(Array2<f64>, Array1<f64>)>, linear_last: bool) -> Result<Vec<DenseLayer>> {
    let len = stack.len();
    stack
        .into_iter()
        .enumerate()
        .map(|(i, (w, b))| {
            let act = if linear_last && i + 1 == len { Activation::Linear } else { Activation::Relu };
            DenseLayer::new(w, b, act)
        })
        .collect()
}

fn assemble(
    params: CodeParams,
    kind: ModelKind,
    encoder: Vec<(Array2<f64>, Array1<f64>)>,
    decoder: Vec<(Array2<f64>, Array1<f64>)>,
    mut classifier: Vec<(Array2<f64>, Array1<f64>)>,
) -> Result<AnyModel> {
    let encoder = build(encoder, true)?;
    if kind.is_ff() {
        let decoder = build(decoder, false)?;
        let (w, b) = classifier.pop().ok_or_else(|| corrupt("missing classifier"))?;
        let classifier = DenseLayer::new(w, b, Activation::Linear)?;
        Ok(FfAutoencoder::from_parts(params, kind.stage(), encoder, decoder, classifier)?.into())
    } else {
        let decoder = build(decoder, true)?;
        Ok(BpAutoencoder::from_parts(params, kind.stage(), encoder, decoder)?.into())
    }
}

pub fn save(path: &Path, model: &AnyModel) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<AnyModel> {
    decode(&std::fs::read(path)?)
}
