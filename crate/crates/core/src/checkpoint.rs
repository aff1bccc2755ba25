//! Binary checkpoints for a network and its optimizer state.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        b"V3DC"
//! version      u32 (= 1)
//! input_edge   u32
//! channels     u32
//! batchnorm    u32 (0 or 1)
//! n_layers     u32
//! layers       n_layers × [kind u32, a u32, b u32, c u32]
//!                conv  = 0, in, out, kernel
//!                pool  = 1, pool, 0, 0
//!                flat  = 2, 0, 0, 0
//!                dense = 3, in, out, activation (0 linear, 1 relu)
//! lr           f64
//! momentum     f64
//! parameters   f32 arrays in `Network::params` order
//! velocity     f32 arrays, same shapes
//! buffers      f32 batchnorm running mean/var (only when batchnorm = 1)
//! crc32        u32 over every preceding byte
//! ```
//!
//! Array shapes are implied by the layer table.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Activation, LayerSpec, Network, NetworkSpec};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"V3DC";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v)
        .map_err(|_| Error::DecodeError(format!("{v} does not fit the checkpoint header")))
}

fn put_tensors<'a>(out: &mut Vec<u8>, tensors: impl IntoIterator<Item = &'a Tensor<f32>>) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes to the checkpoint layout.
pub fn encode_checkpoint(net: &Network<f32>, state: &OptimizerState<f32>) -> Result<Vec<u8>> {
    let spec = net.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, to_u32(spec.input_edge)?);
    put_u32(&mut out, to_u32(spec.input_channels)?);
    put_u32(&mut out, spec.batchnorm as u32);
    put_u32(&mut out, to_u32(spec.layers.len())?);
    for layer in &spec.layers {
        let row = match *layer {
            LayerSpec::Conv3d {
                in_ch,
                out_ch,
                kernel,
            } => [0, in_ch, out_ch, kernel],
            LayerSpec::MaxPool3d { pool } => [1, pool, 0, 0],
            LayerSpec::Flatten => [2, 0, 0, 0],
            LayerSpec::Dense {
                in_features,
                out_features,
                activation,
            } => [
                3,
                in_features,
                out_features,
                (activation == Activation::Relu) as usize,
            ],
        };
        for v in row {
            put_u32(&mut out, to_u32(v)?);
        }
    }
    out.extend_from_slice(&state.lr.to_le_bytes());
    out.extend_from_slice(&state.momentum.to_le_bytes());

    let params = net.params();
    if params.len() != state.velocity.len()
        || params
            .iter()
            .zip(&state.velocity)
            .any(|(p, v)| p.shape() != v.shape())
    {
        return Err(Error::ShapeMismatch(
            "optimizer velocity does not mirror the parameters".into(),
        ));
    }
    put_tensors(&mut out, params);
    put_tensors(&mut out, &state.velocity);
    put_tensors(&mut out, net.buffers());
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::DecodeError("checkpoint ends early".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill(&mut self, t: &mut Tensor<f32>) -> Result<()> {
        let raw = self.take(4 * t.len())?;
        for (dst, src) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
        Ok(())
    }
}

/// Parses bytes produced by [`encode_checkpoint`].
///
/// Checks run in order: magic, CRC (so truncation is a CRC failure), version.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network<f32>, OptimizerState<f32>)> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::CrcMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::CrcMismatch);
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let input_edge = r.usize()?;
    let input_channels = r.usize()?;
    let batchnorm = match r.u32()? {
        0 => false,
        1 => true,
        other => return Err(Error::DecodeError(format!("batchnorm flag {other}"))),
    };
    let n_layers = r.usize()?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let [kind, a, b, c] = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
        layers.push(match kind {
            0 => LayerSpec::Conv3d {
                in_ch: a,
                out_ch: b,
                kernel: c,
            },
            1 => LayerSpec::MaxPool3d { pool: a },
            2 => LayerSpec::Flatten,
            3 => LayerSpec::Dense {
                in_features: a,
                out_features: b,
                activation: match c {
                    0 => Activation::Linear,
                    1 => Activation::Relu,
                    _ => return Err(Error::DecodeError(format!("activation code {c}"))),
                },
            },
            _ => return Err(Error::DecodeError(format!("layer kind {kind}"))),
        });
    }
    let spec = NetworkSpec {
        input_edge,
        input_channels,
        layers,
        batchnorm,
    };
    let lr = r.f64()?;
    let momentum = r.f64()?;

    let mut net = Network::<f32>::zeroed(&spec)?;
    for p in net.params_mut() {
        r.fill(p)?;
    }
    let mut state = OptimizerState::new(lr, momentum, &net.params());
    for v in &mut state.velocity {
        r.fill(v)?;
    }
    for b in net.buffers_mut() {
        r.fill(b)?;
    }
    if r.pos != body.len() {
        return Err(Error::DecodeError(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok((net, state))
}

pub fn save_checkpoint(net: &Network<f32>, state: &OptimizerState<f32>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net, state)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, OptimizerState<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_checkpoint(&bytes)
}

/// Header bytes for `spec` (everything except the arrays and CRC).
pub fn header_len(spec: &NetworkSpec) -> usize {
    4 + 4 * 5 + 16 * spec.layers.len() + 16
}
