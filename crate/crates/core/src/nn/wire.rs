//! Little-endian binary layouts.
//!
//! Model parameters:
//!
//! ```text
//! u32  extractor layer count L
//! L × (u32 out, u32 in)          extractor weight shapes
//! u32 num_classes, u32 feature_dim
//! for each extractor layer: weight (row-major f64), bias (f64)
//! classifier weight (row-major f64), classifier bias (f64)
//! ```
//!
//! Tensors (used for dumps): `u32 rank`, `rank × u32 dims`, then `f64` data.

use super::model::{Dense, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dimension exceeds u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64<S: Scalar>(buf: &mut Vec<u8>, values: &[S]) {
    for v in values {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

/// Cursor over a byte slice that reports offsets on failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.remaining()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    pub fn f64s<S: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<S>> {
        let start = self.pos;
        let len = n.checked_mul(8).ok_or_else(|| Error::Format {
            offset: start,
            reason: format!("{what} length overflows"),
        })?;
        let b = self.take(len, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in b.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: start + i * 8,
                    reason: format!("non-finite value in {what}"),
                });
            }
            out.push(S::lit(v));
        }
        Ok(out)
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("{} trailing bytes", self.remaining()),
            });
        }
        Ok(())
    }
}

pub fn serialize_params<S: Scalar>(params: &ModelParams<S>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(serialized_len(params));
    put_u32(&mut buf, params.extractor().len());
    for l in params.extractor() {
        put_u32(&mut buf, l.out_dim());
        put_u32(&mut buf, l.in_dim());
    }
    put_u32(&mut buf, params.num_classes());
    put_u32(&mut buf, params.feature_dim());
    for l in params.extractor().iter().chain([params.classifier()]) {
        put_f64(&mut buf, l.weight.data());
        put_f64(&mut buf, l.bias.data());
    }
    buf
}

/// Byte length of [`serialize_params`] without materialising it.
pub fn serialized_len<S: Scalar>(params: &ModelParams<S>) -> usize {
    4 + 8 * params.extractor().len() + 8 + 8 * params.param_count()
}

pub fn deserialize_params<S: Scalar>(bytes: &[u8]) -> Result<ModelParams<S>> {
    let mut r = Reader::new(bytes);
    let layers = r.u32("layer count")?;
    // each layer header is 8 bytes; reject absurd counts before allocating
    if layers.saturating_mul(8) > r.remaining() {
        return Err(Error::Format {
            offset: 0,
            reason: format!("layer count {layers} exceeds payload"),
        });
    }
    let mut shapes = Vec::with_capacity(layers + 1);
    for i in 0..layers {
        let out = r.u32(&format!("layer {i} rows"))?;
        let inp = r.u32(&format!("layer {i} cols"))?;
        shapes.push((out, inp));
    }
    let shape_end = r.offset();
    let classes = r.u32("classifier rows")?;
    let feat = r.u32("classifier cols")?;
    shapes.push((classes, feat));

    let mut dense = Vec::with_capacity(shapes.len());
    for (i, &(out, inp)) in shapes.iter().enumerate() {
        let what = if i == layers {
            "classifier".to_string()
        } else {
            format!("layer {i}")
        };
        let n = out.checked_mul(inp).ok_or_else(|| Error::Format {
            offset: shape_end,
            reason: format!("{what} shape overflows"),
        })?;
        let w = r.f64s(n, &format!("{what} weight"))?;
        let b = r.f64s(out, &format!("{what} bias"))?;
        dense.push(Dense {
            weight: Tensor::matrix(out, inp, w)?,
            bias: Tensor::vector(b),
        });
    }
    r.finish()?;
    let classifier = dense.pop().expect("classifier present");
    ModelParams::new(dense, classifier).map_err(|e| Error::Format {
        offset: 4,
        reason: format!("inconsistent layer shapes: {e}"),
    })
}

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>, buf: &mut Vec<u8>) {
    put_u32(buf, t.shape().len());
    for &d in t.shape() {
        put_u32(buf, d);
    }
    put_f64(buf, t.data());
}

pub(crate) fn decode_tensor_from<S: Scalar>(r: &mut Reader<'_>) -> Result<Tensor<S>> {
    let rank = r.u32("tensor rank")?;
    if rank.saturating_mul(4) > r.remaining() {
        return Err(Error::Format {
            offset: r.offset(),
            reason: format!("rank {rank} exceeds payload"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(r.u32(&format!("tensor dim {i}"))?);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.ok_or_else(|| Error::Format {
        offset: r.offset(),
        reason: "tensor size overflows".into(),
    })?;
    let data = r.f64s(n, "tensor data")?;
    Tensor::new(shape, data)
}

pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut r = Reader::new(bytes);
    let t = decode_tensor_from(&mut r)?;
    r.finish()?;
    Ok(t)
}
