//! Dataset dump format, little-endian:
//!
//! ```text
//! u32 input_dim, u32 train count, u32 test count
//! per sample (train then test): u32 label, input_dim × f64
//! ```

use std::path::Path;

use super::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::nn::wire::{put_f64, put_u32, Reader};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub fn encode_dataset<S: Scalar>(
    input_dim: usize,
    train: &[LabeledSample<S>],
    test: &[LabeledSample<S>],
) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(12 + (train.len() + test.len()) * (4 + 8 * input_dim));
    put_u32(&mut buf, input_dim);
    put_u32(&mut buf, train.len());
    put_u32(&mut buf, test.len());
    for (i, s) in train.iter().chain(test).enumerate() {
        if s.features.len() != input_dim {
            return Err(Error::dim(format!("sample {i}"), input_dim, s.features.len()));
        }
        put_u32(&mut buf, s.label);
        put_f64(&mut buf, s.features.data());
    }
    Ok(buf)
}

pub fn decode_dataset<S: Scalar>(
    bytes: &[u8],
) -> Result<(Vec<LabeledSample<S>>, Vec<LabeledSample<S>>)> {
    let mut r = Reader::new(bytes);
    let dim = r.u32("input_dim")?;
    let n_train = r.u32("train count")?;
    let n_test = r.u32("test count")?;
    let record = 4 + 8 * dim;
    if (n_train + n_test).saturating_mul(record) != r.remaining() {
        return Err(Error::Format {
            offset: r.offset(),
            reason: format!(
                "expected {} sample bytes, found {}",
                (n_train + n_test).saturating_mul(record),
                r.remaining()
            ),
        });
    }
    let mut read = |n: usize| -> Result<Vec<LabeledSample<S>>> {
        (0..n)
            .map(|_| {
                let label = r.u32("label")?;
                let x = r.f64s(dim, "features")?;
                Ok(LabeledSample {
                    features: Tensor::vector(x),
                    label,
                })
            })
            .collect()
    };
    let train = read(n_train)?;
    let test = read(n_test)?;
    Ok((train, test))
}

pub fn save_dataset<S: Scalar>(
    path: &Path,
    input_dim: usize,
    train: &[LabeledSample<S>],
    test: &[LabeledSample<S>],
) -> Result<()> {
    std::fs::write(path, encode_dataset(input_dim, train, test)?)?;
    Ok(())
}

pub fn load_dataset<S: Scalar>(
    path: &Path,
) -> Result<(Vec<LabeledSample<S>>, Vec<LabeledSample<S>>)> {
    decode_dataset(&std::fs::read(path)?)
}
