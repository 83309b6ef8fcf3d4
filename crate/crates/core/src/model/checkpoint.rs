//! Portable binary checkpoint of a [`ParamSet`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic  b"FSCKPT01"
//! u64    input_dim
//! u64    tensor count
//! per tensor: u64 name length, UTF-8 name, u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Tensor names are `feature.<i>.dense.{w,b}`, `feature.<i>.bn.{gamma,beta,
//! running_mean,running_var,momentum,epsilon}`, `feature.<i>.relu` (0×0),
//! `head.w` and `head.b`. Vectors are stored as `1 × len`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{contract, Result};
use crate::nn::BatchNormState;
use crate::tensor::Tensor2;

use super::{FeatureLayer, ParamSet};

const MAGIC: &[u8; 8] = b"FSCKPT01";

fn named(params: &ParamSet) -> Vec<(String, Tensor2)> {
    let vec_t = |v: &[f64]| Tensor2::from_vec(1, v.len(), v.to_vec()).expect("vector shape");
    let mut out = Vec::new();
    for (i, layer) in params.feature.iter().enumerate() {
        match layer {
            FeatureLayer::Dense { w, b } => {
                out.push((format!("feature.{i}.dense.w"), w.clone()));
                out.push((format!("feature.{i}.dense.b"), vec_t(b)));
            }
            FeatureLayer::BatchNorm(s) => {
                out.push((format!("feature.{i}.bn.gamma"), vec_t(&s.gamma)));
                out.push((format!("feature.{i}.bn.beta"), vec_t(&s.beta)));
                out.push((format!("feature.{i}.bn.running_mean"), vec_t(&s.running_mean)));
                out.push((format!("feature.{i}.bn.running_var"), vec_t(&s.running_var)));
                out.push((format!("feature.{i}.bn.momentum"), vec_t(&[s.momentum])));
                out.push((format!("feature.{i}.bn.epsilon"), vec_t(&[s.epsilon])));
            }
            FeatureLayer::Relu => out.push((format!("feature.{i}.relu"), Tensor2::zeros(0, 0))),
        }
    }
    out.push(("head.w".to_owned(), params.head_w.clone()));
    out.push(("head.b".to_owned(), vec_t(&params.head_b)));
    out
}

pub fn write_checkpoint(params: &ParamSet, mut w: impl Write) -> Result<()> {
    let tensors = named(params);
    w.write_all(MAGIC)?;
    w.write_all(&(params.input_dim as u64).to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_usize(r: &mut impl Read, what: &str) -> Result<usize> {
    let v = read_u64(r)?;
    if v > (1 << 32) {
        return contract(format!("checkpoint {what} {v} is implausibly large"));
    }
    Ok(v as usize)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return contract("not a checkpoint file (bad magic)");
    }
    let input_dim = read_usize(&mut r, "input_dim")?;
    let count = read_usize(&mut r, "tensor count")?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_usize(&mut r, "name length")?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| crate::error::Error::Contract("non-UTF-8 tensor name".into()))?;
        let rows = read_usize(&mut r, "rows")?;
        let cols = read_usize(&mut r, "cols")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(read_u64(&mut r)?.to_le_bytes()));
        }
        tensors.push((name, Tensor2::from_vec(rows, cols, data)?));
    }
    assemble(input_dim, tensors)
}

type Named = std::iter::Peekable<std::vec::IntoIter<(String, Tensor2)>>;

fn take(it: &mut Named, expected: &str) -> Result<Tensor2> {
    match it.next() {
        Some((name, t)) if name == expected => Ok(t),
        Some((name, _)) => contract(format!("checkpoint: expected `{expected}`, found `{name}`")),
        None => contract(format!("checkpoint: missing `{expected}`")),
    }
}

fn take_vec(it: &mut Named, expected: &str) -> Result<Vec<f64>> {
    let t = take(it, expected)?;
    if t.rows() != 1 {
        return contract(format!("checkpoint: `{expected}` is not a vector"));
    }
    Ok(t.into_data())
}

fn take_scalar(it: &mut Named, expected: &str) -> Result<f64> {
    match take_vec(it, expected)?.as_slice() {
        [v] => Ok(*v),
        _ => contract(format!("checkpoint: `{expected}` is not a scalar")),
    }
}

fn assemble(input_dim: usize, tensors: Vec<(String, Tensor2)>) -> Result<ParamSet> {
    let mut it: Named = tensors.into_iter().peekable();
    let mut feature = Vec::new();
    loop {
        let i = feature.len();
        let prefix = format!("feature.{i}.");
        let kind = match it.peek() {
            Some((name, _)) if name == "head.w" => break,
            Some((name, _)) => name
                .strip_prefix(&prefix)
                .map(|rest| rest.split('.').next().unwrap_or("").to_owned())
                .ok_or_else(|| crate::error::Error::Contract(format!("checkpoint: unexpected tensor `{name}`")))?,
            None => return contract("checkpoint: missing head"),
        };
        let layer = match kind.as_str() {
            "dense" => FeatureLayer::Dense {
                w: take(&mut it, &format!("{prefix}dense.w"))?,
                b: take_vec(&mut it, &format!("{prefix}dense.b"))?,
            },
            "bn" => FeatureLayer::BatchNorm(BatchNormState {
                gamma: take_vec(&mut it, &format!("{prefix}bn.gamma"))?,
                beta: take_vec(&mut it, &format!("{prefix}bn.beta"))?,
                running_mean: take_vec(&mut it, &format!("{prefix}bn.running_mean"))?,
                running_var: take_vec(&mut it, &format!("{prefix}bn.running_var"))?,
                momentum: take_scalar(&mut it, &format!("{prefix}bn.momentum"))?,
                epsilon: take_scalar(&mut it, &format!("{prefix}bn.epsilon"))?,
            }),
            "relu" => {
                take(&mut it, &format!("{prefix}relu"))?;
                FeatureLayer::Relu
            }
            other => return contract(format!("checkpoint: unknown layer kind `{other}`")),
        };
        feature.push(layer);
    }
    let head_w = take(&mut it, "head.w")?;
    let head_b = take_vec(&mut it, "head.b")?;
    if let Some((name, _)) = it.next() {
        return contract(format!("checkpoint: trailing tensor `{name}`"));
    }
    let params = ParamSet {
        input_dim,
        feature,
        head_w,
        head_b,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::nn::Architecture;

    #[test]
    fn roundtrip_is_bit_exact() {
        let arch = Architecture::default_for(5).unwrap();
        let mut p = init_model(&arch, &[1, 3], 4, 2).unwrap();
        p.head_b[1] = -0.1 + f64::EPSILON;
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, p);

        let logistic = init_model(&Architecture::logistic(3).unwrap(), &[0], 1, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&logistic, &mut buf).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), logistic);
    }

    #[test]
    fn header_is_little_endian() {
        let p = init_model(&Architecture::logistic(3).unwrap(), &[0, 1], 2, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(buf[8..16], 3u64.to_le_bytes());
        assert_eq!(buf[16..24], 2u64.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(read_checkpoint(&b"NOTACKPT"[..]).is_err());
        let p = init_model(&Architecture::logistic(3).unwrap(), &[0], 1, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
