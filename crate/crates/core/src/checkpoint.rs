//! `XRESCKPT` files: magic, `u32` version, then records of
//! `(u32 name length, name, u8 dtype tag, u32 rank, u64 extents, values)`
//! and a trailing CRC32 over everything before it, all little-endian.
//!
//! Tensor records carry the f32/f64 tags. Tag 2 marks a UTF-8 text record
//! (rank 1, extent = byte length); the `meta.arch` text record holds the
//! `[arch]` lines needed to rebuild the network, `meta.seed` the seed.
//! Running statistics are stored as `<layer>.running_mean` / `.running_var`.

use std::fs;
use std::path::Path;

use crate::arch::Network;
use crate::config;
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"XRESCKPT";
pub const VERSION: u32 = 1;
pub const TEXT_TAG: u8 = 2;

enum Payload<'a> {
    Text(&'a str),
    Values { dtype: DType, shape: &'a [usize], data: Vec<u8> },
}

fn put_record(out: &mut Vec<u8>, name: &str, payload: Payload<'_>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    match payload {
        Payload::Text(s) => {
            out.push(TEXT_TAG);
            out.extend_from_slice(&1u32.to_le_bytes());
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        Payload::Values { dtype, shape, data } => {
            out.push(dtype.tag());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&data);
        }
    }
}

fn encode<T: Element>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::DTYPE.size());
    for &v in values {
        v.write_le(&mut out);
    }
    out
}

pub fn to_bytes<T: Element>(net: &Network<T>, seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_record(&mut out, "meta.arch", Payload::Text(&config::arch_section(net.spec(), net.variant())));
    put_record(&mut out, "meta.seed", Payload::Text(&seed.to_string()));
    for (name, p) in net.params().iter() {
        put_record(
            &mut out,
            name,
            Payload::Values {
                dtype: T::DTYPE,
                shape: p.value.shape(),
                data: encode(p.value.data()),
            },
        );
    }
    for (name, s) in net.running_stats() {
        for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            put_record(
                &mut out,
                &format!("{name}.{suffix}"),
                Payload::Values {
                    dtype: T::DTYPE,
                    shape: &[values.len()],
                    data: encode(values),
                },
            );
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

enum Record {
    Text(String),
    Values(Tensor<f64>, DType, Vec<u8>),
}

fn read_records(bytes: &[u8]) -> Result<Vec<(String, Record)>> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Truncated {
            what: "checkpoint",
            expected: MAGIC.len() + 8,
            actual: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader::new(body, "checkpoint");
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic, not an XRESCKPT file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::format("checkpoint", "CRC32 mismatch"));
    }
    let mut records = Vec::new();
    while r.remaining() > 0 {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "record name is not UTF-8"))?
            .to_string();
        let tag = r.u8()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        if tag == TEXT_TAG {
            let text = std::str::from_utf8(r.take(numel)?)
                .map_err(|_| Error::format("checkpoint", format!("record '{name}' is not UTF-8")))?;
            records.push((name, Record::Text(text.to_string())));
            continue;
        }
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::format("checkpoint", format!("record '{name}' has unknown dtype tag {tag}")))?;
        let raw = r.take(numel * dtype.size())?;
        let values: Vec<f64> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| f32::read_le(b) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        let t = Tensor::new(shape, values)
            .map_err(|e| Error::format("checkpoint", format!("record '{name}': {e}")))?;
        records.push((name, Record::Values(t, dtype, raw.to_vec())));
    }
    Ok(records)
}

/// Rebuilds the network described by the checkpoint; returns it with the seed.
pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<(Network<T>, u64)> {
    let records = read_records(bytes)?;
    let text = |key: &str| {
        records.iter().find_map(|(n, r)| match r {
            Record::Text(s) if n == key => Some(s.clone()),
            _ => None,
        })
    };
    let arch = text("meta.arch").ok_or_else(|| Error::format("checkpoint", "missing meta.arch record"))?;
    let (spec, variant) = config::parse_arch(&arch).map_err(|e| Error::format("checkpoint", format!("meta.arch: {e}")))?;
    let seed = text("meta.seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("checkpoint", "missing or malformed meta.seed record"))?;
    let mut net = Network::<T>::build(&spec, variant)?;
    let mut values: std::collections::HashMap<&str, (&Tensor<f64>, DType, &[u8])> = records
        .iter()
        .filter_map(|(n, r)| match r {
            Record::Values(t, d, raw) => Some((n.as_str(), (t, *d, raw.as_slice()))),
            Record::Text(_) => None,
        })
        .collect();
    // bit-exact decode when the stored and requested dtypes agree
    let decode = |t: &Tensor<f64>, d: DType, raw: &[u8]| -> Vec<T> {
        if d == T::DTYPE {
            raw.chunks_exact(d.size()).map(T::read_le).collect()
        } else {
            t.data().iter().map(|&v| T::of(v)).collect()
        }
    };
    for (name, p) in net.params_mut().iter_mut() {
        let (t, d, raw) = values
            .remove(name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing parameter '{name}'")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("parameter '{name}' has shape {:?}, network expects {:?}", t.shape(), p.value.shape()),
            ));
        }
        p.value.data_mut().copy_from_slice(&decode(t, d, raw));
    }
    for (name, s) in net.running_stats_mut() {
        for (suffix, target) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
            let key = format!("{name}.{suffix}");
            let (t, d, raw) = values
                .remove(key.as_str())
                .ok_or_else(|| Error::format("checkpoint", format!("missing statistics '{key}'")))?;
            if t.numel() != target.len() {
                return Err(Error::format("checkpoint", format!("statistics '{key}' has {} entries", t.numel())));
            }
            *target = decode(t, d, raw);
        }
    }
    if let Some(extra) = values.keys().next() {
        return Err(Error::format("checkpoint", format!("unexpected record '{extra}'")));
    }
    Ok((net, seed))
}

pub fn save<T: Element>(net: &Network<T>, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net, seed))?;
    Ok(())
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<(Network<T>, u64)> {
    from_bytes(&fs::read(path)?)
}
