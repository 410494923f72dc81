//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `EDRC`, `u32` version, a tensor manifest
//! (`u32` count, then per tensor `u32` name length, UTF-8 name, `u32` rank,
//! `u64` dims, `u8` precision tag), the tensor payloads in manifest order,
//! an optimizer block in the same manifest-then-payload form with
//! `opt/`-prefixed names, and a string key-value trailer.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Accumulator, Adadelta, DEFAULT_EPS, DEFAULT_RHO};
use crate::tensor::{ParamStore, Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"EDRC";
pub const VERSION: u32 = 1;
const OPT_PREFIX: &str = "opt/";
const SQ_GRAD: &str = "/sq_grad";
const SQ_UPDATE: &str = "/sq_update";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adadelta,
    pub meta: BTreeMap<String, String>,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    precision: Precision,
}

fn put_u32(w: &mut Vec<u8>, x: u32) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_manifest(w: &mut Vec<u8>, entries: &[Entry]) {
    put_u32(w, entries.len() as u32);
    for e in entries {
        put_str(w, &e.name);
        put_u32(w, e.shape.len() as u32);
        for &d in &e.shape {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        w.push(e.precision.tag());
    }
}

fn put_values(w: &mut Vec<u8>, values: &[f64], p: Precision) {
    for &v in values {
        match p {
            Precision::F32 => w.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => w.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

/// Serializes the model, optimizer state and `meta` to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optimizer: &Adadelta,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let store = &model.store;
    let p = store.precision();
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    put_u32(&mut w, VERSION);

    let entries: Vec<Entry> = store
        .iter()
        .map(|(_, param)| Entry {
            name: param.name.clone(),
            shape: param.tensor.shape().to_vec(),
            precision: p,
        })
        .collect();
    put_manifest(&mut w, &entries);
    for (_, param) in store.iter() {
        put_values(&mut w, param.tensor.values(), p);
    }

    let mut opt_entries = Vec::new();
    let mut opt_values: Vec<&[f64]> = Vec::new();
    for (id, param) in store.iter() {
        if let Some(acc) = optimizer.accumulator(id) {
            for (suffix, vals) in [(SQ_GRAD, &acc.sq_grad), (SQ_UPDATE, &acc.sq_update)] {
                opt_entries.push(Entry {
                    name: format!("{OPT_PREFIX}{}{suffix}", param.name),
                    shape: param.tensor.shape().to_vec(),
                    precision: Precision::F64,
                });
                opt_values.push(vals);
            }
        }
    }
    put_manifest(&mut w, &opt_entries);
    for v in opt_values {
        put_values(&mut w, v, Precision::F64);
    }

    let mut meta = meta.clone();
    meta.insert("rho".into(), optimizer.rho.to_string());
    meta.insert("eps".into(), optimizer.eps.to_string());
    put_u32(&mut w, meta.len() as u32);
    for (k, v) in &meta {
        put_str(&mut w, k);
        put_str(&mut w, v);
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&w).and_then(|_| f.sync_all()))
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> io::Result<u32> {
        let mut b = [0u8; 4];
        self.take(4)?.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> io::Result<u64> {
        let mut b = [0u8; 8];
        self.take(8)?.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self) -> io::Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| io::ErrorKind::InvalidData.into())
    }

    fn values(&mut self, n: usize, p: Precision) -> io::Result<Vec<f64>> {
        let width = match p {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let bytes = self.take(n.checked_mul(width).ok_or(io::ErrorKind::InvalidData)?)?;
        Ok(bytes
            .chunks_exact(width)
            .map(|c| match p {
                Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect())
    }

    fn manifest(&mut self, what: &str) -> Result<Vec<Entry>> {
        let bad = |e: io::Error| Error::Checkpoint(format!("{what} manifest: {e}"));
        let count = self.u32().map_err(bad)? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = self.string().map_err(bad)?;
            let rank = self.u32().map_err(bad)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64().map_err(bad)? as usize);
            }
            let tag = self.u8().map_err(bad)?;
            let precision = Precision::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: unknown precision tag {tag}")))?;
            out.push(Entry {
                name,
                shape,
                precision,
            });
        }
        Ok(out)
    }
}

/// Tensor names and shapes from a checkpoint's manifest, without payloads.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes };
    let trunc = |_: io::Error| Error::Checkpoint("truncated header".into());
    if r.take(4).map_err(trunc)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic bytes", path.display())));
    }
    let version = r.u32().map_err(trunc)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    Ok(r.manifest("tensor")?
        .into_iter()
        .map(|e| (e.name, e.shape))
        .collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes };
    let trunc = |_: io::Error| Error::Checkpoint("truncated header".into());
    if r.take(4).map_err(trunc)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic bytes", path.display())));
    }
    let version = r.u32().map_err(trunc)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }

    let entries = r.manifest("tensor")?;
    let precision = entries.first().map_or(Precision::F64, |e| e.precision);
    if entries.iter().any(|e| e.precision != precision) {
        return Err(Error::Checkpoint("mixed tensor precisions".into()));
    }
    let mut store = ParamStore::new(precision);
    for e in &entries {
        let n: usize = e.shape.iter().product();
        let values = r
            .values(n, e.precision)
            .map_err(|_| Error::MissingTensor(e.name.clone()))?;
        let t = Tensor::new(e.shape.clone(), values)
            .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        store.insert(e.name.clone(), t)?;
    }

    let opt_entries = r.manifest("optimizer")?;
    let mut state: Vec<Option<Accumulator>> = vec![None; store.len()];
    for e in &opt_entries {
        let n: usize = e.shape.iter().product();
        let values = r
            .values(n, e.precision)
            .map_err(|_| Error::MissingTensor(e.name.clone()))?;
        let (param, field) = e
            .name
            .strip_prefix(OPT_PREFIX)
            .and_then(|s| {
                s.strip_suffix(SQ_GRAD)
                    .map(|p| (p, 0))
                    .or_else(|| s.strip_suffix(SQ_UPDATE).map(|p| (p, 1)))
            })
            .ok_or_else(|| Error::Checkpoint(format!("unexpected optimizer tensor {}", e.name)))?;
        let id = store
            .id(param)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown tensor {param}")))?;
        if store.get(id).shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {param}")));
        }
        let acc = state[id.index()].get_or_insert_with(|| Accumulator::zeros(n));
        if field == 0 {
            acc.sq_grad = values;
        } else {
            acc.sq_update = values;
        }
    }

    let trailer = |_: io::Error| Error::Checkpoint("truncated key-value trailer".into());
    let n = r.u32().map_err(trailer)? as usize;
    let mut meta = BTreeMap::new();
    for _ in 0..n {
        let k = r.string().map_err(trailer)?;
        let v = r.string().map_err(trailer)?;
        meta.insert(k, v);
    }
    let parse = |key: &str, default: f64| -> Result<f64> {
        meta.get(key).map_or(Ok(default), |v| {
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("trailer value {key} = {v} is not a number")))
        })
    };
    let mut optimizer = Adadelta::new(parse("rho", DEFAULT_RHO)?, parse("eps", DEFAULT_EPS)?);
    optimizer.state = state;
    let model = Model::from_store(store)?;
    Ok(Checkpoint {
        model,
        optimizer,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_decoder::ModelDims;
    use crate::graph::ParamGrads;

    fn model(p: Precision) -> Model {
        let dims = ModelDims {
            src_vocab: 9,
            tgt_vocab: 7,
            embed: 3,
            hidden: 4,
        };
        let mut m = Model::new(dims, p, 11).unwrap();
        m.attach_reconstructor(11).unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for p in [Precision::F32, Precision::F64] {
            let mut m = model(p);
            let mut opt = Adadelta::new(0.95, 1e-6);
            let ids: Vec<_> = m.store.ids().collect();
            let grads = ParamGrads(
                ids.iter()
                    .map(|&id| Some(vec![0.01; m.store.get(id).len()]))
                    .collect(),
            );
            opt.step(&mut m.store, &ids, &grads);
            let mut meta = BTreeMap::new();
            meta.insert("lambda".to_string(), "0.3".to_string());
            let path = dir.path().join(format!("m{p}.edrc"));
            save_checkpoint(&path, &m, &opt, &meta).unwrap();
            let c = load_checkpoint(&path).unwrap();
            assert_eq!(c.model.store.precision(), p);
            for ((_, a), (_, b)) in m.store.iter().zip(c.model.store.iter()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.tensor.values(), b.tensor.values());
            }
            assert_eq!(c.optimizer.state, opt.state);
            assert_eq!(c.meta["lambda"], "0.3");
            assert!(c.model.gamma.is_some());
        }
    }

    #[test]
    fn truncation_names_the_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(Precision::F64);
        let path = dir.path().join("m.edrc");
        save_checkpoint(&path, &m, &Adadelta::new(0.95, 1e-6), &BTreeMap::new()).unwrap();
        let bytes = fs::read(&path).unwrap();
        // Drop the final value of the last tensor payload.
        let last = m.store.iter().last().unwrap().1.name.clone();
        let manifest: usize = m
            .store
            .iter()
            .map(|(_, p)| 4 + p.name.len() + 4 + 8 * p.tensor.shape().len() + 1)
            .sum();
        let payload: usize = m.store.iter().map(|(_, p)| 8 * p.tensor.len()).sum();
        let cut = 4 + 4 + 4 + manifest + payload - 8;
        fs::write(&path, &bytes[..cut]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, last),
            other => panic!("expected MissingTensor, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.edrc");
        fs::write(&path, b"NOPE\x01\0\0\0").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"EDRC\x02\0\0\0").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn single_source_embedding_in_manifest() {
        let m = model(Precision::F64);
        let n = m.store.iter().filter(|(_, p)| p.name.contains("src_emb")).count();
        assert_eq!(n, 1);
    }
}
