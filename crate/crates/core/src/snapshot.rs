//! Binary snapshot of a built [`SlshIndex`], including its points.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DSLSHIDX" | version u32 | config_len u32 | config JSON
//! n u64 | d u64 | n × (id u64, label u8, d × f64)
//! tables u64 | per table: index u64, hash, buckets, inner layers
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Buckets and inner layers are written in key order, so saving the same
//! index twice gives identical bytes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::dataset::{LabeledPoint, PointStore};
use crate::error::{Error, Result};
use crate::lsh::{BitSampleFunction, BucketKey, ComposedHash, Components, HashFamily, RandomProjectionFunction};
use crate::slsh::{Buckets, InnerLayer, InnerTable, OuterTable, SlshConfig, SlshIndex};

pub const MAGIC: &[u8; 8] = b"DSLSHIDX";
pub const VERSION: u32 = 1;

struct Out {
    buf: Vec<u8>,
}

impl Out {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn hash(&mut self, h: &ComposedHash) {
        self.u8(match h.family() {
            HashFamily::L1BitSample => 0,
            HashFamily::CosineProjection => 1,
        });
        match h.seed() {
            Some(s) => {
                self.u8(1);
                self.u64(s);
            }
            None => {
                self.u8(0);
                self.u64(0);
            }
        }
        self.u64(h.m() as u64);
        self.u64(h.d() as u64);
        self.f64(h.ceiling());
        match h.components() {
            Components::BitSample(c) => c.iter().for_each(|f| {
                self.u64(f.coord as u64);
                self.f64(f.threshold);
            }),
            Components::Projection(c) => c.iter().for_each(|f| f.normal.iter().for_each(|&v| self.f64(v))),
        }
    }

    fn buckets(&mut self, m: usize, buckets: &Buckets) {
        let mut keys: Vec<&BucketKey> = buckets.keys().collect();
        keys.sort();
        self.u64(keys.len() as u64);
        for key in keys {
            self.bytes(&key.to_bytes(m));
            self.ids(&buckets[key]);
        }
    }

    fn ids(&mut self, ids: &[u32]) {
        self.u64(ids.len() as u64);
        ids.iter().for_each(|&i| self.u32(i));
    }
}

struct In<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| Error::Snapshot("truncated snapshot".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Snapshot("length overflows usize".into()))
    }
    /// A count of items that each occupy at least `min_item` bytes.
    fn count(&mut self, min_item: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(min_item) > self.data.len() - self.pos {
            return Err(Error::Snapshot("truncated snapshot".into()));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn hash(&mut self) -> Result<ComposedHash> {
        let family = match self.u8()? {
            0 => HashFamily::L1BitSample,
            1 => HashFamily::CosineProjection,
            other => return Err(Error::Snapshot(format!("unknown hash family tag {other}"))),
        };
        let has_seed = self.u8()? == 1;
        let seed = self.u64()?;
        let m = self.count(8)?;
        let d = self.usize()?;
        let ceiling = self.f64()?;
        let hash = match family {
            HashFamily::L1BitSample => {
                let comps = (0..m)
                    .map(|_| Ok(BitSampleFunction { coord: self.usize()?, threshold: self.f64()? }))
                    .collect::<Result<Vec<_>>>()?;
                ComposedHash::from_bit_samples(d, ceiling, comps)?
            }
            HashFamily::CosineProjection => {
                if m.saturating_mul(d).saturating_mul(8) > self.data.len() - self.pos {
                    return Err(Error::Snapshot("truncated snapshot".into()));
                }
                let comps = (0..m)
                    .map(|_| Ok(RandomProjectionFunction { normal: (0..d).map(|_| self.f64()).collect::<Result<_>>()? }))
                    .collect::<Result<Vec<_>>>()?;
                ComposedHash::from_projections(d, comps)?
            }
        };
        if !has_seed {
            return Ok(hash);
        }
        let derived = ComposedHash::derive_with_ceiling(family, seed, m, d, ceiling)?;
        if derived.components() != hash.components() {
            return Err(Error::Snapshot(format!("stored components do not match seed {seed}")));
        }
        Ok(derived)
    }

    fn key(&mut self, m: usize) -> Result<BucketKey> {
        BucketKey::from_bytes(m, self.take(m.div_ceil(8))?)
    }

    fn ids(&mut self, n_points: usize) -> Result<Vec<u32>> {
        let n = self.count(4)?;
        let ids = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        if ids.iter().any(|&i| i as usize >= n_points) {
            return Err(Error::Snapshot("bucket references a point outside the store".into()));
        }
        Ok(ids)
    }

    fn buckets(&mut self, m: usize, n_points: usize) -> Result<Buckets> {
        let n = self.count(8)?;
        let mut buckets = HashMap::with_capacity(n);
        for _ in 0..n {
            let key = self.key(m)?;
            let ids = self.ids(n_points)?;
            if buckets.insert(key, ids).is_some() {
                return Err(Error::Snapshot("duplicate bucket key".into()));
            }
        }
        Ok(buckets)
    }
}

/// Serializes `index` into the snapshot format.
pub fn to_bytes(index: &SlshIndex) -> Result<Vec<u8>> {
    let mut out = Out { buf: Vec::new() };
    out.bytes(MAGIC);
    out.u32(VERSION);
    let cfg = serde_json::to_vec(index.config())?;
    out.u32(u32::try_from(cfg.len()).map_err(|_| Error::Snapshot("config too large".into()))?);
    out.bytes(&cfg);

    let store = index.store();
    out.u64(store.len() as u64);
    out.u64(store.d() as u64);
    for local in 0..store.len() as u32 {
        out.u64(store.id(local));
        out.u8(store.label(local) as u8);
        store.point(local).iter().for_each(|&v| out.f64(v));
    }

    out.u64(index.tables().len() as u64);
    for table in index.tables() {
        out.u64(table.index as u64);
        out.hash(&table.hash);
        out.buckets(table.hash.m(), &table.buckets);
        let mut keys: Vec<&BucketKey> = table.inner.keys().collect();
        keys.sort();
        out.u64(keys.len() as u64);
        for key in keys {
            let layer = &table.inner[key];
            out.bytes(&key.to_bytes(table.hash.m()));
            out.ids(&layer.population);
            out.u64(layer.tables.len() as u64);
            for inner in &layer.tables {
                out.hash(&inner.hash);
                out.buckets(inner.hash.m(), &inner.buckets);
            }
        }
    }
    let digest = Sha256::digest(&out.buf);
    out.bytes(digest.as_slice());
    Ok(out.buf)
}

/// Restores an index written by [`to_bytes`].
pub fn from_bytes(data: &[u8]) -> Result<SlshIndex> {
    if data.len() < MAGIC.len() + 4 + 32 || &data[..MAGIC.len()] != MAGIC {
        return Err(Error::Snapshot("not an index snapshot".into()));
    }
    let (body, trailer) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Snapshot("checksum mismatch".into()));
    }
    let mut r = In { data: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported snapshot version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: SlshConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    cfg.validate()?;

    let n = r.count(9)?;
    let d = r.usize()?;
    if d != cfg.d {
        return Err(Error::Snapshot(format!("point dimension {d} does not match configured d {}", cfg.d)));
    }
    let points = (0..n)
        .map(|_| {
            let id = r.u64()?;
            let label = r.u8()? != 0;
            let features = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Ok(LabeledPoint { id, features, label })
        })
        .collect::<Result<Vec<_>>>()?;
    let store = Arc::new(PointStore::new(d, &points)?);

    let table_count = r.count(8)?;
    let mut tables = Vec::with_capacity(table_count);
    for _ in 0..table_count {
        let index = r.usize()?;
        let hash = r.hash()?;
        let buckets = r.buckets(hash.m(), n)?;
        let layer_count = r.count(8)?;
        let mut inner = HashMap::with_capacity(layer_count);
        for _ in 0..layer_count {
            let key = r.key(hash.m())?;
            let population = r.ids(n)?;
            let inner_count = r.count(8)?;
            let inner_tables = (0..inner_count)
                .map(|_| {
                    let h = r.hash()?;
                    let b = r.buckets(h.m(), n)?;
                    Ok(InnerTable { hash: h, buckets: b })
                })
                .collect::<Result<Vec<_>>>()?;
            inner.insert(key, InnerLayer { tables: inner_tables, population });
        }
        tables.push(OuterTable { index, hash, buckets, inner });
    }
    if r.pos != body.len() {
        return Err(Error::Snapshot("trailing bytes after index".into()));
    }
    Ok(SlshIndex::from_parts(cfg, store, tables))
}

pub fn save(index: &SlshIndex, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&to_bytes(index)?)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SlshIndex> {
    let mut data = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut data)?;
    from_bytes(&data)
}
