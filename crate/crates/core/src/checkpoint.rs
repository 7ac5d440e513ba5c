//! Binary checkpoint container.
//!
//! ```text
//! magic "HIENCKPT" | u32 version
//! text schema | text train config
//! u64 n_params, then per parameter: text name, u32 rank, u64 dims..., f64 data...
//! leaves(item forest) | leaves(user forest)
//! u64 n_edges, then (u64 user, u64 item)...
//! u64 FNV-1a checksum of every preceding byte
//! ```
//!
//! Integers and floats are little-endian; `text` is a u64 byte length
//! followed by UTF-8.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{HienError, Result};
use crate::graphs::{AttributeForest, BipartiteGraph, ForestKind};
use crate::model::HienModel;
use crate::numcore::Tensor;
use crate::params::ParamStore;
use crate::schema::FeatureSchema;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"HIENCKPT";
pub const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn text(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn leaves(&mut self, forest: &AttributeForest) {
        self.usize(forest.leaf_values.len());
        for (&leaf, vals) in &forest.leaf_values {
            self.usize(leaf);
            self.usize(vals.len());
            for &v in vals {
                self.usize(v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| HienError::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| HienError::Checkpoint("length overflows usize".into()))
    }

    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(HienError::Checkpoint("truncated file".into()));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| HienError::Checkpoint("invalid UTF-8 text".into()))
    }

    fn leaves(&mut self) -> Result<BTreeMap<usize, Vec<usize>>> {
        let n = self.len(16)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let leaf = self.usize()?;
            let m = self.len(8)?;
            let vals = (0..m).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            out.insert(leaf, vals);
        }
        Ok(out)
    }
}

pub fn to_bytes(model: &HienModel, cfg: &TrainConfig) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.text(&model.schema.to_text());
    w.text(&cfg.to_text());
    w.usize(model.params.len());
    for (name, t) in model.params.names().iter().zip(model.params.values()) {
        w.text(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.usize(d);
        }
        for &x in t.data() {
            w.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.leaves(&model.item_forest);
    w.leaves(&model.user_forest);
    let edges = model.graph.edges();
    w.usize(edges.len());
    for (u, v) in edges {
        w.usize(u);
        w.usize(v);
    }
    let sum = fnv1a(&w.0);
    w.u64(sum);
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<(HienModel, TrainConfig)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(HienError::Checkpoint("bad header: not a HIEN checkpoint".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(HienError::Checkpoint(format!(
            "unsupported version {version} (this build reads {VERSION})"
        )));
    }
    if bytes.len() < r.pos + 8 {
        return Err(HienError::Checkpoint("truncated file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let mut r = Reader { buf: body, pos: r.pos };
    let schema = FeatureSchema::parse(&r.text()?).map_err(|e| HienError::Checkpoint(format!("schema: {e}")))?;
    let cfg = TrainConfig::parse(&r.text()?).map_err(|e| HienError::Checkpoint(format!("config: {e}")))?;
    let n = r.len(8)?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.text()?;
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(HienError::Checkpoint(format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| HienError::Checkpoint(format!("parameter `{name}` is too large")))?;
        if numel.saturating_mul(8) > body.len() - r.pos {
            return Err(HienError::Checkpoint("truncated file".into()));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.add(name, Tensor::new(shape, data)?);
    }
    let item_leaves = r.leaves()?;
    let user_leaves = r.leaves()?;
    let m = r.len(16)?;
    let edges = (0..m)
        .map(|_| Ok((r.usize()?, r.usize()?)))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(HienError::Checkpoint("trailing bytes after graph section".into()));
    }
    if fnv1a(body) != stored {
        return Err(HienError::Checkpoint("checksum mismatch: file is corrupted".into()));
    }
    let item_forest = AttributeForest::from_leaves(
        ForestKind::Item,
        schema.item_attrs.iter().map(|f| f.name.clone()).collect(),
        schema.item_attrs.iter().map(|f| f.parent).collect(),
        item_leaves,
    )?;
    let user_forest = AttributeForest::from_leaves(
        ForestKind::User,
        schema.user_attrs.iter().map(|f| f.name.clone()).collect(),
        vec![None; schema.user_attrs.len()],
        user_leaves,
    )?;
    let graph = BipartiteGraph::from_edges(schema.user.vocab, schema.item.vocab, edges)?;
    let model = HienModel::from_parts(schema, cfg.model.clone(), params, item_forest, user_forest, graph)?;
    Ok((model, cfg))
}

pub fn save_checkpoint(model: &HienModel, cfg: &TrainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, cfg))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(HienModel, TrainConfig)> {
    from_bytes(&std::fs::read(path)?)
}

/// Errors unless `data` matches the schema the model was trained on,
/// naming the first field that differs.
pub fn check_schema(model: &HienModel, data: &FeatureSchema) -> Result<()> {
    match model.schema.first_difference(data) {
        None => Ok(()),
        Some(field) => Err(HienError::Schema(format!(
            "checkpoint schema differs from the data schema at field `{field}`"
        ))),
    }
}
