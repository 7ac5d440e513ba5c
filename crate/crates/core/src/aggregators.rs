//! Aggregators `g(e_h, children)` and bottom-up attribute tree aggregation.
//!
//! Each aggregator depends on its children only through their sum `S` and
//! count `n`:
//!
//! ```text
//! gcn       σ(W (e_h + S))
//! ngcf      σ(W1 (e_h + S) + W2 (e_h ⊙ S))
//! cp        σ(W1 (e_h + S) + W2 (e_h ⊙ S) + W3 [n·e_h ⊕ S])
//! lightgcn  S
//! ```
//!
//! The free functions below evaluate the per-child forms literally on plain
//! tensors; [`Aggregator::apply`] evaluates the factored forms on a tape for
//! many nodes at once.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::data::OOV;
use crate::error::{HienError, Result};
use crate::graphs::{bottom_up_order, AttributeForest, NodeKey};
use crate::numcore::{Tape, Tensor, Var};
use crate::params::{glorot, Bound, ParamId, ParamStore};

pub const DEFAULT_PRELU_SLOPE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggKind {
    Gcn,
    Ngcf,
    LightGcn,
    Cp,
}

impl FromStr for AggKind {
    type Err = HienError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(AggKind::Gcn),
            "ngcf" => Ok(AggKind::Ngcf),
            "lightgcn" => Ok(AggKind::LightGcn),
            "cp" => Ok(AggKind::Cp),
            other => Err(HienError::Config(format!(
                "unknown aggregator `{other}` (expected gcn, ngcf, lightgcn or cp)"
            ))),
        }
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggKind::Gcn => "gcn",
            AggKind::Ngcf => "ngcf",
            AggKind::LightGcn => "lightgcn",
            AggKind::Cp => "cp",
        })
    }
}

fn check_vec(op: &'static str, k: usize, t: &Tensor) -> Result<()> {
    if t.rank() != 1 || t.numel() != k {
        return Err(HienError::dim(op, &[k], t.shape()));
    }
    Ok(())
}

fn check_mat(op: &'static str, w: &Tensor, out: usize, inp: usize) -> Result<()> {
    if w.shape() != [out, inp] {
        return Err(HienError::dim(op, w.shape(), &[out, inp]));
    }
    Ok(())
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (out, inp) = w.dims2();
    (0..out)
        .map(|o| w.data()[o * inp..(o + 1) * inp].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// How a node's children are reduced before `g` sees them. `Sum` passes
/// the raw child sum and count; `Mean` passes the child mean as a single
/// child, which keeps magnitudes independent of degree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Norm {
    #[default]
    Sum,
    Mean,
}

impl FromStr for Norm {
    type Err = HienError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Norm::Sum),
            "mean" => Ok(Norm::Mean),
            other => Err(HienError::Config(format!("unknown child reduction `{other}` (expected sum|mean)"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Sum => "sum",
            Norm::Mean => "mean",
        })
    }
}

pub fn prelu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect()
}

/// `σ(W (e_h + Σ children))`.
pub fn gcn_agg(e_h: &Tensor, children: &[Tensor], w: &Tensor, slope: f64) -> Result<Tensor> {
    let k = e_h.numel();
    check_vec("gcn_agg", k, e_h)?;
    check_mat("gcn_agg", w, k, k)?;
    let mut s = e_h.data().to_vec();
    for c in children {
        check_vec("gcn_agg", k, c)?;
        add_into(&mut s, c.data());
    }
    Ok(Tensor::vector(prelu(&matvec(w, &s), slope)))
}

/// `σ(W1 e_h + Σ_i (W1 e_i + W2 (e_h ⊙ e_i)))`.
pub fn ngcf_agg(e_h: &Tensor, children: &[Tensor], w1: &Tensor, w2: &Tensor, slope: f64) -> Result<Tensor> {
    let k = e_h.numel();
    check_vec("ngcf_agg", k, e_h)?;
    check_mat("ngcf_agg", w1, k, k)?;
    check_mat("ngcf_agg", w2, k, k)?;
    let mut acc = matvec(w1, e_h.data());
    for c in children {
        check_vec("ngcf_agg", k, c)?;
        add_into(&mut acc, &matvec(w1, c.data()));
        let had: Vec<f64> = e_h.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        add_into(&mut acc, &matvec(w2, &had));
    }
    Ok(Tensor::vector(prelu(&acc, slope)))
}

/// `Σ children`; zero vector without children.
pub fn lightgcn_agg(e_h: &Tensor, children: &[Tensor]) -> Result<Tensor> {
    let k = e_h.numel();
    let mut acc = vec![0.0; k];
    for c in children {
        check_vec("lightgcn_agg", k, c)?;
        add_into(&mut acc, c.data());
    }
    Ok(Tensor::vector(acc))
}

/// `σ(W1 e_h + Σ_i (W1 e_i + W2 (e_h ⊙ e_i) + W3 (e_h ⊕ e_i)))`.
pub fn cp_agg(
    e_h: &Tensor,
    children: &[Tensor],
    w1: &Tensor,
    w2: &Tensor,
    w3: &Tensor,
    slope: f64,
) -> Result<Tensor> {
    let k = e_h.numel();
    check_vec("cp_agg", k, e_h)?;
    check_mat("cp_agg", w1, k, k)?;
    check_mat("cp_agg", w2, k, k)?;
    check_mat("cp_agg", w3, k, 2 * k)?;
    let mut acc = matvec(w1, e_h.data());
    for c in children {
        check_vec("cp_agg", k, c)?;
        add_into(&mut acc, &matvec(w1, c.data()));
        let had: Vec<f64> = e_h.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        add_into(&mut acc, &matvec(w2, &had));
        let cat: Vec<f64> = e_h.data().iter().chain(c.data()).copied().collect();
        add_into(&mut acc, &matvec(w3, &cat));
    }
    Ok(Tensor::vector(prelu(&acc, slope)))
}

/// Plain-tensor aggregator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AggWeights {
    pub kind: AggKind,
    pub w1: Option<Tensor>,
    pub w2: Option<Tensor>,
    pub w3: Option<Tensor>,
    pub slope: f64,
    pub norm: Norm,
}

impl AggWeights {
    pub fn lightgcn() -> Self {
        AggWeights {
            kind: AggKind::LightGcn,
            w1: None,
            w2: None,
            w3: None,
            slope: DEFAULT_PRELU_SLOPE,
            norm: Norm::Sum,
        }
    }

    pub fn aggregate(&self, e_h: &Tensor, children: &[Tensor]) -> Result<Tensor> {
        if self.norm == Norm::Mean && children.len() > 1 {
            let mut mean = vec![0.0; e_h.numel()];
            for c in children {
                if c.numel() != mean.len() {
                    return Err(HienError::dim("aggregate", e_h.shape(), c.shape()));
                }
                for (m, x) in mean.iter_mut().zip(c.data()) {
                    *m += x;
                }
            }
            let n = children.len() as f64;
            let mean = Tensor::vector(mean.into_iter().map(|m| m / n).collect());
            return self.reduced(e_h, std::slice::from_ref(&mean));
        }
        self.reduced(e_h, children)
    }

    fn reduced(&self, e_h: &Tensor, children: &[Tensor]) -> Result<Tensor> {
        let kind = self.kind;
        fn need(w: &Option<Tensor>, kind: AggKind) -> Result<&Tensor> {
            w.as_ref()
                .ok_or_else(|| HienError::Config(format!("{kind} aggregator is missing a weight")))
        }
        match self.kind {
            AggKind::Gcn => gcn_agg(e_h, children, need(&self.w1, kind)?, self.slope),
            AggKind::Ngcf => ngcf_agg(e_h, children, need(&self.w1, kind)?, need(&self.w2, kind)?, self.slope),
            AggKind::LightGcn => lightgcn_agg(e_h, children),
            AggKind::Cp => cp_agg(
                e_h,
                children,
                need(&self.w1, kind)?,
                need(&self.w2, kind)?,
                need(&self.w3, kind)?,
                self.slope,
            ),
        }
    }
}

/// Aggregator parameters held in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    pub kind: AggKind,
    pub k: usize,
    pub w1: Option<ParamId>,
    pub w2: Option<ParamId>,
    pub w3: Option<ParamId>,
    pub slope: Option<ParamId>,
    pub norm: Norm,
}

impl Aggregator {
    pub fn init(kind: AggKind, k: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str) -> Self {
        let mut add = |name: &str, t: Tensor| Some(store.add(format!("{prefix}.{name}"), t));
        let (mut w1, mut w2, mut w3, mut slope) = (None, None, None, None);
        if kind != AggKind::LightGcn {
            w1 = add("w1", glorot(rng, k, k));
            slope = add("slope", Tensor::scalar(DEFAULT_PRELU_SLOPE));
        }
        if matches!(kind, AggKind::Ngcf | AggKind::Cp) {
            w2 = add("w2", glorot(rng, k, k));
        }
        if kind == AggKind::Cp {
            w3 = add("w3", glorot(rng, k, 2 * k));
        }
        Aggregator {
            kind,
            k,
            w1,
            w2,
            w3,
            slope,
            norm: Norm::Sum,
        }
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn weights(&self, store: &ParamStore) -> AggWeights {
        let get = |id: Option<ParamId>| id.map(|i| store.get(i).clone());
        AggWeights {
            kind: self.kind,
            w1: get(self.w1),
            w2: get(self.w2),
            w3: get(self.w3),
            slope: self.slope.map_or(DEFAULT_PRELU_SLOPE, |s| store.get(s).item()),
            norm: self.norm,
        }
    }

    /// Aggregates `n` nodes at once. `center` and `sum` are `[n × k]`;
    /// `count[i]` is the number of children behind `sum[i]`.
    pub fn apply(&self, tape: &mut Tape, bound: &Bound, center: Var, sum: Var, count: &[f64]) -> Result<Var> {
        if self.norm == Norm::Mean && count.iter().any(|&n| n > 1.0) {
            let inv = tape.leaf(Tensor::vector(count.iter().map(|&n| 1.0 / n.max(1.0)).collect()));
            let mean = tape.mul_col(sum, inv)?;
            let ones: Vec<f64> = count.iter().map(|&n| n.min(1.0)).collect();
            return self.reduced(tape, bound, center, mean, &ones);
        }
        self.reduced(tape, bound, center, sum, count)
    }

    fn reduced(&self, tape: &mut Tape, bound: &Bound, center: Var, sum: Var, count: &[f64]) -> Result<Var> {
        if self.kind == AggKind::LightGcn {
            return Ok(sum);
        }
        let w1 = bound.var(self.w1.expect("w1"));
        let both = tape.add(center, sum)?;
        let mut pre = tape.linear(both, w1)?;
        if let Some(w2) = self.w2 {
            let had = tape.mul(center, sum)?;
            let t = tape.linear(had, bound.var(w2))?;
            pre = tape.add(pre, t)?;
        }
        if let Some(w3) = self.w3 {
            let n = tape.leaf(Tensor::vector(count.to_vec()));
            let scaled = tape.mul_col(center, n)?;
            let cat = tape.concat(&[scaled, sum])?;
            let t = tape.linear(cat, bound.var(w3))?;
            pre = tape.add(pre, t)?;
        }
        tape.prelu(pre, bound.var(self.slope.expect("slope")))
    }

    /// Same as [`apply`](Self::apply) with no children.
    pub fn apply_empty(&self, tape: &mut Tape, bound: &Bound, center: Var) -> Result<Var> {
        let shape = tape.value(center).shape().to_vec();
        let n = shape.first().copied().unwrap_or(1);
        let zeros = tape.leaf(Tensor::zeros(&shape));
        self.apply(tape, bound, center, zeros, &vec![0.0; n])
    }
}

/// Refines attribute embeddings node by node in [`bottom_up_order`]. Each
/// attribute node becomes `g(raw, children)`, where leaf children contribute
/// their rows of `leaf_table` and attribute children their refined rows.
/// Leaves themselves are never rewritten, nor are rows of values that are
/// not forest nodes. With `enabled == false` the tables come back unchanged.
pub fn tree_aggregate(
    forest: &AttributeForest,
    leaf_table: &Tensor,
    attr_tables: &[Tensor],
    agg: &AggWeights,
    enabled: bool,
) -> Result<Vec<Tensor>> {
    let mut out = attr_tables.to_vec();
    if !enabled {
        return Ok(out);
    }
    let children = forest.children();
    let vec_of = |t: &Tensor, r: usize| Tensor::vector(t.row(r).to_vec());
    let mut refined: BTreeMap<NodeKey, Tensor> = BTreeMap::new();
    for node in bottom_up_order(forest)? {
        let NodeKey::Attr { field, value } = node else { continue };
        let kids: Vec<Tensor> = children
            .get(&node)
            .into_iter()
            .flatten()
            .map(|c| match c {
                NodeKey::Leaf(id) => vec_of(leaf_table, *id),
                attr => refined[attr].clone(),
            })
            .collect();
        let e = agg.aggregate(&vec_of(&attr_tables[field], value), &kids)?;
        refined.insert(node, e);
    }
    for (node, e) in refined {
        if let NodeKey::Attr { field, value } = node {
            out[field].row_mut(value).copy_from_slice(e.data());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct FieldPlan {
    field: usize,
    vocab: usize,
    /// 1 for values that are forest nodes.
    mask: Vec<f64>,
    counts: Vec<f64>,
    /// `(leaf id, value)` pairs for direct fields.
    leaves: (Vec<usize>, Vec<usize>),
    /// `(child field, child values, parent values)`.
    kids: Vec<(usize, Vec<usize>, Vec<usize>)>,
}

/// Precomputed index structure for batched tree aggregation on a tape.
#[derive(Clone, Debug)]
pub struct ForestPlan {
    fields: Vec<FieldPlan>,
}

impl ForestPlan {
    /// `vocabs[f]` is the table size of field `f`; `leaf_vocab` the size of
    /// the leaf table.
    pub fn new(forest: &AttributeForest, vocabs: &[usize], leaf_vocab: usize) -> Result<ForestPlan> {
        let n = forest.num_fields();
        if vocabs.len() != n {
            return Err(HienError::dim("forest plan", &[n], &[vocabs.len()]));
        }
        let mut plans: Vec<FieldPlan> = (0..n)
            .map(|f| FieldPlan {
                field: f,
                vocab: vocabs[f],
                mask: vec![0.0; vocabs[f]],
                counts: vec![0.0; vocabs[f]],
                leaves: (Vec::new(), Vec::new()),
                kids: Vec::new(),
            })
            .collect();
        let bounds = |field: &str, index: usize, vocab: usize| HienError::Bounds {
            field: field.to_string(),
            index,
            vocab,
        };
        for (&leaf, vals) in &forest.leaf_values {
            if leaf >= leaf_vocab {
                return Err(bounds("forest leaf", leaf, leaf_vocab));
            }
            for (f, &v) in vals.iter().enumerate() {
                if v == OOV {
                    continue;
                }
                if v >= vocabs[f] {
                    return Err(bounds(&forest.field_names[f], v, vocabs[f]));
                }
                plans[f].mask[v] = 1.0;
            }
        }
        for &f in &forest.direct {
            for (&leaf, vals) in &forest.leaf_values {
                let v = vals[f];
                if v != OOV {
                    plans[f].leaves.0.push(leaf);
                    plans[f].leaves.1.push(v);
                    plans[f].counts[v] += 1.0;
                }
            }
        }
        for (child, map) in forest.value_parent.iter().enumerate() {
            if map.is_empty() {
                continue;
            }
            let p = forest.field_parent[child].expect("parent field");
            let (cv, pv): (Vec<usize>, Vec<usize>) = map.iter().map(|(a, b)| (*a, *b)).unzip();
            for &x in &pv {
                plans[p].counts[x] += 1.0;
            }
            plans[p].kids.push((child, cv, pv));
        }
        // children first
        let mut depth = vec![0usize; n];
        for f in 0..n {
            let mut cur = forest.field_parent[f];
            let mut d = 1;
            while let Some(p) = cur {
                depth[p] = depth[p].max(d);
                d += 1;
                cur = forest.field_parent[p];
                if d > n {
                    return Err(HienError::Structure("field parent links form a cycle".into()));
                }
            }
        }
        plans.sort_by_key(|p| (depth[p.field], p.field));
        Ok(ForestPlan { fields: plans })
    }

    /// Batched [`tree_aggregate`]: returns one refined `[vocab × k]` table
    /// per field, in field order.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        agg: &Aggregator,
        leaf_table: Var,
        attr_tables: &[Var],
    ) -> Result<Vec<Var>> {
        let mut out: Vec<Option<Var>> = vec![None; attr_tables.len()];
        for fp in &self.fields {
            let raw = attr_tables[fp.field];
            let mut sum: Option<Var> = None;
            if !fp.leaves.0.is_empty() {
                let rows = tape.gather(leaf_table, &fp.leaves.0)?;
                sum = Some(tape.scatter(rows, &fp.leaves.1, fp.vocab)?);
            }
            for (child, cv, pv) in &fp.kids {
                let refined_child = out[*child].expect("child field refined first");
                let rows = tape.gather(refined_child, cv)?;
                let s = tape.scatter(rows, pv, fp.vocab)?;
                sum = Some(match sum {
                    Some(prev) => tape.add(prev, s)?,
                    None => s,
                });
            }
            let new = match sum {
                Some(s) => agg.apply(tape, bound, raw, s, &fp.counts)?,
                None => agg.apply_empty(tape, bound, raw)?,
            };
            // raw + mask ⊙ (new − raw)
            let delta = tape.sub(new, raw)?;
            let mask = tape.leaf(Tensor::vector(fp.mask.clone()));
            let delta = tape.mul_col(delta, mask)?;
            out[fp.field] = Some(tape.add(raw, delta)?);
        }
        Ok(out.into_iter().map(|v| v.expect("every field planned")).collect())
    }
}
