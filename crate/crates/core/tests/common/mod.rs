//! Independent oracles and random fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use hien::aggregators::{cp_agg, gcn_agg, ngcf_agg, tree_aggregate, AggWeights, DEFAULT_PRELU_SLOPE};
use hien::graphs::{AttributeForest, ForestKind};
use hien::data::Sample;
use hien::graphs::NeighborLists;
use hien::intention::{hierarchical_item_repr, user_intent_scores, AttrHierarchy};
use hien::model::HienModel;
use hien::numcore::{finite_diff_check, GradCheckReport, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec_of(rng: &mut ChaCha8Rng, k: usize) -> Tensor {
    Tensor::vector((0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn mat_of(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Pairwise FM: `Σ w + Σ_{i<j} ⟨e_i, e_j⟩`.
pub fn fm_pairwise(fields: &[Tensor], first: &[f64]) -> f64 {
    let mut s: f64 = first.iter().sum();
    for i in 0..fields.len() {
        for j in i + 1..fields.len() {
            s += fields[i].data().iter().zip(fields[j].data()).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    s
}

/// Pairwise AUC: every (positive, negative) pair scores 1, ties 0.5.
pub fn auc_pairs(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        if yi <= 0.5 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj > 0.5 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                credit += 1.0;
            } else if scores[i] == scores[j] {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

/// Scores drawn from a small grid so ties are common, plus labels with both
/// classes present.
pub fn auc_fixture(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let levels = rng.random_range(2..=20);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect();
    labels[0] = 1.0;
    labels[n - 1] = 0.0;
    (scores, labels)
}

/// Random aggregator input: center, children and `[k × k]`, `[k × k]`,
/// `[k × 2k]` weights.
pub struct AggCase {
    pub e_h: Tensor,
    pub children: Vec<Tensor>,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

pub fn agg_case(rng: &mut ChaCha8Rng) -> AggCase {
    let k = rng.random_range(1..=8);
    let n = rng.random_range(0..=6);
    AggCase {
        e_h: vec_of(rng, k),
        children: (0..n).map(|_| vec_of(rng, k)).collect(),
        w1: mat_of(rng, k, k),
        w2: mat_of(rng, k, k),
        w3: mat_of(rng, k, 2 * k),
    }
}

/// `(cp(W3 = 0) − ngcf, ngcf(W2 = 0) − gcn(W1))` as max absolute gaps.
pub fn reduction_gaps(c: &AggCase) -> (f64, f64) {
    let s = DEFAULT_PRELU_SLOPE;
    let k = c.e_h.numel();
    let z3 = Tensor::zeros(&[k, 2 * k]);
    let z2 = Tensor::zeros(&[k, k]);
    let cp = cp_agg(&c.e_h, &c.children, &c.w1, &c.w2, &z3, s).unwrap();
    let ng = ngcf_agg(&c.e_h, &c.children, &c.w1, &c.w2, s).unwrap();
    let ng0 = ngcf_agg(&c.e_h, &c.children, &c.w1, &z2, s).unwrap();
    let gcn = gcn_agg(&c.e_h, &c.children, &c.w1, s).unwrap();
    (max_abs_diff(cp.data(), ng.data()), max_abs_diff(ng0.data(), gcn.data()))
}

/// A random item forest of depth ≤ 3: up to two chains of one to three
/// fields each, with consistent value-parent maps.
pub struct ForestCase {
    pub forest: AttributeForest,
    pub leaf_table: Tensor,
    pub attr_tables: Vec<Tensor>,
}

pub fn forest_case(rng: &mut ChaCha8Rng, integer_rows: bool) -> ForestCase {
    let k = rng.random_range(1..=4);
    let chains = rng.random_range(1..=2);
    let mut names = Vec::new();
    let mut parent = Vec::new();
    let mut vocab = Vec::new();
    // per chain: fields bottom-up
    let mut chain_fields: Vec<Vec<usize>> = Vec::new();
    for c in 0..chains {
        let depth = rng.random_range(1..=3);
        let base = names.len();
        let mut fields = Vec::new();
        for d in 0..depth {
            names.push(format!("c{c}_{d}"));
            parent.push(if d + 1 < depth { Some(base + d + 1) } else { None });
            vocab.push(0);
            fields.push(base + d);
        }
        chain_fields.push(fields);
    }
    // value maps, top level first
    let mut value_parent: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
    for fields in &chain_fields {
        let mut upper = 0usize;
        for &f in fields.iter().rev() {
            let n = rng.random_range(1..=4) + upper;
            vocab[f] = n + 1;
            value_parent[f] = (0..=n)
                .map(|v| if v == 0 || upper == 0 { 0 } else { 1 + (v - 1) % upper.max(1) })
                .collect();
            upper = n;
        }
    }
    let items = rng.random_range(1..=10);
    let mut leaves = BTreeMap::new();
    for item in 1..=items {
        let mut vals = vec![0usize; names.len()];
        for fields in &chain_fields {
            let f0 = fields[0];
            let mut v = rng.random_range(1..vocab[f0]);
            vals[f0] = v;
            for w in fields.windows(2) {
                v = value_parent[w[0]][v];
                vals[w[1]] = v;
            }
        }
        leaves.insert(item, vals);
    }
    let forest = AttributeForest::from_leaves(ForestKind::Item, names, parent, leaves).unwrap();
    let row = |r: &mut ChaCha8Rng| {
        if integer_rows {
            f64::from(r.random_range(-8i32..=8))
        } else {
            r.random_range(-1.0..1.0)
        }
    };
    let leaf_table = Tensor::matrix(items + 1, k, (0..(items + 1) * k).map(|_| row(rng)).collect()).unwrap();
    let attr_tables = vocab
        .iter()
        .map(|&n| Tensor::matrix(n, k, (0..n * k).map(|_| row(rng)).collect()).unwrap())
        .collect();
    ForestCase {
        forest,
        leaf_table,
        attr_tables,
    }
}

/// LightGCN tree aggregation in closed form: each attribute node becomes the
/// sum of its descendant leaves; other rows keep their raw values.
pub fn lightgcn_closed_form(c: &ForestCase) -> Vec<Tensor> {
    let mut out = c.attr_tables.clone();
    let f = &c.forest;
    let mut sums: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (&leaf, vals) in &f.leaf_values {
        for field in 0..f.num_fields() {
            if vals[field] == 0 {
                continue;
            }
            let acc = sums.entry((field, vals[field])).or_insert_with(|| vec![0.0; c.leaf_table.dims2().1]);
            for (a, x) in acc.iter_mut().zip(c.leaf_table.row(leaf)) {
                *a += x;
            }
        }
    }
    for ((field, value), s) in sums {
        out[field].row_mut(value).copy_from_slice(&s);
    }
    out
}

pub fn lightgcn_tree(c: &ForestCase) -> Vec<Tensor> {
    tree_aggregate(&c.forest, &c.leaf_table, &c.attr_tables, &AggWeights::lightgcn(), true).unwrap()
}

/// Brute-force expansion of the nested attention recursion: every direct
/// field contributes each ancestor on its chain, weighted by the product of
/// attention scores from the direct field up to that ancestor.
pub fn item_repr_expanded(
    hier: &AttrHierarchy,
    embs: &BTreeMap<usize, Tensor>,
    scores: &BTreeMap<usize, f64>,
    alpha: &[f64],
) -> Vec<f64> {
    let k = embs.values().next().unwrap().numel();
    let mut out = vec![0.0; k];
    for &x in &hier.direct {
        let mut weight = 1.0;
        let mut node = Some(x);
        while let Some(f) = node {
            weight *= scores[&f];
            for (o, e) in out.iter_mut().zip(embs[&f].data()) {
                *o += weight * alpha[f] * e;
            }
            node = hier.parent[f];
        }
    }
    out
}

/// Random field hierarchy: each field's parent, if any, has a larger index;
/// fields that are nobody's parent are direct.
pub fn random_hierarchy(rng: &mut ChaCha8Rng) -> AttrHierarchy {
    let n = rng.random_range(1..=7);
    let parent: Vec<Option<usize>> = (0..n)
        .map(|f| (f + 1 < n && rng.random_bool(0.5)).then(|| rng.random_range(f + 1..n)))
        .collect();
    let direct = (0..n).filter(|f| !parent.contains(&Some(*f))).collect();
    AttrHierarchy { direct, parent }
}

/// The two-level example: fields 0..=3 are direct and 4 is the parent of 2.
pub fn toy_hierarchy() -> AttrHierarchy {
    AttrHierarchy {
        direct: vec![0, 1, 2, 3],
        parent: vec![None, None, Some(4), None, None],
    }
}

/// `(|tree − oracle|, |Σ a − 1|)` for a random user query over `hier`.
pub fn hierarchy_gaps(rng: &mut ChaCha8Rng, hier: &AttrHierarchy) -> (f64, f64) {
    let n = hier.parent.len();
    let k = rng.random_range(1..=6);
    let embs: BTreeMap<usize, Tensor> = (0..n).map(|f| (f, vec_of(rng, k))).collect();
    let query = vec_of(rng, k);
    let scores = user_intent_scores(&query, &embs).unwrap();
    let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let got = hierarchical_item_repr(hier, &embs, &scores, &alpha).unwrap();
    let want = item_repr_expanded(hier, &embs, &scores, &alpha);
    (max_abs_diff(got.data(), &want), (scores.values().sum::<f64>() - 1.0).abs())
}

/// The toy layout written out by hand.
pub fn toy_gap(rng: &mut ChaCha8Rng) -> f64 {
    let hier = toy_hierarchy();
    let k = 3;
    let e: Vec<Tensor> = (0..5).map(|_| vec_of(rng, k)).collect();
    let embs: BTreeMap<usize, Tensor> = e.iter().cloned().enumerate().collect();
    let a = user_intent_scores(&vec_of(rng, k), &embs).unwrap();
    let al: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
    let got = hierarchical_item_repr(&hier, &embs, &a, &al).unwrap();
    let want: Vec<f64> = (0..k)
        .map(|d| {
            let x = |f: usize| e[f].data()[d];
            a[&0] * al[0] * x(0)
                + a[&1] * al[1] * x(1)
                + a[&2] * (al[2] * x(2) + a[&4] * al[4] * x(4))
                + a[&3] * al[3] * x(3)
        })
        .collect();
    max_abs_diff(got.data(), &want)
}

/// Moves every parameter to a random point in `[-0.5, 0.5)`. Fresh models
/// sit near PReLU kinks and saturated corners where central differences
/// are unreliable; a generic point keeps the check about the gradients.
pub fn generic_point(m: &mut HienModel, seed: u64) {
    let mut r = rng(seed);
    for t in m.params.values_mut() {
        for x in t.data_mut() {
            *x = r.random_range(-0.5..0.5);
        }
    }
}

/// Tape gradients of the full training loss against central differences.
pub fn model_gradcheck(m: &HienModel, batch: &[&Sample], lists: &NeighborLists, l2: f64, tol: f64) -> GradCheckReport {
    let mut tape = Tape::new();
    let bound = m.params.bind(&mut tape);
    let (l, _) = m.batch_loss(&mut tape, &bound, batch, lists, l2).unwrap();
    let mut g = tape.backward(l).unwrap();
    let analytic: Vec<Tensor> = bound.vars.iter().map(|&v| g.take(v).unwrap()).collect();
    let mut ps = m.params.values().to_vec();
    finite_diff_check(
        &mut ps,
        &analytic,
        |ps| {
            let mut mm = m.clone();
            mm.params.set_values(ps.to_vec())?;
            let mut t = Tape::new();
            let b = mm.params.bind(&mut t);
            let (l, _) = mm.batch_loss(&mut t, &b, batch, lists, l2)?;
            Ok(t.value(l).item())
        },
        1e-5,
        tol,
    )
    .unwrap()
}
