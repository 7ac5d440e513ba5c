//! Dual-intent attention and layer-wise propagation over the click graph.
//!
//! Layer 0 is the raw id embedding. Layer 1 composes the entity from its
//! tree-refined attributes under attention conditioned on the other side of
//! the pair: a user attends over an item's attribute nodes (`a`, scaled by
//! per-field `α`, nested along the attribute hierarchy) and an item attends
//! over a user's attributes (`b`, scaled by `β`). Layers `2..=L` aggregate
//! neighbours in the click graph. The final embedding sums all layers.

use std::collections::BTreeMap;

use crate::aggregators::AggWeights;
use crate::error::{HienError, Result};
use crate::graphs::NeighborLists;
use crate::numcore::{Tape, Tensor, Var};

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over the attributes of `⟨query, e_x⟩`.
fn attention(query: &Tensor, attrs: &BTreeMap<usize, Tensor>, op: &'static str) -> Result<BTreeMap<usize, f64>> {
    if attrs.is_empty() {
        return Err(HienError::EmptyInput(op));
    }
    let mut logits = Vec::with_capacity(attrs.len());
    for e in attrs.values() {
        if e.numel() != query.numel() {
            return Err(HienError::dim(op, query.shape(), e.shape()));
        }
        logits.push(dot(query.data(), e.data()));
    }
    Ok(attrs.keys().copied().zip(softmax(&logits)).collect())
}

/// `a_x = softmax_x ⟨e_u, e_x⟩` over every attribute node of an item
/// (direct attributes and their ancestors), keyed by field.
pub fn user_intent_scores(user_emb: &Tensor, item_attr_embs: &BTreeMap<usize, Tensor>) -> Result<BTreeMap<usize, f64>> {
    attention(user_emb, item_attr_embs, "user_intent_scores")
}

/// `b_y = softmax_y ⟨e_v, e_y⟩` over a user's attributes, keyed by field.
pub fn item_intent_scores(item_emb: &Tensor, user_attr_embs: &BTreeMap<usize, Tensor>) -> Result<BTreeMap<usize, f64>> {
    attention(item_emb, user_attr_embs, "item_intent_scores")
}

/// Field-level attribute hierarchy: which fields an item links to directly
/// and each field's parent field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttrHierarchy {
    pub direct: Vec<usize>,
    pub parent: Vec<Option<usize>>,
}

impl AttrHierarchy {
    pub fn flat(n: usize) -> Self {
        AttrHierarchy {
            direct: (0..n).collect(),
            parent: vec![None; n],
        }
    }

    /// Fields ordered so that parents come before children.
    pub fn top_down(&self) -> Vec<usize> {
        let n = self.parent.len();
        let depth = |mut f: usize| {
            let mut d = 0;
            while let Some(p) = self.parent[f] {
                d += 1;
                f = p;
                if d > n {
                    break;
                }
            }
            d
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&f| (depth(f), f));
        order
    }
}

/// `e_v^(1) = Σ_{x direct} contrib(x)` with
/// `contrib(x) = a_x (α_x e_x + contrib(parent(x)))`.
pub fn hierarchical_item_repr(
    hier: &AttrHierarchy,
    embs: &BTreeMap<usize, Tensor>,
    scores: &BTreeMap<usize, f64>,
    alpha: &[f64],
) -> Result<Tensor> {
    fn contrib(
        f: usize,
        hier: &AttrHierarchy,
        embs: &BTreeMap<usize, Tensor>,
        scores: &BTreeMap<usize, f64>,
        alpha: &[f64],
        depth: usize,
    ) -> Result<Vec<f64>> {
        if depth > hier.parent.len() {
            return Err(HienError::Structure("attribute hierarchy has a cycle".into()));
        }
        let a = *scores
            .get(&f)
            .ok_or_else(|| HienError::Inconsistent(format!("no attention score for attribute field {f}")))?;
        let e = embs
            .get(&f)
            .ok_or_else(|| HienError::Inconsistent(format!("no embedding for attribute field {f}")))?;
        let mut inner: Vec<f64> = e.data().iter().map(|v| alpha[f] * v).collect();
        if let Some(p) = hier.parent[f] {
            let up = contrib(p, hier, embs, scores, alpha, depth + 1)?;
            if up.len() != inner.len() {
                return Err(HienError::dim("hierarchical_item_repr", &[inner.len()], &[up.len()]));
            }
            for (i, u) in inner.iter_mut().zip(up) {
                *i += u;
            }
        }
        Ok(inner.into_iter().map(|v| a * v).collect())
    }
    let k = embs.values().next().ok_or(HienError::EmptyInput("hierarchical_item_repr"))?.numel();
    let mut out = vec![0.0; k];
    for &x in &hier.direct {
        for (o, c) in out.iter_mut().zip(contrib(x, hier, embs, scores, alpha, 0)?) {
            *o += c;
        }
    }
    Ok(Tensor::vector(out))
}

/// `e_u^(1) = Σ_y b_y β_y e_y`.
pub fn hierarchical_user_repr(
    embs: &BTreeMap<usize, Tensor>,
    scores: &BTreeMap<usize, f64>,
    beta: &[f64],
) -> Result<Tensor> {
    let k = embs.values().next().ok_or(HienError::EmptyInput("hierarchical_user_repr"))?.numel();
    let mut out = vec![0.0; k];
    for (&f, e) in embs {
        let b = *scores
            .get(&f)
            .ok_or_else(|| HienError::Inconsistent(format!("no attention score for user field {f}")))?;
        for (o, v) in out.iter_mut().zip(e.data()) {
            *o += b * beta[f] * v;
        }
    }
    Ok(Tensor::vector(out))
}

/// One propagation layer over whole entity tables:
/// `e_u^(l) = g(e_u^(l-1), {e_v^(l-1) : v ∈ N_u})` and symmetrically for
/// items. Returns `(users, items)`.
pub fn propagate_layer(
    l: usize,
    neighbors: &NeighborLists,
    agg: &AggWeights,
    users: &Tensor,
    items: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if l < 2 {
        return Err(HienError::Config(format!(
            "propagation starts at layer 2; layer {l} comes from the intent attention"
        )));
    }
    let side = |own: &Tensor, other: &Tensor, lists: &[Vec<usize>]| -> Result<Tensor> {
        let (n, k) = own.dims2();
        if lists.len() != n || other.dims2().1 != k {
            return Err(HienError::dim("propagate_layer", own.shape(), other.shape()));
        }
        let mut out = Tensor::zeros(&[n, k]);
        for (i, nb) in lists.iter().enumerate() {
            let kids: Vec<Tensor> = nb.iter().map(|&j| Tensor::vector(other.row(j).to_vec())).collect();
            let e = agg.aggregate(&Tensor::vector(own.row(i).to_vec()), &kids)?;
            out.row_mut(i).copy_from_slice(e.data());
        }
        Ok(out)
    };
    Ok((
        side(users, items, &neighbors.user_items)?,
        side(items, users, &neighbors.item_users)?,
    ))
}

/// Embeddings `e^(0) .. e^(L)` of one entity table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub depth: usize,
    pub layers: Vec<Tensor>,
}

/// `e′ = e^(0) + e^(1) + … + e^(L)`.
pub fn combine_layers(stack: &LayerStack) -> Result<Tensor> {
    if stack.layers.len() != stack.depth + 1 {
        return Err(HienError::Inconsistent(format!(
            "layer stack holds {} layers, expected {}",
            stack.layers.len(),
            stack.depth + 1
        )));
    }
    let mut out = stack.layers[0].clone();
    for l in &stack.layers[1..] {
        if l.shape() != out.shape() {
            return Err(HienError::dim("combine_layers", out.shape(), l.shape()));
        }
        out.add_assign(l);
    }
    Ok(out)
}

/// Batched layer-1 item representation on a tape. `values[f][i]` is row
/// `i`'s value in field `f`, `ctx` holds the attending user embeddings
/// `[n × k]`, `alpha` is a `[F]` vector. Returns `(e^(1) [n × k],
/// attention [n × F])`.
pub fn item_layer_one(
    tape: &mut Tape,
    hier: &AttrHierarchy,
    tables: &[Var],
    values: &[Vec<usize>],
    ctx: Var,
    alpha: Var,
) -> Result<(Var, Var)> {
    let nf = tables.len();
    if nf == 0 {
        return Err(HienError::EmptyInput("item_layer_one"));
    }
    let mut rows = Vec::with_capacity(nf);
    let mut logits = Vec::with_capacity(nf);
    for f in 0..nf {
        let r = tape.gather(tables[f], &values[f])?;
        logits.push(tape.row_dot(ctx, r)?);
        rows.push(r);
    }
    let logits = tape.concat(&logits)?;
    let attn = tape.softmax_rows(logits)?;
    let mut contrib: Vec<Option<Var>> = vec![None; nf];
    for f in hier.top_down() {
        let a = tape.slice_last(alpha, f, 1)?;
        let mut inner = tape.mul_scalar(rows[f], a)?;
        if let Some(p) = hier.parent[f] {
            inner = tape.add(inner, contrib[p].expect("parents first"))?;
        }
        let w = tape.slice_last(attn, f, 1)?;
        contrib[f] = Some(tape.mul_col(inner, w)?);
    }
    let mut out = contrib[hier.direct[0]].expect("contrib");
    for &f in &hier.direct[1..] {
        out = tape.add(out, contrib[f].expect("contrib"))?;
    }
    Ok((out, attn))
}

/// Batched layer-1 user representation: `Σ_y b_y β_y e_y`.
pub fn user_layer_one(
    tape: &mut Tape,
    tables: &[Var],
    values: &[Vec<usize>],
    ctx: Var,
    beta: Var,
) -> Result<(Var, Var)> {
    item_layer_one(tape, &AttrHierarchy::flat(tables.len()), tables, values, ctx, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    fn map(e: Vec<Tensor>) -> BTreeMap<usize, Tensor> {
        e.into_iter().enumerate().collect()
    }

    #[test]
    fn user_scores_example() {
        let a = user_intent_scores(&v(&[1.0, 0.0]), &map(vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])])).unwrap();
        assert!((a[&0] - 0.7310585786300049).abs() < 1e-12);
        assert!((a[&1] - 0.2689414213699951).abs() < 1e-12);
        let same = user_intent_scores(&v(&[3.0, 1.0]), &map(vec![v(&[1.0, 2.0]); 3])).unwrap();
        assert!(same.values().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(user_intent_scores(&v(&[1.0]), &BTreeMap::new()).is_err());
    }

    #[test]
    fn scaling_query_keeps_argmax() {
        let attrs = map(vec![v(&[0.2, 0.1]), v(&[0.5, -0.3]), v(&[-0.1, 0.4])]);
        let argmax = |m: &BTreeMap<usize, f64>| *m.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let base = user_intent_scores(&v(&[1.0, 0.5]), &attrs).unwrap();
        let sharp = user_intent_scores(&v(&[7.0, 3.5]), &attrs).unwrap();
        assert_eq!(argmax(&base), argmax(&sharp));
        assert!(sharp[&argmax(&sharp)] > base[&argmax(&base)]);
    }

    #[test]
    fn item_repr_examples() {
        let hier = AttrHierarchy::flat(2);
        let scores = [(0, 0.5), (1, 0.5)].into_iter().collect();
        let e = hierarchical_item_repr(&hier, &map(vec![v(&[2.0, 0.0]), v(&[0.0, 2.0])]), &scores, &[1.0, 1.0]).unwrap();
        assert_eq!(e.data(), &[1.0, 1.0]);

        let one = AttrHierarchy::flat(1);
        let e = hierarchical_item_repr(&one, &map(vec![v(&[0.3, 0.4])]), &[(0, 1.0)].into_iter().collect(), &[1.0]).unwrap();
        assert_eq!(e.data(), &[0.3, 0.4]);
    }

    #[test]
    fn missing_ancestor_score_is_an_error() {
        let hier = AttrHierarchy {
            direct: vec![0],
            parent: vec![Some(1), None],
        };
        let embs = map(vec![v(&[1.0]), v(&[1.0])]);
        let scores = [(0, 1.0)].into_iter().collect();
        assert!(hierarchical_item_repr(&hier, &embs, &scores, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn user_repr_examples() {
        let embs = map(vec![v(&[0.5, -1.0])]);
        let b = item_intent_scores(&v(&[0.3, 0.3]), &embs).unwrap();
        assert_eq!(b[&0], 1.0);
        assert_eq!(hierarchical_user_repr(&embs, &b, &[2.0]).unwrap().data(), &[1.0, -2.0]);
        let two = map(vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])]);
        let b = item_intent_scores(&v(&[0.0, 0.0]), &two).unwrap();
        assert_eq!((b[&0], b[&1]), (0.5, 0.5));
        assert_eq!(hierarchical_user_repr(&two, &b, &[0.0, 0.0]).unwrap().data(), &[0.0, 0.0]);
    }

    fn lists(user_items: Vec<Vec<usize>>, item_users: Vec<Vec<usize>>) -> NeighborLists {
        NeighborLists { user_items, item_users }
    }

    #[test]
    fn propagation_examples() {
        let agg = AggWeights::lightgcn();
        let nb = lists(vec![vec![0, 1], vec![]], vec![vec![0], vec![0]]);
        let users = Tensor::from_rows(&[vec![9.0, 9.0], vec![5.0, 5.0]]).unwrap();
        let items = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (u2, _) = propagate_layer(2, &nb, &agg, &users, &items).unwrap();
        assert_eq!(u2.row(0), &[4.0, 6.0]);
        assert_eq!(u2.row(1), &[0.0, 0.0]);
        assert!(propagate_layer(1, &nb, &agg, &users, &items).is_err());
    }

    #[test]
    fn back_and_forth_on_one_edge() {
        let agg = AggWeights::lightgcn();
        let nb = lists(vec![vec![0]], vec![vec![0]]);
        let u1 = Tensor::from_rows(&[vec![0.7, -0.2]]).unwrap();
        let v1 = Tensor::from_rows(&[vec![0.1, 0.9]]).unwrap();
        let (u2, v2) = propagate_layer(2, &nb, &agg, &u1, &v1).unwrap();
        let (u3, _) = propagate_layer(3, &nb, &agg, &u2, &v2).unwrap();
        assert_eq!(u3, u1);
    }

    #[test]
    fn combine_examples() {
        let s = LayerStack {
            depth: 1,
            layers: vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])],
        };
        assert_eq!(combine_layers(&s).unwrap().data(), &[1.0, 1.0]);
        let zero = LayerStack {
            depth: 0,
            layers: vec![v(&[2.0, 3.0])],
        };
        assert_eq!(combine_layers(&zero).unwrap().data(), &[2.0, 3.0]);
        let short = LayerStack {
            depth: 2,
            layers: vec![v(&[1.0])],
        };
        assert!(combine_layers(&short).is_err());
    }

    #[test]
    fn batched_layer_one_matches_per_item_form() {
        // Fig. 3 layout: x0..x3 direct, x4 parent of x2.
        let hier = AttrHierarchy {
            direct: vec![0, 1, 2, 3],
            parent: vec![None, None, Some(4), None, None],
        };
        let k = 2;
        let tables: Vec<Tensor> = (0..5)
            .map(|f| {
                Tensor::from_rows(&[
                    vec![0.0, 0.0],
                    vec![0.1 * f as f64, -0.3],
                    vec![0.5, 0.2 * f as f64 - 0.4],
                ])
                .unwrap()
            })
            .collect();
        let alpha = [1.0, 0.5, 2.0, 1.5, 0.7];
        let users = Tensor::from_rows(&[vec![0.4, -0.9], vec![1.2, 0.3]]).unwrap();
        let values: Vec<Vec<usize>> = vec![vec![1, 2], vec![2, 1], vec![1, 1], vec![2, 2], vec![1, 2]];
        let mut t = Tape::new();
        let tv: Vec<Var> = tables.iter().map(|x| t.leaf(x.clone())).collect();
        let ctx = t.leaf(users.clone());
        let av = t.leaf(Tensor::vector(alpha.to_vec()));
        let (e1, attn) = item_layer_one(&mut t, &hier, &tv, &values, ctx, av).unwrap();
        for i in 0..2 {
            let embs: BTreeMap<usize, Tensor> =
                (0..5).map(|f| (f, Tensor::vector(tables[f].row(values[f][i]).to_vec()))).collect();
            let scores = user_intent_scores(&Tensor::vector(users.row(i).to_vec()), &embs).unwrap();
            let lit = hierarchical_item_repr(&hier, &embs, &scores, &alpha).unwrap();
            for d in 0..k {
                assert!((t.value(e1).row(i)[d] - lit.data()[d]).abs() < 1e-12);
            }
            let total: f64 = t.value(attn).row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
