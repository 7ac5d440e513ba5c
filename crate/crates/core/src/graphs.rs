//! Item-attribute forest, user-attribute forest and the user-item
//! bipartite click graph.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample, Split, OOV};
use crate::error::{HienError, Result};
use crate::schema::FeatureSchema;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKey {
    /// An item (item forest) or a user (user forest).
    Leaf(usize),
    Attr { field: usize, value: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForestKind {
    Item,
    User,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeForest {
    pub kind: ForestKind,
    pub field_names: Vec<String>,
    pub field_parent: Vec<Option<usize>>,
    /// Fields that leaves link to directly.
    pub direct: Vec<usize>,
    /// Leaf id → value per field (0 where unknown).
    pub leaf_values: BTreeMap<usize, Vec<usize>>,
    /// Per field: value → value in the parent field.
    pub value_parent: Vec<BTreeMap<usize, usize>>,
    /// Child → parent edges.
    pub edges: BTreeSet<(NodeKey, NodeKey)>,
}

impl AttributeForest {
    /// Builds the forest from per-leaf attribute values. Value 0 is treated
    /// as unknown and never becomes a node.
    pub fn from_leaves(
        kind: ForestKind,
        field_names: Vec<String>,
        field_parent: Vec<Option<usize>>,
        leaf_values: BTreeMap<usize, Vec<usize>>,
    ) -> Result<AttributeForest> {
        let n = field_names.len();
        if field_parent.len() != n {
            return Err(HienError::dim("forest", &[n], &[field_parent.len()]));
        }
        let is_parent: BTreeSet<usize> = field_parent.iter().flatten().copied().collect();
        let direct: Vec<usize> = (0..n).filter(|f| !is_parent.contains(f)).collect();
        let mut value_parent: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n];
        let mut edges = BTreeSet::new();
        for (&leaf, vals) in &leaf_values {
            if vals.len() != n {
                return Err(HienError::dim("forest leaf", &[n], &[vals.len()]));
            }
            for &f in &direct {
                if vals[f] != OOV {
                    edges.insert((NodeKey::Leaf(leaf), NodeKey::Attr { field: f, value: vals[f] }));
                }
            }
            for f in 0..n {
                let Some(p) = field_parent[f] else { continue };
                let (v, pv) = (vals[f], vals[p]);
                if v == OOV || pv == OOV {
                    continue;
                }
                match value_parent[f].get(&v) {
                    Some(&old) if old != pv => {
                        return Err(HienError::Inconsistent(format!(
                            "value {v} of field `{}` maps to both {old} and {pv} in parent field `{}`",
                            field_names[f], field_names[p]
                        )))
                    }
                    _ => {
                        value_parent[f].insert(v, pv);
                    }
                }
                edges.insert((
                    NodeKey::Attr { field: f, value: v },
                    NodeKey::Attr { field: p, value: pv },
                ));
            }
        }
        Ok(AttributeForest {
            kind,
            field_names,
            field_parent,
            direct,
            leaf_values,
            value_parent,
            edges,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.field_names.len()
    }

    /// Every node: all leaves plus every attribute value some leaf carries.
    pub fn nodes(&self) -> BTreeSet<NodeKey> {
        let mut out = BTreeSet::new();
        for (&leaf, vals) in &self.leaf_values {
            out.insert(NodeKey::Leaf(leaf));
            for (field, &value) in vals.iter().enumerate() {
                if value != OOV {
                    out.insert(NodeKey::Attr { field, value });
                }
            }
        }
        for (c, p) in &self.edges {
            out.insert(*c);
            out.insert(*p);
        }
        out
    }

    pub fn children(&self) -> BTreeMap<NodeKey, Vec<NodeKey>> {
        let mut out: BTreeMap<NodeKey, Vec<NodeKey>> = BTreeMap::new();
        for (c, p) in &self.edges {
            out.entry(*p).or_default().push(*c);
        }
        out
    }

    /// Adds a raw edge without any checks. Used to build malformed forests.
    pub fn add_edge(&mut self, child: NodeKey, parent: NodeKey) {
        self.edges.insert((child, parent));
    }
}

fn collect_leaves<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    names: &[String],
    kind: ForestKind,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut leaves: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in samples {
        let (leaf, vals) = match kind {
            ForestKind::Item => (s.item, &s.item_attrs),
            ForestKind::User => (s.user, &s.user_attrs),
        };
        if leaf == OOV {
            continue;
        }
        let entry = leaves.entry(leaf).or_insert_with(|| vec![OOV; vals.len()]);
        for (f, (&v, slot)) in vals.iter().zip(entry.iter_mut()).enumerate() {
            if v == OOV {
                continue;
            }
            if *slot != OOV && *slot != v {
                let what = if kind == ForestKind::Item { "item" } else { "user" };
                return Err(HienError::Inconsistent(format!(
                    "{what} {leaf} has values {} and {v} for field `{}`",
                    *slot, names[f]
                )));
            }
            *slot = v;
        }
    }
    Ok(leaves)
}

/// Items link to their direct attribute values; attribute values link along
/// the schema's field-parent chains. Shared values merge into one node.
pub fn build_item_forest<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    schema: &FeatureSchema,
) -> Result<AttributeForest> {
    let names: Vec<String> = schema.item_attrs.iter().map(|f| f.name.clone()).collect();
    let parents = schema.item_attrs.iter().map(|f| f.parent).collect();
    let leaves = collect_leaves(samples, &names, ForestKind::Item)?;
    AttributeForest::from_leaves(ForestKind::Item, names, parents, leaves)
}

/// A depth-1 star per user over its attribute values.
pub fn build_user_forest<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    schema: &FeatureSchema,
) -> Result<AttributeForest> {
    let names: Vec<String> = schema.user_attrs.iter().map(|f| f.name.clone()).collect();
    let parents = vec![None; names.len()];
    let leaves = collect_leaves(samples, &names, ForestKind::User)?;
    AttributeForest::from_leaves(ForestKind::User, names, parents, leaves)
}

/// Children before parents; among ready nodes the smallest key goes first
/// (leaves by id, then attributes by `(field, value)`).
pub fn bottom_up_order(forest: &AttributeForest) -> Result<Vec<NodeKey>> {
    let nodes = forest.nodes();
    let mut pending: BTreeMap<NodeKey, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    let mut parents: BTreeMap<NodeKey, Vec<NodeKey>> = BTreeMap::new();
    for (c, p) in &forest.edges {
        *pending.get_mut(p).expect("node") += 1;
        parents.entry(*c).or_default().push(*p);
    }
    let mut ready: BTreeSet<NodeKey> = pending.iter().filter(|(_, &n)| n == 0).map(|(&k, _)| k).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(n) = ready.pop_first() {
        order.push(n);
        for p in parents.get(&n).into_iter().flatten() {
            let left = pending.get_mut(p).expect("node");
            *left -= 1;
            if *left == 0 {
                ready.insert(*p);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = pending
            .iter()
            .find(|(k, &n)| n > 0 && !order.contains(k))
            .map(|(k, _)| *k);
        return Err(HienError::Structure(format!("attribute forest has a cycle near {stuck:?}")));
    }
    Ok(order)
}

/// User-item click graph over distinct positive pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BipartiteGraph {
    /// Indexed by user id; sorted item ids.
    pub user_items: Vec<Vec<usize>>,
    /// Indexed by item id; sorted user ids.
    pub item_users: Vec<Vec<usize>>,
}

impl BipartiteGraph {
    pub fn from_edges(num_users: usize, num_items: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let set: BTreeSet<(usize, usize)> = edges.into_iter().collect();
        let mut user_items = vec![Vec::new(); num_users];
        let mut item_users = vec![Vec::new(); num_items];
        for &(u, v) in &set {
            if u >= num_users || v >= num_items {
                return Err(HienError::Bounds {
                    field: "bipartite edge".into(),
                    index: u.max(v),
                    vocab: if u >= num_users { num_users } else { num_items },
                });
            }
            user_items[u].push(v);
            item_users[v].push(u);
        }
        Ok(BipartiteGraph { user_items, item_users })
    }

    pub fn num_users(&self) -> usize {
        self.user_items.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_users.len()
    }

    pub fn num_edges(&self) -> usize {
        self.user_items.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for (u, items) in self.user_items.iter().enumerate() {
            out.extend(items.iter().map(|&v| (u, v)));
        }
        out
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_items.get(user).is_some_and(|l| l.binary_search(&item).is_ok())
    }

    /// Caps every neighbour list at `cap` entries, chosen uniformly with a
    /// stream keyed by `(seed, epoch)`. User and item lists are capped
    /// independently, so the result need not be symmetric.
    pub fn sample_neighbors(&self, cap: usize, seed: u64, epoch: u64) -> NeighborLists {
        let pick = |lists: &[Vec<usize>], side: u64| -> Vec<Vec<usize>> {
            lists
                .iter()
                .enumerate()
                .map(|(node, l)| {
                    if l.len() <= cap {
                        return l.clone();
                    }
                    let key = seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9))
                        .wrapping_add((node as u64) << 1 | side);
                    let mut rng = ChaCha8Rng::seed_from_u64(key);
                    let mut chosen: Vec<usize> = l.choose_multiple(&mut rng, cap).copied().collect();
                    chosen.sort_unstable();
                    chosen
                })
                .collect()
        };
        NeighborLists {
            user_items: pick(&self.user_items, 0),
            item_users: pick(&self.item_users, 1),
        }
    }
}

/// Neighbour lists used for one pass of message passing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborLists {
    pub user_items: Vec<Vec<usize>>,
    pub item_users: Vec<Vec<usize>>,
}

impl NeighborLists {
    /// Drops the given `(user, item)` pairs from both sides.
    pub fn without(&self, pairs: &BTreeSet<(usize, usize)>) -> NeighborLists {
        if pairs.is_empty() {
            return self.clone();
        }
        let mut out = self.clone();
        for &(u, v) in pairs {
            if let Some(l) = out.user_items.get_mut(u) {
                l.retain(|&x| x != v);
            }
            if let Some(l) = out.item_users.get_mut(v) {
                l.retain(|&x| x != u);
            }
        }
        out
    }
}

/// Edges `(u, v)` for every distinct positive training sample.
pub fn build_bipartite(dataset: &Dataset) -> Result<BipartiteGraph> {
    if dataset.split != Split::Train {
        return Err(HienError::Config(
            "the click graph is built from the training split only".into(),
        ));
    }
    BipartiteGraph::from_edges(
        dataset.schema.user.vocab,
        dataset.schema.item.vocab,
        dataset.samples.iter().filter(|s| s.is_positive()).map(|s| (s.user, s.item)),
    )
}
