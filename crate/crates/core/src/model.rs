//! The assembled model: forests, click graph, parameters, forward pass.
//!
//! Layer 1 of an entity depends on who it is paired with, so message
//! passing keeps one state per directed edge. `H[z | x]` is entity `z`
//! seen from neighbour `x`:
//!
//! ```text
//! H1[z | x] = intent(z | x)
//! S_l(z)    = Σ_{w ∈ N(z)} H_l[w | z]
//! H_l[z | x] = g(H_{l-1}[z | x], S_{l-1}(z))
//! ```
//!
//! A target pair `(u, v)` uses `e_u^(1) = intent(u | v)` and
//! `e_u^(l) = g(e_u^(l-1), S_{l-1}(u))`; items are symmetric, and behaviour
//! items are stacked with the sample's user as context.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregators::{AggKind, Aggregator, ForestPlan, Norm};
use crate::basemodel::{fm_tape, Mlp};
use crate::data::{Dataset, Sample};
use crate::embeddings::EmbeddingStore;
use crate::error::{HienError, Result};
use crate::graphs::{build_bipartite, build_item_forest, build_user_forest, AttributeForest, BipartiteGraph, NeighborLists};
use crate::intention::{item_intent_scores, item_layer_one, user_intent_scores, user_layer_one, AttrHierarchy};
use crate::numcore::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::schema::FeatureSchema;

pub const MAX_LAYERS: usize = 4;

/// Which refinement stages run. `true` means enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub user_agg: bool,
    pub item_agg: bool,
    pub user_intent: bool,
    pub item_intent: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        user_agg: true,
        item_agg: true,
        user_intent: true,
        item_intent: true,
    };
    /// Every stage off: a plain DeepFM.
    pub const NONE: Ablation = Ablation {
        user_agg: false,
        item_agg: false,
        user_intent: false,
        item_intent: false,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub k: usize,
    /// Output size of every MLP layer; the last must be 1.
    pub mlp: Vec<usize>,
    pub aggregator: AggKind,
    /// Child reduction used by every aggregator in the model.
    pub child_norm: Norm,
    pub layers: usize,
    pub ablation: Ablation,
    pub neighbor_cap: usize,
    /// Half-width of the uniform embedding initialiser.
    pub emb_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 16,
            mlp: vec![32, 16, 1],
            aggregator: AggKind::Cp,
            child_norm: Norm::Mean,
            layers: 2,
            ablation: Ablation::FULL,
            neighbor_cap: 50,
            emb_init: 0.01,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(HienError::Config("embedding dim k must be >= 1".into()));
        }
        if self.layers > MAX_LAYERS {
            return Err(HienError::Config(format!(
                "layers must be in 0..={MAX_LAYERS}, got {}",
                self.layers
            )));
        }
        if self.mlp.last() != Some(&1) || self.mlp.contains(&0) {
            return Err(HienError::Config(format!(
                "mlp dims must be positive and end in 1, got {:?}",
                self.mlp
            )));
        }
        if !(self.emb_init > 0.0) || !self.emb_init.is_finite() {
            return Err(HienError::Config(format!("emb_init must be > 0, got {}", self.emb_init)));
        }
        if self.neighbor_cap == 0 {
            return Err(HienError::Config("neighbor_cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether layers beyond 0 exist at all. With both intent stages off
    /// the model is the base model over tree-refined attributes.
    pub fn propagates(&self) -> bool {
        self.layers > 0 && (self.ablation.user_intent || self.ablation.item_intent)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    emb: EmbeddingStore,
    first: Vec<ParamId>,
    alpha: ParamId,
    beta: ParamId,
    agg_item: Aggregator,
    agg_user: Aggregator,
    agg_graph: Aggregator,
    mlp: Mlp,
}

impl Layout {
    fn init(schema: &FeatureSchema, cfg: &ModelConfig, store: &mut ParamStore) -> Result<Layout> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut emb = EmbeddingStore::with_init(cfg.k, cfg.emb_init);
        let mut fields: Vec<(&str, usize)> = vec![(&schema.user.name, schema.user.vocab), (&schema.item.name, schema.item.vocab)];
        fields.extend(schema.user_attrs.iter().map(|f| (f.name.as_str(), f.vocab)));
        fields.extend(schema.item_attrs.iter().map(|f| (f.name.as_str(), f.vocab)));
        fields.extend(schema.context.iter().map(|f| (f.name.as_str(), f.vocab)));
        for &(name, vocab) in &fields {
            emb.add_field(store, &mut rng, name, vocab);
        }
        let first = fields
            .iter()
            .map(|&(name, vocab)| store.add(format!("first.{name}"), Tensor::zeros(&[vocab, 1])))
            .collect();
        let alpha = store.add("alpha", Tensor::filled(&[schema.item_attrs.len()], 1.0));
        let beta = store.add("beta", Tensor::filled(&[schema.user_attrs.len()], 1.0));
        let agg_item = Aggregator::init(cfg.aggregator, cfg.k, store, &mut rng, "agg.item").with_norm(cfg.child_norm);
        let agg_user = Aggregator::init(cfg.aggregator, cfg.k, store, &mut rng, "agg.user").with_norm(cfg.child_norm);
        let agg_graph = Aggregator::init(cfg.aggregator, cfg.k, store, &mut rng, "agg.graph").with_norm(cfg.child_norm);
        let mlp = Mlp::init(crate::basemodel::num_fields(schema) * cfg.k, &cfg.mlp, store, &mut rng)?;
        Ok(Layout {
            emb,
            first,
            alpha,
            beta,
            agg_item,
            agg_user,
            agg_graph,
            mlp,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

/// Refined tables and message-passing sums on one tape.
struct GraphState {
    user_tab: Var,
    item_tab: Var,
    user_attrs: Vec<Var>,
    item_attrs: Vec<Var>,
    context: Vec<Var>,
    /// `S_l` for `l = 1..L-1`, indexed `l - 1`.
    sum_user: Vec<Var>,
    sum_item: Vec<Var>,
    deg_user: Vec<f64>,
    deg_item: Vec<f64>,
}

/// A [`GraphState`] evaluated to plain tensors, reusable across chunks and
/// threads.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub user_table: Tensor,
    pub item_table: Tensor,
    pub user_attrs: Vec<Tensor>,
    pub item_attrs: Vec<Tensor>,
    pub context: Vec<Tensor>,
    sum_user: Vec<Tensor>,
    sum_item: Vec<Tensor>,
    deg_user: Vec<f64>,
    deg_item: Vec<f64>,
}

impl Frozen {
    fn bind(&self, tape: &mut Tape) -> GraphState {
        let mut leaves = |ts: &[Tensor]| ts.iter().map(|t| tape.leaf(t.clone())).collect::<Vec<_>>();
        let user_attrs = leaves(&self.user_attrs);
        let item_attrs = leaves(&self.item_attrs);
        let context = leaves(&self.context);
        let sum_user = leaves(&self.sum_user);
        let sum_item = leaves(&self.sum_item);
        GraphState {
            user_tab: tape.leaf(self.user_table.clone()),
            item_tab: tape.leaf(self.item_table.clone()),
            user_attrs,
            item_attrs,
            context,
            sum_user,
            sum_item,
            deg_user: self.deg_user.clone(),
            deg_item: self.deg_item.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentSide {
    /// User attention over an item attribute field (`a`, `α`).
    ItemAttr,
    /// Item attention over a user attribute field (`b`, `β`).
    UserAttr,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct IntentRow {
    pub user: usize,
    pub item: usize,
    pub side: IntentSide,
    pub field: String,
    pub score: f64,
    pub importance: f64,
}

/// Values of `rows` transposed to one vector per field.
fn by_field<'a>(rows: impl Iterator<Item = &'a [usize]>, n_fields: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_fields];
    for r in rows {
        for (f, &v) in r.iter().enumerate() {
            out[f].push(v);
        }
    }
    out
}

fn zeros_like_rows(tape: &mut Tape, rows: usize, k: usize) -> Var {
    tape.leaf(Tensor::zeros(&[rows, k]))
}

#[derive(Clone, Debug)]
pub struct HienModel {
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub item_forest: AttributeForest,
    pub user_forest: AttributeForest,
    pub graph: BipartiteGraph,
    layout: Layout,
    item_plan: ForestPlan,
    user_plan: ForestPlan,
    hier: AttrHierarchy,
    item_values: Vec<Vec<usize>>,
    user_values: Vec<Vec<usize>>,
}

impl IntentSide {
    pub fn as_str(self) -> &'static str {
        match self {
            IntentSide::ItemAttr => "item_attr",
            IntentSide::UserAttr => "user_attr",
        }
    }
}

impl HienModel {
    /// Builds forests from `train` plus any `catalog` datasets (attribute
    /// metadata only) and the click graph from `train`'s positives, then
    /// initialises parameters from `config.seed`.
    pub fn new(schema: &FeatureSchema, config: &ModelConfig, train: &Dataset, catalog: &[&Dataset]) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let all = || train.samples.iter().chain(catalog.iter().flat_map(|d| d.samples.iter()));
        let item_forest = build_item_forest(all(), schema)?;
        let user_forest = build_user_forest(all(), schema)?;
        let graph = build_bipartite(train)?;
        let mut params = ParamStore::new();
        Layout::init(schema, config, &mut params)?;
        Self::from_parts(schema.clone(), config.clone(), params, item_forest, user_forest, graph)
    }

    /// Reassembles a model from saved pieces, checking that `params`
    /// matches the layout implied by `schema` and `config`.
    pub fn from_parts(
        schema: FeatureSchema,
        config: ModelConfig,
        params: ParamStore,
        item_forest: AttributeForest,
        user_forest: AttributeForest,
        graph: BipartiteGraph,
    ) -> Result<Self> {
        config.validate()?;
        let mut fresh = ParamStore::new();
        let layout = Layout::init(&schema, &config, &mut fresh)?;
        if fresh.names() != params.names() {
            let first = fresh
                .names()
                .iter()
                .zip(params.names())
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.clone())
                .unwrap_or_else(|| "parameter count".into());
            return Err(HienError::Checkpoint(format!("parameter layout differs at `{first}`")));
        }
        fresh.set_values(params.values().to_vec()).map_err(|e| HienError::Checkpoint(e.to_string()))?;
        if graph.num_users() != schema.user.vocab || graph.num_items() != schema.item.vocab {
            return Err(HienError::Checkpoint("click graph size does not match the schema".into()));
        }
        let ivocab: Vec<usize> = schema.item_attrs.iter().map(|f| f.vocab).collect();
        let uvocab: Vec<usize> = schema.user_attrs.iter().map(|f| f.vocab).collect();
        let item_plan = ForestPlan::new(&item_forest, &ivocab, schema.item.vocab)?;
        let user_plan = ForestPlan::new(&user_forest, &uvocab, schema.user.vocab)?;
        let hier = AttrHierarchy {
            direct: schema.direct_item_attrs(),
            parent: schema.item_attrs.iter().map(|f| f.parent).collect(),
        };
        let mut item_values = vec![vec![0; schema.item_attrs.len()]; schema.item.vocab];
        for (&leaf, vals) in &item_forest.leaf_values {
            item_values[leaf] = vals.clone();
        }
        let mut user_values = vec![vec![0; schema.user_attrs.len()]; schema.user.vocab];
        for (&leaf, vals) in &user_forest.leaf_values {
            user_values[leaf] = vals.clone();
        }
        Ok(HienModel {
            schema,
            config,
            params: fresh,
            item_forest,
            user_forest,
            graph,
            layout,
            item_plan,
            user_plan,
            hier,
            item_values,
            user_values,
        })
    }

    fn j(&self) -> usize {
        self.schema.user_attrs.len()
    }

    fn f(&self) -> usize {
        self.schema.item_attrs.len()
    }

    fn emb_param(&self, field: usize) -> ParamId {
        self.layout.emb.param(field)
    }

    pub fn alpha(&self) -> &[f64] {
        self.params.get(self.layout.alpha).data()
    }

    pub fn beta(&self) -> &[f64] {
        self.params.get(self.layout.beta).data()
    }

    /// Neighbour lists used for evaluation: the capped sample under epoch
    /// key 0.
    pub fn eval_neighbors(&self) -> NeighborLists {
        self.graph.sample_neighbors(self.config.neighbor_cap, self.config.seed, 0)
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let sc = &self.schema;
        let bound = |name: &str, index: usize, vocab: usize| -> Result<()> {
            if index >= vocab {
                return Err(HienError::Bounds {
                    field: name.to_string(),
                    index,
                    vocab,
                });
            }
            Ok(())
        };
        if s.user_attrs.len() != sc.user_attrs.len()
            || s.item_attrs.len() != sc.item_attrs.len()
            || s.context.len() != sc.context.len()
        {
            return Err(HienError::Schema("sample field counts do not match the schema".into()));
        }
        bound(&sc.user.name, s.user, sc.user.vocab)?;
        bound(&sc.item.name, s.item, sc.item.vocab)?;
        for (f, &v) in sc.user_attrs.iter().zip(&s.user_attrs) {
            bound(&f.name, v, f.vocab)?;
        }
        for (f, &v) in sc.item_attrs.iter().zip(&s.item_attrs) {
            bound(&f.name, v, f.vocab)?;
        }
        for (f, &v) in sc.context.iter().zip(&s.context) {
            bound(&f.name, v, f.vocab)?;
        }
        for &b in &s.behaviors {
            bound(&sc.behaviors, b, sc.item.vocab)?;
        }
        Ok(())
    }

    fn graph_state(&self, tape: &mut Tape, bound: &Bound, lists: &NeighborLists) -> Result<GraphState> {
        let j = self.j();
        let f = self.f();
        let user_tab = bound.var(self.emb_param(0));
        let item_tab = bound.var(self.emb_param(1));
        let ua_raw: Vec<Var> = (0..j).map(|x| bound.var(self.emb_param(2 + x))).collect();
        let ia_raw: Vec<Var> = (0..f).map(|x| bound.var(self.emb_param(2 + j + x))).collect();
        let context = (0..self.schema.context.len())
            .map(|x| bound.var(self.emb_param(2 + j + f + x)))
            .collect();
        let ab = self.config.ablation;
        let item_attrs = if ab.item_agg && f > 0 {
            self.item_plan.aggregate(tape, bound, &self.layout.agg_item, item_tab, &ia_raw)?
        } else {
            ia_raw
        };
        let user_attrs = if ab.user_agg && j > 0 {
            self.user_plan.aggregate(tape, bound, &self.layout.agg_user, user_tab, &ua_raw)?
        } else {
            ua_raw
        };
        let mut st = GraphState {
            user_tab,
            item_tab,
            user_attrs,
            item_attrs,
            context,
            sum_user: Vec::new(),
            sum_item: Vec::new(),
            deg_user: lists.user_items.iter().map(|l| l.len() as f64).collect(),
            deg_item: lists.item_users.iter().map(|l| l.len() as f64).collect(),
        };
        if self.config.propagates() && self.config.layers >= 2 {
            self.edge_sums(tape, bound, &mut st, lists)?;
        }
        Ok(st)
    }

    fn edge_sums(&self, tape: &mut Tape, bound: &Bound, st: &mut GraphState, lists: &NeighborLists) -> Result<()> {
        let k = self.config.k;
        let (nu, ni) = (self.schema.user.vocab, self.schema.item.vocab);
        // item rows w seen from user z, summed into S(z)
        let (mut iw, mut iz) = (Vec::new(), Vec::new());
        for (z, items) in lists.user_items.iter().enumerate() {
            for &w in items {
                iw.push(w);
                iz.push(z);
            }
        }
        // user rows x seen from item z, summed into S(z)
        let (mut ux, mut uz) = (Vec::new(), Vec::new());
        for (z, users) in lists.item_users.iter().enumerate() {
            for &x in users {
                ux.push(x);
                uz.push(z);
            }
        }
        let mut h_item = None;
        let mut h_user = None;
        if !iw.is_empty() {
            let vals = by_field(iw.iter().map(|&w| self.item_values[w].as_slice()), self.f());
            let e0 = tape.gather(st.item_tab, &iw)?;
            let ctx = tape.gather(st.user_tab, &iz)?;
            h_item = Some(self.layer_one(tape, bound, st, Side::Item, e0, &vals, ctx)?);
        }
        if !ux.is_empty() {
            let vals = by_field(ux.iter().map(|&x| self.user_values[x].as_slice()), self.j());
            let e0 = tape.gather(st.user_tab, &ux)?;
            let ctx = tape.gather(st.item_tab, &uz)?;
            h_user = Some(self.layer_one(tape, bound, st, Side::User, e0, &vals, ctx)?);
        }
        for l in 1..self.config.layers {
            if l > 1 {
                if let Some(h) = h_item {
                    let s = tape.gather(st.sum_item[l - 2], &iw)?;
                    let cnt: Vec<f64> = iw.iter().map(|&w| st.deg_item[w]).collect();
                    h_item = Some(self.layout.agg_graph.apply(tape, bound, h, s, &cnt)?);
                }
                if let Some(h) = h_user {
                    let s = tape.gather(st.sum_user[l - 2], &ux)?;
                    let cnt: Vec<f64> = ux.iter().map(|&x| st.deg_user[x]).collect();
                    h_user = Some(self.layout.agg_graph.apply(tape, bound, h, s, &cnt)?);
                }
            }
            let su = match h_item {
                Some(h) => tape.scatter(h, &iz, nu)?,
                None => zeros_like_rows(tape, nu, k),
            };
            let si = match h_user {
                Some(h) => tape.scatter(h, &uz, ni)?,
                None => zeros_like_rows(tape, ni, k),
            };
            st.sum_user.push(su);
            st.sum_item.push(si);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_one(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        st: &GraphState,
        side: Side,
        e0: Var,
        values: &[Vec<usize>],
        ctx: Var,
    ) -> Result<Var> {
        let ab = self.config.ablation;
        match side {
            Side::Item if ab.item_intent && self.f() > 0 => {
                let alpha = bound.var(self.layout.alpha);
                Ok(item_layer_one(tape, &self.hier, &st.item_attrs, values, ctx, alpha)?.0)
            }
            Side::User if ab.user_intent && self.j() > 0 => {
                let beta = bound.var(self.layout.beta);
                Ok(user_layer_one(tape, &st.user_attrs, values, ctx, beta)?.0)
            }
            _ => self.layout.agg_graph.apply_empty(tape, bound, e0),
        }
    }

    /// `e′ = Σ_l e^(l)` for rows `ids` of one side, with `ctx` the
    /// embeddings of the entities they are paired with.
    #[allow(clippy::too_many_arguments)]
    fn stack(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        st: &GraphState,
        side: Side,
        ids: &[usize],
        values: &[Vec<usize>],
        ctx: Var,
    ) -> Result<Var> {
        let (table, sums, deg) = match side {
            Side::User => (st.user_tab, &st.sum_user, &st.deg_user),
            Side::Item => (st.item_tab, &st.sum_item, &st.deg_item),
        };
        let e0 = tape.gather(table, ids)?;
        if !self.config.propagates() {
            return Ok(e0);
        }
        let mut prev = self.layer_one(tape, bound, st, side, e0, values, ctx)?;
        let mut acc = tape.add(e0, prev)?;
        for l in 2..=self.config.layers {
            let s = tape.gather(sums[l - 2], ids)?;
            let cnt: Vec<f64> = ids.iter().map(|&i| deg[i]).collect();
            prev = self.layout.agg_graph.apply(tape, bound, prev, s, &cnt)?;
            acc = tape.add(acc, prev)?;
        }
        Ok(acc)
    }

    /// Field embeddings `[B × k]` in head order plus the summed first-order
    /// term `[B × 1]`.
    fn fields(&self, tape: &mut Tape, bound: &Bound, st: &GraphState, batch: &[&Sample]) -> Result<(Vec<Var>, Var)> {
        if batch.is_empty() {
            return Err(HienError::EmptyInput("batch"));
        }
        for s in batch {
            self.check_sample(s)?;
        }
        let (j, f, p) = (self.j(), self.f(), self.schema.context.len());
        let k = self.config.k;
        let b = batch.len();
        let users: Vec<usize> = batch.iter().map(|s| s.user).collect();
        let items: Vec<usize> = batch.iter().map(|s| s.item).collect();
        let uvals = by_field(batch.iter().map(|s| s.user_attrs.as_slice()), j);
        let ivals = by_field(batch.iter().map(|s| s.item_attrs.as_slice()), f);
        let cvals = by_field(batch.iter().map(|s| s.context.as_slice()), p);

        let ctx_items = tape.gather(st.item_tab, &items)?;
        let ctx_users = tape.gather(st.user_tab, &users)?;
        let mut fields = Vec::with_capacity(crate::basemodel::num_fields(&self.schema));
        fields.push(self.stack(tape, bound, st, Side::User, &users, &uvals, ctx_items)?);
        fields.push(self.stack(tape, bound, st, Side::Item, &items, &ivals, ctx_users)?);
        for x in 0..j {
            fields.push(tape.gather(st.user_attrs[x], &uvals[x])?);
        }
        for x in 0..f {
            fields.push(tape.gather(st.item_attrs[x], &ivals[x])?);
        }

        let (mut bid, mut owner, mut weight) = (Vec::new(), Vec::new(), Vec::new());
        for (i, s) in batch.iter().enumerate() {
            let w = 1.0 / s.behaviors.len().max(1) as f64;
            for &it in &s.behaviors {
                bid.push(it);
                owner.push(i);
                weight.push(w);
            }
        }
        let first_item = bound.var(self.layout.first[1]);
        let mut first_beh = None;
        if bid.is_empty() {
            fields.push(zeros_like_rows(tape, b, k));
        } else {
            let bvals = by_field(bid.iter().map(|&x| self.item_values[x].as_slice()), f);
            let owner_users: Vec<usize> = owner.iter().map(|&i| users[i]).collect();
            let ctx = tape.gather(st.user_tab, &owner_users)?;
            let e = self.stack(tape, bound, st, Side::Item, &bid, &bvals, ctx)?;
            let w = tape.leaf(Tensor::vector(weight.clone()));
            let e = tape.mul_col(e, w)?;
            fields.push(tape.scatter(e, &owner, b)?);
            let fw = tape.gather(first_item, &bid)?;
            let w = tape.leaf(Tensor::vector(weight));
            let fw = tape.mul_col(fw, w)?;
            first_beh = Some(tape.scatter(fw, &owner, b)?);
        }
        for x in 0..p {
            fields.push(tape.gather(st.context[x], &cvals[x])?);
        }

        let mut first = tape.gather(bound.var(self.layout.first[0]), &users)?;
        let t = tape.gather(first_item, &items)?;
        first = tape.add(first, t)?;
        let groups = [(2, &uvals), (2 + j, &ivals), (2 + j + f, &cvals)];
        for (offset, vals) in groups {
            for (x, v) in vals.iter().enumerate() {
                let t = tape.gather(bound.var(self.layout.first[offset + x]), v)?;
                first = tape.add(first, t)?;
            }
        }
        if let Some(fb) = first_beh {
            first = tape.add(first, fb)?;
        }
        Ok((fields, first))
    }

    /// Pre-sigmoid scores `[n]`.
    fn head(&self, tape: &mut Tape, bound: &Bound, st: &GraphState, batch: &[&Sample]) -> Result<Var> {
        let (fields, first) = self.fields(tape, bound, st, batch)?;
        let fm = fm_tape(tape, &fields, first)?;
        let x = tape.concat(&fields)?;
        let dnn = self.layout.mlp.forward(tape, bound, x)?;
        let logit = tape.add(fm, dnn)?;
        tape.reshape(logit, vec![batch.len()])
    }

    /// Training objective on `tape`: mean cross-entropy of `batch` plus
    /// `l2 · Σ‖θ‖²`. The batch's own positive pairs are removed from
    /// `lists` before message passing. Returns `(loss, predictions)`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&Sample],
        lists: &NeighborLists,
        l2: f64,
    ) -> Result<(Var, Var)> {
        let own: BTreeSet<(usize, usize)> = batch
            .iter()
            .filter(|s| s.is_positive())
            .map(|s| (s.user, s.item))
            .collect();
        let masked = lists.without(&own);
        let st = self.graph_state(tape, bound, &masked)?;
        let z = self.head(tape, bound, &st, batch)?;
        let p = tape.sigmoid(z)?;
        let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
        let mut loss = tape.bce_logits(z, &labels)?;
        if l2 > 0.0 {
            let mut reg: Option<Var> = None;
            for &v in &bound.vars {
                let s = tape.sum_squares(v)?;
                reg = Some(match reg {
                    Some(r) => tape.add(r, s)?,
                    None => s,
                });
            }
            if let Some(r) = reg {
                let r = tape.scale(r, l2)?;
                loss = tape.add(loss, r)?;
            }
        }
        Ok((loss, p))
    }

    /// Graph state under the evaluation neighbour lists.
    pub fn freeze(&self) -> Result<Frozen> {
        self.freeze_with(&self.eval_neighbors())
    }

    pub fn freeze_with(&self, lists: &NeighborLists) -> Result<Frozen> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let st = self.graph_state(&mut tape, &bound, lists)?;
        let val = |tape: &Tape, vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        Ok(Frozen {
            user_table: tape.value(st.user_tab).clone(),
            item_table: tape.value(st.item_tab).clone(),
            user_attrs: val(&tape, &st.user_attrs),
            item_attrs: val(&tape, &st.item_attrs),
            context: val(&tape, &st.context),
            sum_user: val(&tape, &st.sum_user),
            sum_item: val(&tape, &st.sum_item),
            deg_user: st.deg_user,
            deg_item: st.deg_item,
        })
    }

    /// Click probabilities for `samples`.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let frozen = self.freeze()?;
        self.predict_frozen(&frozen, samples, 4096, 1)
    }

    /// Scores `samples` in chunks of `chunk`, spreading chunks over
    /// `threads` workers. Output order follows `samples`.
    pub fn predict_frozen(&self, frozen: &Frozen, samples: &[Sample], chunk: usize, threads: usize) -> Result<Vec<f64>> {
        let chunks: Vec<&[Sample]> = samples.chunks(chunk.max(1)).collect();
        let score = |c: &[Sample]| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let st = frozen.bind(&mut tape);
            let refs: Vec<&Sample> = c.iter().collect();
            let z = self.head(&mut tape, &bound, &st, &refs)?;
            let p = tape.sigmoid(z)?;
            Ok(tape.value(p).data().to_vec())
        };
        let threads = threads.clamp(1, chunks.len().max(1));
        let parts: Vec<Result<Vec<f64>>> = if threads == 1 {
            chunks.iter().map(|c| score(c)).collect()
        } else {
            let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads)
                    .map(|t| {
                        let chunks = &chunks;
                        let score = &score;
                        scope.spawn(move || {
                            (t..chunks.len())
                                .step_by(threads)
                                .map(|i| (i, score(chunks[i])))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                for h in handles {
                    for (i, r) in h.join().expect("scoring thread panicked") {
                        slots[i] = Some(r);
                    }
                }
            });
            slots.into_iter().map(|s| s.expect("every chunk scored")).collect()
        };
        let mut out = Vec::with_capacity(samples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// The ordered field embeddings the head sees for one sample.
    pub fn assemble_fields(&self, frozen: &Frozen, sample: &Sample) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let st = frozen.bind(&mut tape);
        let (fields, _) = self.fields(&mut tape, &bound, &st, &[sample])?;
        Ok(fields
            .iter()
            .map(|&v| Tensor::vector(tape.value(v).data().to_vec()))
            .collect())
    }

    /// Attention a user pays to each item attribute field and an item pays
    /// to each user attribute field, with the inherent importances.
    /// Samples with an out-of-vocabulary user or item are skipped and
    /// counted in the second return value.
    pub fn inspect_intents(&self, frozen: &Frozen, samples: &[Sample]) -> Result<(Vec<IntentRow>, usize)> {
        let mut rows = Vec::new();
        let mut skipped = 0;
        let (alpha, beta) = (self.alpha(), self.beta());
        for s in samples {
            if s.user == 0 || s.item == 0 || self.check_sample(s).is_err() {
                log::warn!("skipping sample with unknown user {} or item {}", s.user, s.item);
                skipped += 1;
                continue;
            }
            let eu = Tensor::vector(frozen.user_table.row(s.user).to_vec());
            let ev = Tensor::vector(frozen.item_table.row(s.item).to_vec());
            if self.f() > 0 {
                let attrs = (0..self.f())
                    .map(|f| (f, Tensor::vector(frozen.item_attrs[f].row(s.item_attrs[f]).to_vec())))
                    .collect();
                for (f, a) in user_intent_scores(&eu, &attrs)? {
                    rows.push(IntentRow {
                        user: s.user,
                        item: s.item,
                        side: IntentSide::ItemAttr,
                        field: self.schema.item_attrs[f].name.clone(),
                        score: a,
                        importance: alpha[f],
                    });
                }
            }
            if self.j() > 0 {
                let attrs = (0..self.j())
                    .map(|f| (f, Tensor::vector(frozen.user_attrs[f].row(s.user_attrs[f]).to_vec())))
                    .collect();
                for (f, b) in item_intent_scores(&ev, &attrs)? {
                    rows.push(IntentRow {
                        user: s.user,
                        item: s.item,
                        side: IntentSide::UserAttr,
                        field: self.schema.user_attrs[f].name.clone(),
                        score: b,
                        importance: beta[f],
                    });
                }
            }
        }
        Ok((rows, skipped))
    }

    /// Final per-field tables for external use: `e′` for every user and
    /// item (layer 1 taken against a zero context, i.e. uniform attention),
    /// tree-refined attribute tables and raw context tables.
    pub fn refined_tables(&self) -> Result<Vec<(String, Tensor)>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let st = self.graph_state(&mut tape, &bound, &self.eval_neighbors())?;
        let k = self.config.k;
        let (nu, ni) = (self.schema.user.vocab, self.schema.item.vocab);
        let uids: Vec<usize> = (0..nu).collect();
        let iids: Vec<usize> = (0..ni).collect();
        let uvals = by_field(self.user_values.iter().map(Vec::as_slice), self.j());
        let ivals = by_field(self.item_values.iter().map(Vec::as_slice), self.f());
        let zu = zeros_like_rows(&mut tape, nu, k);
        let zi = zeros_like_rows(&mut tape, ni, k);
        let users = self.stack(&mut tape, &bound, &st, Side::User, &uids, &uvals, zu)?;
        let items = self.stack(&mut tape, &bound, &st, Side::Item, &iids, &ivals, zi)?;
        let mut out = vec![
            (self.schema.user.name.clone(), tape.value(users).clone()),
            (self.schema.item.name.clone(), tape.value(items).clone()),
        ];
        for (f, v) in self.schema.user_attrs.iter().zip(&st.user_attrs) {
            out.push((f.name.clone(), tape.value(*v).clone()));
        }
        for (f, v) in self.schema.item_attrs.iter().zip(&st.item_attrs) {
            out.push((f.name.clone(), tape.value(*v).clone()));
        }
        for (f, v) in self.schema.context.iter().zip(&st.context) {
            out.push((f.name.clone(), tape.value(*v).clone()));
        }
        Ok(out)
    }

    /// First-order weights of every head field for one sample, in head
    /// order (behaviours averaged).
    pub fn first_order_terms(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.check_sample(sample)?;
        let get = |field: usize, idx: usize| self.params.get(self.layout.first[field]).data()[idx];
        let (j, f) = (self.j(), self.f());
        let mut out = vec![get(0, sample.user), get(1, sample.item)];
        out.extend(sample.user_attrs.iter().enumerate().map(|(x, &v)| get(2 + x, v)));
        out.extend(sample.item_attrs.iter().enumerate().map(|(x, &v)| get(2 + j + x, v)));
        let beh = if sample.behaviors.is_empty() {
            0.0
        } else {
            sample.behaviors.iter().map(|&b| get(1, b)).sum::<f64>() / sample.behaviors.len() as f64
        };
        out.push(beh);
        out.extend(sample.context.iter().enumerate().map(|(x, &v)| get(2 + j + f + x, v)));
        Ok(out)
    }

    pub fn mlp_weights(&self) -> crate::basemodel::MlpWeights {
        self.layout.mlp.weights(&self.params)
    }

    /// Raw embedding row of head field `field` (layout order: user, item,
    /// user attributes, item attributes, context).
    pub fn raw_row(&self, field: usize, index: usize) -> Result<&[f64]> {
        self.layout.emb.row(&self.params, field, index)
    }

    /// Parameter id of the embedding table at layout position `field`.
    pub fn table_param(&self, field: usize) -> ParamId {
        self.emb_param(field)
    }

    /// Row-indexed tables (embeddings and first-order weights).
    pub fn sparse_params(&self) -> Vec<ParamId> {
        (0..self.layout.first.len())
            .map(|f| self.emb_param(f))
            .chain(self.layout.first.iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basemodel::deepfm_predict;
    use crate::numcore::finite_diff_check;
    use crate::synthetic::{generate_synthetic, ChainSpec, PlantedConfig, Synthetic};

    fn tiny() -> Synthetic {
        let cfg = PlantedConfig {
            users: 12,
            items: 10,
            interactions: 120,
            positive_ratio: 0.3,
            latent_dim: 2,
            max_behaviors: 3,
            chains: vec![ChainSpec::new("cat", 2, 4, 2), ChainSpec::new("price", 1, 3, 1)],
            user_attrs: vec![("age".into(), 3), ("city".into(), 2)],
            context: vec![("hour".into(), 3)],
            planted: vec![("cat_0".into(), 2.0)],
            ..PlantedConfig::default()
        };
        generate_synthetic(&cfg).unwrap()
    }

    fn config(ablation: Ablation, layers: usize) -> ModelConfig {
        ModelConfig {
            k: 3,
            mlp: vec![4, 1],
            layers,
            ablation,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn all_off_is_plain_deepfm() {
        let syn = tiny();
        let m = HienModel::new(&syn.train.schema, &config(Ablation::NONE, 2), &syn.train, &[&syn.test]).unwrap();
        let frozen = m.freeze().unwrap();
        let probs = m.predict(&syn.test.samples).unwrap();
        let (j, f) = (m.j(), m.f());
        let mlp = m.mlp_weights();
        for (s, &p) in syn.test.samples.iter().zip(&probs) {
            let row = |field: usize, i: usize| Tensor::vector(m.raw_row(field, i).unwrap().to_vec());
            let mut fields = vec![row(0, s.user), row(1, s.item)];
            fields.extend(s.user_attrs.iter().enumerate().map(|(x, &v)| row(2 + x, v)));
            fields.extend(s.item_attrs.iter().enumerate().map(|(x, &v)| row(2 + j + x, v)));
            let mut beh = vec![0.0; 3];
            for &b in &s.behaviors {
                for (a, x) in beh.iter_mut().zip(m.raw_row(1, b).unwrap()) {
                    *a += x / s.behaviors.len() as f64;
                }
            }
            fields.push(Tensor::vector(beh));
            fields.extend(s.context.iter().enumerate().map(|(x, &v)| row(2 + j + f + x, v)));
            let lit = deepfm_predict(&fields, &m.first_order_terms(s).unwrap(), &mlp).unwrap();
            assert!((lit - p).abs() < 1e-12, "{lit} vs {p}");
            let assembled = m.assemble_fields(&frozen, s).unwrap();
            for (a, b) in assembled.iter().zip(&fields) {
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-14));
            }
        }
    }

    #[test]
    fn chunked_threads_match_single_pass() {
        let syn = tiny();
        let m = HienModel::new(&syn.train.schema, &config(Ablation::FULL, 2), &syn.train, &[&syn.test]).unwrap();
        let frozen = m.freeze().unwrap();
        let one = m.predict_frozen(&frozen, &syn.train.samples, 10_000, 1).unwrap();
        let many = m.predict_frozen(&frozen, &syn.train.samples, 7, 3).unwrap();
        assert_eq!(one, many);
        assert!(one.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn frozen_matches_live_tape() {
        let syn = tiny();
        let m = HienModel::new(&syn.train.schema, &config(Ablation::FULL, 3), &syn.train, &[]).unwrap();
        let lists = m.eval_neighbors();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let st = m.graph_state(&mut tape, &bound, &lists).unwrap();
        let refs: Vec<&Sample> = syn.train.samples.iter().collect();
        let z = m.head(&mut tape, &bound, &st, &refs).unwrap();
        let p = tape.sigmoid(z).unwrap();
        let frozen = m.freeze_with(&lists).unwrap();
        let q = m.predict_frozen(&frozen, &syn.train.samples, 16, 1).unwrap();
        for (a, b) in tape.value(p).data().iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let syn = tiny();
        for kind in [AggKind::Cp, AggKind::Ngcf] {
            let cfg = ModelConfig {
                aggregator: kind,
                ..config(Ablation::FULL, 2)
            };
            let m = HienModel::new(&syn.train.schema, &cfg, &syn.train, &[&syn.test]).unwrap();
            let lists = m.graph.sample_neighbors(cfg.neighbor_cap, cfg.seed, 1);
            let batch: Vec<&Sample> = syn.train.samples.iter().take(8).collect();
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape);
            let (loss, _) = m.batch_loss(&mut tape, &bound, &batch, &lists, 0.01).unwrap();
            let mut g = tape.backward(loss).unwrap();
            let analytic: Vec<Tensor> = bound.vars.iter().map(|&v| g.take(v).unwrap()).collect();
            let mut ps = m.params.values().to_vec();
            let rep = finite_diff_check(
                &mut ps,
                &analytic,
                |ps| {
                    let mut mm = m.clone();
                    mm.params.set_values(ps.to_vec())?;
                    let mut t = Tape::new();
                    let b = mm.params.bind(&mut t);
                    let (l, _) = mm.batch_loss(&mut t, &b, &batch, &lists, 0.01)?;
                    Ok(t.value(l).item())
                },
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(rep.pass, "{kind}: {rep:?} at {:?}", rep.worst.map(|(p, _)| m.params.names()[p].clone()));
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let syn = tiny();
        let m = HienModel::new(&syn.train.schema, &config(Ablation::FULL, 2), &syn.train, &[]).unwrap();
        let other = ModelConfig {
            k: 4,
            ..m.config.clone()
        };
        let err = HienModel::from_parts(
            m.schema.clone(),
            other,
            m.params.clone(),
            m.item_forest.clone(),
            m.user_forest.clone(),
            m.graph.clone(),
        );
        assert!(err.is_err());
        let ok = HienModel::from_parts(
            m.schema.clone(),
            m.config.clone(),
            m.params.clone(),
            m.item_forest.clone(),
            m.user_forest.clone(),
            m.graph.clone(),
        )
        .unwrap();
        assert_eq!(ok.predict(&syn.train.samples).unwrap(), m.predict(&syn.train.samples).unwrap());
    }

    #[test]
    fn unknown_ids_error_with_field_name() {
        let syn = tiny();
        let m = HienModel::new(&syn.train.schema, &config(Ablation::FULL, 1), &syn.train, &[]).unwrap();
        let mut s = syn.train.samples[0].clone();
        s.item = 999;
        let e = m.predict(&[s]).unwrap_err().to_string();
        assert!(e.contains("item_id"), "{e}");
    }

    #[test]
    fn intents_are_distributions() {
        let syn = tiny();
        let m = HienModel::new(&syn.train.schema, &config(Ablation::FULL, 2), &syn.train, &[&syn.test]).unwrap();
        let frozen = m.freeze().unwrap();
        let mut samples = syn.test.samples.clone();
        let mut bad = samples[0].clone();
        bad.user = 0;
        samples.push(bad);
        let (rows, skipped) = m.inspect_intents(&frozen, &samples).unwrap();
        assert_eq!(skipped, 1);
        let first = &samples[0];
        let total: f64 = rows
            .iter()
            .filter(|r| r.user == first.user && r.item == first.item && r.side == IntentSide::ItemAttr)
            .take(m.f())
            .map(|r| r.score)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
        let tables = m.refined_tables().unwrap();
        assert_eq!(tables.len(), 2 + m.j() + m.f() + 1);
        assert_eq!(tables[0].1.shape(), &[m.schema.user.vocab, 3]);
    }
}
