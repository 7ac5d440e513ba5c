//! Synthetic click logs with a planted attribute hierarchy and planted
//! intents.
//!
//! Every item-attribute chain is a balanced tree of values: a leaf value
//! `j` (1-based) has parent `(j - 1) / branching + 1` one level up. Each
//! value carries a latent vector correlated with its parent's, each user a
//! latent vector partly shared with their group. An item is *liked* by a
//! user when the weighted affinity over the planted fields is positive;
//! sampled labels are the liked flag, flipped with the noise probability.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::parse_kv;
use crate::data::{Dataset, Sample, Split};
use crate::error::{HienError, Result};
use crate::schema::{FeatureSchema, Field, ItemAttrField};

#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec {
    pub name: String,
    pub depth: usize,
    pub leaf_values: usize,
    pub branching: usize,
}

impl ChainSpec {
    pub fn new(name: &str, depth: usize, leaf_values: usize, branching: usize) -> Self {
        ChainSpec {
            name: name.into(),
            depth,
            leaf_values,
            branching,
        }
    }

    /// Field names from the leaf level upward.
    pub fn field_names(&self) -> Vec<String> {
        if self.depth == 1 {
            vec![self.name.clone()]
        } else {
            (0..self.depth).map(|l| format!("{}_{l}", self.name)).collect()
        }
    }

    /// Number of distinct values at `level` (0 = leaf).
    pub fn values_at(&self, level: usize) -> usize {
        self.leaf_values / self.branching.pow(level as u32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub test_fraction: f64,
    pub positive_ratio: f64,
    pub noise: f64,
    pub latent_dim: usize,
    /// Correlation between a value's latent and its parent's.
    pub hierarchy_corr: f64,
    /// Share of user latent variance explained by the first user attribute.
    pub group_share: f64,
    pub bias: f64,
    pub max_behaviors: usize,
    pub chains: Vec<ChainSpec>,
    pub user_attrs: Vec<(String, usize)>,
    pub context: Vec<(String, usize)>,
    /// Item attribute field → weight in the click logit.
    pub planted: Vec<(String, f64)>,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            seed: 7,
            users: 2000,
            items: 1000,
            interactions: 50_000,
            test_fraction: 0.1,
            positive_ratio: 0.5,
            noise: 0.1,
            latent_dim: 4,
            hierarchy_corr: 0.5,
            group_share: 0.5,
            bias: 0.0,
            max_behaviors: 20,
            chains: vec![
                ChainSpec::new("ad", 3, 64, 4),
                ChainSpec::new("cat", 2, 25, 5),
                ChainSpec::new("price", 1, 10, 1),
            ],
            user_attrs: vec![("age".into(), 6), ("gender".into(), 2), ("city".into(), 8)],
            context: vec![("hour".into(), 24)],
            planted: vec![("ad_0".into(), 3.0)],
        }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HienError::Config(m));
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise must be in [0, 0.5), got {}", self.noise));
        }
        if self.users == 0 || self.items == 0 {
            return bad("users and items must be positive".into());
        }
        if self.interactions < self.users {
            return bad("need at least one interaction per user".into());
        }
        if self.interactions.div_ceil(self.users) > self.items {
            return bad("more interactions per user than items".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)".into());
        }
        if !(self.positive_ratio > 0.0 && self.positive_ratio < 1.0) {
            return bad("positive_ratio must be in (0, 1)".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.hierarchy_corr) || !(0.0..=1.0).contains(&self.group_share) {
            return bad("hierarchy_corr and group_share must be in [0, 1]".into());
        }
        if self.chains.is_empty() {
            return bad("at least one item attribute chain is required".into());
        }
        for c in &self.chains {
            if c.depth == 0 {
                return bad(format!("chain `{}` has depth 0", c.name));
            }
            if c.depth > 1 && c.branching < 1 {
                return bad(format!("chain `{}` has branching 0", c.name));
            }
            let span = c.branching.max(1).pow((c.depth - 1) as u32);
            if c.leaf_values < span || c.leaf_values % span != 0 {
                return bad(format!(
                    "chain `{}`: {} leaf values cannot form {} levels with branching {}",
                    c.name, c.leaf_values, c.depth, c.branching
                ));
            }
        }
        for (name, n) in self.user_attrs.iter().chain(&self.context) {
            if *n == 0 {
                return bad(format!("field `{name}` needs at least one value"));
            }
        }
        let schema = self.schema();
        schema.validate()?;
        for (f, _) in &self.planted {
            if schema.item_attr_index(f).is_none() {
                return bad(format!("planted field `{f}` is not an item attribute"));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        let mut item_attrs = Vec::new();
        for c in &self.chains {
            let base = item_attrs.len();
            for (level, name) in c.field_names().into_iter().enumerate() {
                item_attrs.push(ItemAttrField {
                    name,
                    vocab: c.values_at(level) + 1,
                    parent: (level + 1 < c.depth).then_some(base + level + 1),
                });
            }
        }
        FeatureSchema {
            user: Field {
                name: "user_id".into(),
                vocab: self.users + 1,
            },
            item: Field {
                name: "item_id".into(),
                vocab: self.items + 1,
            },
            user_attrs: self
                .user_attrs
                .iter()
                .map(|(n, v)| Field {
                    name: n.clone(),
                    vocab: v + 1,
                })
                .collect(),
            item_attrs,
            context: self
                .context
                .iter()
                .map(|(n, v)| Field {
                    name: n.clone(),
                    vocab: v + 1,
                })
                .collect(),
            behaviors: "behaviors".into(),
            max_behaviors: self.max_behaviors,
        }
    }

    pub fn parse(text: &str) -> Result<PlantedConfig> {
        let mut cfg = PlantedConfig {
            chains: vec![],
            user_attrs: vec![],
            context: vec![],
            planted: vec![],
            ..PlantedConfig::default()
        };
        let mut saw = (false, false, false);
        for e in parse_kv(text)? {
            if let Some(name) = e.key.strip_prefix("chain.") {
                let parts: Vec<&str> = e.value.split(':').collect();
                let num = |s: &str| -> Result<usize> {
                    s.trim().parse().map_err(|_| HienError::Parse {
                        line: e.line,
                        msg: format!("chain `{name}` expects depth:leaf_values:branching"),
                    })
                };
                if parts.len() != 3 {
                    return Err(HienError::Parse {
                        line: e.line,
                        msg: format!("chain `{name}` expects depth:leaf_values:branching"),
                    });
                }
                cfg.chains.push(ChainSpec::new(name, num(parts[0])?, num(parts[1])?, num(parts[2])?));
                saw.0 = true;
                continue;
            }
            if let Some(name) = e.key.strip_prefix("user_attr.") {
                cfg.user_attrs.push((name.into(), e.parse()?));
                saw.1 = true;
                continue;
            }
            if let Some(name) = e.key.strip_prefix("context.") {
                cfg.context.push((name.into(), e.parse()?));
                saw.2 = true;
                continue;
            }
            if let Some(name) = e.key.strip_prefix("planted.") {
                cfg.planted.push((name.into(), e.parse()?));
                continue;
            }
            match e.key.as_str() {
                "seed" => cfg.seed = e.parse()?,
                "users" => cfg.users = e.parse()?,
                "items" => cfg.items = e.parse()?,
                "interactions" => cfg.interactions = e.parse()?,
                "test_fraction" => cfg.test_fraction = e.parse()?,
                "positive_ratio" => cfg.positive_ratio = e.parse()?,
                "noise" => cfg.noise = e.parse()?,
                "latent_dim" => cfg.latent_dim = e.parse()?,
                "hierarchy_corr" => cfg.hierarchy_corr = e.parse()?,
                "group_share" => cfg.group_share = e.parse()?,
                "bias" => cfg.bias = e.parse()?,
                "max_behaviors" => cfg.max_behaviors = e.parse()?,
                _ => return Err(e.unknown()),
            }
        }
        let d = PlantedConfig::default();
        if !saw.0 {
            cfg.chains = d.chains;
        }
        if !saw.1 {
            cfg.user_attrs = d.user_attrs;
        }
        if !saw.2 {
            cfg.context = d.context;
        }
        if cfg.planted.is_empty() {
            cfg.planted = d.planted;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s += &format!("seed={}\nusers={}\nitems={}\ninteractions={}\n", self.seed, self.users, self.items, self.interactions);
        s += &format!("test_fraction={}\npositive_ratio={}\nnoise={}\n", self.test_fraction, self.positive_ratio, self.noise);
        s += &format!(
            "latent_dim={}\nhierarchy_corr={}\ngroup_share={}\nbias={}\nmax_behaviors={}\n",
            self.latent_dim, self.hierarchy_corr, self.group_share, self.bias, self.max_behaviors
        );
        for c in &self.chains {
            s += &format!("chain.{}={}:{}:{}\n", c.name, c.depth, c.leaf_values, c.branching);
        }
        for (n, v) in &self.user_attrs {
            s += &format!("user_attr.{n}={v}\n");
        }
        for (n, v) in &self.context {
            s += &format!("context.{n}={v}\n");
        }
        for (n, w) in &self.planted {
            s += &format!("planted.{n}={w}\n");
        }
        s
    }
}

/// The sidecar written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub noise: f64,
    /// Every item attribute field with its planted weight (0 if unplanted).
    pub planted: BTreeMap<String, f64>,
}

impl GroundTruth {
    /// Field with the largest absolute planted weight.
    pub fn strongest_field(&self) -> Option<&str> {
        self.planted
            .iter()
            .filter(|(_, w)| **w != 0.0)
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(f, _)| f.as_str())
    }
}

/// Latent state behind a generated dataset.
#[derive(Clone, Debug)]
pub struct PlantedWorld {
    pub latent_dim: usize,
    pub user_latent: Vec<Vec<f64>>,
    /// Per item attribute field, per value index.
    pub value_latent: Vec<Vec<Vec<f64>>>,
    /// Per item attribute field weight.
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Per item, attribute value per field (index 0 unused).
    pub item_values: Vec<Vec<usize>>,
    pub user_values: Vec<Vec<usize>>,
}

impl PlantedWorld {
    pub fn affinity(&self, field: usize, user: usize, value: usize) -> f64 {
        let p = &self.user_latent[user];
        let q = &self.value_latent[field][value];
        p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (self.latent_dim as f64).sqrt()
    }

    pub fn logit(&self, user: usize, item: usize) -> f64 {
        let vals = &self.item_values[item];
        self.bias
            + self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(f, w)| w * self.affinity(f, user, vals[f]))
                .sum::<f64>()
    }

    pub fn liked(&self, user: usize, item: usize) -> bool {
        self.logit(user, item) > 0.0
    }
}

pub struct Synthetic {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: GroundTruth,
    pub world: PlantedWorld,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn generate_synthetic(cfg: &PlantedConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let schema = cfg.schema();
    let r = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Value latents, roots first so children can lean on their parents.
    let n_fields = schema.item_attrs.len();
    let mut value_latent: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_fields];
    let mut offset = 0;
    let rho = cfg.hierarchy_corr;
    for c in &cfg.chains {
        for level in (0..c.depth).rev() {
            let f = offset + level;
            let n = c.values_at(level);
            let mut table = vec![vec![0.0; r]];
            for j in 1..=n {
                let z = normal_vec(&mut rng, r);
                let v = if level + 1 < c.depth {
                    let parent = (j - 1) / c.branching + 1;
                    let pq = &value_latent[f + 1][parent];
                    pq.iter().zip(&z).map(|(p, e)| rho * p + (1.0 - rho * rho).sqrt() * e).collect()
                } else {
                    z
                };
                table.push(v);
            }
            value_latent[f] = table;
        }
        offset += c.depth;
    }

    // Item attribute assignment: leaf values dealt round-robin then shuffled.
    let mut item_values = vec![vec![0usize; n_fields]; cfg.items + 1];
    let mut offset = 0;
    for c in &cfg.chains {
        let mut deck: Vec<usize> = (0..cfg.items).map(|i| i % c.leaf_values + 1).collect();
        deck.shuffle(&mut rng);
        for (item, &leaf) in deck.iter().enumerate() {
            let mut v = leaf;
            for level in 0..c.depth {
                item_values[item + 1][offset + level] = v;
                v = (v - 1) / c.branching.max(1) + 1;
            }
        }
        offset += c.depth;
    }

    // Users: attributes, then latents shrunk toward the first attribute's group.
    let mut user_values = vec![vec![0usize; cfg.user_attrs.len()]; cfg.users + 1];
    for u in 1..=cfg.users {
        for (j, (_, n)) in cfg.user_attrs.iter().enumerate() {
            user_values[u][j] = rng.random_range(1..=*n);
        }
    }
    let group_latent: Vec<Vec<f64>> = match cfg.user_attrs.first() {
        Some((_, n)) => (0..=*n).map(|_| normal_vec(&mut rng, r)).collect(),
        None => Vec::new(),
    };
    let share = if group_latent.is_empty() { 0.0 } else { cfg.group_share };
    let mut user_latent = vec![vec![0.0; r]];
    for u in 1..=cfg.users {
        let own = normal_vec(&mut rng, r);
        let lat = if share > 0.0 {
            let g = &group_latent[user_values[u][0]];
            g.iter().zip(&own).map(|(a, b)| share.sqrt() * a + (1.0 - share).sqrt() * b).collect()
        } else {
            own
        };
        user_latent.push(lat);
    }

    let mut weights = vec![0.0; n_fields];
    for (name, w) in &cfg.planted {
        weights[schema.item_attr_index(name).expect("validated")] = *w;
    }
    let world = PlantedWorld {
        latent_dim: r,
        user_latent,
        value_latent,
        weights,
        bias: cfg.bias,
        item_values,
        user_values,
    };

    // Per-user interactions: a share from liked items, the rest uniformly
    // from items the user does not like.
    let base = cfg.interactions / cfg.users;
    let extra = cfg.interactions % cfg.users;
    let mut rows: Vec<(usize, usize, u8)> = Vec::with_capacity(cfg.interactions);
    for u in 1..=cfg.users {
        let n = base + usize::from(u <= extra);
        let (mut liked, mut disliked): (Vec<usize>, Vec<usize>) =
            (1..=cfg.items).partition(|&v| world.liked(u, v));
        let n_pos = ((cfg.positive_ratio * n as f64).round() as usize).min(liked.len());
        let n_neg = (n - n_pos).min(disliked.len());
        let n_pos = (n - n_neg).min(liked.len());
        liked.shuffle(&mut rng);
        disliked.shuffle(&mut rng);
        for &v in &liked[..n_pos] {
            rows.push((u, v, 1));
        }
        for &v in &disliked[..n_neg] {
            rows.push((u, v, 0));
        }
    }
    for row in rows.iter_mut() {
        if cfg.noise > 0.0 && rng.random::<f64>() < cfg.noise {
            row.2 = 1 - row.2;
        }
    }
    rows.shuffle(&mut rng);
    let n_test = ((rows.len() as f64) * cfg.test_fraction).round() as usize;
    let n_test = n_test.clamp(1, rows.len() - 1);
    let (test_rows, train_rows) = rows.split_at(n_test);

    let mut history: Vec<Vec<usize>> = vec![Vec::new(); cfg.users + 1];
    for &(u, v, y) in train_rows {
        if y == 1 {
            history[u].push(v);
        }
    }
    let cap = cfg.max_behaviors;
    let tail = |list: Vec<usize>| -> Vec<usize> {
        let skip = list.len().saturating_sub(cap);
        list[skip..].to_vec()
    };
    let mut make = |u: usize, v: usize, y: u8, exclude_self: bool| -> Sample {
        let behaviors = tail(
            history[u]
                .iter()
                .copied()
                .filter(|&b| !(exclude_self && b == v))
                .collect(),
        );
        Sample {
            user: u,
            item: v,
            user_attrs: world.user_values[u].clone(),
            item_attrs: world.item_values[v].clone(),
            context: cfg.context.iter().map(|(_, n)| rng.random_range(1..=*n)).collect(),
            behaviors,
            label: y,
        }
    };
    let train: Vec<Sample> = train_rows.iter().map(|&(u, v, y)| make(u, v, y, true)).collect();
    let test: Vec<Sample> = test_rows.iter().map(|&(u, v, y)| make(u, v, y, false)).collect();

    let truth = GroundTruth {
        seed: cfg.seed,
        noise: cfg.noise,
        planted: schema
            .item_attrs
            .iter()
            .zip(&world.weights)
            .map(|(f, w)| (f.name.clone(), *w))
            .collect(),
    };
    Ok(Synthetic {
        train: Dataset::new(schema.clone(), train, Split::Train),
        test: Dataset::new(schema, test, Split::Test),
        truth,
        world,
    })
}
