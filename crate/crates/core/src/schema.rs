//! Feature schema: which fields a sample carries and how item attribute
//! fields nest into a hierarchy.
//!
//! Text form, one field per line:
//!
//! ```text
//! user user_id 2001
//! item item_id 1001
//! user_attr age 7
//! item_attr advertiser 31 parent=industry
//! item_attr industry 6
//! context hour 25
//! behaviors history max_len=20
//! ```

use std::collections::BTreeSet;

use crate::error::{HienError, Result};

pub const DEFAULT_MAX_BEHAVIORS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemAttrField {
    pub name: String,
    pub vocab: usize,
    /// Index into `FeatureSchema::item_attrs` of the parent field.
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSchema {
    pub user: Field,
    pub item: Field,
    pub user_attrs: Vec<Field>,
    pub item_attrs: Vec<ItemAttrField>,
    pub context: Vec<Field>,
    pub behaviors: String,
    pub max_behaviors: usize,
}

impl FeatureSchema {
    /// Validates names, vocab sizes and the acyclicity of parent links.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut check = |name: &str, vocab: usize| -> Result<()> {
            if !seen.insert(name.to_string()) {
                return Err(HienError::Schema(format!("duplicate field name `{name}`")));
            }
            if vocab < 1 {
                return Err(HienError::Schema(format!("field `{name}` has vocab size 0")));
            }
            Ok(())
        };
        check(&self.user.name, self.user.vocab)?;
        check(&self.item.name, self.item.vocab)?;
        for f in &self.user_attrs {
            check(&f.name, f.vocab)?;
        }
        for f in &self.item_attrs {
            check(&f.name, f.vocab)?;
        }
        for f in &self.context {
            check(&f.name, f.vocab)?;
        }
        check(&self.behaviors, 1)?;
        if seen.contains("label") {
            return Err(HienError::Schema("`label` is reserved".into()));
        }
        for (i, f) in self.item_attrs.iter().enumerate() {
            if let Some(p) = f.parent {
                if p >= self.item_attrs.len() || p == i {
                    return Err(HienError::Schema(format!("field `{}` has an invalid parent", f.name)));
                }
            }
        }
        // Walking up from any field must terminate within `len` steps.
        for (i, f) in self.item_attrs.iter().enumerate() {
            let mut cur = f.parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if steps > self.item_attrs.len() || p == i {
                    return Err(HienError::Schema(format!(
                        "parent links form a cycle through `{}`",
                        f.name
                    )));
                }
                cur = self.item_attrs[p].parent;
            }
        }
        Ok(())
    }

    pub fn num_user_attrs(&self) -> usize {
        self.user_attrs.len()
    }

    pub fn num_item_attrs(&self) -> usize {
        self.item_attrs.len()
    }

    /// Item attribute fields that no other field names as parent. Items
    /// link directly to these; the remaining fields are reached through them.
    pub fn direct_item_attrs(&self) -> Vec<usize> {
        let parents: BTreeSet<usize> = self.item_attrs.iter().filter_map(|f| f.parent).collect();
        (0..self.item_attrs.len()).filter(|i| !parents.contains(i)).collect()
    }

    pub fn item_attr_children(&self, field: usize) -> Vec<usize> {
        (0..self.item_attrs.len())
            .filter(|&c| self.item_attrs[c].parent == Some(field))
            .collect()
    }

    /// Item attribute fields ordered so that every field comes after all of
    /// its child fields.
    pub fn item_attrs_bottom_up(&self) -> Vec<usize> {
        let depth_below = |f: usize| -> usize {
            // longest chain of child fields under `f`
            fn go(s: &FeatureSchema, f: usize) -> usize {
                s.item_attr_children(f).into_iter().map(|c| 1 + go(s, c)).max().unwrap_or(0)
            }
            go(self, f)
        };
        let mut order: Vec<usize> = (0..self.item_attrs.len()).collect();
        order.sort_by_key(|&f| (depth_below(f), f));
        order
    }

    pub fn item_attr_index(&self, name: &str) -> Option<usize> {
        self.item_attrs.iter().position(|f| f.name == name)
    }

    pub fn user_attr_index(&self, name: &str) -> Option<usize> {
        self.user_attrs.iter().position(|f| f.name == name)
    }

    /// Names in CSV column order (label last).
    pub fn column_names(&self) -> Vec<String> {
        let mut cols = vec![self.user.name.clone(), self.item.name.clone()];
        cols.extend(self.user_attrs.iter().map(|f| f.name.clone()));
        cols.extend(self.item_attrs.iter().map(|f| f.name.clone()));
        cols.extend(self.context.iter().map(|f| f.name.clone()));
        cols.push(self.behaviors.clone());
        cols.push("label".into());
        cols
    }

    /// First field (in column order) on which `other` differs from `self`.
    pub fn first_difference(&self, other: &FeatureSchema) -> Option<String> {
        let a = self.describe();
        let b = other.describe();
        for i in 0..a.len().max(b.len()) {
            match (a.get(i), b.get(i)) {
                (Some(x), Some(y)) if x == y => continue,
                (Some(x), _) => return Some(x.0.clone()),
                (None, Some(y)) => return Some(y.0.clone()),
                (None, None) => break,
            }
        }
        None
    }

    fn describe(&self) -> Vec<(String, String)> {
        self.to_text()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| {
                let name = l.split_whitespace().nth(1).unwrap_or("").to_string();
                (name, l.to_string())
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# hien feature schema\n");
        s += &format!("user {} {}\n", self.user.name, self.user.vocab);
        s += &format!("item {} {}\n", self.item.name, self.item.vocab);
        for f in &self.user_attrs {
            s += &format!("user_attr {} {}\n", f.name, f.vocab);
        }
        for f in &self.item_attrs {
            match f.parent {
                Some(p) => {
                    s += &format!("item_attr {} {} parent={}\n", f.name, f.vocab, self.item_attrs[p].name)
                }
                None => s += &format!("item_attr {} {}\n", f.name, f.vocab),
            }
        }
        for f in &self.context {
            s += &format!("context {} {}\n", f.name, f.vocab);
        }
        s += &format!("behaviors {} max_len={}\n", self.behaviors, self.max_behaviors);
        s
    }

    pub fn parse(text: &str) -> Result<FeatureSchema> {
        let mut user = None;
        let mut item = None;
        let mut user_attrs = Vec::new();
        let mut item_attrs: Vec<(Field, Option<String>)> = Vec::new();
        let mut context = Vec::new();
        let mut behaviors = None;

        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| HienError::Parse { line: i + 1, msg };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 2 {
                return Err(err(format!("expected `<kind> <name> ...`, got `{line}`")));
            }
            let (kind, name) = (toks[0], toks[1].to_string());
            let vocab = || -> Result<usize> {
                toks.get(2)
                    .ok_or_else(|| err(format!("field `{name}` is missing a vocab size")))?
                    .parse()
                    .map_err(|_| err(format!("field `{name}` has a non-integer vocab size")))
            };
            match kind {
                "user" => user = Some(Field { name: name.clone(), vocab: vocab()? }),
                "item" => item = Some(Field { name: name.clone(), vocab: vocab()? }),
                "user_attr" => user_attrs.push(Field { name: name.clone(), vocab: vocab()? }),
                "context" => context.push(Field { name: name.clone(), vocab: vocab()? }),
                "item_attr" => {
                    let parent = match toks.get(3) {
                        Some(t) => Some(
                            t.strip_prefix("parent=")
                                .ok_or_else(|| err(format!("expected parent=<field>, got `{t}`")))?
                                .to_string(),
                        ),
                        None => None,
                    };
                    item_attrs.push((Field { name: name.clone(), vocab: vocab()? }, parent));
                }
                "behaviors" => {
                    let max_len = match toks.get(2) {
                        Some(t) => t
                            .strip_prefix("max_len=")
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| err(format!("expected max_len=<n>, got `{t}`")))?,
                        None => DEFAULT_MAX_BEHAVIORS,
                    };
                    behaviors = Some((name.clone(), max_len));
                }
                other => return Err(err(format!("unknown field kind `{other}`"))),
            }
        }

        let names: Vec<String> = item_attrs.iter().map(|(f, _)| f.name.clone()).collect();
        let item_attrs = item_attrs
            .into_iter()
            .map(|(f, parent)| {
                let parent = match parent {
                    Some(p) => Some(names.iter().position(|n| *n == p).ok_or_else(|| {
                        HienError::Schema(format!("field `{}` names unknown parent `{p}`", f.name))
                    })?),
                    None => None,
                };
                Ok(ItemAttrField {
                    name: f.name,
                    vocab: f.vocab,
                    parent,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (behaviors, max_behaviors) =
            behaviors.ok_or_else(|| HienError::Schema("missing `behaviors` field".into()))?;
        let schema = FeatureSchema {
            user: user.ok_or_else(|| HienError::Schema("missing `user` field".into()))?,
            item: item.ok_or_else(|| HienError::Schema("missing `item` field".into()))?,
            user_attrs,
            item_attrs,
            context,
            behaviors,
            max_behaviors,
        };
        schema.validate()?;
        Ok(schema)
    }
}
