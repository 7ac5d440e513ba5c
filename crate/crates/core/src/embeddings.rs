//! Per-field embedding tables.

use rand_chacha::ChaCha8Rng;

use crate::error::{HienError, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::params::{uniform, Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbField {
    pub name: String,
    pub vocab: usize,
    pub param: ParamId,
}

/// Tables of shape `[vocab × k]`, one per field, stored in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub k: usize,
    /// Half-width of the uniform initialiser.
    pub init: f64,
    pub fields: Vec<EmbField>,
}

impl EmbeddingStore {
    /// Tables initialised uniformly in `[-1/√k, 1/√k]`.
    pub fn new(k: usize) -> Self {
        Self::with_init(k, 1.0 / (k as f64).sqrt())
    }

    pub fn with_init(k: usize, init: f64) -> Self {
        EmbeddingStore {
            k,
            init,
            fields: Vec::new(),
        }
    }

    /// Adds a `[vocab × k]` table; returns its field index.
    pub fn add_field(&mut self, store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, vocab: usize) -> usize {
        let param = store.add(format!("emb.{name}"), uniform(rng, &[vocab, self.k], self.init));
        self.fields.push(EmbField {
            name: name.into(),
            vocab,
            param,
        });
        self.fields.len() - 1
    }

    pub fn param(&self, field: usize) -> ParamId {
        self.fields[field].param
    }

    fn check(&self, field: usize, index: usize) -> Result<&EmbField> {
        let f = &self.fields[field];
        if index >= f.vocab {
            return Err(HienError::Bounds {
                field: f.name.clone(),
                index,
                vocab: f.vocab,
            });
        }
        Ok(f)
    }

    /// Row `index` of `field` without a tape.
    pub fn row<'s>(&self, store: &'s ParamStore, field: usize, index: usize) -> Result<&'s [f64]> {
        let f = self.check(field, index)?;
        Ok(store.get(f.param).row(index))
    }

    /// Row `index` of `field` as a `[k]` tape node; gradients reach only
    /// that row of the table.
    pub fn lookup(&self, tape: &mut Tape, bound: &Bound, field: usize, index: usize) -> Result<Var> {
        let f = self.check(field, index)?;
        let rows = tape.gather(bound.var(f.param), &[index])?;
        tape.reshape(rows, vec![self.k])
    }

    /// Rows `idx` of `field` as `[n × k]`.
    pub fn lookup_rows(&self, tape: &mut Tape, bound: &Bound, field: usize, idx: &[usize]) -> Result<Var> {
        for &i in idx {
            self.check(field, i)?;
        }
        tape.gather(bound.var(self.fields[field].param), idx)
    }
}

/// Mean of the behaviour item rows of `item_table: [v × k]`; the zero vector
/// when `behaviors` is empty.
pub fn pool_behaviors(tape: &mut Tape, item_table: Var, behaviors: &[usize]) -> Result<Var> {
    let k = tape.value(item_table).dims2().1;
    if behaviors.is_empty() {
        return Ok(tape.leaf(Tensor::zeros(&[k])));
    }
    let rows = tape.gather(item_table, behaviors)?;
    let sum = tape.scatter(rows, &vec![0; behaviors.len()], 1)?;
    let mean = tape.scale(sum, 1.0 / behaviors.len() as f64)?;
    tape.reshape(mean, vec![k])
}
