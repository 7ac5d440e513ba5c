//! DeepFM head: `ŷ = sigmoid(y_FM + y_DNN)` over `m` field embeddings.

use rand_chacha::ChaCha8Rng;

use crate::aggregators::{prelu, DEFAULT_PRELU_SLOPE};
use crate::error::{HienError, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::schema::FeatureSchema;

/// Field names in head order: user, item, user attributes, item
/// attributes, pooled behaviours, context.
pub fn field_order(schema: &FeatureSchema) -> Vec<String> {
    let mut out = vec![schema.user.name.clone(), schema.item.name.clone()];
    out.extend(schema.user_attrs.iter().map(|f| f.name.clone()));
    out.extend(schema.item_attrs.iter().map(|f| f.name.clone()));
    out.push(schema.behaviors.clone());
    out.extend(schema.context.iter().map(|f| f.name.clone()));
    out
}

/// `m = 2 + J + K + 1 + P`.
pub fn num_fields(schema: &FeatureSchema) -> usize {
    3 + schema.user_attrs.len() + schema.item_attrs.len() + schema.context.len()
}

/// `Σ w_i + Σ_{i<j} ⟨e_i, e_j⟩` via `½(‖Σ e‖² − Σ ‖e‖²)`.
pub fn fm_forward(fields: &[Tensor], first_order: &[f64]) -> Result<f64> {
    let k = fields.first().ok_or(HienError::EmptyInput("fm_forward"))?.numel();
    let mut sum = vec![0.0; k];
    let mut sq = 0.0;
    for f in fields {
        if f.numel() != k {
            return Err(HienError::dim("fm_forward", &[k], f.shape()));
        }
        for (s, v) in sum.iter_mut().zip(f.data()) {
            *s += v;
        }
        sq += f.sum_squares();
    }
    let total: f64 = sum.iter().map(|v| v * v).sum();
    Ok(first_order.iter().sum::<f64>() + 0.5 * (total - sq))
}

/// FM on a tape: `fields` are `[n × k]` each, `first` is `[n × 1]`.
pub fn fm_tape(tape: &mut Tape, fields: &[Var], first: Var) -> Result<Var> {
    let mut sum = *fields.first().ok_or(HienError::EmptyInput("fm_tape"))?;
    let mut sq = tape.row_dot(sum, sum)?;
    for &f in &fields[1..] {
        sum = tape.add(sum, f)?;
        let s = tape.row_dot(f, f)?;
        sq = tape.add(sq, s)?;
    }
    let total = tape.row_dot(sum, sum)?;
    let pair = tape.sub(total, sq)?;
    let pair = tape.scale(pair, 0.5)?;
    tape.add(first, pair)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    /// `(W [out × in], b [out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
    /// PReLU slope after each hidden layer.
    pub slopes: Vec<f64>,
}

/// Pre-sigmoid MLP output for the concatenated fields.
pub fn dnn_forward(fields: &[Tensor], mlp: &MlpWeights) -> Result<f64> {
    let mut a: Vec<f64> = fields.iter().flat_map(|f| f.data().iter().copied()).collect();
    for (i, (w, b)) in mlp.layers.iter().enumerate() {
        let (out, inp) = w.dims2();
        if inp != a.len() || b.numel() != out {
            return Err(HienError::dim("dnn_forward", w.shape(), &[a.len()]));
        }
        let mut z: Vec<f64> = (0..out)
            .map(|o| w.row(o).iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() + b.data()[o])
            .collect();
        if i + 1 < mlp.layers.len() {
            z = prelu(&z, mlp.slopes[i]);
        }
        a = z;
    }
    if a.len() != 1 {
        return Err(HienError::dim("dnn_forward", &[a.len()], &[1]));
    }
    Ok(a[0])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// DeepFM on plain tensors for one sample.
pub fn deepfm_predict(fields: &[Tensor], first_order: &[f64], mlp: &MlpWeights) -> Result<f64> {
    Ok(sigmoid(fm_forward(fields, first_order)? + dnn_forward(fields, mlp)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
    pub slopes: Vec<ParamId>,
}

impl Mlp {
    /// `dims` lists every layer's output size and must end in 1.
    pub fn init(input: usize, dims: &[usize], store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Mlp> {
        if dims.last() != Some(&1) || dims.contains(&0) {
            return Err(HienError::Config(format!("MLP dims must be positive and end in 1, got {dims:?}")));
        }
        let mut layers = Vec::new();
        let mut slopes = Vec::new();
        let mut inp = input;
        for (i, &out) in dims.iter().enumerate() {
            let w = store.add(format!("mlp.{i}.w"), glorot(rng, out, inp));
            let b = store.add(format!("mlp.{i}.b"), Tensor::zeros(&[out]));
            layers.push((w, b));
            if i + 1 < dims.len() {
                slopes.push(store.add(format!("mlp.{i}.slope"), Tensor::scalar(DEFAULT_PRELU_SLOPE)));
            }
            inp = out;
        }
        Ok(Mlp { layers, slopes })
    }

    pub fn weights(&self, store: &ParamStore) -> MlpWeights {
        MlpWeights {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| (store.get(w).clone(), store.get(b).clone()))
                .collect(),
            slopes: self.slopes.iter().map(|&s| store.get(s).item()).collect(),
        }
    }

    /// `[n × d]` → `[n × 1]` pre-sigmoid scores.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut a = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.linear(a, bound.var(w))?;
            a = tape.add_row(z, bound.var(b))?;
            if i + 1 < self.layers.len() {
                a = tape.prelu(a, bound.var(self.slopes[i]))?;
            }
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn fm_examples() {
        let f = [v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[1.0, 1.0])];
        assert_eq!(fm_forward(&f, &[0.0; 3]).unwrap(), 2.0);
        let orth = [v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        assert_eq!(fm_forward(&orth, &[3.0, 0.0]).unwrap(), 3.0);
        let zero = [v(&[0.0, 0.0]), v(&[0.0, 0.0])];
        assert_eq!(fm_forward(&zero, &[0.5, 0.25]).unwrap(), 0.75);
    }

    #[test]
    fn fm_tape_matches_tensor_form() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.2, -0.4]]).unwrap());
        let b = t.leaf(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap());
        let c = t.leaf(Tensor::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.3]]).unwrap());
        let w = t.leaf(Tensor::matrix(2, 1, vec![0.0, 0.1]).unwrap());
        let y = fm_tape(&mut t, &[a, b, c], w).unwrap();
        let row1 = [v(&[0.2, -0.4]), v(&[0.5, 0.5]), v(&[-1.0, 0.3])];
        assert_eq!(t.value(y).data()[0], 2.0);
        assert!((t.value(y).data()[1] - fm_forward(&row1, &[0.1]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn dnn_examples() {
        let zero = MlpWeights {
            layers: vec![(Tensor::zeros(&[3, 4]), Tensor::zeros(&[3])), (Tensor::zeros(&[1, 3]), Tensor::zeros(&[1]))],
            slopes: vec![0.25],
        };
        let f = [v(&[1.0, 2.0]), v(&[3.0, 4.0])];
        assert_eq!(dnn_forward(&f, &zero).unwrap(), 0.0);
        let pick = MlpWeights {
            layers: vec![(Tensor::matrix(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap(), Tensor::zeros(&[1]))],
            slopes: vec![],
        };
        assert_eq!(dnn_forward(&f, &pick).unwrap(), 3.0);
        assert!(dnn_forward(&[v(&[1.0])], &pick).is_err());
    }

    #[test]
    fn predict_range() {
        let mlp = MlpWeights {
            layers: vec![(Tensor::zeros(&[1, 4]), Tensor::zeros(&[1]))],
            slopes: vec![],
        };
        let orth = [v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        assert_eq!(deepfm_predict(&orth, &[0.0, 0.0], &mlp).unwrap(), 0.5);
        let big = [v(&[30.0, 0.0]), v(&[30.0, 0.0])];
        let p = deepfm_predict(&big, &[0.0, 0.0], &mlp).unwrap();
        assert!(p > 0.5 && p <= 1.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-30.0) > 0.0);
    }

    #[test]
    fn mlp_tape_matches_tensor_form() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::init(4, &[3, 2, 1], &mut store, &mut rng).unwrap();
        let w = mlp.weights(&store);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.leaf(Tensor::matrix(1, 4, vec![0.3, -1.0, 0.8, 0.1]).unwrap());
        let y = mlp.forward(&mut t, &b, x).unwrap();
        let lit = dnn_forward(&[v(&[0.3, -1.0]), v(&[0.8, 0.1])], &w).unwrap();
        assert!((t.value(y).item() - lit).abs() < 1e-14);
        assert!(Mlp::init(4, &[3, 2], &mut store, &mut rng).is_err());
    }

    #[test]
    fn field_count() {
        let s = FeatureSchema::parse(
            "user u 2\nitem i 2\nuser_attr a 2\nitem_attr x 2\nitem_attr y 2\ncontext c 2\nbehaviors h\n",
        )
        .unwrap();
        assert_eq!(num_fields(&s), 7);
        assert_eq!(field_order(&s), vec!["u", "i", "a", "x", "y", "h", "c"]);
    }
}
