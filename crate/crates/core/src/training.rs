//! Loss, Adagrad, and the training loop.

use std::fmt::Write as _;

use crate::aggregators::{AggKind, Norm};
use crate::config::parse_kv;
use crate::data::{batches, Dataset};
use crate::error::{HienError, Result};
use crate::metrics::{evaluate, EvalResult, PROB_CLAMP};
use crate::model::{Ablation, HienModel, ModelConfig, MAX_LAYERS};
use crate::numcore::{Tape, Tensor};
use crate::params::ParamStore;

pub const ADAGRAD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Evaluation chunk size.
    pub test_batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Settings sized for a laptop run on the synthetic benchmark.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 0.05,
            batch_size: 512,
            test_batch_size: 16_384,
            epochs: 10,
            l2: 1e-6,
            clip_norm: 10.0,
            model: ModelConfig::default(),
        }
    }

    /// Small learning rate with large batches.
    pub fn reference() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 4096,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(HienError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(HienError::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(HienError::Config(format!("clip_norm must be >= 0, got {}", self.clip_norm)));
        }
        if self.batch_size == 0 || self.test_batch_size == 0 {
            return Err(HienError::Config("batch sizes must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(HienError::Config("epochs must be >= 1".into()));
        }
        self.model.validate()
    }

    /// Parses `key=value` text. A `preset=desk|reference` line selects the
    /// base values wherever it appears; every other key overrides it.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let entries = parse_kv(text)?;
        let mut cfg = TrainConfig::desk();
        for e in entries.iter().filter(|e| e.key == "preset") {
            cfg = match e.value.as_str() {
                "desk" => TrainConfig::desk(),
                "reference" => TrainConfig::reference(),
                other => {
                    return Err(HienError::Parse {
                        line: e.line,
                        msg: format!("unknown preset `{other}`"),
                    })
                }
            };
        }
        for e in &entries {
            let m = &mut cfg.model;
            match e.key.as_str() {
                "preset" => {}
                "lr" => cfg.lr = e.parse()?,
                "batch_size" => cfg.batch_size = e.parse()?,
                "test_batch_size" => cfg.test_batch_size = e.parse()?,
                "epochs" => cfg.epochs = e.parse()?,
                "l2" => cfg.l2 = e.parse()?,
                "clip_norm" => cfg.clip_norm = e.parse()?,
                "k" => m.k = e.parse()?,
                "mlp" => {
                    m.mlp = e
                        .value
                        .split(',')
                        .map(|d| {
                            d.trim().parse::<usize>().map_err(|err| HienError::Parse {
                                line: e.line,
                                msg: format!("bad mlp dim `{d}`: {err}"),
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "aggregator" => m.aggregator = e.parse::<AggKind>()?,
                "child_norm" => m.child_norm = e.parse::<Norm>()?,
                "layers" => m.layers = e.parse()?,
                "neighbor_cap" => m.neighbor_cap = e.parse()?,
                "emb_init" => m.emb_init = e.parse()?,
                "seed" => m.seed = e.parse()?,
                "user_agg" => m.ablation.user_agg = e.parse_bool()?,
                "item_agg" => m.ablation.item_agg = e.parse_bool()?,
                "user_intent" => m.ablation.user_intent = e.parse_bool()?,
                "item_intent" => m.ablation.item_intent = e.parse_bool()?,
                _ => return Err(e.unknown()),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mlp: Vec<String> = m.mlp.iter().map(|d| d.to_string()).collect();
        let mut out = String::new();
        let _ = write!(
            out,
            "lr={}\nbatch_size={}\ntest_batch_size={}\nepochs={}\nl2={}\nclip_norm={}\n\
             k={}\nmlp={}\naggregator={}\nchild_norm={}\nlayers={}\nneighbor_cap={}\nemb_init={}\nseed={}\n\
             user_agg={}\nitem_agg={}\nuser_intent={}\nitem_intent={}\n",
            self.lr,
            self.batch_size,
            self.test_batch_size,
            self.epochs,
            self.l2,
            self.clip_norm,
            m.k,
            mlp.join(","),
            m.aggregator,
            m.child_norm,
            m.layers,
            m.neighbor_cap,
            m.emb_init,
            m.seed,
            m.ablation.user_agg,
            m.ablation.item_agg,
            m.ablation.user_intent,
            m.ablation.item_intent,
        );
        out
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.model.ablation = ablation;
        self
    }

    pub fn with_layers(mut self, layers: usize) -> Result<Self> {
        if layers > MAX_LAYERS {
            return Err(HienError::Config(format!("layers must be in 0..={MAX_LAYERS}, got {layers}")));
        }
        self.model.layers = layers;
        Ok(self)
    }
}

/// Cross-entropy of `preds` plus `l2 · Σ‖θ‖²` over every parameter.
pub fn loss(preds: &[f64], labels: &[f64], params: &ParamStore, l2: f64) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(HienError::dim("loss", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(HienError::EmptyInput("loss"));
    }
    let mut total = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(HienError::Numeric(format!("prediction {p} outside [0, 1]")));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(total / preds.len() as f64 + l2 * params.squared_norm())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    pub acc: Vec<Tensor>,
    pub eps: f64,
}

impl AdagradState {
    pub fn new(params: &ParamStore) -> Self {
        AdagradState {
            acc: params.values().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            eps: ADAGRAD_EPS,
        }
    }
}

/// `acc += g²; p −= lr · g / √(acc + ε)`. Entries with `g = 0` are left
/// alone, so rows a batch never touched keep both value and accumulator.
pub fn adagrad_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdagradState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.acc.len() != params.len() {
        return Err(HienError::dim("adagrad_step", &[params.len()], &[grads.len()]));
    }
    for ((p, g), acc) in params.values_mut().iter_mut().zip(grads).zip(&mut state.acc) {
        if p.shape() != g.shape() || p.shape() != acc.shape() {
            return Err(HienError::dim("adagrad_step", p.shape(), g.shape()));
        }
        let eps = state.eps;
        for ((pv, &gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
            if gv != 0.0 {
                *av += gv * gv;
                *pv -= lr * gv / (*av + eps).sqrt();
            }
        }
    }
    Ok(())
}

/// Adds `2λθ` to `grads`. Row tables listed in `sparse` only receive it on
/// rows that already carry a data gradient.
pub fn add_l2_grad(grads: &mut [Tensor], params: &ParamStore, sparse: &[bool], l2: f64) {
    if l2 == 0.0 {
        return;
    }
    for ((g, p), &is_sparse) in grads.iter_mut().zip(params.values()).zip(sparse) {
        if is_sparse && p.rank() == 2 {
            let (rows, _) = p.dims2();
            for r in 0..rows {
                if g.row(r).iter().any(|&x| x != 0.0) {
                    for (gv, pv) in g.row_mut(r).iter_mut().zip(p.row(r)) {
                        *gv += 2.0 * l2 * pv;
                    }
                }
            }
        } else {
            for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                *gv += 2.0 * l2 * pv;
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_logloss: f64,
    pub test_auc: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,test_logloss,test_auc";

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.test_logloss, e.test_auc);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: HienModel,
    pub log: Vec<EpochLog>,
    /// Set when a batch produced a non-finite loss; `model` then holds the
    /// parameters from the end of the last completed epoch.
    pub diverged: Option<Diverged>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diverged {
    pub epoch: usize,
    pub loss: f64,
}

impl From<Diverged> for HienError {
    fn from(d: Diverged) -> Self {
        HienError::Divergence {
            epoch: d.epoch,
            loss: d.loss,
        }
    }
}

/// Scores `data` with the evaluation graph.
pub fn evaluate_model(model: &HienModel, data: &Dataset, chunk: usize, threads: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(HienError::EmptyInput("evaluation set"));
    }
    let frozen = model.freeze()?;
    let p = model.predict_frozen(&frozen, &data.samples, chunk, threads)?;
    evaluate(&p, &data.labels())
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains a fresh model on `train`, evaluating on `test` after each epoch.
/// `test` also contributes attribute metadata to the forests.
pub fn train(cfg: &TrainConfig, train: &Dataset, test: &Dataset, threads: usize) -> Result<TrainRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HienError::EmptyInput("training set"));
    }
    let mut model = HienModel::new(&train.schema, &cfg.model, train, &[test])?;
    let sparse = {
        let ids = model.sparse_params();
        (0..model.params.len()).map(|i| ids.iter().any(|p| p.0 == i)).collect::<Vec<_>>()
    };
    let mut state = AdagradState::new(&model.params);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let good = model.params.clone();
        let lists = model.graph.sample_neighbors(cfg.model.neighbor_cap, cfg.model.seed, epoch as u64);
        let mut loss_sum = 0.0;
        for batch in batches(&train.samples, cfg.batch_size, Some(shuffle_seed(cfg.model.seed, epoch))) {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let (data_loss, total) = match model.batch_loss(&mut tape, &bound, &batch, &lists, 0.0) {
                Ok((l, _)) => (Some(l), tape.value(l).item() + cfg.l2 * model.params.squared_norm()),
                Err(HienError::Numeric(msg)) => {
                    log::error!("epoch {epoch}: {msg}");
                    (None, f64::NAN)
                }
                Err(e) => return Err(e),
            };
            let data_loss = match data_loss {
                Some(l) if total.is_finite() => l,
                _ => {
                    log::error!("epoch {epoch}: non-finite loss {total}, restoring last good parameters");
                    model.params = good;
                    return Ok(TrainRun {
                        model,
                        log,
                        diverged: Some(Diverged { epoch, loss: total }),
                    });
                }
            };
            loss_sum += total * batch.len() as f64;
            let mut g = tape.backward(data_loss)?;
            let mut grads: Vec<Tensor> = bound
                .vars
                .iter()
                .map(|&v| g.take(v).ok_or(HienError::Tape("missing adjoint".into())))
                .collect::<Result<_>>()?;
            add_l2_grad(&mut grads, &model.params, &sparse, cfg.l2);
            clip_global_norm(&mut grads, cfg.clip_norm);
            adagrad_step(&mut model.params, &grads, &mut state, cfg.lr)?;
        }
        let eval = match evaluate_model(&model, test, cfg.test_batch_size, threads) {
            Err(HienError::Numeric(msg)) => {
                log::error!("epoch {epoch}: evaluation failed ({msg}), restoring last good parameters");
                model.params = good;
                return Ok(TrainRun {
                    model,
                    log,
                    diverged: Some(Diverged { epoch, loss: f64::NAN }),
                });
            }
            r => r?,
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_logloss: eval.logloss,
            test_auc: eval.auc,
        };
        log::info!(
            "epoch {epoch}: train_loss={:.5} test_logloss={:.5} test_auc={:.5}",
            entry.train_loss,
            entry.test_logloss,
            entry.test_auc
        );
        log.push(entry);
    }
    Ok(TrainRun {
        model,
        log,
        diverged: None,
    })
}
