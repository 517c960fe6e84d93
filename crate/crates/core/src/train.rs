//! Adam and the minibatch training loop.

use std::time::Instant;

use thiserror::Error;

use crate::data::{batches, DataError, Dataset};
use crate::metrics::{AucDisplay, EvalResult, MetricError};
use crate::model::{predict, Model, ModelError, ModelSpec, Parameterized};
use crate::params::ParamStore;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in '{0}'")]
    NonFiniteGradient(String),
    #[error("non-finite training loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("optimizer state does not match the parameter layout")]
    StateMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter tensor, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, v, _)| Tensor::zeros(v.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, p, _), (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// One bias-corrected Adam update from the current gradients, which are
/// zeroed afterwards. Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if !state.matches(params) {
        return Err(TrainError::StateMismatch);
    }
    if let Some((name, _, _)) = params.iter().find(|(_, _, g)| !g.all_finite()) {
        return Err(TrainError::NonFiniteGradient(name.to_string()));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    {
        let (values, grads) = params.split_for_update();
        for (((p, g), m), v) in values.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    params.zero_grads();
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after this many epochs without improvement of the monitored
    /// logloss (validation set if present, else test set).
    pub early_stop_patience: Option<usize>,
    /// Record wall time per epoch; when false the report's `seconds` column is 0.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 1000,
            adam: AdamConfig::default(),
            seed: 42,
            early_stop_patience: None,
            record_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_auc: Option<f64>,
    pub test_logloss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

pub const REPORT_HEADER: &str = "epoch,train_loss,test_auc,test_logloss,seconds";

impl TrainReport {
    pub fn csv_row(e: &EpochReport) -> String {
        format!(
            "{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            AucDisplay(e.test_auc),
            e.test_logloss,
            e.seconds
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&Self::csv_row(e));
            s.push('\n');
        }
        s
    }

    pub fn last(&self) -> Option<&EpochReport> {
        self.epochs.last()
    }
}

/// Train/test (and optional validation) partitions.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub valid: Option<Dataset>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Model,
    pub adam: AdamState,
}

pub fn predict_dataset(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    data.instances
        .iter()
        .map(|i| Ok(predict(model.logit(&i.indices)?)))
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalResult> {
    let preds = predict_dataset(model, data)?;
    Ok(EvalResult::from_predictions(&preds, &data.labels())?)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Shuffle, forward, cross-entropy, backward and Adam for every batch of
/// every epoch, evaluating on the test split after each epoch.
pub fn train(spec: &ModelSpec, splits: &Splits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(spec, splits, cfg, |_| {})
}

pub fn train_with_progress<F: FnMut(&EpochReport)>(
    spec: &ModelSpec,
    splits: &Splits,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    if splits.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut model = Model::new(spec.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.params(), cfg.adam);
    let mut dropout_rng = Rng::derive(cfg.seed, "dropout");
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in batches(&splits.train, cfg.batch_size, epoch_seed(cfg.seed, epoch))?
            .iter()
            .enumerate()
        {
            let loss = model.accumulate_gradients(&batch.instances, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            adam_step(model.params_mut(), &mut adam)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let test = evaluate(&model, &splits.test)?;
        let seconds = if cfg.record_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let row = EpochReport {
            epoch,
            train_loss: loss_sum / seen as f64,
            test_auc: test.auc,
            test_logloss: test.logloss,
            seconds,
        };
        on_epoch(&row);
        report.epochs.push(row);

        if let Some(patience) = cfg.early_stop_patience {
            let monitored = match &splits.valid {
                Some(v) => evaluate(&model, v)?.logloss,
                None => test.logloss,
            };
            if monitored < best {
                best = monitored;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome { report, model, adam })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        s.split_for_backward().1[id.index()].fill(grad);
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = one_param(1.0);
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&s, cfg);
        let before = s.get("w").unwrap().clone();
        adam_step(&mut s, &mut st).unwrap();
        for (a, b) in before.data().iter().zip(s.get("w").unwrap().data()) {
            assert!(((a - b) - 1e-3).abs() < 1e-6 * 1e-3 + 1e-12);
        }
        assert_eq!(st.step, 1);
        assert!(s.grad_of("w").unwrap().data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_gradient_and_zero_rate_are_no_ops() {
        let mut s = one_param(0.0);
        let before = s.clone();
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get("w"), before.get("w"));

        let mut s = one_param(0.7);
        let before = s.get("w").unwrap().clone();
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                learning_rate: 0.0,
                ..AdamConfig::default()
            },
        );
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get("w").unwrap(), &before);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = one_param(f64::NAN);
        let before = s.get("w").unwrap().clone();
        let mut st = AdamState::new(&s, AdamConfig::default());
        match adam_step(&mut s, &mut st) {
            Err(TrainError::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.get("w").unwrap(), &before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn report_csv_layout() {
        let r = TrainReport {
            epochs: vec![EpochReport {
                epoch: 1,
                train_loss: 0.5,
                test_auc: None,
                test_logloss: 0.25,
                seconds: 0.0,
            }],
        };
        assert_eq!(r.to_csv(), "epoch,train_loss,test_auc,test_logloss,seconds\n1,0.5,undefined,0.25,0\n");
    }
}
