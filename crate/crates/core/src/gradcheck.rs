//! Central finite differences, used as an independent check on every
//! hand-written backward rule.

use std::fmt;

use thiserror::Error;

use crate::data::EncodedInstance;
use crate::gates::GateConfig;
use crate::model::{Family, HiddenGateConfig, Model, ModelError, ModelSpec, Parameterized};
use crate::tensor::{Rng, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Minimum distance of any ReLU pre-activation from its kink.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("no parameter named '{0}'")]
    UnknownParam(String),
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error("loss is not finite while probing '{path}' coordinate {index}")]
    NonFiniteLoss { path: String, index: usize },
    #[error("no parameter draw was away from ReLU kinks and round-off after {0} tries")]
    KinkAvoidance(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, GradCheckError>;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(L(theta + h e_i) - L(theta - h e_i)) / 2h` for every coordinate of
/// `path`. Each coordinate is restored to its original bits afterwards.
pub fn finite_diff<T, F>(target: &mut T, path: &str, step: f64, mut loss: F) -> Result<Tensor>
where
    T: Parameterized,
    F: FnMut(&T) -> std::result::Result<f64, ModelError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(GradCheckError::BadStep(step));
    }
    let id = target
        .params()
        .id(path)
        .ok_or_else(|| GradCheckError::UnknownParam(path.to_string()))?;
    let shape = target.params().value(id).shape().to_vec();
    let n = target.params().value(id).len();
    let mut grad = Tensor::zeros(&shape);
    for i in 0..n {
        let original = target.params().value(id).data()[i];
        target.params_mut().value_mut(id).data_mut()[i] = original + step;
        let plus = loss(target);
        target.params_mut().value_mut(id).data_mut()[i] = original - step;
        let minus = loss(target);
        target.params_mut().value_mut(id).data_mut()[i] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFiniteLoss {
                path: path.to_string(),
                index: i,
            });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub argmax: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

pub fn compare(name: &str, analytic: &Tensor, numeric: &Tensor, tolerance: f64) -> TensorCheck {
    let mut worst = (0.0, 0, 0.0, 0.0);
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = relative_error(a, n);
        if e > worst.0 || i == 0 {
            worst = (e, i, a, n);
        }
    }
    TensorCheck {
        name: name.to_string(),
        max_rel_error: worst.0,
        argmax: worst.1,
        analytic: worst.2,
        numeric: worst.3,
        passed: worst.0 <= tolerance,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub label: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect()
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check: {} (tolerance {:e})", self.label, self.tolerance)?;
        writeln!(
            f,
            "{:<20} {:>12} {:>8} {:>14} {:>14}  status",
            "tensor", "max_rel_err", "at", "analytic", "numeric"
        )?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<20} {:>12.3e} {:>8} {:>14.6e} {:>14.6e}  {}",
                t.name,
                t.max_rel_error,
                t.argmax,
                t.analytic,
                t.numeric,
                if t.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn dropout_stream(spec: &ModelSpec, seed: u64) -> Option<Rng> {
    (spec.family.has_deep() && spec.dropout > 0.0).then(|| Rng::new(seed))
}

/// Analytic vs numeric gradients of the mean batch loss for every tensor.
/// Dropout masks are made reproducible by reseeding before each loss
/// evaluation.
pub fn check_model(
    model: &mut Model,
    batch: &[&EncodedInstance],
    dropout_seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradReport> {
    let spec = model.spec().clone();
    let rng = || dropout_stream(&spec, dropout_seed);

    model.params_mut().zero_grads();
    model.accumulate_gradients(batch, rng().as_mut())?;
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for name in names {
        let analytic = model.params().grad_of(&name).expect("registered").clone();
        let numeric = finite_diff(model, &name, step, |m| m.batch_loss(batch, rng().as_mut()))?;
        tensors.push(compare(&name, &analytic, &numeric, tolerance));
    }
    model.params_mut().zero_grads();
    Ok(GradReport {
        label: model.spec().label(),
        tolerance,
        tensors,
    })
}

/// The small configuration used for gradient checks: three fields of
/// cardinality 5, `k = 4`, two hidden layers of width 8.
pub fn tiny_spec(family: Family, embed_gate: Option<GateConfig>, hidden_gate: Option<HiddenGateConfig>) -> ModelSpec {
    ModelSpec {
        embedding_dim: 4,
        hidden_widths: vec![8, 8],
        embed_gate,
        hidden_gate,
        ..ModelSpec::new(family, &[5, 5, 5])
    }
}

/// Random instances over `cardinalities`, balanced labels.
pub fn random_batch(cardinalities: &[usize], n: usize, seed: u64) -> Vec<EncodedInstance> {
    let mut rng = Rng::derive(seed, "gradcheck.batch");
    (0..n)
        .map(|i| EncodedInstance {
            indices: cardinalities.iter().map(|&c| rng.below(c) as u32).collect(),
            label: (i % 2) as u8,
        })
        .collect()
}

/// Half-width of the uniform noise added to every parameter before a check.
/// Zero-initialized biases and FM weights would otherwise leave units sitting
/// exactly on a kink whenever dropout clears a layer's input.
pub const PERTURBATION: f64 = 0.1;

pub fn perturb(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = Rng::derive(seed, "gradcheck.perturb");
    let params = model.params_mut();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.value_mut(id).data_mut() {
            *v += rng.uniform(-scale, scale);
        }
    }
}

/// Smallest nonzero gradient magnitude a central difference can resolve to
/// within `tolerance`, given a loss of magnitude `loss`: one ulp of the loss
/// spread over `2 * step`.
pub fn resolution_floor(loss: f64, step: f64, tolerance: f64) -> f64 {
    f64::EPSILON * loss.abs().max(1.0) / (2.0 * step) / tolerance
}

/// Builds a model from `spec` at a randomly perturbed parameter point,
/// redrawing until the point is fit for a finite-difference check:
///
/// * no ReLU pre-activation over `batch` sits within [`KINK_MARGIN`] of zero;
/// * no analytic gradient coordinate is nonzero yet below
///   [`resolution_floor`], where the numeric side is pure round-off.
///
/// `dropout_seed` must be the one later given to [`check_model`].
pub fn model_away_from_kinks(spec: &ModelSpec, batch: &[EncodedInstance], seed: u64, dropout_seed: u64) -> Result<Model> {
    const TRIES: usize = 200;
    let refs: Vec<&EncodedInstance> = batch.iter().collect();
    for attempt in 0..TRIES as u64 {
        let mut model = Model::new(spec.clone(), seed.wrapping_add(attempt))?;
        perturb(&mut model, seed.wrapping_add(attempt), PERTURBATION);
        let mut rng = dropout_stream(spec, dropout_seed);
        let mut nearest = f64::INFINITY;
        for inst in batch {
            for d in model.kink_distances(&inst.indices, rng.as_mut())? {
                nearest = nearest.min(d);
            }
        }
        if nearest < KINK_MARGIN {
            continue;
        }
        let loss = model.accumulate_gradients(&refs, dropout_stream(spec, dropout_seed).as_mut())?;
        let floor = resolution_floor(loss, DEFAULT_STEP, DEFAULT_TOLERANCE);
        let resolvable = model
            .params()
            .iter()
            .all(|(_, _, g)| g.data().iter().all(|&v| v == 0.0 || v.abs() >= floor));
        model.params_mut().zero_grads();
        if resolvable {
            return Ok(model);
        }
    }
    Err(GradCheckError::KinkAvoidance(TRIES))
}

/// Runs the full check on the tiny configuration of `spec`'s family and gates.
pub fn check_tiny(spec: &ModelSpec, seed: u64) -> Result<GradReport> {
    let batch = random_batch(&spec.cardinalities(), 8, seed);
    let refs: Vec<&EncodedInstance> = batch.iter().collect();
    let dropout_seed = seed ^ 0x5eed;
    let mut model = model_away_from_kinks(spec, &batch, seed, dropout_seed)?;
    check_model(&mut model, &refs, dropout_seed, DEFAULT_STEP, DEFAULT_TOLERANCE)
}
