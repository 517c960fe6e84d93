//! Embedding lookup, the feature embedding gate, MLP layers and the hidden gate.
//!
//! Feature embedding gate, per field `i`:
//!
//! ```text
//! g_i  = act(W_i^T e_i)        W_i: k x 1 (vector-wise) or k x k (bit-wise)
//! ge_i = e_i * g_i             scalar g_i broadcasts over the embedding
//! ```
//!
//! Hidden gate on a layer output `a` (after the layer's own activation):
//!
//! ```text
//! g = a * act_g(W_g a)         W_g: m x m
//! ```
//!
//! Backward functions take the activation only for its derivative, which is
//! what lets the model swap in a deliberately wrong derivative for gradient
//! check negative controls.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{
    activation, activation_backward, dense_affine, dense_affine_backward, hadamard, Activation,
    InitScheme, Tensor, TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("field {field}: feature index {index} out of range for cardinality {cardinality}")]
    IndexOutOfRange {
        field: usize,
        index: u32,
        cardinality: usize,
    },
    #[error("expected {expected} fields, got {found}")]
    FieldCount { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    /// One scalar gate per field.
    VectorWise,
    /// One gate value per embedding coordinate.
    BitWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sharing {
    FieldPrivate,
    FieldShared,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::VectorWise => "vector",
            Granularity::BitWise => "bit",
        }
    }
}

impl Sharing {
    pub fn name(self) -> &'static str {
        match self {
            Sharing::FieldPrivate => "private",
            Sharing::FieldShared => "shared",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vector" | "vector_wise" | "vec" => Ok(Granularity::VectorWise),
            "bit" | "bit_wise" => Ok(Granularity::BitWise),
            other => Err(format!("unknown gate granularity '{other}': expected vector or bit")),
        }
    }
}

impl FromStr for Sharing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "private" | "field_private" => Ok(Sharing::FieldPrivate),
            "shared" | "share" | "field_shared" => Ok(Sharing::FieldShared),
            other => Err(format!("unknown gate sharing '{other}': expected private or shared")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateConfig {
    pub granularity: Granularity,
    pub sharing: Sharing,
    pub activation: Activation,
    /// Adds a bias to the gate pre-activation. Off by default.
    pub bias: bool,
    pub init: InitScheme,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            granularity: Granularity::VectorWise,
            sharing: Sharing::FieldPrivate,
            activation: Activation::Sigmoid,
            bias: false,
            init: InitScheme::GlorotUniform,
        }
    }
}

impl GateConfig {
    /// Length of each gate value: 1 or `k`.
    pub fn gate_width(&self, k: usize) -> usize {
        match self.granularity {
            Granularity::VectorWise => 1,
            Granularity::BitWise => k,
        }
    }

    pub fn weight_shape(&self, k: usize) -> [usize; 2] {
        [k, self.gate_width(k)]
    }

    /// Number of distinct gate weight matrices for `f` fields.
    pub fn matrix_count(&self, f: usize) -> usize {
        match self.sharing {
            Sharing::FieldPrivate => f,
            Sharing::FieldShared => 1,
        }
    }

    /// Gate weight count, excluding the optional bias.
    pub fn param_count(&self, f: usize, k: usize) -> usize {
        let [r, c] = self.weight_shape(k);
        self.matrix_count(f) * r * c
    }

    /// Which weight matrix serves field `i`.
    pub fn matrix_for(&self, field: usize) -> usize {
        match self.sharing {
            Sharing::FieldPrivate => field,
            Sharing::FieldShared => 0,
        }
    }
}

/// Copies the selected row of each field's table.
pub fn embed_lookup(indices: &[u32], tables: &[&Tensor]) -> Result<Vec<Tensor>> {
    if indices.len() != tables.len() {
        return Err(GateError::FieldCount {
            expected: tables.len(),
            found: indices.len(),
        });
    }
    indices
        .iter()
        .zip(tables)
        .enumerate()
        .map(|(field, (&idx, table))| {
            if idx as usize >= table.rows() {
                return Err(GateError::IndexOutOfRange {
                    field,
                    index: idx,
                    cardinality: table.rows(),
                });
            }
            Ok(Tensor::vector(table.row(idx as usize).to_vec()))
        })
        .collect()
}

/// Scatter-adds `de_i` into row `indices[i]` of each table gradient.
pub fn embed_lookup_backward(indices: &[u32], de: &[Tensor], table_grads: &mut [&mut Tensor]) {
    for ((idx, d), g) in indices.iter().zip(de).zip(table_grads.iter_mut()) {
        for (t, v) in g.row_mut(*idx as usize).iter_mut().zip(d.data()) {
            *t += v;
        }
    }
}

/// Pre-activation and value of one field's gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateValue {
    pub pre: Tensor,
    pub gate: Tensor,
}

/// `g = act(W^T e (+ b))` with `W` of shape `k x m`; `g` has length `m`.
pub fn gate_value(e: &Tensor, w: &Tensor, b: Option<&Tensor>, act: Activation) -> Result<GateValue> {
    let k = e.len();
    if w.shape().len() != 2 || w.rows() != k {
        return Err(TensorError::ShapeMismatch {
            op: "gate_value",
            left: w.shape().to_vec(),
            right: e.shape().to_vec(),
        }
        .into());
    }
    let m = w.cols();
    let mut pre = vec![0.0; m];
    for (r, &er) in e.data().iter().enumerate() {
        for (p, wv) in pre.iter_mut().zip(w.row(r)) {
            *p += wv * er;
        }
    }
    if let Some(b) = b {
        if b.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "gate_value",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            }
            .into());
        }
        for (p, bv) in pre.iter_mut().zip(b.data()) {
            *p += bv;
        }
    }
    let pre = Tensor::vector(pre);
    let gate = activation(&pre, act)?;
    Ok(GateValue { pre, gate })
}

/// Given `d_gate`, accumulates into `dw` (and `db`) and returns the gradient
/// reaching `e` through the gate.
pub fn gate_value_backward(
    e: &Tensor,
    w: &Tensor,
    value: &GateValue,
    act: Activation,
    d_gate: &Tensor,
    dw: &mut Tensor,
    db: Option<&mut Tensor>,
) -> Tensor {
    let dpre = activation_backward(&value.pre, &value.gate, act, d_gate);
    if let Some(db) = db {
        for (b, d) in db.data_mut().iter_mut().zip(dpre.data()) {
            *b += d;
        }
    }
    let mut de = vec![0.0; e.len()];
    for (r, &er) in e.data().iter().enumerate() {
        let wrow = w.row(r);
        let dwrow = dw.row_mut(r);
        let mut acc = 0.0;
        for j in 0..dpre.len() {
            let d = dpre.data()[j];
            dwrow[j] += d * er;
            acc += wrow[j] * d;
        }
        de[r] = acc;
    }
    Tensor::vector(de)
}

/// Gated embeddings and the gate values needed for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGateOutput {
    pub gated: Vec<Tensor>,
    pub gates: Vec<GateValue>,
}

/// Applies the gate to every field. `weights` (and `biases`, if any) hold
/// one entry per field for field-private gates or a single shared entry.
pub fn feature_gate_forward(
    embeddings: &[Tensor],
    weights: &[&Tensor],
    biases: Option<&[&Tensor]>,
    config: &GateConfig,
) -> Result<FeatureGateOutput> {
    let expected = config.matrix_count(embeddings.len());
    if weights.len() != expected {
        return Err(GateError::FieldCount {
            expected,
            found: weights.len(),
        });
    }
    let mut gated = Vec::with_capacity(embeddings.len());
    let mut gates = Vec::with_capacity(embeddings.len());
    for (i, e) in embeddings.iter().enumerate() {
        let m = config.matrix_for(i);
        let value = gate_value(e, weights[m], biases.map(|b| b[m]), config.activation)?;
        gated.push(hadamard(e, &value.gate)?);
        gates.push(value);
    }
    Ok(FeatureGateOutput { gated, gates })
}

/// Returns `dE` given `dGE`. The embedding gradient has two parts: the direct
/// path `dge * g` and the path through the gate pre-activation.
#[allow(clippy::too_many_arguments)]
pub fn feature_gate_backward(
    embeddings: &[Tensor],
    weights: &[&Tensor],
    out: &FeatureGateOutput,
    d_gated: &[Tensor],
    derivative_of: Activation,
    weight_grads: &mut [&mut Tensor],
    mut bias_grads: Option<&mut [&mut Tensor]>,
    config: &GateConfig,
) -> Vec<Tensor> {
    embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let gate = &out.gates[i].gate;
            let dge = &d_gated[i];
            let (mut de, d_gate) = if gate.len() == 1 {
                let g = gate.data()[0];
                let de: Vec<f64> = dge.data().iter().map(|d| d * g).collect();
                let dg: f64 = dge.data().iter().zip(e.data()).map(|(d, x)| d * x).sum();
                (de, Tensor::scalar(dg))
            } else {
                let de = dge.data().iter().zip(gate.data()).map(|(d, g)| d * g).collect();
                let dg = dge.data().iter().zip(e.data()).map(|(d, x)| d * x).collect();
                (de, Tensor::vector(dg))
            };
            let m = config.matrix_for(i);
            let db = bias_grads.as_deref_mut().map(|b| &mut *b[m]);
            let through_gate = gate_value_backward(
                e,
                weights[m],
                &out.gates[i],
                derivative_of,
                &d_gate,
                weight_grads[m],
                db,
            );
            for (d, t) in de.iter_mut().zip(through_gate.data()) {
                *d += t;
            }
            Tensor::vector(de)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub pre: Tensor,
    pub out: Tensor,
}

/// `a = act(W a_prev + b)`.
pub fn mlp_layer_forward(a_prev: &Tensor, w: &Tensor, b: &Tensor, act: Activation) -> Result<LayerOutput> {
    let pre = dense_affine(a_prev, w, b)?;
    let out = activation(&pre, act)?;
    Ok(LayerOutput { pre, out })
}

#[allow(clippy::too_many_arguments)]
pub fn mlp_layer_backward(
    a_prev: &Tensor,
    w: &Tensor,
    layer: &LayerOutput,
    derivative_of: Activation,
    d_out: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let dpre = activation_backward(&layer.pre, &layer.out, derivative_of, d_out);
    dense_affine_backward(a_prev, w, &dpre, dw, db)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGateOutput {
    /// `W_g a`
    pub pre: Tensor,
    /// `act_g(W_g a)`
    pub gate: Tensor,
    /// `a * gate`
    pub out: Tensor,
}

pub fn hidden_gate_forward(a: &Tensor, w_g: &Tensor, act: Activation) -> Result<HiddenGateOutput> {
    let m = a.len();
    if w_g.shape() != [m, m] {
        return Err(TensorError::ShapeMismatch {
            op: "hidden_gate",
            left: w_g.shape().to_vec(),
            right: a.shape().to_vec(),
        }
        .into());
    }
    let pre = dense_affine(a, w_g, &Tensor::zeros(&[m]))?;
    let gate = activation(&pre, act)?;
    let out = hadamard(a, &gate)?;
    Ok(HiddenGateOutput { pre, gate, out })
}

/// Accumulates into `dw_g` and returns `da` (direct path plus gate path).
pub fn hidden_gate_backward(
    a: &Tensor,
    w_g: &Tensor,
    value: &HiddenGateOutput,
    derivative_of: Activation,
    d_out: &Tensor,
    dw_g: &mut Tensor,
) -> Tensor {
    let m = a.len();
    let d_gate: Vec<f64> = d_out.data().iter().zip(a.data()).map(|(d, x)| d * x).collect();
    let dpre = activation_backward(&value.pre, &value.gate, derivative_of, &Tensor::vector(d_gate));
    let mut scratch_b = Tensor::zeros(&[m]);
    let through_gate = dense_affine_backward(a, w_g, &dpre, dw_g, &mut scratch_b);
    let data = d_out
        .data()
        .iter()
        .zip(value.gate.data())
        .zip(through_gate.data())
        .map(|((d, g), t)| d * g + t)
        .collect();
    Tensor::vector(data)
}
