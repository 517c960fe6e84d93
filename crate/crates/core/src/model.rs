//! FM, DNN and DeepFM compositions with optional embedding and hidden gates.
//!
//! Every family shares one embedding table per field. FM adds a global
//! bias, first-order weights and pairwise dot products of the (gated)
//! embeddings. DNN flattens the (gated) embeddings into an MLP whose last
//! layer feeds a single-unit affine output. DeepFM sums the two logits before
//! a single sigmoid.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::EncodedInstance;
use crate::gates::{
    embed_lookup, embed_lookup_backward, feature_gate_backward, feature_gate_forward, hidden_gate_backward,
    hidden_gate_forward, mlp_layer_backward, mlp_layer_forward, FeatureGateOutput, GateConfig, GateError,
    Granularity, HiddenGateOutput, LayerOutput, Sharing,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    dense_affine, dense_affine_backward, dropout, dropout_backward, init_tensor, sigmoid, Activation,
    DropoutMask, InitScheme, Rng, Tensor, TensorError,
};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("cannot parse model spec line {line}: {msg}")]
    ParseSpec { line: usize, msg: String },
    #[error("loss needs at least one prediction")]
    EmptyLoss,
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("{0} is not part of this model family")]
    MissingComponent(&'static str),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Fm,
    Dnn,
    DeepFm,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Fm => "fm",
            Family::Dnn => "dnn",
            Family::DeepFm => "deepfm",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Family::Fm => "FM",
            Family::Dnn => "DNN",
            Family::DeepFm => "DeepFM",
        }
    }

    pub fn has_fm(self) -> bool {
        matches!(self, Family::Fm | Family::DeepFm)
    }

    pub fn has_deep(self) -> bool {
        matches!(self, Family::Dnn | Family::DeepFm)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fm" => Ok(Family::Fm),
            "dnn" => Ok(Family::Dnn),
            "deepfm" => Ok(Family::DeepFm),
            other => Err(format!("unknown model family '{other}': expected fm, dnn or deepfm")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HiddenGateConfig {
    pub activation: Activation,
    pub init: InitScheme,
}

impl Default for HiddenGateConfig {
    fn default() -> Self {
        HiddenGateConfig {
            activation: Activation::Tanh,
            init: InitScheme::GlorotUniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDim {
    pub name: String,
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub embedding_dim: usize,
    pub fields: Vec<FieldDim>,
    pub hidden_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub dropout: f64,
    pub embed_gate: Option<GateConfig>,
    pub hidden_gate: Option<HiddenGateConfig>,
}

impl ModelSpec {
    /// Ungated model with the usual defaults (k = 10, 3 x 400 ReLU, dropout 0.5).
    pub fn new(family: Family, cardinalities: &[usize]) -> Self {
        ModelSpec {
            family,
            embedding_dim: 10,
            fields: cardinalities
                .iter()
                .enumerate()
                .map(|(i, &c)| FieldDim {
                    name: format!("c{i}"),
                    cardinality: c,
                })
                .collect(),
            hidden_widths: vec![400, 400, 400],
            hidden_activation: Activation::Relu,
            dropout: 0.5,
            embed_gate: None,
            hidden_gate: None,
        }
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.cardinality).collect()
    }

    /// Hidden widths actually used; FM has none.
    pub fn effective_widths(&self) -> &[usize] {
        if self.family.has_deep() {
            &self.hidden_widths
        } else {
            &[]
        }
    }

    pub fn uses_hidden_gate(&self) -> bool {
        self.family.has_deep() && self.hidden_gate.is_some()
    }

    /// Table-style name: family plus `_e`, `_h` or `_e+h`.
    pub fn label(&self) -> String {
        let mut s = self.family.label().to_string();
        match (self.embed_gate.is_some(), self.uses_hidden_gate()) {
            (true, true) => s.push_str("_e+h"),
            (true, false) => s.push_str("_e"),
            (false, true) => s.push_str("_h"),
            (false, false) => {}
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be at least 1".into());
        }
        if self.fields.is_empty() {
            return bad("at least one field is required".into());
        }
        for f in &self.fields {
            if f.cardinality == 0 {
                return bad(format!("field '{}' has cardinality 0", f.name));
            }
            if f.name.is_empty() || f.name.contains([',', ':', '=', '\n', '\t']) {
                return bad(format!("field name {:?} is empty or contains a separator", f.name));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.family.has_deep() {
            if self.hidden_widths.contains(&0) {
                return bad("hidden widths must be positive".into());
            }
            if self.hidden_gate.is_some() && self.hidden_widths.is_empty() {
                return bad("the hidden gate needs at least one hidden layer".into());
            }
        }
        Ok(())
    }

    /// Stable `key=value` text, one key per line.
    pub fn to_canonical(&self) -> String {
        let mut lines = vec![
            format!("family={}", self.family),
            format!("embedding_dim={}", self.embedding_dim),
            format!(
                "fields={}",
                self.fields
                    .iter()
                    .map(|f| format!("{}:{}", f.name, f.cardinality))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!(
                "hidden_widths={}",
                self.hidden_widths.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            ),
            format!("hidden_activation={}", self.hidden_activation),
            format!("dropout={}", self.dropout),
        ];
        match &self.embed_gate {
            None => lines.push("embed_gate=false".into()),
            Some(g) => {
                lines.push("embed_gate=true".into());
                lines.push(format!("embed_gate_granularity={}", g.granularity));
                lines.push(format!("embed_gate_sharing={}", g.sharing));
                lines.push(format!("embed_gate_activation={}", g.activation));
                lines.push(format!("embed_gate_bias={}", g.bias));
                lines.push(format!("embed_gate_init={}", g.init.name()));
            }
        }
        match &self.hidden_gate {
            None => lines.push("hidden_gate=false".into()),
            Some(h) => {
                lines.push("hidden_gate=true".into());
                lines.push(format!("hidden_gate_activation={}", h.activation));
                lines.push(format!("hidden_gate_init={}", h.init.name()));
            }
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ModelError::ParseSpec {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            map.get(k).cloned().ok_or_else(|| ModelError::ParseSpec {
                line: 0,
                msg: format!("missing key '{k}'"),
            })
        };
        let perr = |k: &str, e: String| ModelError::ParseSpec {
            line: 0,
            msg: format!("{k}: {e}"),
        };
        let family: Family = get("family")?.parse().map_err(|e| perr("family", e))?;
        let embedding_dim = get("embedding_dim")?
            .parse()
            .map_err(|_| perr("embedding_dim", "not an integer".into()))?;
        let fields = get("fields")?
            .split(',')
            .map(|f| {
                let (name, c) = f.rsplit_once(':').ok_or_else(|| perr("fields", format!("bad entry '{f}'")))?;
                let cardinality = c.parse().map_err(|_| perr("fields", format!("bad cardinality '{c}'")))?;
                Ok(FieldDim {
                    name: name.to_string(),
                    cardinality,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let widths_text = get("hidden_widths")?;
        let hidden_widths = if widths_text.is_empty() {
            Vec::new()
        } else {
            widths_text
                .split(',')
                .map(|w| w.parse().map_err(|_| perr("hidden_widths", format!("bad width '{w}'"))))
                .collect::<Result<Vec<_>>>()?
        };
        let act = |k: &str| -> Result<Activation> { get(k)?.parse().map_err(|e: crate::tensor::ParseActivationError| perr(k, e.to_string())) };
        let init = |k: &str| -> Result<InitScheme> { get(k)?.parse().map_err(|e| perr(k, e)) };
        let flag = |k: &str| -> Result<bool> { get(k)?.parse().map_err(|_| perr(k, "expected true or false".into())) };
        let dropout = get("dropout")?.parse().map_err(|_| perr("dropout", "not a number".into()))?;
        let embed_gate = if flag("embed_gate")? {
            Some(GateConfig {
                granularity: get("embed_gate_granularity")?
                    .parse::<Granularity>()
                    .map_err(|e| perr("embed_gate_granularity", e))?,
                sharing: get("embed_gate_sharing")?
                    .parse::<Sharing>()
                    .map_err(|e| perr("embed_gate_sharing", e))?,
                activation: act("embed_gate_activation")?,
                bias: flag("embed_gate_bias")?,
                init: init("embed_gate_init")?,
            })
        } else {
            None
        };
        let hidden_gate = if flag("hidden_gate")? {
            Some(HiddenGateConfig {
                activation: act("hidden_gate_activation")?,
                init: init("hidden_gate_init")?,
            })
        } else {
            None
        };
        let spec = ModelSpec {
            family,
            embedding_dim,
            fields,
            hidden_widths,
            hidden_activation: act("hidden_activation")?,
            dropout,
            embed_gate,
            hidden_gate,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Keys whose canonical values differ, as `key: ours != theirs`.
    pub fn diff(&self, other: &ModelSpec) -> Vec<String> {
        let parse = |s: String| -> BTreeMap<String, String> {
            s.lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        };
        let a = parse(self.to_canonical());
        let b = parse(other.to_canonical());
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| {
                format!(
                    "{k}: {} != {}",
                    a.get(k).map(String::as_str).unwrap_or("<absent>"),
                    b.get(k).map(String::as_str).unwrap_or("<absent>")
                )
            })
            .collect()
    }
}

/// Implemented by anything that owns trainable parameters.
pub trait Parameterized {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Parameterized for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Negative-control hooks that deliberately break a backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Gate backward passes treat the gate activation's derivative as 1.
    GateDerivativeIgnored,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct FmParams {
    linear: Vec<ParamId>,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct GateParams {
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Tensor,
    layer: LayerOutput,
    hidden_gate: Option<HiddenGateOutput>,
    mask: Option<DropoutMask>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    indices: Vec<u32>,
    embeddings: Vec<Tensor>,
    gate: Option<FeatureGateOutput>,
    fm_sum: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    last: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logit: f64,
    /// FM component logit, including the FM bias.
    pub fm_logit: Option<f64>,
    /// Deep component logit, including the output bias.
    pub deep_logit: Option<f64>,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    embed: Vec<ParamId>,
    fm: Option<FmParams>,
    gate: Option<GateParams>,
    layers: Vec<Dense>,
    hidden_gates: Vec<ParamId>,
    output: Option<Dense>,
    fault: Option<BackwardFault>,
}

impl Parameterized for Model {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

fn mut_refs<'a>(grads: &'a mut [Tensor], ids: &[ParamId]) -> Vec<&'a mut Tensor> {
    debug_assert!(ids.windows(2).all(|w| w[0].index() < w[1].index()));
    let mut out = Vec::with_capacity(ids.len());
    let mut want = ids.iter().peekable();
    for (i, g) in grads.iter_mut().enumerate() {
        match want.peek() {
            Some(id) if id.index() == i => {
                out.push(g);
                want.next();
            }
            Some(_) => {}
            None => break,
        }
    }
    out
}

fn pair_mut(grads: &mut [Tensor], a: ParamId, b: ParamId) -> (&mut Tensor, &mut Tensor) {
    let (i, j) = (a.index(), b.index());
    assert!(i < j);
    let (lo, hi) = grads.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

impl Model {
    /// Builds and initializes all parameters. Each tensor draws from its own
    /// stream derived from `(seed, name)`, so adding a gate leaves every
    /// other parameter's initial value unchanged.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let k = spec.embedding_dim;
        let f = spec.num_fields();
        let mut params = ParamStore::new();
        let mut add = |name: String, shape: &[usize], scheme: InitScheme| -> Result<ParamId> {
            let mut rng = Rng::derive(seed, &name);
            let t = init_tensor(shape, scheme, &mut rng)?;
            Ok(params.register(name, t).expect("parameter names are unique"))
        };

        let embed = spec
            .fields
            .iter()
            .enumerate()
            .map(|(i, fd)| add(format!("embed.field{i}"), &[fd.cardinality, k], InitScheme::GlorotUniform))
            .collect::<Result<Vec<_>>>()?;

        let fm = if spec.family.has_fm() {
            let linear = spec
                .fields
                .iter()
                .enumerate()
                .map(|(i, fd)| add(format!("fm.linear.field{i}"), &[fd.cardinality, 1], InitScheme::Zeros))
                .collect::<Result<Vec<_>>>()?;
            let bias = add("fm.bias".into(), &[1], InitScheme::Zeros)?;
            Some(FmParams { linear, bias })
        } else {
            None
        };

        let gate = match &spec.embed_gate {
            None => None,
            Some(cfg) => {
                let count = cfg.matrix_count(f);
                let shape = cfg.weight_shape(k);
                let name = |stem: &str, i: usize| match cfg.sharing {
                    Sharing::FieldPrivate => format!("gate.{stem}{i}"),
                    Sharing::FieldShared => format!("gate.{stem}"),
                };
                let weights = (0..count)
                    .map(|i| add(name("W", i), &shape, cfg.init))
                    .collect::<Result<Vec<_>>>()?;
                let biases = if cfg.bias {
                    (0..count)
                        .map(|i| add(name("b", i), &[shape[1]], InitScheme::Zeros))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    Vec::new()
                };
                Some(GateParams { weights, biases })
            }
        };

        let mut layers = Vec::new();
        let mut hidden_gates = Vec::new();
        let mut output = None;
        if spec.family.has_deep() {
            let mut width_in = f * k;
            for (l, &w) in spec.hidden_widths.iter().enumerate() {
                let l = l + 1;
                let wid = add(format!("mlp.l{l}.W"), &[w, width_in], InitScheme::GlorotUniform)?;
                let bid = add(format!("mlp.l{l}.b"), &[w], InitScheme::Zeros)?;
                layers.push(Dense { w: wid, b: bid });
                if let Some(h) = &spec.hidden_gate {
                    hidden_gates.push(add(format!("hgate.l{l}.W"), &[w, w], h.init)?);
                }
                width_in = w;
            }
            let w = add("out.W".into(), &[1, width_in], InitScheme::GlorotUniform)?;
            let b = add("out.b".into(), &[1], InitScheme::Zeros)?;
            output = Some(Dense { w, b });
        }

        Ok(Model {
            spec,
            params,
            embed,
            fm,
            gate,
            layers,
            hidden_gates,
            output,
            fault: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Replaces all parameters. Names and shapes must match exactly.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        let ours: Vec<(&str, &[usize])> = self.params.iter().map(|(n, v, _)| (n, v.shape())).collect();
        let theirs: Vec<(&str, &[usize])> = other.iter().map(|(n, v, _)| (n, v.shape())).collect();
        if ours != theirs {
            return Err(ModelError::InvalidSpec("parameter layout does not match the model".into()));
        }
        let values: Vec<Tensor> = other.iter().map(|(_, v, _)| v.clone()).collect();
        for (id, v) in self.params.ids().collect::<Vec<_>>().into_iter().zip(values) {
            *self.params.value_mut(id) = v;
        }
        Ok(())
    }

    /// Scalar count of the embedding-gate weights (biases excluded).
    pub fn gate_param_count(&self) -> usize {
        self.gate
            .as_ref()
            .map(|g| g.weights.iter().map(|id| self.params.value(*id).len()).sum())
            .unwrap_or(0)
    }

    #[doc(hidden)]
    pub fn set_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    fn gate_derivative(&self, act: Activation) -> Activation {
        match self.fault {
            Some(BackwardFault::GateDerivativeIgnored) => Activation::Linear,
            None => act,
        }
    }

    /// Full forward pass. Dropout is active only when `dropout_rng` is given.
    pub fn forward(&self, indices: &[u32], mut dropout_rng: Option<&mut Rng>) -> Result<Forward> {
        let p = &self.params;
        let tables: Vec<&Tensor> = self.embed.iter().map(|id| p.value(*id)).collect();
        let embeddings = embed_lookup(indices, &tables)?;

        let gate = match (&self.gate, &self.spec.embed_gate) {
            (Some(gp), Some(cfg)) => {
                let w: Vec<&Tensor> = gp.weights.iter().map(|id| p.value(*id)).collect();
                let b: Vec<&Tensor> = gp.biases.iter().map(|id| p.value(*id)).collect();
                let biases = if cfg.bias { Some(b.as_slice()) } else { None };
                Some(feature_gate_forward(&embeddings, &w, biases, cfg)?)
            }
            _ => None,
        };
        let gated: &[Tensor] = gate.as_ref().map(|g| g.gated.as_slice()).unwrap_or(&embeddings);

        let mut fm_logit = None;
        let mut fm_sum = None;
        if let Some(fm) = &self.fm {
            let mut z = p.value(fm.bias).data()[0];
            for (id, &idx) in fm.linear.iter().zip(indices) {
                z += p.value(*id).data()[idx as usize];
            }
            let (pairs, sum) = fm_interaction(gated);
            z += pairs;
            if !z.is_finite() {
                return Err(TensorError::NonFinite { op: "fm_forward" }.into());
            }
            fm_logit = Some(z);
            fm_sum = Some(sum);
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        let mut deep_logit = None;
        let mut last = None;
        if let Some(out) = &self.output {
            let mut a = Tensor::vector(gated.iter().flat_map(|g| g.data().iter().copied()).collect());
            for (l, dense) in self.layers.iter().enumerate() {
                let layer = mlp_layer_forward(&a, p.value(dense.w), p.value(dense.b), self.spec.hidden_activation)?;
                let hidden_gate = match (&self.spec.hidden_gate, self.hidden_gates.get(l)) {
                    (Some(h), Some(id)) => Some(hidden_gate_forward(&layer.out, p.value(*id), h.activation)?),
                    _ => None,
                };
                let post = hidden_gate.as_ref().map(|h| &h.out).unwrap_or(&layer.out);
                let (next, mask) = match dropout_rng.as_deref_mut() {
                    Some(rng) => dropout(post, self.spec.dropout, rng, true)?,
                    None => (post.clone(), None),
                };
                layers.push(LayerCache {
                    input: a,
                    layer,
                    hidden_gate,
                    mask,
                });
                a = next;
            }
            let z = dense_affine(&a, p.value(out.w), p.value(out.b))?.data()[0];
            deep_logit = Some(z);
            last = Some(a);
        }

        let logit = fm_logit.unwrap_or(0.0) + deep_logit.unwrap_or(0.0);
        Ok(Forward {
            logit,
            fm_logit,
            deep_logit,
            cache: ForwardCache {
                indices: indices.to_vec(),
                embeddings,
                gate,
                fm_sum,
                layers,
                last,
            },
        })
    }

    /// FM component logit (the whole logit for the FM family).
    pub fn fm_forward(&self, indices: &[u32]) -> Result<f64> {
        self.forward(indices, None)?
            .fm_logit
            .ok_or(ModelError::MissingComponent("the FM component"))
    }

    /// Deep component logit, including the output bias.
    pub fn dnn_forward(&self, indices: &[u32], dropout_rng: Option<&mut Rng>) -> Result<f64> {
        self.forward(indices, dropout_rng)?
            .deep_logit
            .ok_or(ModelError::MissingComponent("the deep component"))
    }

    /// Sum of the FM and deep logits sharing one embedding table.
    pub fn deepfm_forward(&self, indices: &[u32], dropout_rng: Option<&mut Rng>) -> Result<f64> {
        if self.spec.family != Family::DeepFm {
            return Err(ModelError::MissingComponent("DeepFM composition"));
        }
        Ok(self.forward(indices, dropout_rng)?.logit)
    }

    pub fn logit(&self, indices: &[u32]) -> Result<f64> {
        Ok(self.forward(indices, None)?.logit)
    }

    pub fn predict(&self, indices: &[u32]) -> Result<f64> {
        Ok(predict(self.logit(indices)?))
    }

    /// Accumulates `d logit / d theta * dlogit` into the gradient buffers.
    pub fn backward(&mut self, cache: &ForwardCache, dlogit: f64) {
        let k = self.spec.embedding_dim;
        let f = self.spec.num_fields();
        let gated: Vec<Tensor> = match &cache.gate {
            Some(g) => g.gated.clone(),
            None => cache.embeddings.clone(),
        };
        let mut d_gated: Vec<Vec<f64>> = vec![vec![0.0; k]; f];
        let hidden_act = self.spec.hidden_activation;
        let hidden_gate_act = self.spec.hidden_gate.map(|h| self.gate_derivative(h.activation));
        let embed_gate_act = self.spec.embed_gate.map(|g| self.gate_derivative(g.activation));
        let (values, grads) = self.params.split_for_backward();

        if let Some(fm) = &self.fm {
            grads[fm.bias.index()].data_mut()[0] += dlogit;
            for (id, &idx) in fm.linear.iter().zip(&cache.indices) {
                grads[id.index()].data_mut()[idx as usize] += dlogit;
            }
            let sum = cache.fm_sum.as_ref().expect("fm forward ran");
            for (d, ge) in d_gated.iter_mut().zip(&gated) {
                for ((dv, s), g) in d.iter_mut().zip(sum).zip(ge.data()) {
                    *dv += dlogit * (s - g);
                }
            }
        }

        if let Some(out) = &self.output {
            let last = cache.last.as_ref().expect("deep forward ran");
            let (dw, db) = pair_mut(grads, out.w, out.b);
            let mut d = dense_affine_backward(last, &values[out.w.index()], &Tensor::scalar(dlogit), dw, db);
            for (l, lc) in cache.layers.iter().enumerate().rev() {
                d = dropout_backward(lc.mask.as_ref(), d);
                if let (Some(hg), Some(id), Some(act)) = (&lc.hidden_gate, self.hidden_gates.get(l), hidden_gate_act) {
                    d = hidden_gate_backward(&lc.layer.out, &values[id.index()], hg, act, &d, &mut grads[id.index()]);
                }
                let dense = self.layers[l];
                let (dw, db) = pair_mut(grads, dense.w, dense.b);
                d = mlp_layer_backward(&lc.input, &values[dense.w.index()], &lc.layer, hidden_act, &d, dw, db);
            }
            for (i, chunk) in d.data().chunks(k).enumerate() {
                for (dv, c) in d_gated[i].iter_mut().zip(chunk) {
                    *dv += c;
                }
            }
        }

        let d_gated: Vec<Tensor> = d_gated.into_iter().map(Tensor::vector).collect();
        let d_embed = match (&self.gate, &cache.gate, &self.spec.embed_gate, embed_gate_act) {
            (Some(gp), Some(out), Some(cfg), Some(act)) => {
                let w: Vec<&Tensor> = gp.weights.iter().map(|id| &values[id.index()]).collect();
                let mut ids: Vec<ParamId> = gp.weights.clone();
                ids.extend(&gp.biases);
                let mut refs = mut_refs(grads, &ids);
                let (wg, bg) = refs.split_at_mut(gp.weights.len());
                let bg = if cfg.bias { Some(bg) } else { None };
                feature_gate_backward(&cache.embeddings, &w, out, &d_gated, act, wg, bg, cfg)
            }
            _ => d_gated,
        };
        let mut table_grads = mut_refs(grads, &self.embed);
        embed_lookup_backward(&cache.indices, &d_embed, &mut table_grads);
    }

    /// Mean cross-entropy over `batch`, without touching gradients.
    pub fn batch_loss(&self, batch: &[&EncodedInstance], mut dropout_rng: Option<&mut Rng>) -> Result<f64> {
        let mut preds = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for inst in batch {
            preds.push(predict(self.forward(&inst.indices, dropout_rng.as_deref_mut())?.logit));
            labels.push(inst.label);
        }
        cross_entropy(&preds, &labels)
    }

    /// Mean cross-entropy over `batch`; adds the gradient of that mean to the
    /// gradient buffers.
    pub fn accumulate_gradients(&mut self, batch: &[&EncodedInstance], mut dropout_rng: Option<&mut Rng>) -> Result<f64> {
        let n = batch.len() as f64;
        let mut preds = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for inst in batch {
            let fwd = self.forward(&inst.indices, dropout_rng.as_deref_mut())?;
            let p = predict(fwd.logit);
            let dlogit = if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                (p - f64::from(inst.label)) / n
            } else {
                0.0
            };
            self.backward(&fwd.cache, dlogit);
            preds.push(p);
            labels.push(inst.label);
        }
        cross_entropy(&preds, &labels)
    }

    /// Pre-activations of every kinked (ReLU) unit for `indices`, used to keep
    /// gradient checks away from non-differentiable points. Pass the same
    /// dropout stream the check will use, since masks shift later layers.
    pub fn kink_distances(&self, indices: &[u32], dropout_rng: Option<&mut Rng>) -> Result<Vec<f64>> {
        let fwd = self.forward(indices, dropout_rng)?;
        let mut out = Vec::new();
        if let (Some(cfg), Some(g)) = (&self.spec.embed_gate, &fwd.cache.gate) {
            if cfg.activation.has_kink() {
                out.extend(g.gates.iter().flat_map(|v| v.pre.data().iter().map(|z| z.abs())));
            }
        }
        for lc in &fwd.cache.layers {
            if self.spec.hidden_activation.has_kink() {
                out.extend(lc.layer.pre.data().iter().map(|z| z.abs()));
            }
            if let (Some(h), Some(hg)) = (&self.spec.hidden_gate, &lc.hidden_gate) {
                if h.activation.has_kink() {
                    out.extend(hg.pre.data().iter().map(|z| z.abs()));
                }
            }
        }
        Ok(out)
    }
}

/// Pairwise interaction `sum_{i<j} <v_i, v_j>` via
/// `0.5 * (|sum v|^2 - sum |v|^2)`; also returns `sum v`.
pub fn fm_interaction(vectors: &[Tensor]) -> (f64, Vec<f64>) {
    let k = vectors.first().map(Tensor::len).unwrap_or(0);
    let mut sum = vec![0.0; k];
    let mut sq = 0.0;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v.data()) {
            *s += x;
            sq += x * x;
        }
    }
    let total: f64 = sum.iter().map(|s| s * s).sum();
    (0.5 * (total - sq), sum)
}

/// Sigmoid, kept strictly inside (0, 1).
pub fn predict(logit: f64) -> f64 {
    sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Mean binary cross-entropy with predictions clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn cross_entropy(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(ModelError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(ModelError::EmptyLoss);
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(family: Family) -> ModelSpec {
        ModelSpec {
            embedding_dim: 4,
            hidden_widths: vec![8, 8],
            ..ModelSpec::new(family, &[5, 6, 7])
        }
    }

    #[test]
    fn spec_canonical_round_trip() {
        let mut s = tiny(Family::DeepFm);
        s.embed_gate = Some(GateConfig {
            granularity: Granularity::BitWise,
            bias: true,
            ..GateConfig::default()
        });
        s.hidden_gate = Some(HiddenGateConfig::default());
        let text = s.to_canonical();
        assert_eq!(ModelSpec::from_canonical(&text).unwrap(), s);
        let plain = tiny(Family::Fm);
        assert_eq!(ModelSpec::from_canonical(&plain.to_canonical()).unwrap(), plain);

        let diff = s.diff(&plain);
        assert!(diff.iter().any(|d| d.starts_with("family: deepfm != fm")), "{diff:?}");
        assert!(s.diff(&s).is_empty());
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny(Family::Dnn);
        s.hidden_widths.clear();
        s.hidden_gate = Some(HiddenGateConfig::default());
        assert!(s.validate().is_err());
        // FM ignores hidden settings.
        s.family = Family::Fm;
        assert!(s.validate().is_ok());
        let mut d = tiny(Family::Dnn);
        d.dropout = 1.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn labels_follow_table_suffixes() {
        let mut s = tiny(Family::DeepFm);
        assert_eq!(s.label(), "DeepFM");
        s.embed_gate = Some(GateConfig::default());
        assert_eq!(s.label(), "DeepFM_e");
        s.hidden_gate = Some(HiddenGateConfig::default());
        assert_eq!(s.label(), "DeepFM_e+h");
        s.embed_gate = None;
        assert_eq!(s.label(), "DeepFM_h");
    }

    fn zero_all(m: &mut Model) {
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn fm_anchors() {
        let mut m = Model::new(
            ModelSpec {
                embedding_dim: 1,
                ..ModelSpec::new(Family::Fm, &[2, 2])
            },
            0,
        )
        .unwrap();
        zero_all(&mut m);
        m.params.set("fm.bias", Tensor::scalar(0.25)).unwrap();
        assert_eq!(m.fm_forward(&[1, 1]).unwrap(), 0.25);

        m.params.set("fm.bias", Tensor::scalar(0.0)).unwrap();
        m.params.set("embed.field0", Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap()).unwrap();
        m.params.set("embed.field1", Tensor::matrix(2, 1, vec![0.0, 3.0]).unwrap()).unwrap();
        assert_eq!(m.fm_forward(&[1, 1]).unwrap(), 6.0);
    }

    #[test]
    fn dnn_zero_weights_gives_output_bias() {
        let mut m = Model::new(tiny(Family::Dnn), 3).unwrap();
        zero_all(&mut m);
        m.params.set("out.b", Tensor::scalar(-0.4)).unwrap();
        assert_eq!(m.dnn_forward(&[1, 2, 3], None).unwrap(), -0.4);
        assert!(m.fm_forward(&[1, 2, 3]).is_err());
    }

    #[test]
    fn dnn_input_width_is_f_times_k() {
        let spec = ModelSpec::new(Family::Dnn, &[3; 26]);
        let m = Model::new(spec, 0).unwrap();
        assert_eq!(m.params.get("mlp.l1.W").unwrap().shape(), &[400, 260]);
        assert_eq!(m.params.get("embed.field0").unwrap().shape(), &[3, 10]);
        let fwd = m.forward(&[1; 26], None).unwrap();
        assert_eq!(fwd.cache.layers[0].input.len(), 260);
    }

    #[test]
    fn deepfm_component_isolation_and_sharing() {
        let mut m = Model::new(tiny(Family::DeepFm), 9).unwrap();
        for name in ["mlp.l1.W", "mlp.l2.W", "out.W"] {
            m.params.get_mut(name).unwrap().fill(0.0);
        }
        m.params.set("out.b", Tensor::scalar(0.3)).unwrap();
        let x = [1, 4, 6];
        let fm = m.fm_forward(&x).unwrap();
        assert_eq!(m.deepfm_forward(&x, None).unwrap(), fm + 0.3);

        let m = Model::new(tiny(Family::DeepFm), 9).unwrap();
        let before = m.forward(&x, None).unwrap();
        let mut m2 = m.clone();
        m2.params.get_mut("embed.field1").unwrap().row_mut(4)[0] += 0.5;
        let after = m2.forward(&x, None).unwrap();
        assert_ne!(before.fm_logit, after.fm_logit);
        assert_ne!(before.deep_logit, after.deep_logit);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let m = Model::new(tiny(Family::Dnn), 0).unwrap();
        assert!(matches!(
            m.logit(&[0, 0, 7]),
            Err(ModelError::Gate(GateError::IndexOutOfRange { field: 2, .. }))
        ));
    }

    #[test]
    fn predict_anchors() {
        assert_eq!(predict(0.0), 0.5);
        assert!(predict(1e6) < 1.0);
        assert!(predict(-1e6) > 0.0);
        for x in [-5.0, -0.3, 0.0, 1.7, 12.0] {
            assert!((predict(-x) - (1.0 - predict(x))).abs() < 1e-12);
        }
        let grid: Vec<f64> = (-300..=300).map(|i| predict(i as f64 * 0.1)).collect();
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cross_entropy_anchors() {
        let l = cross_entropy(&[0.5; 8], &[0, 1, 0, 1, 1, 1, 0, 0]).unwrap();
        assert!((l - 0.6931472).abs() < 1e-6);
        let l = cross_entropy(&[1.0 - PROB_EPS], &[1]).unwrap();
        assert!(l < 1e-6);
        let l = cross_entropy(&[0.9], &[0]).unwrap();
        assert!((l - 2.3025851).abs() < 1e-6);
        assert_eq!(cross_entropy(&[], &[]), Err(ModelError::EmptyLoss));
        assert!(cross_entropy(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn loss_is_permutation_invariant_up_to_rounding() {
        let p = [0.1, 0.7, 0.4, 0.95, 0.33];
        let y = [0, 1, 0, 1, 1];
        let a = cross_entropy(&p, &y).unwrap();
        let b = cross_entropy(&[p[3], p[0], p[4], p[2], p[1]], &[y[3], y[0], y[4], y[2], y[1]]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn gate_params_registered_per_sharing() {
        let mut s = tiny(Family::Dnn);
        s.embed_gate = Some(GateConfig {
            sharing: Sharing::FieldShared,
            granularity: Granularity::BitWise,
            ..GateConfig::default()
        });
        let m = Model::new(s, 0).unwrap();
        assert!(m.params.get("gate.W").is_some());
        assert_eq!(m.gate_param_count(), 16);
    }
}
