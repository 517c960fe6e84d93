//! Dense row-major `f64` tensors, the handful of forward operations the
//! layers need, and the backward rule paired with each of them.
//!
//! There is no graph here: every layer keeps whatever it needs from the
//! forward pass and calls the matching `*_backward` function itself.

use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("tensor shape must be nonempty")]
    EmptyShape,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::BadLength {
                op: "tensor",
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// A one-dimensional tensor owning `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::vector(vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    /// Row `r` of a matrix viewed as `rows() x cols()`.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// Seeded ChaCha8 stream. ChaCha output is specified bit-for-bit, so a seed
/// yields the same draws on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, label)`. Used so that each named
    /// parameter draws from its own stream regardless of which other
    /// parameters exist.
    pub fn derive(seed: u64, label: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(label.as_bytes()));
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
    /// Constant 1 regardless of input. Turns a gate into the identity;
    /// used for equivalence diagnostics, not offered as a user choice.
    One,
}

impl Activation {
    pub const USER_KINDS: [Activation; 4] = [
        Activation::Linear,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::One => "one",
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::One => 1.0,
        }
    }

    /// Derivative at pre-activation `z`, given `out = apply(z)`.
    #[inline]
    pub fn derivative(self, z: f64, out: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Tanh => 1.0 - out * out,
            Activation::One => 0.0,
        }
    }

    /// Whether the activation has a kink where finite differences are unreliable.
    pub fn has_kink(self) -> bool {
        matches!(self, Activation::Relu)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown activation '{0}': expected one of linear, relu, sigmoid, tanh")]
pub struct ParseActivationError(pub String);

impl FromStr for Activation {
    type Err = ParseActivationError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "one" => Ok(Activation::One),
            _ => Err(ParseActivationError(s.to_string())),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if w.shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "dense_affine",
            left: w.shape.clone(),
            right: x.shape.clone(),
        });
    }
    let (m, n) = (w.shape[0], w.shape[1]);
    if x.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "dense_affine",
            left: w.shape.clone(),
            right: x.shape.clone(),
        });
    }
    if b.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "dense_affine",
            left: w.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok((m, n))
}

/// `out[j] = sum_i w[j, i] * x[i] + b[j]` for `w` of shape `m x n`.
pub fn dense_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = check_affine(x, w, b)?;
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let row = &w.data[j * n..(j + 1) * n];
        let dot: f64 = row.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        out.push(dot + b.data[j]);
    }
    Tensor::vector(out).checked("dense_affine")
}

/// Accumulates `dw += dy (x) x` and `db += dy`; returns `dx = w^T dy`.
pub fn dense_affine_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let (m, n) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(dy.len(), m);
    debug_assert_eq!(dw.shape, w.shape);
    let mut dx = vec![0.0; n];
    for j in 0..m {
        let g = dy.data[j];
        db.data[j] += g;
        if g == 0.0 {
            continue;
        }
        let wrow = &w.data[j * n..(j + 1) * n];
        let dwrow = &mut dw.data[j * n..(j + 1) * n];
        for i in 0..n {
            dwrow[i] += g * x.data[i];
            dx[i] += g * wrow[i];
        }
    }
    Tensor::vector(dx)
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(TensorError::NonFinite { op: "activation" });
    }
    let data = x.data.iter().map(|&z| kind.apply(z)).collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// `dx = dy * f'(pre)`, with `out = activation(pre)`.
pub fn activation_backward(pre: &Tensor, out: &Tensor, kind: Activation, dy: &Tensor) -> Tensor {
    let data = pre
        .data
        .iter()
        .zip(&out.data)
        .zip(&dy.data)
        .map(|((&z, &o), &g)| g * kind.derivative(z, o))
        .collect();
    Tensor {
        shape: pre.shape.clone(),
        data,
    }
}

fn is_scalar(t: &Tensor) -> bool {
    t.data.len() == 1 && t.shape.len() <= 1
}

/// Elementwise product. `b` may also be a single-element tensor broadcast over `a`.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = if a.shape == b.shape {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect()
    } else if is_scalar(b) {
        let s = b.data[0];
        a.data.iter().map(|x| x * s).collect()
    } else {
        return Err(TensorError::ShapeMismatch {
            op: "hadamard",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    };
    Tensor {
        shape: a.shape.clone(),
        data,
    }
    .checked("hadamard")
}

/// Returns `(da, db)`; for a broadcast scalar `b`, `db` is summed to one element.
pub fn hadamard_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    if a.shape == b.shape {
        let da = b.data.iter().zip(&dy.data).map(|(x, g)| x * g).collect();
        let db = a.data.iter().zip(&dy.data).map(|(x, g)| x * g).collect();
        (
            Tensor {
                shape: a.shape.clone(),
                data: da,
            },
            Tensor {
                shape: b.shape.clone(),
                data: db,
            },
        )
    } else {
        let s = b.data[0];
        let da = dy.data.iter().map(|g| g * s).collect();
        let db: f64 = a.data.iter().zip(&dy.data).map(|(x, g)| x * g).sum();
        (
            Tensor {
                shape: a.shape.clone(),
                data: da,
            },
            Tensor {
                shape: b.shape.clone(),
                data: vec![db],
            },
        )
    }
}

/// Per-element multipliers drawn by [`dropout`]: 0 for dropped, `1/(1-rate)` for kept.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Vec<f64>);

impl DropoutMask {
    pub fn scales(&self) -> &[f64] {
        &self.0
    }
}

/// Inverted dropout. Returns the input untouched (and no mask) when not
/// training or when `rate == 0`.
pub fn dropout(
    x: &Tensor,
    rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidRate(rate));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect();
    let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data,
        },
        Some(DropoutMask(mask)),
    ))
}

pub fn dropout_backward(mask: Option<&DropoutMask>, dy: Tensor) -> Tensor {
    match mask {
        None => dy,
        Some(DropoutMask(m)) => {
            let data = dy.data.iter().zip(m).map(|(g, s)| g * s).collect();
            Tensor {
                shape: dy.shape,
                data,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Zeros,
    GlorotUniform,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Zeros => "zeros",
            InitScheme::GlorotUniform => "glorot",
        }
    }
}

impl FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zeros" | "zero" => Ok(InitScheme::Zeros),
            "glorot" | "glorot_uniform" | "xavier" => Ok(InitScheme::GlorotUniform),
            other => Err(format!(
                "unknown init scheme '{other}': expected zeros or glorot"
            )),
        }
    }
}

/// Limit of the Glorot-uniform distribution for `shape`. A vector `[n]` is
/// treated as an `n x 1` matrix.
pub fn glorot_limit(shape: &[usize]) -> f64 {
    let (fan_out, fan_in) = match shape {
        [] => (1, 1),
        [n] => (*n, 1),
        [r, rest @ ..] => (*r, rest.iter().product()),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_tensor(shape: &[usize], scheme: InitScheme, rng: &mut Rng) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::EmptyShape);
    }
    let mut t = Tensor::zeros(shape);
    if scheme == InitScheme::GlorotUniform {
        let limit = glorot_limit(shape);
        for v in t.data.iter_mut() {
            *v = rng.uniform(-limit, limit);
        }
    }
    Ok(t)
}
