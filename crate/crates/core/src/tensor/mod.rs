//! Dense 64-bit tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Values are computed eagerly
//! when an operation is recorded; [`Tape::backward`] walks the recorded nodes
//! in reverse and accumulates adjoints into every node that requires a
//! gradient.
//!
//! Supported primitives (each has a backward rule and a finite-difference
//! test in `tests`):
//!
//! | primitive | shapes |
//! |---|---|
//! | `add`, `sub`, `mul`, `neg`, `scale`, `add_scalar`, `exp`, `clamp`, `minimum` | element-wise, identical shapes |
//! | `matmul` | `[m,k] x [k,n]` |
//! | `transpose`, `reshape` | 2-D / any |
//! | `embedding` | `[V,H]` table gathered by row ids |
//! | `softmax_rows`, `log_softmax_rows`, `causal_softmax` | rows of a 1-D or 2-D tensor |
//! | `cross_entropy` | `[n,V]` logits with `n` targets, mean over rows |
//! | `concat_rows`, `concat_cols`, `slice_rows`, `slice_cols`, `pick` | 2-D |
//! | `sum`, `mean` | any, to a scalar |
//! | `rms_norm`, `swiglu`, `rope` | see method docs |

mod check;
pub(crate) mod ops;

pub use check::{grad_check, GradCheckError};
pub use ops::{log_softmax_row, softmax_row};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count and column count, treating a 1-D tensor as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Dimension(format!(
                "expected a 1-D or 2-D tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CausalSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Pick { x: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    SwiGlu(Var, Var),
    Rope { x: Var, positions: Vec<usize>, base: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records primitive applications in topological order.
///
/// Every node's inputs are created before the node itself, so a reverse sweep
/// over the node list visits each node exactly once after all its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// Gradients accumulate: calling twice without [`Tape::zero_grad`] doubles
    /// them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &adj, &mut adjoints);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(g) => g.iter_mut().zip(&adj).for_each(|(g, a)| *g += a),
                None => node.grad = Some(adj),
            }
        }
        Ok(())
    }
}

fn accumulate(adjoints: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut adjoints[v.0] {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
