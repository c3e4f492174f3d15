use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{check_finite, check_shape, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    /// a · bᵀ
    MatMulT {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        bias: usize,
    },
    AddConst {
        a: usize,
    },
    Scale {
        a: usize,
        k: f64,
    },
    Tanh {
        a: usize,
    },
    Relu {
        a: usize,
    },
    L2NormalizeRows {
        a: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    LogSoftmaxRows {
        a: usize,
    },
    GatherRows {
        a: usize,
        index: Vec<usize>,
    },
    Mean {
        a: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

impl Node {
    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// Records primitive operations in execution order and replays them backward.
///
/// A tape supports exactly one backward pass. Gradients for nodes live on the
/// tape; callers move them into parameter tensors with [`Tape::accumulate_into`].
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

// a [m×k] · b[n×k]ᵀ
fn matmul_t_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a[m×k]ᵀ · g[m×n] -> [k×n]
fn t_matmul_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        check_shape(&shape, data.len())?;
        self.push("constant", shape, data, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.idx(v).expect("var from this tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v).expect("var from this tape")].shape
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor, TensorError> {
        let n = &self.nodes[self.idx(v)?];
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ai], &self.nodes[bi]);
        let dims = match (na.shape.as_slice(), nb.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => Some((*m, *k, *n)),
            _ => None,
        };
        let Some((m, k, n)) = dims else {
            return Err(TensorError::Dimension {
                op: "matmul",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        };
        let out = matmul_raw(&na.value, &nb.value, m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        self.push("matmul", vec![m, n], out, rg, Op::MatMul { a: ai, b: bi })
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ai], &self.nodes[bi]);
        let dims = match (na.shape.as_slice(), nb.shape.as_slice()) {
            ([m, k], [n, k2]) if k == k2 => Some((*m, *k, *n)),
            _ => None,
        };
        let Some((m, k, n)) = dims else {
            return Err(TensorError::Dimension {
                op: "matmul_transposed",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        };
        let out = matmul_t_raw(&na.value, &nb.value, m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        self.push(
            "matmul_transposed",
            vec![m, n],
            out,
            rg,
            Op::MatMulT { a: ai, b: bi },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ai], &self.nodes[bi]);
        if na.shape != nb.shape {
            return Err(TensorError::Dimension {
                op: "add",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        self.push("add", shape, out, rg, Op::Add { a: ai, b: bi })
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` value.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(bias)?);
        let (na, nb) = (&self.nodes[ai], &self.nodes[bi]);
        if nb.shape.len() != 1 || na.cols() != nb.value.len() {
            return Err(TensorError::Dimension {
                op: "add_row",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let n = nb.value.len();
        let out = na
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + nb.value[i % n])
            .collect();
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        self.push("add_row", shape, out, rg, Op::AddRow { a: ai, bias: bi })
    }

    /// Adds a same-shape constant that receives no gradient.
    pub fn add_const(&mut self, a: Var, addend: &[f64]) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let na = &self.nodes[ai];
        if na.value.len() != addend.len() {
            return Err(TensorError::Dimension {
                op: "add_const",
                left: na.shape.clone(),
                right: vec![addend.len()],
            });
        }
        let out = na.value.iter().zip(addend).map(|(x, y)| x + y).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("add_const", shape, out, rg, Op::AddConst { a: ai })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let na = &self.nodes[ai];
        let out = na.value.iter().map(|x| x * k).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("scale", shape, out, rg, Op::Scale { a: ai, k })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let na = &self.nodes[ai];
        let out = na.value.iter().map(|x| x.tanh()).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("tanh", shape, out, rg, Op::Tanh { a: ai })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let na = &self.nodes[ai];
        let out = na.value.iter().map(|x| x.max(0.0)).collect();
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("relu", shape, out, rg, Op::Relu { a: ai })
    }

    /// Divides each row (last axis) by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let na = &self.nodes[ai];
        let (rows, cols) = (na.rows(), na.cols());
        let mut out = vec![0.0; na.value.len()];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let src = &na.value[r * cols..(r + 1) * cols];
            let norm = src.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *o = x / denom;
            }
            norms.push(norm);
        }
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push(
            "l2_normalize",
            shape,
            out,
            rg,
            Op::L2NormalizeRows { a: ai, eps, norms },
        )
    }

    /// Row-wise `x − logsumexp(x)`, stabilised by subtracting the row max.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let na = &self.nodes[ai];
        let (rows, cols) = (na.rows(), na.cols());
        let mut out = vec![0.0; na.value.len()];
        for r in 0..rows {
            let src = &na.value[r * cols..(r + 1) * cols];
            let (max, log_norm) = log_normalizer(src);
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *o = (x - max) - log_norm;
            }
        }
        let (rg, shape) = (na.requires_grad, na.shape.clone());
        self.push("log_softmax", shape, out, rg, Op::LogSoftmaxRows { a: ai })
    }

    /// Picks `a[r][index[r]]` from each row, giving a length-`rows` vector.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let na = &self.nodes[ai];
        let (rows, cols) = (na.rows(), na.cols());
        if index.len() != rows {
            return Err(TensorError::Dimension {
                op: "gather",
                left: na.shape.clone(),
                right: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(TensorError::Index {
                op: "gather",
                index: bad,
                bound: cols,
            });
        }
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &c)| na.value[r * cols + c])
            .collect();
        let rg = na.requires_grad;
        self.push(
            "gather",
            vec![rows],
            out,
            rg,
            Op::GatherRows {
                a: ai,
                index: index.to_vec(),
            },
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let na = &self.nodes[ai];
        let m = na.value.iter().sum::<f64>() / na.value.len() as f64;
        let rg = na.requires_grad;
        self.push("mean", vec![1], vec![m], rg, Op::Mean { a: ai })
    }

    /// Replays the tape in reverse from a single-element `loss`.
    ///
    /// Fails with [`TensorError::TapeConsumed`] when called a second time.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[li].shape.clone(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |target: usize, contrib: Vec<f64>| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let (m, k) = as_matrix(&na.shape).unwrap();
                let n = nb.cols();
                if na.requires_grad {
                    send(*a, matmul_t_raw(g, &nb.value, m, n, k));
                }
                if nb.requires_grad {
                    send(*b, t_matmul_raw(&na.value, g, m, k, n));
                }
            }
            Op::MatMulT { a, b } => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let (m, k) = as_matrix(&na.shape).unwrap();
                let n = nb.rows();
                if na.requires_grad {
                    // g[m×n] · b[n×k]
                    send(*a, matmul_raw(g, &nb.value, m, n, k));
                }
                if nb.requires_grad {
                    // gᵀ[n×m] · a[m×k]
                    send(*b, t_matmul_raw(g, &na.value, m, n, k));
                }
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddRow { a, bias } => {
                send(*a, g.to_vec());
                let n = self.nodes[*bias].value.len();
                let mut gb = vec![0.0; n];
                for (j, v) in g.iter().enumerate() {
                    gb[j % n] += v;
                }
                send(*bias, gb);
            }
            Op::AddConst { a } => send(*a, g.to_vec()),
            Op::Scale { a, k } => send(*a, g.iter().map(|v| v * k).collect()),
            Op::Tanh { a } => send(
                *a,
                g.iter()
                    .zip(&node.value)
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect(),
            ),
            Op::Relu { a } => send(
                *a,
                g.iter()
                    .zip(&self.nodes[*a].value)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::L2NormalizeRows { a, eps, norms } => {
                let cols = node.cols();
                let mut ga = vec![0.0; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (y, gy) = (&node.value[span.clone()], &g[span.clone()]);
                    let out = &mut ga[span];
                    if norm >= *eps {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in out.iter_mut().zip(y).zip(gy) {
                            *o = (gv - yv * dot) / norm;
                        }
                    } else {
                        for (o, gv) in out.iter_mut().zip(gy) {
                            *o = gv / eps;
                        }
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmaxRows { a } => {
                let cols = node.cols();
                let mut ga = vec![0.0; g.len()];
                for r in 0..node.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let gsum: f64 = g[span.clone()].iter().sum();
                    for j in span {
                        ga[j] = g[j] - node.value[j].exp() * gsum;
                    }
                }
                send(*a, ga);
            }
            Op::GatherRows { a, index } => {
                let cols = self.nodes[*a].cols();
                let mut ga = vec![0.0; self.nodes[*a].value.len()];
                for (r, &c) in index.iter().enumerate() {
                    ga[r * cols + c] += g[r];
                }
                send(*a, ga);
            }
            Op::Mean { a } => {
                let n = self.nodes[*a].value.len();
                send(*a, vec![g[0] / n as f64; n]);
            }
        }
    }

    /// Gradient of the loss w.r.t. `v` after [`Tape::backward`]; `None` if
    /// `v` does not require grad or backward has not run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.idx(v).ok()?;
        self.grads.get(i)?.as_deref()
    }

    /// Adds this tape's gradient for `v` into `t`'s gradient slot.
    ///
    /// A requires-grad leaf that the loss does not depend on still gets a
    /// (zero) gradient slot.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<(), TensorError> {
        let i = self.idx(v)?;
        if !self.consumed {
            return Ok(());
        }
        match self.grads.get(i).and_then(|g| g.as_deref()) {
            Some(g) => t.accumulate_grad(g),
            None if self.nodes[i].requires_grad => {
                t.accumulate_grad(&vec![0.0; self.nodes[i].value.len()])
            }
            None => Ok(()),
        }
    }
}

/// Numerically stable `ln Σ exp(x)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let (max, log_norm) = log_normalizer(x);
    if !max.is_finite() {
        return max;
    }
    max + log_norm
}

/// `(m, ln Σ exp(x − m))` with `m = max x`. The leading maximum contributes
/// exactly 1, so the log is taken as `ln_1p` of the remaining terms; this
/// keeps full relative precision when one logit dominates.
pub(crate) fn log_normalizer(x: &[f64]) -> (f64, f64) {
    let Some((arg, &max)) =
        x.iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &f64)>, (i, v)| match best {
                Some((_, b)) if *b >= *v => best,
                _ => Some((i, v)),
            })
    else {
        return (f64::NEG_INFINITY, 0.0);
    };
    if !max.is_finite() {
        return (max, 0.0);
    }
    let rest: f64 = x
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    (max, rest.ln_1p())
}
