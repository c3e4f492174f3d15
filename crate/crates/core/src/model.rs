//! Two-tower classifier pieces: the frozen class bank, the trainable
//! encoder, and the linear-head baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorcore::{Tape, Tensor, TensorError, Var, NORM_EPS};

/// Bank rows further than this from unit norm are rejected, closer ones re-normalized.
pub const BANK_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("class bank row {class} has norm {norm}, not within 1e-6 of 1")]
    BankNorm { class: usize, norm: f64 },
    #[error("class bank needs at least one class")]
    EmptyBank,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Frozen unit-norm class embeddings and the pairwise margin matrix
/// `D[y][c] = 1 − ⟨T_y, T_c⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBank {
    dim: usize,
    embeddings: Vec<f64>,
    margins: Vec<f64>,
    class_names: Vec<String>,
}

impl ClassBank {
    /// Builds a bank from `C×dim` row-major rows. Rows within
    /// [`BANK_NORM_TOLERANCE`] of unit norm are re-normalized.
    pub fn new(rows: Vec<f64>, dim: usize, class_names: Vec<String>) -> Result<Self, ModelError> {
        let classes = class_names.len();
        if classes == 0 {
            return Err(ModelError::EmptyBank);
        }
        if dim == 0 || rows.len() != classes * dim {
            return Err(ModelError::Dimension {
                what: "class bank rows",
                expected: classes * dim,
                actual: rows.len(),
            });
        }
        let mut embeddings = rows;
        for (class, row) in embeddings.chunks_mut(dim).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > BANK_NORM_TOLERANCE {
                return Err(ModelError::BankNorm { class, norm });
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let margins = margin_matrix(&embeddings, dim);
        Ok(Self {
            dim,
            embeddings,
            margins,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn embedding(&self, class: usize) -> &[f64] {
        &self.embeddings[class * self.dim..(class + 1) * self.dim]
    }

    /// Row-major `C×C` margin matrix.
    pub fn margin_matrix(&self) -> &[f64] {
        &self.margins
    }

    pub fn margin(&self, y: usize, c: usize) -> f64 {
        self.margins[y * self.num_classes() + c]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_classes(), self.dim], self.embeddings.clone())
            .expect("bank rows are finite and non-empty")
    }
}

fn margin_matrix(rows: &[f64], dim: usize) -> Vec<f64> {
    let c = rows.len() / dim;
    let mut d = vec![0.0; c * c];
    for y in 0..c {
        for k in y + 1..c {
            let dot: f64 = rows[y * dim..(y + 1) * dim]
                .iter()
                .zip(&rows[k * dim..(k + 1) * dim])
                .map(|(a, b)| a * b)
                .sum();
            let dist = (1.0 - dot).clamp(0.0, 2.0);
            d[y * c + k] = dist;
            d[k * c + y] = dist;
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// Bypasses the nonlinearity; only used to build linear test configurations.
    Identity,
}

/// Fixed linear map from the embedding space into input-feature space.
///
/// Inputs of width `d_in` are produced from class-space vectors by this lift;
/// the canonical lift pads with zeros, and is the identity when `d_in == d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lift {
    input_dim: usize,
    embed_dim: usize,
    /// `d_in×d`, row-major, orthonormal columns.
    matrix: Vec<f64>,
}

impl Lift {
    pub fn canonical(input_dim: usize, embed_dim: usize) -> Result<Self, ModelError> {
        if embed_dim == 0 || input_dim < embed_dim {
            return Err(ModelError::Dimension {
                what: "lift input dimension",
                expected: embed_dim,
                actual: input_dim,
            });
        }
        let mut matrix = vec![0.0; input_dim * embed_dim];
        for i in 0..embed_dim {
            matrix[i * embed_dim + i] = 1.0;
        }
        Ok(Self {
            input_dim,
            embed_dim,
            matrix,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// `P·v` for a class-space vector `v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks(self.embed_dim)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Two affine maps with a nonlinearity between them, followed by row
/// normalization: `d_in → hidden → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

/// Tape handles of the encoder parameters for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Forward outputs: the raw second-layer output and its normalized rows.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub raw: Var,
    pub embedding: Var,
    pub params: EncoderVars,
}

fn uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Encoder {
    pub fn from_parts(
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
        dims: (usize, usize, usize),
        activation: Activation,
    ) -> Result<Self, ModelError> {
        let (d_in, h, d) = dims;
        Ok(Self {
            w1: Tensor::parameter(vec![d_in, h], w1)?,
            b1: Tensor::parameter(vec![h], b1)?,
            w2: Tensor::parameter(vec![h, d], w2)?,
            b2: Tensor::parameter(vec![d], b2)?,
            activation,
        })
    }

    /// Every weight and bias uniform in `±1/√fan_in`.
    pub fn random(
        input_dim: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let w1 = uniform(rng, input_dim * hidden, input_dim);
        let b1 = uniform(rng, hidden, input_dim);
        let w2 = uniform(rng, hidden * embed_dim, hidden);
        let b2 = uniform(rng, embed_dim, hidden);
        Self::from_parts(
            w1,
            b1,
            w2,
            b2,
            (input_dim, hidden, embed_dim),
            Activation::Tanh,
        )
    }

    /// The pre-trained starting point: the first `d` hidden units invert the
    /// lift (`Pᵀx`) and pass straight to the output; the remaining hidden
    /// units start with uniform input weights and zero output weights, so
    /// they do not change the initial embedding.
    pub fn pretrained(lift: &Lift, hidden: usize, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let (d_in, d) = (lift.input_dim(), lift.embed_dim());
        if hidden < d {
            return Err(ModelError::Dimension {
                what: "pretrained encoder hidden width",
                expected: d,
                actual: hidden,
            });
        }
        let mut w1 = vec![0.0; d_in * hidden];
        let extra = uniform(rng, d_in * (hidden - d), d_in);
        let mut extra = extra.into_iter();
        for i in 0..d_in {
            for j in 0..hidden {
                w1[i * hidden + j] = if j < d {
                    lift.matrix()[i * d + j]
                } else {
                    extra.next().unwrap()
                };
            }
        }
        let mut w2 = vec![0.0; hidden * d];
        for j in 0..d {
            w2[j * d + j] = 1.0;
        }
        Self::from_parts(
            w1,
            vec![0.0; hidden],
            w2,
            vec![0.0; d],
            (d_in, hidden, d),
            Activation::Tanh,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in canonical order: `w1`, `b1`, `w2`, `b2`, each row-major.
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.num_params() {
            return Err(ModelError::Dimension {
                what: "encoder parameter vector",
                expected: self.num_params(),
                actual: values.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.assign(&values[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Records the encoder on `tape` for an input of shape `[B×d_in]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<EncoderOutput, ModelError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(ModelError::Dimension {
                what: "encoder input",
                expected: self.input_dim(),
                actual: *shape.last().unwrap_or(&0),
            });
        }
        let params = EncoderVars {
            w1: tape.leaf(&self.w1)?,
            b1: tape.leaf(&self.b1)?,
            w2: tape.leaf(&self.w2)?,
            b2: tape.leaf(&self.b2)?,
        };
        let pre = tape.matmul(x, params.w1)?;
        let pre = tape.add_row(pre, params.b1)?;
        let hidden = match self.activation {
            Activation::Tanh => tape.tanh(pre)?,
            Activation::Identity => pre,
        };
        let out = tape.matmul(hidden, params.w2)?;
        let raw = tape.add_row(out, params.b2)?;
        let embedding = tape.l2_normalize(raw, NORM_EPS)?;
        Ok(EncoderOutput {
            raw,
            embedding,
            params,
        })
    }

    /// Moves gradients from a replayed tape into the parameter tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &EncoderVars) -> Result<(), ModelError> {
        tape.accumulate_into(vars.w1, &mut self.w1)?;
        tape.accumulate_into(vars.b1, &mut self.b1)?;
        tape.accumulate_into(vars.w2, &mut self.w2)?;
        tape.accumulate_into(vars.b2, &mut self.b2)?;
        Ok(())
    }
}

/// Unit-norm image embeddings `I_x` for a batch `[B×d_in]`.
pub fn embed(encoder: &Encoder, x: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x)?;
    let out = encoder.forward(&mut tape, xv)?;
    Ok(tape.to_tensor(out.embedding)?)
}

/// Records cosine similarities `⟨I_b, T_c⟩` of unit-norm rows against every class.
pub fn similarities_on(
    tape: &mut Tape,
    bank: &ClassBank,
    embeddings: Var,
) -> Result<Var, ModelError> {
    let cols = *tape.shape(embeddings).last().unwrap();
    if cols != bank.dim() {
        return Err(ModelError::Dimension {
            what: "embedding vs class bank",
            expected: bank.dim(),
            actual: cols,
        });
    }
    let t = tape.constant(
        vec![bank.num_classes(), bank.dim()],
        bank.embeddings().to_vec(),
    )?;
    Ok(tape.matmul_transposed(embeddings, t)?)
}

pub fn similarities(bank: &ClassBank, embeddings: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let e = tape.leaf(embeddings)?;
    let s = similarities_on(&mut tape, bank, e)?;
    Ok(tape.to_tensor(s)?)
}

/// Bias-free linear classifier `W = {w_c}` over features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: Tensor,
}

impl LinearHead {
    pub fn zeros(num_classes: usize, input_dim: usize) -> Result<Self, ModelError> {
        let mut weights = Tensor::zeros(vec![num_classes, input_dim])?;
        weights.set_requires_grad(true);
        Ok(Self { weights })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Copies the class-bank rows into `W`.
    pub fn text_init(&mut self, bank: &ClassBank) -> Result<(), ModelError> {
        if self.input_dim() != bank.dim() {
            return Err(ModelError::Dimension {
                what: "linear head input vs class bank",
                expected: bank.dim(),
                actual: self.input_dim(),
            });
        }
        if self.num_classes() != bank.num_classes() {
            return Err(ModelError::Dimension {
                what: "linear head classes",
                expected: bank.num_classes(),
                actual: self.num_classes(),
            });
        }
        let mut weights = Tensor::new(self.weights.shape().to_vec(), bank.embeddings().to_vec())?;
        weights.set_requires_grad(true);
        self.weights = weights;
        Ok(())
    }

    /// Records raw logits `x·Wᵀ`; returns `(logits, weights var)`.
    pub fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), ModelError> {
        let cols = *tape.shape(x).last().unwrap();
        if cols != self.input_dim() {
            return Err(ModelError::Dimension {
                what: "linear head input",
                expected: self.input_dim(),
                actual: cols,
            });
        }
        let w = tape.leaf(&self.weights)?;
        Ok((tape.matmul_transposed(x, w)?, w))
    }
}

pub fn linear_head_logits(head: &LinearHead, x: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x)?;
    let (logits, _) = head.logits_on(&mut tape, xv)?;
    Ok(tape.to_tensor(logits)?)
}

/// Returns a copy of `head` with rows taken from the class bank.
pub fn text_head_init(head: &LinearHead, bank: &ClassBank) -> Result<LinearHead, ModelError> {
    let mut out = head.clone();
    out.text_init(bank)?;
    Ok(out)
}

/// Which head turns embeddings into class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum HeadKind {
    /// Cosine similarity against the frozen class bank.
    #[default]
    Metric,
    /// Trainable linear head over the encoder output; `normalize_input`
    /// selects unit-norm rather than raw features.
    Linear { normalize_input: bool },
}

/// Encoder plus the scoring head; the unit whose parameters are trained and averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: Option<LinearHead>,
    kind: HeadKind,
}

/// Tape handles needed to pull gradients back out after backward.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    encoder: EncoderVars,
    head: Option<Var>,
}

impl Classifier {
    pub fn metric(encoder: Encoder) -> Self {
        Self {
            encoder,
            head: None,
            kind: HeadKind::Metric,
        }
    }

    /// Linear head over the encoder output, initialized from the class bank.
    pub fn linear(
        encoder: Encoder,
        bank: &ClassBank,
        normalize_input: bool,
    ) -> Result<Self, ModelError> {
        let head = text_head_init(
            &LinearHead::zeros(bank.num_classes(), encoder.embed_dim())?,
            bank,
        )?;
        Ok(Self {
            encoder,
            head: Some(head),
            kind: HeadKind::Linear { normalize_input },
        })
    }

    pub fn with_head(
        encoder: Encoder,
        bank: &ClassBank,
        kind: HeadKind,
    ) -> Result<Self, ModelError> {
        match kind {
            HeadKind::Metric => Ok(Self::metric(encoder)),
            HeadKind::Linear { normalize_input } => Self::linear(encoder, bank, normalize_input),
        }
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.head.as_ref().map_or(0, |h| h.weights.len())
    }

    /// Encoder parameters followed by the head weights, if any.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.encoder.flat_params();
        if let Some(h) = &self.head {
            out.extend_from_slice(h.weights.data());
        }
        out
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = self.encoder.flat_grads();
        if let Some(h) = &self.head {
            match h.weights.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, h.weights.len())),
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.num_params() {
            return Err(ModelError::Dimension {
                what: "classifier parameter vector",
                expected: self.num_params(),
                actual: values.len(),
            });
        }
        let split = self.encoder.num_params();
        self.encoder.set_flat_params(&values[..split])?;
        if let Some(h) = &mut self.head {
            h.weights.assign(&values[split..])?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        if let Some(h) = &mut self.head {
            h.weights.zero_grad();
        }
    }

    /// Records class scores `[B×C]`: cosine similarities for the metric head,
    /// raw logits for the linear head.
    pub fn scores_on(
        &self,
        tape: &mut Tape,
        bank: &ClassBank,
        x: Var,
    ) -> Result<(Var, ClassifierVars), ModelError> {
        let out = self.encoder.forward(tape, x)?;
        match (&self.head, self.kind) {
            (Some(head), HeadKind::Linear { normalize_input }) => {
                let feats = if normalize_input {
                    out.embedding
                } else {
                    out.raw
                };
                let (logits, w) = head.logits_on(tape, feats)?;
                Ok((
                    logits,
                    ClassifierVars {
                        encoder: out.params,
                        head: Some(w),
                    },
                ))
            }
            _ => {
                let sims = similarities_on(tape, bank, out.embedding)?;
                Ok((
                    sims,
                    ClassifierVars {
                        encoder: out.params,
                        head: None,
                    },
                ))
            }
        }
    }

    pub fn accumulate_grads(
        &mut self,
        tape: &Tape,
        vars: &ClassifierVars,
    ) -> Result<(), ModelError> {
        self.encoder.accumulate_grads(tape, &vars.encoder)?;
        if let (Some(h), Some(w)) = (&mut self.head, vars.head) {
            tape.accumulate_into(w, &mut h.weights)?;
        }
        Ok(())
    }
}
