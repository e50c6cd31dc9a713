//! Cross-modal decomposition.
//!
//! A gate scores each token against a context vector: text tokens against
//! the reference image's global feature, reference patches against the
//! pooled negative text. Gate weights are a `2d x 1` column acting on
//! `[context, token]`.

use crate::error::{Result, SsnError};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Per-token sigmoid weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector<T = f32> {
    values: Vec<T>,
}

impl<T: Scalar> GateVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        GateVector { values }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn saturated(len: usize, value: T) -> Self {
        GateVector {
            values: vec![value; len],
        }
    }
}

/// `positive = C_l * L`, `negative = (1 - C_l) * L`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedText<T = f32> {
    pub positive: Tensor<T>,
    pub negative: Tensor<T>,
}

/// `kept = C_r * I_r`, `discarded = (1 - C_r) * I_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrototype<T = f32> {
    pub kept: Tensor<T>,
    pub discarded: Tensor<T>,
}

fn gate_rows<T: Scalar>(
    tokens: &Tensor<T>,
    context: &[T],
    weight: &Tensor<T>,
    bias: T,
) -> Result<GateVector<T>> {
    let d = tokens.cols();
    if context.len() != d || weight.len() != 2 * d {
        return Err(SsnError::Model(format!(
            "gate over width {d} got context {} and weight {}",
            context.len(),
            weight.len()
        )));
    }
    let w = weight.data();
    let ctx = context
        .iter()
        .zip(&w[..d])
        .fold(T::zero(), |a, (&c, &wi)| a + c * wi);
    let values = (0..tokens.rows())
        .map(|r| {
            let logit = tokens
                .row(r)
                .iter()
                .zip(&w[d..])
                .fold(ctx, |a, (&x, &wi)| a + x * wi)
                + bias;
            T::one() / (T::one() + (-logit).exp())
        })
        .collect();
    Ok(GateVector { values })
}

fn split<T: Scalar>(x: &Tensor<T>, gate: &GateVector<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if gate.len() != x.rows() {
        return Err(SsnError::Dimension(format!(
            "gate of length {} for {} tokens",
            gate.len(),
            x.rows()
        )));
    }
    let d = x.cols();
    let mut on = x.as_matrix();
    let mut off = x.as_matrix();
    for (r, &g) in gate.values().iter().enumerate() {
        on.row_mut(r).iter_mut().for_each(|v| *v = *v * g);
        off.row_mut(r).iter_mut().for_each(|v| *v = *v * (T::one() - g));
    }
    debug_assert_eq!(on.cols(), d);
    Ok((on, off))
}

/// Text gate `sigmoid(w . [ref_global, token_i] + b)`.
pub fn gate_text<T: Scalar>(
    text_tokens: &Tensor<T>,
    ref_global: &[T],
    weight: &Tensor<T>,
    bias: T,
) -> Result<GateVector<T>> {
    gate_rows(text_tokens, ref_global, weight, bias)
}

pub fn split_text<T: Scalar>(
    text_tokens: &Tensor<T>,
    gate: &GateVector<T>,
) -> Result<DecomposedText<T>> {
    let (positive, negative) = split(text_tokens, gate)?;
    Ok(DecomposedText { positive, negative })
}

/// Mean of the negative text tokens.
pub fn pool_negative_text<T: Scalar>(negative: &Tensor<T>) -> Result<Vec<T>> {
    if negative.rows() == 0 {
        return Err(SsnError::Dimension("pooling zero tokens".into()));
    }
    let n = T::from_usize(negative.rows()).unwrap();
    let mut acc = vec![T::zero(); negative.cols()];
    for r in 0..negative.rows() {
        acc.iter_mut()
            .zip(negative.row(r))
            .for_each(|(a, &v)| *a = *a + v);
    }
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Image gate `sigmoid(w_r . [neg_global, patch_j] + b_r)`.
pub fn gate_image<T: Scalar>(
    ref_tokens: &Tensor<T>,
    neg_global: &[T],
    weight: &Tensor<T>,
    bias: T,
) -> Result<GateVector<T>> {
    gate_rows(ref_tokens, neg_global, weight, bias)
}

pub fn split_image<T: Scalar>(
    ref_tokens: &Tensor<T>,
    gate: &GateVector<T>,
) -> Result<VisualPrototype<T>> {
    let (kept, discarded) = split(ref_tokens, gate)?;
    Ok(VisualPrototype { kept, discarded })
}

/// Gate column (`n x 1`) for packed `tokens`, with `context` already holding
/// one row per token.
pub fn gate_tape<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    context: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let x = tape.concat_cols(&[context, tokens])?;
    let logits = tape.linear(x, weight, bias)?;
    Ok(tape.sigmoid(logits))
}

/// `(gate * x, (1 - gate) * x)` for a gate column.
pub fn split_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, gate: Var) -> Result<(Var, Var)> {
    let on = tape.mul_col(x, gate)?;
    let inv = tape.one_minus(gate);
    let off = tape.mul_col(x, inv)?;
    Ok((on, off))
}
