//! Batch contrastive loss and the KL regularizer between the two branches.
//!
//! Queries and targets are L2-normalized, so similarities are cosines and
//! the temperature multiplies values in `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SsnError};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 100.0;
pub const DEFAULT_KL_MARGIN: f64 = 1.0;
/// Guard inside `log` for the plain regularizer.
pub const LOG_EPS: f64 = 1e-12;

/// Cosine similarity.
pub fn similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SsnError::Dimension(format!(
            "similarity of widths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SsnError::Numeric("cannot normalize a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

fn cosine_matrix(queries: &Tensor<f64>, targets: &Tensor<f64>) -> Result<Tensor<f64>> {
    if queries.rows() != targets.rows() || queries.cols() != targets.cols() {
        return Err(SsnError::Dimension(format!(
            "{:?} queries against {:?} targets",
            queries.shape(),
            targets.shape()
        )));
    }
    let b = queries.rows();
    let mut data = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            data.push(similarity(queries.row(i), targets.row(j))?);
        }
    }
    Tensor::matrix(b, b, data)
}

/// In-batch similarity matrices; row `i` is query `i` against every target.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSimilarities {
    pub s_plus: Tensor<f64>,
    pub s_minus: Option<Tensor<f64>>,
    pub lambda: f64,
}

impl BatchSimilarities {
    pub fn new(s_plus: Tensor<f64>, s_minus: Option<Tensor<f64>>, lambda: f64) -> Result<Self> {
        for s in std::iter::once(&s_plus).chain(&s_minus) {
            if s.rows() != s.cols() || s.shape().len() != 2 {
                return Err(SsnError::Dimension(format!(
                    "similarity matrix {:?} is not square",
                    s.shape()
                )));
            }
            if !s.is_finite() {
                return Err(SsnError::Numeric("non-finite similarity".into()));
            }
        }
        if s_minus.as_ref().is_some_and(|m| m.rows() != s_plus.rows()) {
            return Err(SsnError::Dimension("branch batch sizes differ".into()));
        }
        Ok(BatchSimilarities {
            s_plus,
            s_minus,
            lambda,
        })
    }

    /// Cosine similarities of query rows against target rows.
    pub fn from_features(
        positive: &Tensor<f64>,
        negative: Option<&Tensor<f64>>,
        targets: &Tensor<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let s_plus = cosine_matrix(positive, targets)?;
        let s_minus = negative.map(|n| cosine_matrix(n, targets)).transpose()?;
        Self::new(s_plus, s_minus, lambda)
    }

    pub fn batch_size(&self) -> usize {
        self.s_plus.rows()
    }

    /// Row softmax of the scaled similarities.
    pub fn distributions(&self) -> Result<SimilarityDistributions> {
        let minus = self
            .s_minus
            .as_ref()
            .ok_or_else(|| SsnError::Model("no negative-branch similarities".into()))?;
        SimilarityDistributions::new(
            softmax_rows(&self.s_plus, self.lambda),
            softmax_rows(minus, self.lambda),
        )
    }
}

fn softmax_rows(s: &Tensor<f64>, lambda: f64) -> Tensor<f64> {
    let mut out = s.as_matrix();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(lambda * v));
        row.iter_mut().for_each(|v| *v = (lambda * *v - m).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Row-stochastic similarity distributions of the two branches.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistributions {
    pub z_plus: Tensor<f64>,
    pub z_minus: Tensor<f64>,
    /// Identity: the matched target of query `i` is target `i`.
    pub z_gt: Tensor<f64>,
}

impl SimilarityDistributions {
    pub fn new(z_plus: Tensor<f64>, z_minus: Tensor<f64>) -> Result<Self> {
        let b = z_plus.rows();
        for z in [&z_plus, &z_minus] {
            if z.rows() != b || z.cols() != b {
                return Err(SsnError::Dimension(format!(
                    "distribution {:?} for batch {b}",
                    z.shape()
                )));
            }
            for r in 0..b {
                let sum: f64 = z.row(r).iter().sum();
                if (sum - 1.0).abs() > 1e-6 || z.row(r).iter().any(|&p| p < 0.0) {
                    return Err(SsnError::Numeric(format!(
                        "row {r} is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        Ok(SimilarityDistributions {
            z_plus,
            z_minus,
            z_gt: Tensor::identity(b),
        })
    }
}

/// `(1/B) sum_i -log softmax(lambda s_i)_i` over the positive branch.
pub fn contrastive_loss(sims: &BatchSimilarities) -> Result<f64> {
    let s = &sims.s_plus;
    let b = s.rows();
    if b < 2 {
        return Err(SsnError::Argument(format!(
            "contrastive loss needs at least 2 in-batch samples, got {b}"
        )));
    }
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = s.row(i).iter().map(|&v| sims.lambda * v).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    Ok(total / b as f64)
}

/// How the divergence between branches enters the regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// `term1 + max(0, margin - term2)`.
    #[default]
    Hinge,
    /// `term1 - term2`, unbounded below.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlTerms {
    /// `mean_i KL(z_gt_i || z+_i)`.
    pub alignment: f64,
    /// `mean_i KL(z-_i || z+_i)`.
    pub separation: f64,
    pub value: f64,
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * ((pi + LOG_EPS).ln() - (qi + LOG_EPS).ln()))
        .sum()
}

pub fn kl_terms(dist: &SimilarityDistributions, margin: f64, mode: KlMode) -> KlTerms {
    let b = dist.z_plus.rows();
    let alignment = (0..b)
        .map(|i| kl_row(dist.z_gt.row(i), dist.z_plus.row(i)))
        .sum::<f64>()
        / b as f64;
    let separation = (0..b)
        .map(|i| kl_row(dist.z_minus.row(i), dist.z_plus.row(i)))
        .sum::<f64>()
        / b as f64;
    let value = match mode {
        KlMode::Hinge => alignment + (margin - separation).max(0.0),
        KlMode::Raw => alignment - separation,
    };
    KlTerms {
        alignment,
        separation,
        value,
    }
}

/// Hinged regularizer `term1 + max(0, margin - term2)`.
pub fn kl_regularizer(dist: &SimilarityDistributions, margin: f64) -> f64 {
    kl_terms(dist, margin, KlMode::Hinge).value
}

pub fn total_loss(l_c: f64, l_k: f64, use_kl: bool) -> f64 {
    if use_kl {
        l_c + l_k
    } else {
        l_c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub use_kl: bool,
    pub kl_margin: f64,
    pub kl_mode: KlMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: DEFAULT_TEMPERATURE,
            use_kl: true,
            kl_margin: DEFAULT_KL_MARGIN,
            kl_mode: KlMode::Hinge,
        }
    }
}

/// Scalar loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub contrastive: Var,
    pub kl: Option<Var>,
    pub total: Var,
}

/// Records the training objective for `B x d` query and target rows.
/// `negative` is ignored unless the KL term is enabled.
pub fn loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    positive: Var,
    negative: Option<Var>,
    targets: Var,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let lambda = T::lit(cfg.temperature);
    let t = tape.l2_normalize_rows(targets)?;
    let tt = tape.transpose(t);
    let scaled = |tape: &mut Tape<T>, q: Var| -> Result<Var> {
        let q = tape.l2_normalize_rows(q)?;
        let s = tape.matmul(q, tt)?;
        Ok(tape.scale(s, lambda))
    };
    let sp = scaled(tape, positive)?;
    let lp = tape.log_softmax_rows(sp);
    if tape.value(lp).rows() < 2 {
        return Err(SsnError::Argument(
            "contrastive loss needs at least 2 in-batch samples".into(),
        ));
    }
    let matched = tape.diag(lp)?;
    let mean = tape.mean_all(matched);
    let contrastive = tape.scale(mean, -T::one());
    let kl = match (cfg.use_kl, negative) {
        (true, Some(neg)) => {
            let sm = scaled(tape, neg)?;
            let lm = tape.log_softmax_rows(sm);
            let zm = tape.softmax_rows(sm);
            let diff = tape.sub(lm, lp)?;
            let prod = tape.mul(zm, diff)?;
            let rows = tape.sum_cols(prod);
            let separation = tape.mean_all(rows);
            let extra = match cfg.kl_mode {
                KlMode::Hinge => {
                    let neg_sep = tape.scale(separation, -T::one());
                    let gap = tape.add_scalar(neg_sep, T::lit(cfg.kl_margin));
                    tape.relu(gap)
                }
                KlMode::Raw => tape.scale(separation, -T::one()),
            };
            Some(tape.add(contrastive, extra)?)
        }
        _ => None,
    };
    let total = match kl {
        Some(k) => tape.add(contrastive, k)?,
        None => contrastive,
    };
    Ok(LossVars {
        contrastive,
        kl,
        total,
    })
}
