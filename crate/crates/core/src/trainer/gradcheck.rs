//! Finite-difference check of every parameter gradient of the joint loss on
//! a toy model, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compose::{query_graph, target_graph, ModelConfig, QueryBatch, SsnParameters, TargetBatch, Variant};
use crate::datamodel::{Role, TokenFeatures};
use crate::error::Result;
use crate::losses::{loss_graph, KlMode, LossConfig, DEFAULT_KL_MARGIN, DEFAULT_TEMPERATURE};
use crate::numerics::gradcheck::{central_difference, tensor_error_with_floor, tensor_relative_error};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub d: usize,
    pub d_raw: usize,
    pub text_tokens: usize,
    pub patches: usize,
    pub batch: usize,
    pub heads: usize,
    pub variant: Variant,
    pub temperature: f64,
    pub kl_mode: KlMode,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            d: 16,
            d_raw: 24,
            text_tokens: 4,
            patches: 9,
            batch: 3,
            heads: 2,
            variant: Variant::Ssn,
            temperature: DEFAULT_TEMPERATURE,
            kl_mode: KlMode::Hinge,
            step: 1e-4,
            seed: 0,
        }
    }
}

/// Analytic gradient norms below this fraction of the full gradient norm
/// count as exactly zero.
pub const VANISHING: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Norm-wise relative error; relative to the full gradient norm when
    /// `vanishing`.
    pub error: f64,
    pub vanishing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> (&str, f64) {
        self.per_param
            .iter()
            .map(|p| (p.name.as_str(), p.error))
            .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }
}

fn features(rng: &mut ChaCha8Rng, id: u64, role: Role, rows: usize, width: usize, d: usize) -> TokenFeatures {
    let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    TokenFeatures {
        item_id: id,
        role,
        global: draw(d),
        tokens: Tensor::matrix(rows, width, draw(rows * width)).expect("shape"),
    }
}

/// Total loss of the toy batch; differentiable in `params`.
fn loss_value(
    params: &SsnParameters<f64>,
    qb: &QueryBatch<f64>,
    tb: &TargetBatch<f64>,
    cfg: &LossConfig,
    grads: bool,
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let vars = params.register(&mut tape);
    let q = query_graph(&mut tape, params, &vars, qb, cfg.use_kl)?;
    let t = target_graph(&mut tape, params, &vars, tb)?;
    let loss = loss_graph(&mut tape, q.positive, q.negative, t, cfg)?;
    let value = tape.value(loss.total).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(loss.total, &Tensor::scalar(1.0))?;
    let out = (0..params.len())
        .map(|i| {
            g.param(i)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params.tensor(i).shape()))
        })
        .collect();
    Ok((value, out))
}

/// Compares tape gradients with central differences for every parameter.
/// Parameters are drawn uniformly so that no zero-initialized term hides an
/// error.
pub fn model_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = ModelConfig {
        heads: cfg.heads,
        ffn_hidden: cfg.d,
        variant: cfg.variant,
        ..ModelConfig::new(cfg.d_raw, cfg.d)
    };
    let mut params = SsnParameters::init(&model, cfg.seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for i in 0..params.len() {
        for v in params.tensor_mut(i).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let mut items = Vec::new();
    for b in 0..cfg.batch as u64 {
        items.push((
            features(&mut rng, 3 * b, Role::ReferenceImage, cfg.patches, cfg.d_raw, cfg.d),
            features(&mut rng, 3 * b + 1, Role::Text, cfg.text_tokens, cfg.d, cfg.d),
            features(&mut rng, 3 * b + 2, Role::TargetImage, cfg.patches, cfg.d_raw, cfg.d),
        ));
    }
    let pairs: Vec<_> = items.iter().map(|(r, t, _)| (r, t)).collect();
    let targets: Vec<_> = items.iter().map(|(_, _, g)| g).collect();
    let qb = QueryBatch::<f64>::new(&pairs)?;
    let tb = TargetBatch::<f64>::new(&targets)?;
    let loss_cfg = LossConfig {
        temperature: cfg.temperature,
        use_kl: cfg.variant.has_bottom_branch(),
        kl_margin: DEFAULT_KL_MARGIN,
        kl_mode: cfg.kl_mode,
    };

    let (_, analytic) = loss_value(&params, &qb, &tb, &loss_cfg, true)?;
    let inputs: Vec<Tensor<f64>> = (0..params.len()).map(|i| params.tensor(i).clone()).collect();
    let mut probe = params.clone();
    let mut failure = None;
    let numeric = central_difference(&inputs, cfg.step, |xs| {
        for (i, x) in xs.iter().enumerate() {
            *probe.tensor_mut(i) = x.clone();
        }
        match loss_value(&probe, &qb, &tb, &loss_cfg, false) {
            Ok((v, _)) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    // A relative error is undefined for a gradient that is exactly zero
    // (the key bias: softmax ignores a per-row constant). Such a tensor is
    // measured against the norm of the whole gradient instead.
    let total = analytic.iter().map(|a| a.norm().powi(2)).sum::<f64>().sqrt();
    let per_param = params
        .entries()
        .iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(e, (a, n))| {
            let vanishing = a.norm() <= VANISHING * total;
            let error = if vanishing {
                tensor_error_with_floor(a, n, total)
            } else {
                tensor_relative_error(a, n)
            };
            ParamCheck {
                name: e.name.clone(),
                error,
                vanishing,
            }
        })
        .collect();
    Ok(GradCheckReport { per_param })
}
