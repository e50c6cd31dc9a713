//! Late composition: modality embeddings, transformer fusion, learned
//! pooling and the convex-combination residual.
//!
//! Every forward pass runs on a [`Tape`] over a packed batch. The plain
//! functions at the bottom of this module wrap a one-off tape for inference.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::TokenFeatures;
use crate::decompose::{gate_tape, split_tape, GateVector};
use crate::error::{Result, SsnError};
use crate::numerics::{transformer_encoder_layer, EncoderVars, Scalar, Segment, Tape, Tensor, Var};

/// Model variants for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Full model: top branch `(L+, I_r0)`, bottom branch `(L-, I_r0 bar)`.
    #[serde(rename = "ssn")]
    Ssn,
    /// No decomposition, no token fusion.
    #[serde(rename = "baseline")]
    Baseline,
    /// Fusion of the undecomposed inputs `(L, I_r)`; no bottom branch.
    #[serde(rename = "ssn-ir-l")]
    NoDecompose,
    /// Top branch `(L, I_r0)`.
    #[serde(rename = "ssn-ir0-l")]
    PrototypeOnly,
    /// Top branch `(L+, I_r)`.
    #[serde(rename = "ssn-ir-lplus")]
    PositiveTextOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Ssn,
        Variant::Baseline,
        Variant::NoDecompose,
        Variant::PrototypeOnly,
        Variant::PositiveTextOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ssn => "ssn",
            Variant::Baseline => "baseline",
            Variant::NoDecompose => "ssn-ir-l",
            Variant::PrototypeOnly => "ssn-ir0-l",
            Variant::PositiveTextOnly => "ssn-ir-lplus",
        }
    }

    pub fn decomposes(self) -> bool {
        matches!(
            self,
            Variant::Ssn | Variant::PrototypeOnly | Variant::PositiveTextOnly
        )
    }

    /// Whether the variant produces `F_p-` (and so can use the KL term).
    pub fn has_bottom_branch(self) -> bool {
        self.decomposes()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = SsnError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                SsnError::Config(format!("unknown variant {s:?}, expected one of {names:?}"))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_raw: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
    pub share_decompose_params: bool,
}

impl ModelConfig {
    pub fn new(d_raw: usize, d: usize) -> Self {
        ModelConfig {
            d_raw,
            d,
            heads: 8,
            ffn_hidden: d,
            variant: Variant::Ssn,
            share_decompose_params: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_raw == 0 || self.ffn_hidden == 0 {
            return Err(SsnError::Config("model widths must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(SsnError::Config(format!(
                "{} heads do not divide d={}",
                self.heads, self.d
            )));
        }
        Ok(())
    }
}

/// Positions of each parameter in [`SsnParameters::entries`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub proj_w: usize,
    pub proj_b: usize,
    pub text_gate_w: usize,
    pub text_gate_b: usize,
    pub image_gate_w: usize,
    pub image_gate_b: usize,
    pub emb_text: usize,
    pub emb_image: usize,
    pub encoder: [usize; 16],
    pub pool_w1: usize,
    pub pool_b1: usize,
    pub pool_w2: usize,
    pub pool_b2: usize,
    pub comb_w: usize,
    pub comb_b: usize,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

struct Slot {
    name: &'static str,
    shape: [usize; 2],
    decay: bool,
    init: Init,
}

const ENCODER_NAMES: [&str; 16] = [
    "encoder.q.weight",
    "encoder.q.bias",
    "encoder.k.weight",
    "encoder.k.bias",
    "encoder.v.weight",
    "encoder.v.bias",
    "encoder.out.weight",
    "encoder.out.bias",
    "encoder.ln1.gain",
    "encoder.ln1.bias",
    "encoder.ff1.weight",
    "encoder.ff1.bias",
    "encoder.ff2.weight",
    "encoder.ff2.bias",
    "encoder.ln2.gain",
    "encoder.ln2.bias",
];

fn slots(cfg: &ModelConfig) -> (Vec<Slot>, Layout) {
    let (d, dr, h) = (cfg.d, cfg.d_raw, cfg.ffn_hidden);
    let fan = |n: usize| Init::Uniform(1.0 / (n as f64).sqrt());
    let weight = |name, r, c, init| Slot { name, shape: [r, c], decay: true, init };
    let plain = |name, r, c, init| Slot { name, shape: [r, c], decay: false, init };
    let mut s = vec![
        weight("proj.weight", dr, d, fan(dr)),
        plain("proj.bias", 1, d, Init::Zeros),
        weight("decompose.text.weight", 2 * d, 1, fan(2 * d)),
        plain("decompose.text.bias", 1, 1, Init::Zeros),
    ];
    let (image_gate_w, image_gate_b) = if cfg.share_decompose_params {
        (2, 3)
    } else {
        s.push(weight("decompose.image.weight", 2 * d, 1, fan(2 * d)));
        s.push(plain("decompose.image.bias", 1, 1, Init::Zeros));
        (4, 5)
    };
    let emb_text = s.len();
    s.push(plain("embed.text", 1, d, Init::Zeros));
    s.push(plain("embed.image", 1, d, Init::Zeros));
    let enc0 = s.len();
    for (i, name) in ENCODER_NAMES.iter().enumerate() {
        let slot = match i {
            0 | 2 | 4 | 6 => weight(name, d, d, fan(d)),
            8 | 14 => plain(name, 1, d, Init::Ones),
            10 => weight(name, d, h, fan(d)),
            11 => plain(name, 1, h, Init::Zeros),
            12 => weight(name, h, d, fan(h)),
            _ => plain(name, 1, d, Init::Zeros),
        };
        s.push(slot);
    }
    let pool = s.len();
    s.push(weight("pool.fc1.weight", 2 * d, d, fan(2 * d)));
    s.push(plain("pool.fc1.bias", 1, d, Init::Zeros));
    s.push(weight("pool.fc2.weight", d, d, fan(d)));
    s.push(plain("pool.fc2.bias", 1, d, Init::Zeros));
    s.push(weight("combiner.weight", 2 * d, 1, Init::Zeros));
    s.push(plain("combiner.bias", 1, 1, Init::Zeros));
    let layout = Layout {
        proj_w: 0,
        proj_b: 1,
        text_gate_w: 2,
        text_gate_b: 3,
        image_gate_w,
        image_gate_b,
        emb_text,
        emb_image: emb_text + 1,
        encoder: std::array::from_fn(|i| enc0 + i),
        pool_w1: pool,
        pool_b1: pool + 1,
        pool_w2: pool + 2,
        pool_b2: pool + 3,
        comb_w: pool + 4,
        comb_b: pool + 5,
    };
    (s, layout)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named parameter table of the whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct SsnParameters<T = f32> {
    config: ModelConfig,
    entries: Vec<ParamEntry<T>>,
    layout: Layout,
}

/// Learned per-modality offsets added before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEmbeddings<T = f32> {
    pub text: Vec<T>,
    pub image: Vec<T>,
}

impl SsnParameters<f32> {
    /// Fresh initialization: fan-in uniform weights, zero biases, unit norm
    /// gains, zero modality embeddings and a zero combiner head.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (slots, layout) = slots(config);
        let entries = slots
            .into_iter()
            .map(|s| {
                let n = s.shape[0] * s.shape[1];
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a) as f32).collect(),
                };
                ParamEntry {
                    name: s.name.to_string(),
                    value: Tensor::matrix(s.shape[0], s.shape[1], data).expect("slot shape"),
                    decay: s.decay,
                }
            })
            .collect();
        Ok(SsnParameters {
            config: config.clone(),
            entries,
            layout,
        })
    }
}

impl<T: Scalar> SsnParameters<T> {
    /// Rebuilds a table from `(name, tensor)` pairs, checking them against
    /// the layout `config` implies.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (slots, layout) = slots(config);
        if named.len() != slots.len() {
            return Err(SsnError::Model(format!(
                "expected {} parameters, got {}",
                slots.len(),
                named.len()
            )));
        }
        let entries = slots
            .into_iter()
            .zip(named)
            .map(|(s, (name, value))| {
                if name != s.name || value.shape() != s.shape {
                    return Err(SsnError::Model(format!(
                        "parameter {name} {:?} does not match {} {:?}",
                        value.shape(),
                        s.name,
                        s.shape
                    )));
                }
                Ok(ParamEntry {
                    name,
                    value,
                    decay: s.decay,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SsnParameters {
            config: config.clone(),
            entries,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.entries[id].value
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.entries[id].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.value)
    }

    pub fn cast<U: Scalar>(&self) -> SsnParameters<U> {
        SsnParameters {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
            layout: self.layout,
        }
    }

    pub fn embeddings(&self) -> ModalityEmbeddings<T> {
        ModalityEmbeddings {
            text: self.tensor(self.layout.emb_text).data().to_vec(),
            image: self.tensor(self.layout.emb_image).data().to_vec(),
        }
    }

    pub fn text_gate(&self) -> (&Tensor<T>, T) {
        let l = &self.layout;
        (self.tensor(l.text_gate_w), self.tensor(l.text_gate_b).data()[0])
    }

    pub fn image_gate(&self) -> (&Tensor<T>, T) {
        let l = &self.layout;
        (self.tensor(l.image_gate_w), self.tensor(l.image_gate_b).data()[0])
    }

    /// Records every parameter on `tape`; parameter `i` gets tape id `i`.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| tape.param(i, &e.value))
            .collect()
    }

    /// Digest of the configuration and every parameter value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &s in e.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Packed inputs for `B` (reference, text) pairs.
#[derive(Clone, Debug)]
pub struct QueryBatch<T = f32> {
    /// Raw reference patches, `sum(P_b) x d_raw`.
    pub ref_tokens: Tensor<T>,
    pub ref_lens: Vec<usize>,
    pub ref_globals: Tensor<T>,
    pub text_tokens: Tensor<T>,
    pub text_lens: Vec<usize>,
    pub text_globals: Tensor<T>,
}

/// Packed gallery images.
#[derive(Clone, Debug)]
pub struct TargetBatch<T = f32> {
    pub tokens: Tensor<T>,
    pub lens: Vec<usize>,
    pub globals: Tensor<T>,
}

fn pack<T: Scalar>(items: &[&TokenFeatures]) -> Result<(Tensor<T>, Vec<usize>, Tensor<T>)> {
    if items.is_empty() {
        return Err(SsnError::Data("empty batch".into()));
    }
    let parts: Vec<&Tensor<f32>> = items.iter().map(|f| &f.tokens).collect();
    let tokens = Tensor::vstack(&parts)?.cast();
    let lens = items.iter().map(|f| f.tokens.rows()).collect();
    let globals: Vec<Vec<f32>> = items.iter().map(|f| f.global.clone()).collect();
    Ok((tokens, lens, Tensor::from_rows(&globals)?.cast()))
}

impl<T: Scalar> QueryBatch<T> {
    pub fn new(pairs: &[(&TokenFeatures, &TokenFeatures)]) -> Result<Self> {
        let refs: Vec<&TokenFeatures> = pairs.iter().map(|p| p.0).collect();
        let texts: Vec<&TokenFeatures> = pairs.iter().map(|p| p.1).collect();
        let (ref_tokens, ref_lens, ref_globals) = pack(&refs)?;
        let (text_tokens, text_lens, text_globals) = pack(&texts)?;
        Ok(QueryBatch {
            ref_tokens,
            ref_lens,
            ref_globals,
            text_tokens,
            text_lens,
            text_globals,
        })
    }

    pub fn len(&self) -> usize {
        self.ref_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_lens.is_empty()
    }
}

impl<T: Scalar> TargetBatch<T> {
    pub fn new(items: &[&TokenFeatures]) -> Result<Self> {
        let (tokens, lens, globals) = pack(items)?;
        Ok(TargetBatch {
            tokens,
            lens,
            globals,
        })
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }
}

/// Handles produced by [`query_graph`].
#[derive(Clone, Copy, Debug)]
pub struct QueryGraph {
    /// `F_p+`, `B x d`.
    pub positive: Var,
    /// `F_p-`, when requested and the variant has a bottom branch.
    pub negative: Option<Var>,
    /// Top-branch combiner weight, `B x 1`.
    pub alpha: Var,
    /// Text gate column over packed text tokens.
    pub text_gate: Option<Var>,
    /// Image gate column over packed reference patches.
    pub image_gate: Option<Var>,
}

struct Graph<'a> {
    cfg: &'a ModelConfig,
    l: &'a Layout,
    v: &'a [Var],
}

impl Graph<'_> {
    fn encoder(&self) -> EncoderVars {
        let e = self.l.encoder.map(|i| self.v[i]);
        EncoderVars {
            wq: e[0],
            bq: e[1],
            wk: e[2],
            bk: e[3],
            wv: e[4],
            bv: e[5],
            wo: e[6],
            bo: e[7],
            ln1_gain: e[8],
            ln1_bias: e[9],
            ff_w1: e[10],
            ff_b1: e[11],
            ff_w2: e[12],
            ff_b2: e[13],
            ln2_gain: e[14],
            ln2_bias: e[15],
        }
    }

    fn project<T: Scalar>(&self, tape: &mut Tape<T>, raw: Var) -> Result<Var> {
        tape.linear(raw, self.v[self.l.proj_w], self.v[self.l.proj_b])
    }

    fn mlp<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = tape.linear(x, self.v[self.l.pool_w1], self.v[self.l.pool_b1])?;
        let h = tape.relu(h);
        tape.linear(h, self.v[self.l.pool_w2], self.v[self.l.pool_b2])
    }

    /// Fusion plus segment pooling and the MLP head.
    fn fuse_pool<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        text: Var,
        text_lens: &[usize],
        image: Var,
        image_lens: &[usize],
    ) -> Result<Var> {
        let t = tape.add_row(text, self.v[self.l.emb_text])?;
        let i = tape.add_row(image, self.v[self.l.emb_image])?;
        let ts = Segment::packed(text_lens);
        let is = Segment::packed(image_lens);
        let x = tape.interleave(t, &ts, i, &is)?;
        let lens: Vec<usize> = text_lens.iter().zip(image_lens).map(|(a, b)| a + b).collect();
        let segs = Segment::packed(&lens);
        let y = transformer_encoder_layer(tape, x, &self.encoder(), &segs, self.cfg.heads)?;
        let text_segs: Vec<Segment> = segs
            .iter()
            .zip(text_lens)
            .map(|(s, &m)| Segment::new(s.start, m))
            .collect();
        let image_segs: Vec<Segment> = segs
            .iter()
            .zip(text_lens)
            .map(|(s, &m)| Segment::new(s.start + m, s.len - m))
            .collect();
        let tp = tape.segment_mean(y, &text_segs)?;
        let ip = tape.segment_mean(y, &image_segs)?;
        let cat = tape.concat_cols(&[tp, ip])?;
        self.mlp(tape, cat)
    }

    /// Returns `(F_p, alpha)`.
    fn combine<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pooled: Var,
        ref_g: Var,
        text_g: Var,
    ) -> Result<(Var, Var)> {
        let cat = tape.concat_cols(&[ref_g, text_g])?;
        let logit = tape.linear(cat, self.v[self.l.comb_w], self.v[self.l.comb_b])?;
        let alpha = tape.sigmoid(logit);
        let beta = tape.one_minus(alpha);
        let r = tape.mul_col(ref_g, alpha)?;
        let t = tape.mul_col(text_g, beta)?;
        let out = tape.add(pooled, r)?;
        Ok((tape.add(out, t)?, alpha))
    }
}

fn check_params<T: Scalar>(params: &SsnParameters<T>, vars: &[Var]) -> Result<()> {
    if vars.len() != params.len() {
        return Err(SsnError::Model(format!(
            "{} parameter handles for {} parameters",
            vars.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Records the query side of the model for a packed batch.
pub fn query_graph<T: Scalar>(
    tape: &mut Tape<T>,
    params: &SsnParameters<T>,
    vars: &[Var],
    batch: &QueryBatch<T>,
    with_negative: bool,
) -> Result<QueryGraph> {
    check_params(params, vars)?;
    let g = Graph {
        cfg: &params.config,
        l: &params.layout,
        v: vars,
    };
    let (ml, pl) = (&batch.text_lens, &batch.ref_lens);
    let raw = tape.leaf(batch.ref_tokens.clone());
    let img = g.project(tape, raw)?;
    let txt = tape.leaf(batch.text_tokens.clone());
    let rg = tape.leaf(batch.ref_globals.clone());
    let tg = tape.leaf(batch.text_globals.clone());
    let variant = params.config.variant;

    if variant == Variant::Baseline {
        let tp = tape.segment_mean(txt, &Segment::packed(ml))?;
        let ip = tape.segment_mean(img, &Segment::packed(pl))?;
        let cat = tape.concat_cols(&[tp, ip])?;
        let pooled = g.mlp(tape, cat)?;
        let (positive, alpha) = g.combine(tape, pooled, rg, tg)?;
        return Ok(QueryGraph {
            positive,
            negative: None,
            alpha,
            text_gate: None,
            image_gate: None,
        });
    }
    if variant == Variant::NoDecompose {
        let pooled = g.fuse_pool(tape, txt, ml, img, pl)?;
        let (positive, alpha) = g.combine(tape, pooled, rg, tg)?;
        return Ok(QueryGraph {
            positive,
            negative: None,
            alpha,
            text_gate: None,
            image_gate: None,
        });
    }

    let l = &params.layout;
    let ctx = tape.repeat_rows(rg, ml)?;
    let c_l = gate_tape(tape, txt, ctx, vars[l.text_gate_w], vars[l.text_gate_b])?;
    let (l_pos, l_neg) = split_tape(tape, txt, c_l)?;
    let neg_g = tape.segment_mean(l_neg, &Segment::packed(ml))?;
    let ctx = tape.repeat_rows(neg_g, pl)?;
    let c_r = gate_tape(tape, img, ctx, vars[l.image_gate_w], vars[l.image_gate_b])?;
    let (kept, discarded) = split_tape(tape, img, c_r)?;
    let (top_text, top_image) = match variant {
        Variant::PrototypeOnly => (txt, kept),
        Variant::PositiveTextOnly => (l_pos, img),
        _ => (l_pos, kept),
    };
    let pooled = g.fuse_pool(tape, top_text, ml, top_image, pl)?;
    let (positive, alpha) = g.combine(tape, pooled, rg, tg)?;
    let negative = if with_negative {
        let pooled = g.fuse_pool(tape, l_neg, ml, discarded, pl)?;
        Some(g.combine(tape, pooled, rg, tg)?.0)
    } else {
        None
    };
    Ok(QueryGraph {
        positive,
        negative,
        alpha,
        text_gate: Some(c_l),
        image_gate: Some(c_r),
    })
}

/// Records `F_tg` for a packed batch of gallery images: image-only fusion,
/// the image pool duplicated into both MLP halves, plus the global feature.
pub fn target_graph<T: Scalar>(
    tape: &mut Tape<T>,
    params: &SsnParameters<T>,
    vars: &[Var],
    batch: &TargetBatch<T>,
) -> Result<Var> {
    check_params(params, vars)?;
    let g = Graph {
        cfg: &params.config,
        l: &params.layout,
        v: vars,
    };
    let raw = tape.leaf(batch.tokens.clone());
    let img = g.project(tape, raw)?;
    let segs = Segment::packed(&batch.lens);
    let pool = if params.config.variant == Variant::Baseline {
        tape.segment_mean(img, &segs)?
    } else {
        let x = tape.add_row(img, vars[params.layout.emb_image])?;
        let y = transformer_encoder_layer(tape, x, &g.encoder(), &segs, params.config.heads)?;
        tape.segment_mean(y, &segs)?
    };
    let cat = tape.concat_cols(&[pool, pool])?;
    let pooled = g.mlp(tape, cat)?;
    let globals = tape.leaf(batch.globals.clone());
    tape.add(pooled, globals)
}

/// Output of the query side for one (reference, text) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedQuery<T = f32> {
    /// `F_p+`, the retrieval query.
    pub positive: Vec<T>,
    /// `F_p-`, present for variants with a bottom branch.
    pub negative: Option<Vec<T>>,
}

/// Gallery images encoded per tape, bounding tape memory.
const ENCODE_CHUNK: usize = 64;

pub fn forward_query<T: Scalar>(
    reference: &TokenFeatures,
    text: &TokenFeatures,
    params: &SsnParameters<T>,
) -> Result<ComposedQuery<T>> {
    let batch = QueryBatch::new(&[(reference, text)])?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = query_graph(&mut tape, params, &vars, &batch, true)?;
    Ok(ComposedQuery {
        positive: tape.value(out.positive).data().to_vec(),
        negative: out.negative.map(|v| tape.value(v).data().to_vec()),
    })
}

/// `F_p+` for many pairs, one row per pair.
pub fn compose_queries<T: Scalar>(
    pairs: &[(&TokenFeatures, &TokenFeatures)],
    params: &SsnParameters<T>,
) -> Result<Tensor<T>> {
    let mut rows = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(ENCODE_CHUNK) {
        let batch = QueryBatch::new(chunk)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let out = query_graph(&mut tape, params, &vars, &batch, false)?;
        rows.push(tape.value(out.positive).clone());
    }
    stack(rows, params.config.d)
}

pub fn encode_target<T: Scalar>(target: &TokenFeatures, params: &SsnParameters<T>) -> Result<Vec<T>> {
    Ok(encode_targets(&[target], params)?.into_data())
}

/// `F_tg` for many images, one row per image.
pub fn encode_targets<T: Scalar>(
    items: &[&TokenFeatures],
    params: &SsnParameters<T>,
) -> Result<Tensor<T>> {
    let mut rows = Vec::with_capacity(items.len());
    for chunk in items.chunks(ENCODE_CHUNK) {
        let batch = TargetBatch::new(chunk)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let out = target_graph(&mut tape, params, &vars, &batch)?;
        rows.push(tape.value(out).clone());
    }
    stack(rows, params.config.d)
}

fn stack<T: Scalar>(rows: Vec<Tensor<T>>, d: usize) -> Result<Tensor<T>> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, d]));
    }
    Tensor::vstack(&rows.iter().collect::<Vec<_>>())
}

/// Text and image gates of the full model for one query.
pub fn query_gates<T: Scalar>(
    reference: &TokenFeatures,
    text: &TokenFeatures,
    params: &SsnParameters<T>,
) -> Result<(GateVector<T>, GateVector<T>)> {
    if !params.config.variant.decomposes() {
        return Err(SsnError::Model(format!(
            "variant {} has no gates",
            params.config.variant
        )));
    }
    let batch = QueryBatch::new(&[(reference, text)])?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = query_graph(&mut tape, params, &vars, &batch, false)?;
    let read = |v: Option<Var>| GateVector::new(tape.value(v.unwrap()).data().to_vec());
    Ok((read(out.text_gate), read(out.image_gate)))
}

/// Transformer fusion of one (text, image) pair of projected token sets.
pub fn fuse<T: Scalar>(
    text_part: &Tensor<T>,
    image_part: &Tensor<T>,
    params: &SsnParameters<T>,
) -> Result<Tensor<T>> {
    let d = params.config.d;
    if text_part.cols() != d || image_part.cols() != d {
        return Err(SsnError::Model(format!(
            "fusion inputs of width {} and {} for d={d}",
            text_part.cols(),
            image_part.cols()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let g = Graph {
        cfg: &params.config,
        l: &params.layout,
        v: &vars,
    };
    let t = tape.leaf(text_part.as_matrix());
    let i = tape.leaf(image_part.as_matrix());
    let t = tape.add_row(t, vars[params.layout.emb_text])?;
    let i = tape.add_row(i, vars[params.layout.emb_image])?;
    let x = tape.concat_rows(&[t, i])?;
    let segs = [Segment::new(0, text_part.rows() + image_part.rows())];
    let y = transformer_encoder_layer(&mut tape, x, &g.encoder(), &segs, params.config.heads)?;
    Ok(tape.value(y).clone())
}

/// Segment-mean pooling of fused rows plus the MLP head. `text_rows == 0`
/// selects the target-path rule (image pool in both halves).
pub fn pool_fused<T: Scalar>(
    fused: &Tensor<T>,
    text_rows: usize,
    params: &SsnParameters<T>,
) -> Result<Vec<T>> {
    let n = fused.rows();
    if text_rows >= n {
        return Err(SsnError::Model(format!(
            "{text_rows} text rows leave no image rows among {n}"
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let g = Graph {
        cfg: &params.config,
        l: &params.layout,
        v: &vars,
    };
    let x = tape.leaf(fused.as_matrix());
    let ip = tape.segment_mean(x, &[Segment::new(text_rows, n - text_rows)])?;
    let tp = if text_rows == 0 {
        ip
    } else {
        tape.segment_mean(x, &[Segment::new(0, text_rows)])?
    };
    let cat = tape.concat_cols(&[tp, ip])?;
    let y = g.mlp(&mut tape, cat)?;
    Ok(tape.value(y).data().to_vec())
}

/// `pooled + alpha ref_global + (1 - alpha) text_global`, with `alpha` from
/// the combiner head. Returns the composed vector and `alpha`.
pub fn combine<T: Scalar>(
    pooled: &[T],
    ref_global: &[T],
    text_global: &[T],
    params: &SsnParameters<T>,
) -> Result<(Vec<T>, T)> {
    let d = params.config.d;
    if pooled.len() != d || ref_global.len() != d || text_global.len() != d {
        return Err(SsnError::Model("combiner inputs must have width d".into()));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let g = Graph {
        cfg: &params.config,
        l: &params.layout,
        v: &vars,
    };
    let row = |v: &[T]| Tensor::matrix(1, d, v.to_vec());
    let p = tape.leaf(row(pooled)?);
    let r = tape.leaf(row(ref_global)?);
    let t = tape.leaf(row(text_global)?);
    let (out, alpha) = g.combine(&mut tape, p, r, t)?;
    Ok((tape.value(out).data().to_vec(), tape.value(alpha).data()[0]))
}
