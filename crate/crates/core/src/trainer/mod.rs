//! Training loop: seeded batching, the joint loss, AdamW updates, the step
//! learning-rate schedule and resumable checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{model_gradcheck, GradCheckConfig, GradCheckReport, ParamCheck};
pub use optim::{AdamState, AdamW};

use crate::compose::{
    query_graph, target_graph, ModelConfig, QueryBatch, SsnParameters, TargetBatch, Variant,
};
use crate::datamodel::{FeatureStore, TokenFeatures};
use crate::error::{Result, SsnError};
use crate::losses::{loss_graph, KlMode, LossConfig, DEFAULT_KL_MARGIN, DEFAULT_TEMPERATURE};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    /// Reserved for gradient checks; training rejects it.
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs between decays; 0 disables decay.
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub temperature: f64,
    pub use_kl: bool,
    pub kl_margin: f64,
    pub kl_mode: KlMode,
    pub share_decompose_params: bool,
    pub heads: usize,
    /// Feed-forward width of the fusion layer; defaults to `d`.
    pub ffn_hidden: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Ssn,
            batch_size: 128,
            epochs: 50,
            lr: 5e-5,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            weight_decay: 1e-2,
            temperature: DEFAULT_TEMPERATURE,
            use_kl: true,
            kl_margin: DEFAULT_KL_MARGIN,
            kl_mode: KlMode::Hinge,
            share_decompose_params: false,
            heads: 8,
            ffn_hidden: None,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(SsnError::Config(m.to_string()));
        if self.batch_size < 2 {
            return err("batch_size must be at least 2 for in-batch negatives");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err("lr must be finite and non-negative");
        }
        if !(self.lr_decay_factor > 0.0) {
            return err("lr_decay_factor must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay must be non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err("temperature must be positive");
        }
        if !(self.kl_margin >= 0.0) {
            return err("kl_margin must be non-negative");
        }
        if self.ffn_hidden == Some(0) {
            return err("ffn_hidden must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, d_raw: usize, d: usize) -> ModelConfig {
        ModelConfig {
            d_raw,
            d,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden.unwrap_or(d),
            variant: self.variant,
            share_decompose_params: self.share_decompose_params,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            use_kl: self.use_kl && self.variant.has_bottom_branch(),
            kl_margin: self.kl_margin,
            kl_mode: self.kl_mode,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// `lr * factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if config.lr_decay_every == 0 {
        return config.lr;
    }
    config.lr * config.lr_decay_factor.powi((epoch / config.lr_decay_every) as i32)
}

/// One optimizer step's losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub l_c: f64,
    /// Absent when the KL term is inactive.
    pub l_k: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub name: String,
    pub value: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("epoch,step,L_c,L_k,total,lr\n");
    for r in records {
        let lk = r.l_k.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{}", r.epoch, r.step, r.l_c, lk, r.total, r.lr).unwrap();
    }
    out
}

pub fn write_loss_csv(records: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(records)).map_err(|e| SsnError::io(path, e))
}

/// Triplet order for `epoch`, a pure function of the seed.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Resumable training state over a borrowed store.
pub struct Trainer<'a> {
    store: &'a FeatureStore,
    config: TrainConfig,
    params: SsnParameters,
    state: AdamState,
    epoch: usize,
    batch: usize,
    global_step: u64,
    history: Vec<LossRecord>,
    metrics: Vec<MetricRecord>,
    order: Vec<usize>,
    always_negative: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(store: &'a FeatureStore, config: TrainConfig) -> Result<Self> {
        let params = SsnParameters::init(&config.model_config(store.d_raw(), store.d()), config.seed)?;
        Self::assemble(store, config, params, None, 0, 0, 0, Vec::new(), Vec::new())
    }

    /// Continues from a checkpoint; the store must match its widths.
    pub fn resume(store: &'a FeatureStore, ckpt: Checkpoint) -> Result<Self> {
        let c = ckpt;
        Self::assemble(
            store,
            c.config,
            c.params,
            Some(c.optimizer),
            c.epoch,
            c.batch_in_epoch,
            c.global_step,
            c.history,
            c.metrics,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        store: &'a FeatureStore,
        config: TrainConfig,
        params: SsnParameters,
        state: Option<AdamState>,
        epoch: usize,
        batch: usize,
        global_step: u64,
        history: Vec<LossRecord>,
        metrics: Vec<MetricRecord>,
    ) -> Result<Self> {
        config.validate()?;
        if config.precision != Precision::F32 {
            return Err(SsnError::Config(
                "training runs in f32; f64 is reserved for gradient checks".into(),
            ));
        }
        let expected = config.model_config(store.d_raw(), store.d());
        if params.config() != &expected {
            return Err(SsnError::Checkpoint(format!(
                "model {:?} does not match store and config {:?}",
                params.config(),
                expected
            )));
        }
        let n = store.triplets().len();
        if n < config.batch_size {
            return Err(SsnError::Data(format!(
                "{n} training triplets cannot fill a batch of {}",
                config.batch_size
            )));
        }
        if batch >= n / config.batch_size {
            return Err(SsnError::Checkpoint(format!(
                "batch {batch} out of range for {} batches per epoch",
                n / config.batch_size
            )));
        }
        let state = state.unwrap_or_else(|| AdamState::new(&params));
        if state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(SsnError::Checkpoint("optimizer moments do not match parameters".into()));
        }
        Ok(Trainer {
            store,
            order: epoch_order(config.seed, epoch, n),
            config,
            params,
            state,
            epoch,
            batch,
            global_step,
            history,
            metrics,
            always_negative: false,
        })
    }

    /// Builds the negative branch even when no loss term uses it. Updates
    /// must not change; exists to check exactly that.
    pub fn force_negative_branch(&mut self, on: bool) {
        self.always_negative = on;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn params(&self) -> &SsnParameters {
        &self.params
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    pub fn record_metric(&mut self, name: &str, value: f64) {
        self.metrics.push(MetricRecord {
            epoch: self.epoch,
            name: name.to_string(),
            value,
        });
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.store.triplets().len() / self.config.batch_size
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn batch_inputs(&self, idx: &[usize]) -> Result<(QueryBatch, TargetBatch)> {
        let trips = self.store.triplets();
        let mut pairs: Vec<(&TokenFeatures, &TokenFeatures)> = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            let t = &trips[i];
            pairs.push((self.store.item(t.reference_id)?, self.store.item(t.text_id)?));
            targets.push(self.store.item(t.target_id)?);
        }
        Ok((QueryBatch::new(&pairs)?, TargetBatch::new(&targets)?))
    }

    fn diagnostics(&self) -> String {
        self.params
            .entries()
            .iter()
            .map(|e| format!("{}={:.4e}", e.name, e.value.norm()))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<LossRecord> {
        let bs = self.config.batch_size;
        let idx: Vec<usize> = self.order[self.batch * bs..(self.batch + 1) * bs].to_vec();
        let (qb, tb) = self.batch_inputs(&idx)?;
        let loss_cfg = self.config.loss_config();
        let want_negative = loss_cfg.use_kl || self.always_negative;

        let mut tape = Tape::<f32>::new();
        let vars = self.params.register(&mut tape);
        let forward = |tape: &mut Tape<f32>| -> Result<_> {
            let q = query_graph(tape, &self.params, &vars, &qb, want_negative)?;
            let t = target_graph(tape, &self.params, &vars, &tb)?;
            let loss = loss_graph(tape, q.positive, q.negative, t, &loss_cfg)?;
            let total = tape.value(loss.total).item() as f64;
            if !total.is_finite() {
                return Err(SsnError::Numeric(format!("loss is {total}")));
            }
            Ok((loss, total))
        };
        let (loss, total) = forward(&mut tape).map_err(|e| match e {
            SsnError::Numeric(m) => SsnError::Numeric(format!(
                "{m} at epoch {} batch {} (step {}); parameter norms: {}",
                self.epoch,
                self.batch,
                self.global_step,
                self.diagnostics()
            )),
            other => other,
        })?;
        let grads = tape.backward(loss.total, &Tensor::scalar(1.0))?;
        if let Some((id, _)) = grads.params().iter().find(|(_, g)| !g.is_finite()) {
            return Err(SsnError::Numeric(format!(
                "non-finite gradient for {} at epoch {} batch {}; parameter norms: {}",
                self.params.entries()[*id].name,
                self.epoch,
                self.batch,
                self.diagnostics()
            )));
        }
        let lr = lr_at(self.epoch, &self.config);
        self.config
            .optimizer()
            .step(&mut self.params, &grads, &mut self.state, lr);

        let record = LossRecord {
            epoch: self.epoch,
            step: self.global_step,
            l_c: tape.value(loss.contrastive).item() as f64,
            l_k: loss.kl.map(|k| tape.value(k).item() as f64),
            total,
            lr,
        };
        self.history.push(record);
        self.global_step += 1;
        self.batch += 1;
        if self.batch == self.batches_per_epoch() {
            self.batch = 0;
            self.epoch += 1;
            self.order = epoch_order(self.config.seed, self.epoch, self.store.triplets().len());
        }
        Ok(record)
    }

    /// Runs up to `n` steps, stopping early when training is finished.
    pub fn run_steps(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.finished() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Trains to the configured epoch count, calling `on_epoch` after each
    /// completed epoch.
    pub fn run_with(&mut self, mut on_epoch: impl FnMut(&mut Self) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let e = self.epoch;
            self.step()?;
            if self.epoch != e {
                on_epoch(self)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.state.clone(),
            epoch: self.epoch,
            batch_in_epoch: self.batch,
            global_step: self.global_step,
            history: self.history.clone(),
            metrics: self.metrics.clone(),
        }
    }
}

/// Trains from scratch to `config.epochs`.
pub fn train(store: &FeatureStore, config: TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(store, config)?;
    t.run()?;
    Ok(t.checkpoint())
}
