//! Target-matching training.
//!
//! Each step draws, for every record in the minibatch, a time
//! `t ~ U[t_eps, t_max)` and noise `z ~ N(0, I)`, forms
//! `x_t = μ_t(x0, x1) + σ_t·z` with `x0` the record's class codeword, and
//! takes one Adam step on the mean of `‖x̂0 − x0‖²`.
//!
//! Randomness is counter-based: the draws for step `s` come from a ChaCha
//! stream keyed by `(seed, s)` and the minibatch order of epoch `e` from a
//! stream keyed by `(seed, e)`. A run can therefore be resumed from the step
//! counter, parameters and Adam moments alone. Parameters and moments are
//! rounded to `f32` after every update, which makes the `f32` checkpoint an
//! exact copy of the training state.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::data::{FeatureDataset, FeatureRecord};
use crate::estimator::{Estimator, EstimatorParams, TargetEstimator, TrainingExample};
use crate::evaluation::evaluate;
use crate::sampler::SamplerConfig;
use crate::schedules::{perturb, ScheduleParams};
use crate::taxonomy::TaxonomyCodebook;
use crate::{Error, Result};

const DOMAIN_STEP: u64 = 1;
const DOMAIN_EPOCH: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    /// Seeds parameter initialization, minibatch order and the per-step draws.
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Validation accuracy is computed every this many steps; 0 disables it.
    pub eval_every: u64,
    /// Checkpoint interval in steps; 0 writes only the final state.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 2000,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: AdamConfig::default(),
            clip_norm: 1.0,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("train.total_steps must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!(
                "train.clip_norm must be >= 0, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EstimatorParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn fresh(estimator: &Estimator, seed: u64) -> Self {
        let params = estimator.init(seed);
        let n = params.len();
        Self {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            seed,
        }
    }

    pub fn to_checkpoint(&self, estimator: &Estimator) -> Checkpoint {
        Checkpoint {
            config: estimator.config().clone(),
            params: self.params.clone(),
            optimizer: Some(OptimizerSnapshot {
                step: self.step,
                seed: self.seed,
                m: self.m.clone(),
                v: self.v.clone(),
            }),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let o = ck
            .optimizer
            .ok_or_else(|| Error::invalid("checkpoint has no optimizer state to resume from"))?;
        Ok(Self {
            params: ck.params,
            m: o.m,
            v: o.v,
            step: o.step,
            seed: o.seed,
        })
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
}

fn keyed_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Uniform draw from `[t_eps, t_max)`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, params: &ScheduleParams) -> Result<f64> {
    params.validate()?;
    let u: f64 = rng.random();
    Ok(params.t_eps + (params.t_max - params.t_eps) * u)
}

fn batch_digest(batch: &[&FeatureRecord]) -> String {
    let mut h = Sha256::new();
    for r in batch {
        h.update(r.label.unwrap_or(u32::MAX).to_le_bytes());
        for v in r.condition_stack.iter().chain(r.terminal.iter()) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Applies one Adam step to `state`. On error `state` is left untouched.
pub fn train_step(
    estimator: &Estimator,
    codebook: &TaxonomyCodebook,
    schedule: &ScheduleParams,
    config: &TrainConfig,
    state: &mut TrainState,
    batch: &[&FeatureRecord],
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    let next_step = state.step + 1;
    let mut rng = keyed_rng(state.seed, DOMAIN_STEP, state.step);
    let mut examples = Vec::with_capacity(batch.len());
    for r in batch {
        let label = r
            .label
            .ok_or_else(|| Error::invalid("training record has no label"))?
            as usize;
        if label >= codebook.num_classes() {
            return Err(Error::invalid(format!(
                "label {label} outside the codebook"
            )));
        }
        let x0 = codebook.codeword(label).to_owned();
        let t = sample_timestep(&mut rng, schedule)?;
        let z = Array1::from_shape_fn(x0.len(), |_| rng.sample::<f64, _>(StandardNormal));
        let x_t = perturb(x0.view(), r.terminal_f64().view(), t, schedule, z.view())?;
        examples.push(TrainingExample {
            x_t,
            condition_stack: r.condition_f64(),
            t,
            x0,
        });
    }
    let (loss, mut grads) = estimator.loss_and_gradients(&state.params, &examples)?;
    let grad_norm = grads.global_norm();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::numeric(
            format!("train step {next_step}"),
            format!(
                "loss {loss}, gradient norm {grad_norm}, batch digest {}",
                batch_digest(batch)
            ),
        ));
    }
    let clipped = config.clip_norm > 0.0 && grad_norm > config.clip_norm;
    if clipped {
        let scale = config.clip_norm / grad_norm;
        grads.values.iter_mut().for_each(|g| *g *= scale);
        log::debug!(
            "step {next_step}: clipped gradient norm {grad_norm:.4} to {}",
            config.clip_norm
        );
    }

    let AdamConfig { beta1, beta2, eps } = config.optimizer;
    let bc1 = 1.0 - beta1.powf(next_step as f64);
    let bc2 = 1.0 - beta2.powf(next_step as f64);
    let lr = config.learning_rate;
    for (((p, m), v), g) in state
        .params
        .values
        .iter_mut()
        .zip(&mut state.m)
        .zip(&mut state.v)
        .zip(&grads.values)
    {
        let m_new = beta1 * *m + (1.0 - beta1) * g;
        let v_new = beta2 * *v + (1.0 - beta2) * g * g;
        let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
        *m = m_new as f32 as f64;
        *v = v_new as f32 as f64;
        *p = (*p - update) as f32 as f64;
    }
    state.step = next_step;
    Ok(StepOutcome {
        loss,
        grad_norm,
        clipped,
    })
}

/// Indices of the minibatch for step `step`: consecutive slices of a stream
/// that concatenates one fresh permutation per epoch.
pub struct BatchOrder {
    seed: u64,
    len: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(seed: u64, len: usize) -> Self {
        Self {
            seed,
            len,
            epoch: None,
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut keyed_rng(self.seed, DOMAIN_EPOCH, epoch));
            self.epoch = Some((epoch, perm));
        }
        &self.epoch.as_ref().expect("just set").1
    }

    pub fn batch(&mut self, step: u64, batch_size: usize) -> Vec<usize> {
        let n = self.len as u64;
        let start = step * batch_size as u64;
        (start..start + batch_size as u64)
            .map(|g| {
                let (epoch, pos) = (g / n, (g % n) as usize);
                self.permutation(epoch)[pos]
            })
            .collect()
    }
}

/// Borrowed estimator/params pair for evaluation inside the loop.
struct Snapshot<'a> {
    estimator: &'a Estimator,
    params: &'a EstimatorParams,
}

impl TargetEstimator for Snapshot<'_> {
    fn dim(&self) -> usize {
        self.estimator.config().dim
    }

    fn estimate(
        &self,
        x_t: ndarray::ArrayView1<'_, f64>,
        condition_stack: ndarray::ArrayView2<'_, f64>,
        t: f64,
    ) -> Result<Array1<f64>> {
        self.estimator.forward(self.params, x_t, condition_stack, t)
    }
}

/// Drives [`train_step`] until `config.total_steps`.
pub struct TrainLoop<'a> {
    pub estimator: &'a Estimator,
    pub codebook: &'a TaxonomyCodebook,
    pub schedule: ScheduleParams,
    pub config: &'a TrainConfig,
    /// Held-out split and sampler used for `val_accuracy`.
    pub validation: Option<(&'a FeatureDataset, SamplerConfig)>,
    /// Receives one JSON line per step.
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint: Option<&'a Path>,
}

impl TrainLoop<'_> {
    /// Continues from `state` (fresh or resumed). If a step fails, the last
    /// good state is checkpointed before the error is returned.
    pub fn run(
        mut self,
        train: &FeatureDataset,
        mut state: TrainState,
    ) -> Result<(TrainState, Vec<MetricRecord>)> {
        self.config.validate()?;
        self.schedule.validate()?;
        let dim = self.estimator.config().dim;
        if train.dim() != dim || self.codebook.dim() != dim {
            return Err(Error::invalid(format!(
                "dims disagree: dataset {}, codebook {}, estimator {dim}",
                train.dim(),
                self.codebook.dim()
            )));
        }
        if train.num_layers() != self.estimator.config().num_condition_layers {
            return Err(Error::invalid(format!(
                "dataset has {} condition layers, estimator expects {}",
                train.num_layers(),
                self.estimator.config().num_condition_layers
            )));
        }
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        if state.seed != self.config.seed {
            return Err(Error::Config(format!(
                "state was trained with seed {}, config says {}",
                state.seed, self.config.seed
            )));
        }
        let started = Instant::now();
        let mut order = BatchOrder::new(self.config.seed, train.len());
        let mut log = Vec::new();
        while state.step < self.config.total_steps {
            let idx = order.batch(state.step, self.config.batch_size);
            let batch: Vec<&FeatureRecord> = idx.iter().map(|&i| &train.records()[i]).collect();
            let outcome = match train_step(
                self.estimator,
                self.codebook,
                &self.schedule,
                self.config,
                &mut state,
                &batch,
            ) {
                Ok(o) => o,
                Err(e) => {
                    if let Some(path) = self.checkpoint {
                        state.to_checkpoint(self.estimator).save(path)?;
                    }
                    return Err(e);
                }
            };
            let val_accuracy = match self.validation {
                Some((val, sampler))
                    if self.config.eval_every > 0 && state.step % self.config.eval_every == 0 =>
                {
                    let model = Snapshot {
                        estimator: self.estimator,
                        params: &state.params,
                    };
                    Some(evaluate(val, &model, self.codebook, &sampler)?.accuracy)
                }
                _ => None,
            };
            let record = MetricRecord {
                step: state.step,
                loss: outcome.loss,
                wall_ms: started.elapsed().as_millis() as u64,
                val_accuracy,
                grad_norm: outcome.grad_norm,
                clipped: outcome.clipped,
            };
            if let Some(w) = self.metrics.as_deref_mut() {
                let line = serde_json::to_string(&record).expect("metric serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("<metrics>", e))?;
            }
            if let Some(acc) = val_accuracy {
                log::info!(
                    "step {}: loss {:.5}, validation accuracy {acc:.4}",
                    state.step,
                    outcome.loss
                );
            }
            log.push(record);
            if let Some(path) = self.checkpoint {
                let every = self.config.checkpoint_every;
                if (every > 0 && state.step % every == 0) || state.step == self.config.total_steps {
                    state.to_checkpoint(self.estimator).save(path)?;
                }
            }
        }
        Ok((state, log))
    }
}
