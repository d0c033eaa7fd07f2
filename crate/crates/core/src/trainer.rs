//! Training schedule: PLA pretraining of the generator, then adversarial
//! rounds that alternate one discriminator update with one generator update
//! on a REINFORCE surrogate plus the PLA loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{pla_align, pla_targets};
use crate::corpus::{ComplicationTable, EhrDocument, Split};
use crate::discriminator::{gold_path, split_prefixes, LabeledPrefix, PathTag};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorTrace, StepTargets, Unroll};
use crate::metrics::jaccard;
use crate::model::{Model, ModelConfig};
use crate::numerics::{adam_step, seeded_rng, AdamConfig, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Adversarial epochs after pretraining.
    pub max_iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub pretrain_epochs: usize,
    pub max_len: usize,
    pub seed: u64,
    pub no_copy: bool,
    pub no_arl: bool,
    /// Weight of the PLA loss inside adversarial generator updates.
    pub lambda: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 200,
            batch_size: 32,
            adam: AdamConfig::default(),
            pretrain_epochs: 10,
            max_len: 8,
            seed: 0,
            no_copy: false,
            no_arl: false,
            lambda: 1.0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size and max_len must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lambda must be >= 0 and clip_norm > 0".into()));
        }
        Ok(())
    }

    pub fn ablation(&self) -> &'static str {
        match (self.no_copy, self.no_arl) {
            (false, false) => "full",
            (true, false) => "no_copy",
            (false, true) => "no_arl",
            (true, true) => "no_copy+no_arl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adversarial,
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-document PLA loss.
    pub generator_mle: f64,
    /// Mean per-document policy-gradient surrogate.
    pub generator_pg: Option<f64>,
    pub discriminator: Option<f64>,
    pub val_jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub ablation: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_jaccard: f64,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// Loss columns only (no timing), for reproducibility checks.
    pub fn loss_trace(&self) -> Vec<(f64, Option<f64>, Option<f64>)> {
        self.epochs
            .iter()
            .map(|e| (e.generator_mle, e.generator_pg, e.discriminator))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub documents: &'a [EhrDocument],
    pub split: &'a Split,
    pub table: &'a ComplicationTable,
}

/// One training-mode decode of a document and its PLA targets.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub doc: usize,
    pub trace: GeneratorTrace,
    pub pla: StepTargets,
    pub pla_loss: f64,
    /// Generated codes before the first STOP.
    pub path: Vec<usize>,
}

/// Adds `(code, weight · advantage)` on each generated step to `lambda · pla`.
pub fn adversarial_targets(rollout: &Rollout, rewards: &[f64], baseline: f64, lambda: f64) -> StepTargets {
    let mut targets: StepTargets = rollout
        .pla
        .iter()
        .map(|ts| ts.iter().map(|&(c, w)| (c, lambda * w)).collect())
        .collect();
    for (k, (&code, &r)) in rollout.path.iter().zip(rewards).enumerate() {
        let adv = r - baseline;
        if adv != 0.0 {
            targets[k].push((code, adv));
        }
    }
    targets
}

pub struct Trainer<'a> {
    pub model: Model,
    cfg: TrainConfig,
    data: TrainData<'a>,
    dropout_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, cfg: TrainConfig, data: TrainData<'a>) -> Result<Self> {
        cfg.validate()?;
        let n = model.config.generator.num_codes;
        let vocab = model.config.generator.encoder.vocab_size;
        for &i in data.split.train.iter().chain(&data.split.validation) {
            let doc = data
                .documents
                .get(i)
                .ok_or_else(|| Error::Data(format!("split references missing document {i}")))?;
            doc.validate(vocab, n)?;
            if doc.gold_codes.len() > cfg.max_len {
                return Err(Error::Config(format!(
                    "document {i} has {} gold codes but max_len is {}",
                    doc.gold_codes.len(),
                    cfg.max_len
                )));
            }
        }
        Ok(Trainer {
            dropout_rng: seeded_rng(cfg.seed, "dropout"),
            shuffle_rng: seeded_rng(cfg.seed, "shuffle"),
            model,
            cfg,
            data,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn diverged(&self, message: impl ToString) -> Error {
        Error::Training {
            epoch: self.epoch,
            message: message.to_string(),
        }
    }

    /// Training-mode decode of document `doc`. The unroll covers at least
    /// `|L| + 1` steps (capped at `max_len`); with `free_run` it continues
    /// until STOP or `max_len`.
    pub fn rollout(&mut self, doc: usize, free_run: bool) -> Result<Rollout> {
        let d = &self.data.documents[doc];
        let gold = &d.gold_codes;
        let steps = (gold.len() + 1).min(self.cfg.max_len);
        let plan = Unroll {
            min_steps: steps,
            max_len: if free_run { self.cfg.max_len } else { steps },
        };
        let gen = &self.model.generator;
        let trace = gen.forward(
            &self.model.gen_store,
            &d.tokens,
            self.data.table,
            Dropout::Sample(&mut self.dropout_rng),
            plan,
            None,
        )?;
        let choices = trace.choices();
        let probs: Vec<&[f64]> = trace.steps.iter().map(|s| s.mixture.probs.as_slice()).collect();
        let alignment = pla_align(&probs, &choices, gold, gold.len())?;
        let stop = gen.config().stop_id();
        let pla = pla_targets(&alignment, trace.steps.len(), stop);
        let pla_loss = Generator::targets_loss(&trace, &pla);
        let valid = choices.iter().position(|&c| c == stop).unwrap_or(choices.len());
        Ok(Rollout {
            doc,
            path: choices[..valid].to_vec(),
            trace,
            pla,
            pla_loss,
        })
    }

    fn apply(&self, store: &mut ParamStore, n: usize) -> Result<()> {
        store.scale_grads(1.0 / n as f64);
        let norm = store.clip_grad_norm(self.cfg.clip_norm);
        if !norm.is_finite() {
            return Err(self.diverged("non-finite gradient norm"));
        }
        adam_step(store, &self.cfg.adam).map_err(|e| self.diverged(e))
    }

    /// One generator update on the mean of `targets_of(rollout)` over the batch.
    fn generator_step<F>(&mut self, rollouts: &[Rollout], mut targets_of: F) -> Result<()>
    where
        F: FnMut(usize, &Rollout) -> StepTargets,
    {
        let mut store = std::mem::take(&mut self.model.gen_store);
        store.zero_grads();
        for (i, r) in rollouts.iter().enumerate() {
            let targets = targets_of(i, r);
            self.model.generator.backward(&mut store, &r.trace, &targets);
        }
        let out = self.apply(&mut store, rollouts.len());
        self.model.gen_store = store;
        out
    }

    /// One PLA update on `ids`; returns the mean pre-update PLA loss.
    pub fn pla_batch(&mut self, ids: &[usize]) -> Result<f64> {
        let rollouts = ids.iter().map(|&i| self.rollout(i, false)).collect::<Result<Vec<_>>>()?;
        let loss = rollouts.iter().map(|r| r.pla_loss).sum::<f64>() / rollouts.len() as f64;
        if !loss.is_finite() {
            return Err(self.diverged("PLA loss is not finite"));
        }
        self.generator_step(&rollouts, |_, r| r.pla.clone())?;
        Ok(loss)
    }

    /// Positive prefixes from gold paths, negative ones from generated paths.
    pub fn discriminator_batch(&self, rollouts: &[Rollout]) -> (Vec<LabeledPrefix>, Vec<Vec<f64>>) {
        let stop = self.model.generator.config().stop_id();
        let mut batch = Vec::new();
        let mut reps = Vec::with_capacity(rollouts.len());
        for (i, r) in rollouts.iter().enumerate() {
            let gold = gold_path(&self.data.documents[r.doc].gold_codes);
            batch.extend(split_prefixes(&gold, stop, PathTag::Positive, i));
            batch.extend(split_prefixes(&r.path, stop, PathTag::Negative, i));
            reps.push(r.trace.representation.clone());
        }
        (batch, reps)
    }

    /// One discriminator update; returns the pre-update loss.
    pub fn discriminator_update(&mut self, rollouts: &[Rollout]) -> Result<f64> {
        let (batch, reps) = self.discriminator_batch(rollouts);
        let mut store = std::mem::take(&mut self.model.disc_store);
        store.zero_grads();
        let loss = self.model.discriminator.loss_and_backward(&mut store, &batch, &reps);
        let out = loss.and_then(|loss| {
            // loss_and_backward already averages over the batch
            self.apply(&mut store, 1)?;
            Ok(loss)
        });
        self.model.disc_store = store;
        out
    }

    /// Reward of every generated prefix, per rollout.
    pub fn rewards(&self, rollouts: &[Rollout]) -> Result<Vec<Vec<f64>>> {
        let disc = &self.model.discriminator;
        rollouts
            .iter()
            .map(|r| {
                (1..=r.path.len())
                    .map(|k| disc.reward(&self.model.disc_store, &r.path[..k], &r.trace.representation))
                    .collect()
            })
            .collect()
    }

    /// Generator update on `λ·PLA + Σ (r − b)(−ln p)` with `b` the batch mean
    /// reward; `None` gives the pure PLA update. Returns the mean surrogate.
    pub fn generator_update(&mut self, rollouts: &[Rollout], rewards: Option<&[Vec<f64>]>) -> Result<f64> {
        let lambda = self.cfg.lambda;
        let Some(rewards) = rewards else {
            self.generator_step(rollouts, |_, r| r.pla.clone())?;
            return Ok(0.0);
        };
        let all: Vec<f64> = rewards.iter().flatten().copied().collect();
        let baseline = if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        };
        let mut pg = 0.0;
        for (r, rw) in rollouts.iter().zip(rewards) {
            for (k, (&code, &reward)) in r.path.iter().zip(rw).enumerate() {
                pg += (reward - baseline) * crate::alignment::nll(r.trace.steps[k].mixture.probs[code]);
            }
        }
        self.generator_step(rollouts, |i, r| adversarial_targets(r, &rewards[i], baseline, lambda))?;
        Ok(pg / rollouts.len() as f64)
    }

    /// One adversarial round on `ids`: discriminator update, then generator
    /// update scored by the updated discriminator. Returns
    /// `(mean PLA loss, mean surrogate, discriminator loss)`.
    pub fn adversarial_round(&mut self, ids: &[usize]) -> Result<(f64, f64, f64)> {
        let rollouts = ids.iter().map(|&i| self.rollout(i, true)).collect::<Result<Vec<_>>>()?;
        let mle = rollouts.iter().map(|r| r.pla_loss).sum::<f64>() / rollouts.len() as f64;
        if !mle.is_finite() {
            return Err(self.diverged("PLA loss is not finite"));
        }
        let d_loss = self.discriminator_update(&rollouts)?;
        let rewards = self.rewards(&rollouts)?;
        let pg = self.generator_update(&rollouts, Some(&rewards))?;
        Ok((mle, pg, d_loss))
    }

    fn shuffled_batches(&mut self) -> Vec<Vec<usize>> {
        let mut ids = self.data.split.train.clone();
        ids.shuffle(&mut self.shuffle_rng);
        ids.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One PLA epoch over the shuffled training split; mean batch loss.
    pub fn pretrain_epoch(&mut self) -> Result<f64> {
        self.epoch += 1;
        let batches = self.shuffled_batches();
        let mut total = 0.0;
        for b in &batches {
            total += self.pla_batch(b)? * b.len() as f64;
        }
        Ok(total / self.data.split.train.len().max(1) as f64)
    }

    /// One adversarial epoch; under `no_arl` a PLA epoch instead.
    pub fn adversarial_epoch(&mut self) -> Result<(f64, Option<f64>, Option<f64>)> {
        if self.cfg.no_arl {
            return Ok((self.pretrain_epoch()?, None, None));
        }
        self.epoch += 1;
        let batches = self.shuffled_batches();
        let n = self.data.split.train.len().max(1) as f64;
        let (mut mle, mut pg, mut disc) = (0.0, 0.0, 0.0);
        for b in &batches {
            let w = b.len() as f64;
            let (m, p, d) = self.adversarial_round(b)?;
            mle += m * w;
            pg += p * w;
            disc += d * w;
        }
        Ok((mle / n, Some(pg / n), Some(disc / n)))
    }

    pub fn validation_jaccard(&self) -> Result<f64> {
        if self.data.split.validation.is_empty() {
            return Ok(0.0);
        }
        let recs = self
            .model
            .predict(self.data.documents, &self.data.split.validation, self.data.table, self.cfg.max_len)?;
        jaccard(&recs)
    }

    /// Pretraining, then `max_iterations` adversarial epochs. The generator
    /// (and discriminator) of the best validation-Jaccard epoch are kept.
    pub fn run(mut self) -> Result<(Model, TrainReport)> {
        let start = Instant::now();
        let mut epochs = Vec::new();
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut best_stores = (self.model.gen_store.clone(), self.model.disc_store.clone());
        let total = self.cfg.pretrain_epochs + self.cfg.max_iterations;
        for e in 0..total {
            let (phase, (mle, pg, disc)) = if e < self.cfg.pretrain_epochs {
                (Phase::Pretrain, (self.pretrain_epoch()?, None, None))
            } else if self.cfg.no_arl {
                (Phase::Supervised, self.adversarial_epoch()?)
            } else {
                (Phase::Adversarial, self.adversarial_epoch()?)
            };
            let val = self.validation_jaccard()?;
            if val > best.1 {
                best = (e + 1, val);
                best_stores = (self.model.gen_store.clone(), self.model.disc_store.clone());
            }
            epochs.push(EpochRecord {
                epoch: e + 1,
                phase,
                generator_mle: mle,
                generator_pg: pg,
                discriminator: disc,
                val_jaccard: val,
            });
        }
        if !epochs.is_empty() {
            self.model.gen_store = best_stores.0;
            self.model.disc_store = best_stores.1;
        }
        let report = TrainReport {
            ablation: self.cfg.ablation().to_string(),
            epochs,
            best_epoch: best.0,
            best_val_jaccard: best.1.max(0.0),
            wall_clock_secs: start.elapsed().as_secs_f64(),
            checkpoint: None,
        };
        Ok((self.model, report))
    }
}

/// Builds the model (copy mode off under `no_copy`) and trains it.
pub fn train(mut model_cfg: ModelConfig, cfg: &TrainConfig, data: TrainData<'_>) -> Result<(Model, TrainReport)> {
    model_cfg.generator.copy = !cfg.no_copy;
    let model = Model::init(model_cfg, cfg.seed)?;
    Trainer::new(model, cfg.clone(), data)?.run()
}
