//! Path discriminator: an LSTM over code prefixes, a sigmoid reward over the
//! final hidden state joined with the document representation, and the
//! cross-entropy that separates gold prefixes from generated ones.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{expect_slot, CandidateActivation, LstmCache, LstmCell, LstmState, PROB_FLOOR};
use crate::numerics::{axpy, dot, sigmoid, ParamStore, SlotId, Tensor2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub num_codes: usize,
    pub code_dim: usize,
    pub hidden: usize,
    /// Dimension of the document representation joined to the path state.
    pub repr_dim: usize,
    pub candidate: CandidateActivation,
}

impl DiscriminatorConfig {
    pub fn standard(num_codes: usize) -> Self {
        DiscriminatorConfig {
            num_codes,
            code_dim: 100,
            hidden: 300,
            repr_dim: 300,
            // a ReLU candidate loses every unit on small path models
            candidate: CandidateActivation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_codes == 0 || self.code_dim == 0 || self.hidden == 0 || self.repr_dim == 0 {
            return Err(Error::Config("discriminator dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathTag {
    /// Prefix of a gold path.
    Positive,
    /// Prefix of a generated path.
    Negative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPrefix {
    pub codes: Vec<usize>,
    pub tag: PathTag,
    /// Index of the document's representation in the batch.
    pub doc: usize,
}

/// Prefixes of lengths `1..=t` of the valid part of `path` (up to the first
/// `stop`).
pub fn split_prefixes(path: &[usize], stop: usize, tag: PathTag, doc: usize) -> Vec<LabeledPrefix> {
    let t = path.iter().position(|&c| c == stop).unwrap_or(path.len());
    (1..=t)
        .map(|k| LabeledPrefix {
            codes: path[..k].to_vec(),
            tag,
            doc,
        })
        .collect()
}

/// Gold sets serialised in ascending code id.
pub fn gold_path(gold: &[usize]) -> Vec<usize> {
    let mut p = gold.to_vec();
    p.sort_unstable();
    p.dedup();
    p
}

/// Forward intermediates of one reward evaluation.
#[derive(Clone, Debug)]
pub struct RewardTrace {
    codes: Vec<usize>,
    steps: Vec<LstmCache>,
    features: Vec<f64>,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    code_embedding: SlotId,
    lstm: LstmCell,
    reward_weight: SlotId,
    reward_bias: SlotId,
}

impl Discriminator {
    pub fn init(cfg: DiscriminatorConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let code_embedding = store.add("disc.code_embedding", Tensor2::uniform(cfg.num_codes + 2, cfg.code_dim, rng))?;
        let lstm = LstmCell::init("disc.lstm", cfg.code_dim, cfg.hidden, cfg.candidate, store, rng)?;
        let reward_weight = store.add("disc.reward.weight", Tensor2::uniform(1, cfg.hidden + cfg.repr_dim, rng))?;
        let reward_bias = store.add("disc.reward.bias", Tensor2::uniform(1, 1, rng))?;
        Ok(Discriminator {
            cfg,
            code_embedding,
            lstm,
            reward_weight,
            reward_bias,
        })
    }

    pub fn attach(cfg: DiscriminatorConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Discriminator {
            code_embedding: expect_slot(store, "disc.code_embedding", (cfg.num_codes + 2, cfg.code_dim))?,
            lstm: LstmCell::attach("disc.lstm", cfg.code_dim, cfg.hidden, cfg.candidate, store)?,
            reward_weight: expect_slot(store, "disc.reward.weight", (1, cfg.hidden + cfg.repr_dim))?,
            reward_bias: expect_slot(store, "disc.reward.bias", (1, 1))?,
            cfg,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn lstm(&self) -> &LstmCell {
        &self.lstm
    }

    pub fn reward_slots(&self) -> (SlotId, SlotId) {
        (self.reward_weight, self.reward_bias)
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::Domain("empty code prefix".into()));
        }
        if let Some(c) = prefix.iter().find(|&&c| c >= self.cfg.num_codes + 2) {
            return Err(Error::Dictionary(format!("code id {c} out of range")));
        }
        Ok(())
    }

    fn run_path(&self, store: &ParamStore, prefix: &[usize]) -> (LstmState, Vec<LstmCache>) {
        let table = store.value(self.code_embedding);
        let mut state = LstmState::zeros(self.cfg.hidden);
        let mut caches = Vec::with_capacity(prefix.len());
        for &c in prefix {
            let (next, cache) = self.lstm.step(store, &state, table.row(c));
            state = next;
            caches.push(cache);
        }
        (state, caches)
    }

    /// Final hidden state of the path LSTM from the zero state.
    pub fn encode_path(&self, store: &ParamStore, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_prefix(prefix)?;
        Ok(self.run_path(store, prefix).0.h)
    }

    pub fn forward(&self, store: &ParamStore, prefix: &[usize], x: &[f64]) -> Result<RewardTrace> {
        self.check_prefix(prefix)?;
        if x.len() != self.cfg.repr_dim {
            return Err(Error::dims("reward representation", x.len(), self.cfg.repr_dim));
        }
        let (state, steps) = self.run_path(store, prefix);
        let mut features = state.h;
        features.extend_from_slice(x);
        let logit = dot(store.value(self.reward_weight).data(), &features) + store.value(self.reward_bias).data()[0];
        Ok(RewardTrace {
            codes: prefix.to_vec(),
            steps,
            features,
            reward: sigmoid(logit),
        })
    }

    /// `σ(W_r [h, x] + b)`.
    pub fn reward(&self, store: &ParamStore, prefix: &[usize], x: &[f64]) -> Result<f64> {
        Ok(self.forward(store, prefix, x)?.reward)
    }

    /// Accumulates gradients given `d_logit`; `x` is treated as a constant.
    pub fn backward(&self, store: &mut ParamStore, trace: &RewardTrace, d_logit: f64) {
        if d_logit == 0.0 {
            return;
        }
        axpy(d_logit, &trace.features, store.grad_mut(self.reward_weight).data_mut());
        store.grad_mut(self.reward_bias).data_mut()[0] += d_logit;
        let h = self.cfg.hidden;
        let mut dh: Vec<f64> = store.value(self.reward_weight).data()[..h].iter().map(|w| w * d_logit).collect();
        let mut dc = vec![0.0; h];
        for (cache, &code) in trace.steps.iter().zip(&trace.codes).rev() {
            let (dh_prev, dc_prev, d_in) = self.lstm.backward(store, cache, &dh, &dc);
            axpy(1.0, &d_in, store.grad_mut(self.code_embedding).row_mut(code));
            dh = dh_prev;
            dc = dc_prev;
        }
    }

    /// Mean binary cross-entropy over `batch`; `reps[doc]` is the
    /// representation of each sample's document.
    pub fn loss(&self, store: &ParamStore, batch: &[LabeledPrefix], reps: &[Vec<f64>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("empty discriminator batch".into()));
        }
        let mut total = 0.0;
        for s in batch {
            total += bce(self.reward(store, &s.codes, rep(reps, s.doc)?)?, s.tag);
        }
        Ok(total / batch.len() as f64)
    }

    /// [`Discriminator::loss`] plus its gradient accumulated into `store`.
    pub fn loss_and_backward(&self, store: &mut ParamStore, batch: &[LabeledPrefix], reps: &[Vec<f64>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("empty discriminator batch".into()));
        }
        let n = batch.len() as f64;
        let mut total = 0.0;
        for s in batch {
            let trace = self.forward(store, &s.codes, rep(reps, s.doc)?)?;
            let p = trace.reward;
            total += bce(p, s.tag);
            // d/dlogit of the clamped BCE; zero while the clamp is active
            let d = match s.tag {
                PathTag::Positive if p < 1.0 - PROB_FLOOR => -(1.0 - p),
                PathTag::Negative if p > PROB_FLOOR => p,
                _ => 0.0,
            };
            self.backward(store, &trace, d / n);
        }
        Ok(total / n)
    }
}

fn rep(reps: &[Vec<f64>], doc: usize) -> Result<&[f64]> {
    reps.get(doc)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Domain(format!("no representation for batch document {doc}")))
}

/// Clamped cross-entropy of one sample.
pub fn bce(p: f64, tag: PathTag) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    match tag {
        PathTag::Positive => -p.ln(),
        PathTag::Negative => -(1.0 - p).ln(),
    }
}
