//! The generator/discriminator pair, prediction, and the `CRNNET-CKPT-1`
//! checkpoint container.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ComplicationTable, EhrDocument};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::{CandidateActivation, Generator, GeneratorConfig};
use crate::metrics::PredictionRecord;
use crate::numerics::{seeded_rng, ParamStore, Tensor2};

pub const CHECKPOINT_MAGIC: &str = "CRNNET-CKPT-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    /// 100/300-dim model.
    pub fn standard(vocab_size: usize, num_codes: usize) -> Self {
        let generator = GeneratorConfig::standard(vocab_size, num_codes);
        let discriminator = DiscriminatorConfig {
            repr_dim: generator.encoder.output_dim(),
            ..DiscriminatorConfig::standard(num_codes)
        };
        ModelConfig { generator, discriminator }
    }

    /// Reduced dimensions for single-threaded runs on small corpora.
    pub fn desk(vocab_size: usize, num_codes: usize) -> Self {
        let generator = GeneratorConfig {
            encoder: EncoderConfig {
                vocab_size,
                embed_dim: 32,
                kernel_sizes: vec![3, 4, 5],
                filters: 16,
                dropout: 0.5,
            },
            num_codes,
            code_dim: 16,
            hidden: 48,
            // the ReLU candidate stalls at the label prior at this size
            candidate: CandidateActivation::Tanh,
            copy: true,
        };
        let discriminator = DiscriminatorConfig {
            num_codes,
            code_dim: 16,
            hidden: 32,
            repr_dim: generator.encoder.output_dim(),
            candidate: CandidateActivation::Tanh,
        };
        ModelConfig { generator, discriminator }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.discriminator.repr_dim != self.generator.encoder.output_dim() {
            return Err(Error::Config(format!(
                "discriminator repr_dim {} must equal the encoder output {}",
                self.discriminator.repr_dim,
                self.generator.encoder.output_dim()
            )));
        }
        if self.discriminator.num_codes != self.generator.num_codes {
            return Err(Error::Config("generator and discriminator code counts differ".into()));
        }
        Ok(())
    }
}

/// Generator and discriminator, each with its own parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub generator: Generator,
    pub gen_store: ParamStore,
    pub discriminator: Discriminator,
    pub disc_store: ParamStore,
}

impl Model {
    /// Generator first, then discriminator, both from the `init` stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, "init");
        let mut gen_store = ParamStore::new();
        let generator = Generator::init(config.generator.clone(), &mut gen_store, &mut rng)?;
        let mut disc_store = ParamStore::new();
        let discriminator = Discriminator::init(config.discriminator.clone(), &mut disc_store, &mut rng)?;
        Ok(Model {
            config,
            generator,
            gen_store,
            discriminator,
            disc_store,
        })
    }

    /// Greedy decode of each document; scores are per-code max probabilities.
    pub fn predict(
        &self,
        documents: &[EhrDocument],
        ids: &[usize],
        table: &ComplicationTable,
        max_len: usize,
    ) -> Result<Vec<PredictionRecord>> {
        let n = self.config.generator.num_codes;
        ids.iter()
            .map(|&i| {
                let doc = &documents[i];
                let path = self.generator.decode(&self.gen_store, &doc.tokens, table, max_len)?;
                let scores: BTreeMap<usize, f64> = path
                    .confidence(n)
                    .into_iter()
                    .enumerate()
                    .filter(|&(_, s)| s > 0.0)
                    .collect();
                Ok(PredictionRecord::new(i, path.valid_codes().to_vec(), doc.gold_codes.clone(), scores))
            })
            .collect()
    }
}

/// SHA-256 over the given byte strings, as lowercase hex.
pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A saved model. `corpus` fingerprints the dictionaries the model was
/// trained against; `digest` covers the config and the fingerprint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub corpus: String,
    pub generator: ParamStore,
    /// Absent for models trained without the adversarial stage.
    pub discriminator: Option<ParamStore>,
}

impl Checkpoint {
    pub fn digest(&self) -> String {
        let cfg = serde_json::to_string(&self.config).expect("config serialises");
        sha256_hex(&[cfg.as_bytes(), self.corpus.as_bytes()])
    }

    pub fn from_model(model: &Model, corpus: &str, with_discriminator: bool) -> Self {
        Checkpoint {
            config: model.config.clone(),
            corpus: corpus.to_string(),
            generator: model.gen_store.clone(),
            discriminator: with_discriminator.then(|| model.disc_store.clone()),
        }
    }

    /// Rebuilds the model; a missing discriminator is freshly initialised.
    pub fn into_model(self, seed: u64) -> Result<Model> {
        let mut model = Model::init(self.config.clone(), seed)?;
        let generator = Generator::attach(self.config.generator.clone(), &self.generator)?;
        model.generator = generator;
        model.gen_store = self.generator;
        if let Some(store) = self.discriminator {
            model.discriminator = Discriminator::attach(self.config.discriminator.clone(), &store)?;
            model.disc_store = store;
        }
        Ok(model)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "digest {}", self.digest())?;
        writeln!(w, "corpus {}", self.corpus)?;
        writeln!(w, "config {}", serde_json::to_string(&self.config).expect("config serialises"))?;
        let stores = std::iter::once(&self.generator).chain(self.discriminator.as_ref());
        let n: usize = stores.clone().map(ParamStore::len).sum();
        writeln!(w, "slots {n}")?;
        for store in stores {
            for slot in store.slots() {
                let (r, c) = slot.value().shape();
                writeln!(w, "slot {} {r} {c}", slot.name())?;
                let mut line = String::new();
                for (k, v) in slot.value().data().iter().enumerate() {
                    if k > 0 {
                        line.push(' ');
                    }
                    // Debug formatting is the shortest exact round trip
                    line.push_str(&format!("{v:?}"));
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let bad = |m: String| Error::Compatibility(m);
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad(format!("checkpoint truncated before {what}")))?
                .map_err(Error::from)
        };
        if next("header")? != CHECKPOINT_MAGIC {
            return Err(bad("not a CRNNET-CKPT-1 checkpoint".into()));
        }
        let field = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|s| s.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}` line")))
        };
        let digest = field(next("digest")?, "digest")?;
        let corpus = field(next("corpus")?, "corpus")?;
        let config: ModelConfig = serde_json::from_str(&field(next("config")?, "config")?)
            .map_err(|e| bad(format!("config: {e}")))?;
        let n: usize = field(next("slots")?, "slots")?
            .parse()
            .map_err(|_| bad("bad slot count".into()))?;
        let mut generator = ParamStore::new();
        let mut discriminator = ParamStore::new();
        for _ in 0..n {
            let head = field(next("slot header")?, "slot")?;
            let parts: Vec<&str> = head.split(' ').collect();
            let [name, rows, cols] = parts[..] else {
                return Err(bad(format!("bad slot header `{head}`")));
            };
            let rows: usize = rows.parse().map_err(|_| bad(format!("bad rows for `{name}`")))?;
            let cols: usize = cols.parse().map_err(|_| bad(format!("bad cols for `{name}`")))?;
            let values = next("slot values")?;
            let data: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value in `{name}`"))))
                .collect::<Result<_>>()?;
            let t = Tensor2::from_vec(rows, cols, data).map_err(|e| bad(format!("slot `{name}`: {e}")))?;
            let target = if name.starts_with("disc.") {
                &mut discriminator
            } else {
                &mut generator
            };
            target.add(name, t).map_err(|e| bad(e.to_string()))?;
        }
        let ckpt = Checkpoint {
            config,
            corpus,
            generator,
            discriminator: (!discriminator.is_empty()).then_some(discriminator),
        };
        if ckpt.digest() != digest {
            return Err(bad("config digest does not match its contents".into()));
        }
        Ok(ckpt)
    }
}
