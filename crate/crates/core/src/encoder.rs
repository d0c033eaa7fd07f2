//! Multi-channel text CNN: token embeddings, one convolution bank per kernel
//! size, ReLU, max-over-time pooling and concatenation into a fixed-size
//! EHR representation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, ParamStore, SlotId, Tensor2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub filters: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// 100-dim embeddings, kernels 3/4/5 with 100 filters each, dropout 0.5.
    pub fn standard(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            embed_dim: 100,
            kernel_sizes: vec![3, 4, 5],
            filters: 100,
            dropout: 0.5,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.kernel_sizes.len() * self.filters
    }

    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.filters == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(Error::Config("encoder needs at least one positive kernel size".into()));
        }
        let mut sorted = self.kernel_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.kernel_sizes {
            return Err(Error::Config("kernel sizes must be strictly ascending".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// How dropout is applied to the concatenated representation.
pub enum Dropout<'a> {
    Off,
    /// Draw a fresh inverted-dropout mask.
    Sample(&'a mut ChaCha8Rng),
    /// Use the given multipliers (already scaled).
    Fixed(&'a [f64]),
}

/// Window dot products of one filter over `x`, followed by ReLU.
/// `filter` holds `k` rows of width `x.cols()`, flattened.
pub fn conv_feature_map(x: &Tensor2, filter: &[f64], bias: f64, k: usize) -> Vec<f64> {
    let d = x.cols();
    debug_assert_eq!(filter.len(), k * d);
    if x.rows() < k {
        return Vec::new();
    }
    (0..=x.rows() - k)
        .map(|p| (dot(filter, &x.data()[p * d..(p + k) * d]) + bias).max(0.0))
        .collect()
}

/// Maximum and the lowest index attaining it.
pub fn max_pool(feature_map: &[f64]) -> Result<(f64, usize)> {
    if feature_map.is_empty() {
        return Err(Error::Domain("max-pool over an empty feature map".into()));
    }
    let mut best = (feature_map[0], 0);
    for (i, &v) in feature_map.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    tokens: Vec<usize>,
    embedded: Tensor2,
    /// Per output coordinate: argmax window and whether the ReLU was active there.
    routes: Vec<(usize, bool)>,
    mask: Option<Vec<f64>>,
}

impl EncoderCache {
    pub fn dropout_mask(&self) -> Option<&[f64]> {
        self.mask.as_deref()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    embedding: SlotId,
    conv_weight: Vec<SlotId>,
    conv_bias: Vec<SlotId>,
}

impl Encoder {
    /// Registers `enc.*` slots with uniform initialisation.
    pub fn init(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.add("enc.embedding", Tensor2::uniform(cfg.vocab_size, cfg.embed_dim, rng))?;
        let mut conv_weight = Vec::new();
        let mut conv_bias = Vec::new();
        for &k in &cfg.kernel_sizes {
            conv_weight.push(store.add(
                &format!("enc.conv{k}.weight"),
                Tensor2::uniform(cfg.filters, k * cfg.embed_dim, rng),
            )?);
            conv_bias.push(store.add(&format!("enc.conv{k}.bias"), Tensor2::uniform(cfg.filters, 1, rng))?);
        }
        Ok(Encoder {
            cfg,
            embedding,
            conv_weight,
            conv_bias,
        })
    }

    /// Binds to existing slots, checking shapes.
    pub fn attach(cfg: EncoderConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expect = |name: &str, shape: (usize, usize)| -> Result<SlotId> {
            let id = store.require(name)?;
            if store.value(id).shape() != shape {
                return Err(Error::Compatibility(format!(
                    "slot `{name}` has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let embedding = expect("enc.embedding", (cfg.vocab_size, cfg.embed_dim))?;
        let mut conv_weight = Vec::new();
        let mut conv_bias = Vec::new();
        for &k in &cfg.kernel_sizes {
            conv_weight.push(expect(&format!("enc.conv{k}.weight"), (cfg.filters, k * cfg.embed_dim))?);
            conv_bias.push(expect(&format!("enc.conv{k}.bias"), (cfg.filters, 1))?);
        }
        Ok(Encoder {
            cfg,
            embedding,
            conv_weight,
            conv_bias,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }

    /// One embedding row per token.
    pub fn embed_tokens(&self, store: &ParamStore, tokens: &[usize]) -> Result<Tensor2> {
        let emb = store.value(self.embedding);
        let d = self.cfg.embed_dim;
        let mut out = Tensor2::zeros(tokens.len(), d);
        for (p, &t) in tokens.iter().enumerate() {
            if t >= self.cfg.vocab_size {
                return Err(Error::Dictionary(format!(
                    "token id {t} >= vocabulary size {}",
                    self.cfg.vocab_size
                )));
            }
            out.row_mut(p).copy_from_slice(emb.row(t));
        }
        Ok(out)
    }

    /// Encodes a token sequence. Documents shorter than the largest kernel
    /// are right-padded with zero embedding rows.
    pub fn encode(&self, store: &ParamStore, tokens: &[usize], dropout: Dropout<'_>) -> Result<(Vec<f64>, EncoderCache)> {
        if tokens.is_empty() {
            return Err(Error::Domain("cannot encode an empty document".into()));
        }
        let d = self.cfg.embed_dim;
        let unpadded = self.embed_tokens(store, tokens)?;
        let rows = tokens.len().max(self.cfg.max_kernel());
        let mut embedded = Tensor2::zeros(rows, d);
        embedded.data_mut()[..unpadded.data().len()].copy_from_slice(unpadded.data());

        let mut x = Vec::with_capacity(self.output_dim());
        let mut routes = Vec::with_capacity(self.output_dim());
        for (ki, &k) in self.cfg.kernel_sizes.iter().enumerate() {
            let w = store.value(self.conv_weight[ki]);
            let b = store.value(self.conv_bias[ki]);
            for j in 0..self.cfg.filters {
                let bias = b.data()[j];
                let filter = w.row(j);
                // fused conv + ReLU + max-pool; keeps the pre-activation sign
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for p in 0..=rows - k {
                    let pre = dot(filter, &embedded.data()[p * d..(p + k) * d]) + bias;
                    let v = pre.max(0.0);
                    if v > best {
                        best = v;
                        arg = p;
                    }
                }
                let pre = dot(filter, &embedded.data()[arg * d..(arg + k) * d]) + bias;
                x.push(best);
                routes.push((arg, pre > 0.0));
            }
        }

        let mask = match dropout {
            Dropout::Off => None,
            Dropout::Fixed(m) => {
                if m.len() != x.len() {
                    return Err(Error::dims("dropout mask", m.len(), x.len()));
                }
                Some(m.to_vec())
            }
            Dropout::Sample(rng) => {
                let keep = 1.0 - self.cfg.dropout;
                Some(
                    (0..x.len())
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect(),
                )
            }
        };
        if let Some(m) = &mask {
            x.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
        }
        Ok((
            x,
            EncoderCache {
                tokens: tokens.to_vec(),
                embedded,
                routes,
                mask,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `dx`.
    pub fn backward(&self, store: &mut ParamStore, cache: &EncoderCache, dx: &[f64]) {
        let d = self.cfg.embed_dim;
        let mut d_embedded = Tensor2::zeros(cache.embedded.rows(), d);
        let mut out = 0;
        for (ki, &k) in self.cfg.kernel_sizes.iter().enumerate() {
            for j in 0..self.cfg.filters {
                let (p, active) = cache.routes[out];
                let mut g = dx[out];
                if let Some(m) = &cache.mask {
                    g *= m[out];
                }
                out += 1;
                if !active || g == 0.0 {
                    continue;
                }
                let window = &cache.embedded.data()[p * d..(p + k) * d];
                axpy(g, window, store.grad_mut(self.conv_weight[ki]).row_mut(j));
                store.grad_mut(self.conv_bias[ki]).data_mut()[j] += g;
                let filter = store.value(self.conv_weight[ki]).row(j);
                axpy(g, filter, &mut d_embedded.data_mut()[p * d..(p + k) * d]);
            }
        }
        let grad = store.grad_mut(self.embedding);
        for (p, &t) in cache.tokens.iter().enumerate() {
            axpy(1.0, d_embedded.row(p), grad.row_mut(t));
        }
    }
}
