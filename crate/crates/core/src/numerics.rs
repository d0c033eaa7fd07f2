//! Dense tensors, the parameter store with Adam state, and the
//! finite-difference oracle used to check every hand-derived gradient.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the uniform initialisation range.
pub const INIT_RANGE: f64 = 0.08;

pub type Tensor1 = Vec<f64>;

/// Deterministic generator for a named sub-stream of a run seed
/// (`"corpus"`, `"init"`, `"dropout"`, `"shuffle"`, ...).
pub fn seeded_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    // FNV-1a over the stream name selects the ChaCha stream.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Tensor2::from_vec",
                format!("{rows}x{cols}"),
                format!("len {}", data.len()),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dims("Tensor2::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform in `[-INIT_RANGE, INIT_RANGE]`.
    pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Tensor2 { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `out = W x`. Shapes are the caller's responsibility.
    #[inline]
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Tensor1 {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += Wᵀ y`.
    #[inline]
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += y xᵀ`.
    #[inline]
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if yi != 0.0 {
                axpy(yi, x, row);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `W x + b`.
pub fn affine(w: &Tensor2, x: &[f64], b: &[f64]) -> Result<Tensor1> {
    if w.cols() != x.len() {
        return Err(Error::dims(
            "affine (W.cols vs x.len)",
            format!("W {}x{}", w.rows(), w.cols()),
            format!("x {}", x.len()),
        ));
    }
    if w.rows() != b.len() {
        return Err(Error::dims(
            "affine (W.rows vs b.len)",
            format!("W {}x{}", w.rows(), w.cols()),
            format!("b {}", b.len()),
        ));
    }
    let mut out = w.matvec(x);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

pub fn softmax_stable(logits: &[f64]) -> Result<Tensor1> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("softmax of non-finite logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("adam learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId(usize);

#[derive(Clone, Debug)]
pub struct Slot {
    name: String,
    value: Tensor2,
    grad: Tensor2,
    m: Tensor2,
    v: Tensor2,
    updates: u64,
}

impl Slot {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor2 {
        &self.value
    }

    pub fn grad(&self) -> &Tensor2 {
        &self.grad
    }
}

/// Named parameter tensors with gradient accumulators and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor2) -> Result<SlotId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter slot `{name}`")));
        }
        let (r, c) = value.shape();
        let id = self.slots.len();
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
            updates: 0,
        });
        self.index.insert(name.to_string(), id);
        Ok(SlotId(id))
    }

    pub fn id(&self, name: &str) -> Option<SlotId> {
        self.index.get(name).map(|&i| SlotId(i))
    }

    pub fn require(&self, name: &str) -> Result<SlotId> {
        self.id(name)
            .ok_or_else(|| Error::Compatibility(format!("missing parameter slot `{name}`")))
    }

    #[inline]
    pub fn value(&self, id: SlotId) -> &Tensor2 {
        &self.slots[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: SlotId) -> &mut Tensor2 {
        &mut self.slots[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: SlotId) -> &Tensor2 {
        &self.slots[id.0].grad
    }

    #[inline]
    pub fn grad_mut(&mut self, id: SlotId) -> &mut Tensor2 {
        &mut self.slots[id.0].grad
    }

    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.slots.iter().map(|s| s.value.data.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for s in &mut self.slots {
                s.grad.data.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    /// Multiplies every gradient by `factor` (used to turn sums into batch means).
    pub fn scale_grads(&mut self, factor: f64) {
        for s in &mut self.slots {
            s.grad.data.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copies values (not optimiser state) from `other` for every slot name both share.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for s in &mut self.slots {
            if let Some(src) = other.id(&s.name) {
                let v = other.value(src);
                if v.shape() != s.value.shape() {
                    return Err(Error::Compatibility(format!(
                        "slot `{}` has shape {:?}, expected {:?}",
                        s.name,
                        v.shape(),
                        s.value.shape()
                    )));
                }
                s.value = v.clone();
            }
        }
        Ok(())
    }

    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .zip(&other.slots)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

/// One bias-corrected Adam update over every slot, then gradients are zeroed.
///
/// Slots whose gradient is identically zero are left untouched (value and
/// moments), so a step with no gradient signal is the identity.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    for s in &store.slots {
        if !s.grad.is_finite() {
            return Err(Error::Numeric {
                slot: s.name.clone(),
            });
        }
    }
    store.step += 1;
    for s in &mut store.slots {
        if s.grad.data.iter().all(|&g| g == 0.0) {
            continue;
        }
        s.updates += 1;
        let t = s.updates as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let n = s.value.data.len();
        for k in 0..n {
            let g = s.grad.data[k];
            let m = cfg.beta1 * s.m.data[k] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * s.v.data[k] + (1.0 - cfg.beta2) * g * g;
            s.m.data[k] = m;
            s.v.data[k] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            s.value.data[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        s.grad.fill(0.0);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Slot name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the analytic gradients held in `store`'s grad buffers with
/// central differences of `f`, over up to `samples` coordinates drawn with
/// `seed`. The error of a coordinate is
/// `|numeric - analytic| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(mut f: F, store: &ParamStore, eps: f64, samples: usize, seed: u64) -> GradCheck
where
    F: FnMut(&ParamStore) -> f64,
{
    use rand::SeedableRng;

    let eps = eps.clamp(1e-6, 1e-3);
    let coords: Vec<(usize, usize)> = store
        .slots
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.value.data.len()).map(move |k| (si, k)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= samples {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, coords.len(), samples)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };

    let mut work = store.clone();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (si, k) in chosen {
        let original = work.slots[si].value.data[k];
        work.slots[si].value.data[k] = original + eps;
        let plus = f(&work);
        work.slots[si].value.data[k] = original - eps;
        let minus = f(&work);
        work.slots[si].value.data[k] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = store.slots[si].grad.data[k];
        let denom = 1.0_f64.max(analytic.abs()).max(numeric.abs());
        let err = (numeric - analytic).abs() / denom;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        report.checked += 1;
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((store.slots[si].name.clone(), k));
        }
    }
    report
}
