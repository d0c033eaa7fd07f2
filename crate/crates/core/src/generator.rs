//! The path generator: EHR-ICD fusion of the representation with the
//! previous code, an LSTM decoder, and a copy/generate mixture head whose two
//! score families share one softmax normaliser.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ComplicationTable;
use crate::encoder::{Dropout, Encoder, EncoderCache, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, sigmoid, ParamStore, SlotId, Tensor2};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Activation of the LSTM candidate cell state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CandidateActivation {
    #[default]
    Relu,
    Tanh,
}

impl CandidateActivation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            CandidateActivation::Relu => z.max(0.0),
            CandidateActivation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output and pre-activation.
    #[inline]
    fn derivative(self, out: f64, pre: f64) -> f64 {
        match self {
            CandidateActivation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            CandidateActivation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    z: Vec<f64>,
    f: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    g_pre: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// LSTM cell over the concatenation `[h_{t-1}, input]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden: usize,
    pub activation: CandidateActivation,
    // forget, input, candidate, output
    weights: [SlotId; 4],
    biases: [SlotId; 4],
}

const GATES: [&str; 4] = ["forget", "input", "candidate", "output"];

impl LstmCell {
    pub fn init(
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        activation: CandidateActivation,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for g in GATES {
            weights.push(store.add(
                &format!("{prefix}.{g}.weight"),
                Tensor2::uniform(hidden, hidden + input_dim, rng),
            )?);
            biases.push(store.add(&format!("{prefix}.{g}.bias"), Tensor2::uniform(hidden, 1, rng))?);
        }
        Ok(LstmCell {
            input_dim,
            hidden,
            activation,
            weights: weights.try_into().expect("four gates"),
            biases: biases.try_into().expect("four gates"),
        })
    }

    pub fn attach(
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        activation: CandidateActivation,
        store: &ParamStore,
    ) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for g in GATES {
            weights.push(expect_slot(store, &format!("{prefix}.{g}.weight"), (hidden, hidden + input_dim))?);
            biases.push(expect_slot(store, &format!("{prefix}.{g}.bias"), (hidden, 1))?);
        }
        Ok(LstmCell {
            input_dim,
            hidden,
            activation,
            weights: weights.try_into().expect("four gates"),
            biases: biases.try_into().expect("four gates"),
        })
    }

    pub fn weight_slot(&self, gate: usize) -> SlotId {
        self.weights[gate]
    }

    pub fn bias_slot(&self, gate: usize) -> SlotId {
        self.biases[gate]
    }

    pub fn step(&self, store: &ParamStore, state: &LstmState, input: &[f64]) -> (LstmState, LstmCache) {
        debug_assert_eq!(input.len(), self.input_dim);
        let h = self.hidden;
        let mut z = Vec::with_capacity(h + self.input_dim);
        z.extend_from_slice(&state.h);
        z.extend_from_slice(input);

        let pre = |gate: usize| -> Vec<f64> {
            let mut out = store.value(self.weights[gate]).matvec(&z);
            for (o, b) in out.iter_mut().zip(store.value(self.biases[gate]).data()) {
                *o += b;
            }
            out
        };
        let f: Vec<f64> = pre(0).into_iter().map(sigmoid).collect();
        let i: Vec<f64> = pre(1).into_iter().map(sigmoid).collect();
        let g_pre = pre(2);
        let g: Vec<f64> = g_pre.iter().map(|&v| self.activation.apply(v)).collect();
        let o: Vec<f64> = pre(3).into_iter().map(sigmoid).collect();

        let c: Vec<f64> = (0..h).map(|k| f[k] * state.c[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h_new: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        (
            LstmState { h: h_new, c },
            LstmCache {
                z,
                f,
                i,
                g,
                g_pre,
                o,
                c_prev: state.c.clone(),
                tanh_c,
            },
        )
    }

    /// Backward through one step. `dh`, `dc` are gradients w.r.t. this step's
    /// outputs; returns gradients w.r.t. `(h_{t-1}, C_{t-1}, input)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LstmCache,
        dh: &[f64],
        dc: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let mut d_pre = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let t = cache.tanh_c[k];
            let d_o = dh[k] * t;
            let d_c = dc[k] + dh[k] * cache.o[k] * (1.0 - t * t);
            let d_f = d_c * cache.c_prev[k];
            let d_i = d_c * cache.g[k];
            let d_g = d_c * cache.i[k];
            dc_prev[k] = d_c * cache.f[k];
            d_pre[0][k] = d_f * cache.f[k] * (1.0 - cache.f[k]);
            d_pre[1][k] = d_i * cache.i[k] * (1.0 - cache.i[k]);
            d_pre[2][k] = d_g * self.activation.derivative(cache.g[k], cache.g_pre[k]);
            d_pre[3][k] = d_o * cache.o[k] * (1.0 - cache.o[k]);
        }
        let mut dz = vec![0.0; cache.z.len()];
        for gate in 0..4 {
            store.grad_mut(self.weights[gate]).add_outer(&d_pre[gate], &cache.z);
            axpy(1.0, &d_pre[gate], store.grad_mut(self.biases[gate]).data_mut());
            store.value(self.weights[gate]).matvec_t_acc(&d_pre[gate], &mut dz);
        }
        let d_input = dz.split_off(h);
        (dz, dc_prev, d_input)
    }
}

pub(crate) fn expect_slot(store: &ParamStore, name: &str, shape: (usize, usize)) -> Result<SlotId> {
    let id = store.require(name)?;
    if store.value(id).shape() != shape {
        return Err(Error::Compatibility(format!(
            "slot `{name}` has shape {:?}, expected {shape:?}",
            store.value(id).shape()
        )));
    }
    Ok(id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub encoder: EncoderConfig,
    /// Real codes; the output vocabulary adds STOP and UNK.
    pub num_codes: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub candidate: CandidateActivation,
    /// Copy mode on; off reproduces the no-copy ablation.
    pub copy: bool,
}

impl GeneratorConfig {
    /// 100-dim token/code embeddings, 300-dim representation and hidden state.
    pub fn standard(vocab_size: usize, num_codes: usize) -> Self {
        GeneratorConfig {
            encoder: EncoderConfig::standard(vocab_size),
            num_codes,
            code_dim: 100,
            hidden: 300,
            candidate: CandidateActivation::Relu,
            copy: true,
        }
    }

    pub fn output_size(&self) -> usize {
        self.num_codes + 2
    }

    pub fn stop_id(&self) -> usize {
        self.num_codes
    }

    pub fn unk_id(&self) -> usize {
        self.num_codes + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_codes == 0 || self.code_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Decoder state between steps; step 0 has zero vectors and STOP as the
/// previous code.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub lstm: LstmState,
    pub prev_code: usize,
    pub step: usize,
}

/// Next-code distribution over all `num_codes + 2` ids.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDistribution {
    pub probs: Vec<f64>,
    pub generate_mass: Vec<f64>,
    pub copy_mass: Vec<f64>,
    pub log_z: f64,
}

impl MixtureDistribution {
    pub fn prob(&self, code: usize) -> f64 {
        self.probs[code]
    }
}

/// Scores and intermediates of the mixture head, kept for backprop.
#[derive(Clone, Debug)]
pub struct MixtureCache {
    h: Vec<f64>,
    copy_codes: Vec<usize>,
    copy_proj: Vec<Vec<f64>>,
    copy_q: Vec<Vec<f64>>,
}

/// Combines generate scores (over every id) and copy scores (over `copy_codes`)
/// under one normaliser.
pub fn mix_scores(generate: &[f64], copy_codes: &[usize], copy: &[f64]) -> MixtureDistribution {
    let max = generate
        .iter()
        .chain(copy)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = generate.iter().chain(copy).map(|s| (s - max).exp()).sum();
    let log_z = max + z.ln();
    let generate_mass: Vec<f64> = generate.iter().map(|s| (s - max).exp() / z).collect();
    let mut copy_mass = vec![0.0; generate.len()];
    for (&c, s) in copy_codes.iter().zip(copy) {
        copy_mass[c] = (s - max).exp() / z;
    }
    let probs = generate_mass.iter().zip(&copy_mass).map(|(g, c)| g + c).collect();
    MixtureDistribution {
        probs,
        generate_mass,
        copy_mass,
        log_z,
    }
}

/// `-ln p(target)` with the probability floored at [`PROB_FLOOR`].
pub fn generator_step_loss(distribution: &MixtureDistribution, target: usize) -> f64 {
    -distribution.probs[target].max(PROB_FLOOR).ln()
}

/// Everything one decoding step computed.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub prev_code: usize,
    pub chosen: usize,
    pub mixture: MixtureDistribution,
    code_embed: Vec<f64>,
    code_proj: Vec<f64>,
    fused_in: Vec<f64>,
    fused: Vec<f64>,
    lstm: LstmCache,
    head: MixtureCache,
}

#[derive(Clone, Debug)]
pub struct GeneratorTrace {
    pub representation: Vec<f64>,
    pub steps: Vec<StepTrace>,
    encoder: Option<EncoderCache>,
}

impl GeneratorTrace {
    /// Greedy choices, in order.
    pub fn choices(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.chosen).collect()
    }

    /// Previous-code inputs, in order (first is STOP).
    pub fn inputs(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.prev_code).collect()
    }

    pub fn distributions(&self) -> Vec<&MixtureDistribution> {
        self.steps.iter().map(|s| &s.mixture).collect()
    }
}

/// How many steps to unroll.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unroll {
    /// Keep going (past STOP if needed) until at least this many steps.
    pub min_steps: usize,
    pub max_len: usize,
}

impl Unroll {
    pub fn decode(max_len: usize) -> Self {
        Unroll { min_steps: 1, max_len }
    }
}

/// Decoded code path: the emitted ids (STOP included when emitted) and the
/// distribution of every step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedPath {
    pub codes: Vec<usize>,
    pub distributions: Vec<MixtureDistribution>,
    /// Number of valid (non-STOP) codes.
    pub valid_len: usize,
}

impl DecodedPath {
    pub fn valid_codes(&self) -> &[usize] {
        &self.codes[..self.valid_len]
    }

    /// Max probability of each real code over all steps.
    pub fn confidence(&self, num_codes: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; num_codes];
        for d in &self.distributions {
            for (o, &p) in out.iter_mut().zip(&d.probs) {
                *o = f64::max(*o, p);
            }
        }
        out
    }
}

/// Per-step weighted negative log-likelihood targets.
pub type StepTargets = Vec<Vec<(usize, f64)>>;

/// The generator: encoder plus fusion, LSTM and mixture head.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Encoder,
    code_embedding: SlotId,
    code_projection: SlotId,
    fusion: SlotId,
    lstm: LstmCell,
    generate: SlotId,
    copy: SlotId,
}

impl Generator {
    pub fn init(cfg: GeneratorConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::init(cfg.encoder.clone(), store, rng)?;
        let e = cfg.encoder.output_dim();
        let k = cfg.output_size();
        let code_embedding = store.add("gen.code_embedding", Tensor2::uniform(k, cfg.code_dim, rng))?;
        let code_projection = store.add("gen.code_projection", Tensor2::uniform(e, cfg.code_dim, rng))?;
        let fusion = store.add("gen.fusion", Tensor2::uniform(e, 6 * e, rng))?;
        let lstm = LstmCell::init("gen.lstm", e, cfg.hidden, cfg.candidate, store, rng)?;
        let generate = store.add("gen.generate", Tensor2::uniform(k, cfg.hidden, rng))?;
        let copy = store.add("gen.copy", Tensor2::uniform(e, cfg.hidden, rng))?;
        Ok(Generator {
            cfg,
            encoder,
            code_embedding,
            code_projection,
            fusion,
            lstm,
            generate,
            copy,
        })
    }

    pub fn attach(cfg: GeneratorConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::attach(cfg.encoder.clone(), store)?;
        let e = cfg.encoder.output_dim();
        let k = cfg.output_size();
        Ok(Generator {
            code_embedding: expect_slot(store, "gen.code_embedding", (k, cfg.code_dim))?,
            code_projection: expect_slot(store, "gen.code_projection", (e, cfg.code_dim))?,
            fusion: expect_slot(store, "gen.fusion", (e, 6 * e))?,
            lstm: LstmCell::attach("gen.lstm", e, cfg.hidden, cfg.candidate, store)?,
            generate: expect_slot(store, "gen.generate", (k, cfg.hidden))?,
            copy: expect_slot(store, "gen.copy", (e, cfg.hidden))?,
            encoder,
            cfg,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn lstm(&self) -> &LstmCell {
        &self.lstm
    }

    pub fn slot(&self, which: GeneratorSlot) -> SlotId {
        match which {
            GeneratorSlot::CodeEmbedding => self.code_embedding,
            GeneratorSlot::CodeProjection => self.code_projection,
            GeneratorSlot::Fusion => self.fusion,
            GeneratorSlot::Generate => self.generate,
            GeneratorSlot::Copy => self.copy,
        }
    }

    /// Projected (representation-space) embedding of a code.
    pub fn project_code(&self, store: &ParamStore, code: usize) -> Vec<f64> {
        store.value(self.code_projection).matvec(store.value(self.code_embedding).row(code))
    }

    /// Six-block fusion input `[x, c, x⊙c, x+c, x−c, c−x]`.
    pub fn fusion_input(x: &[f64], c: &[f64]) -> Vec<f64> {
        let mut u = Vec::with_capacity(6 * x.len());
        u.extend_from_slice(x);
        u.extend_from_slice(c);
        u.extend(x.iter().zip(c).map(|(a, b)| a * b));
        u.extend(x.iter().zip(c).map(|(a, b)| a + b));
        u.extend(x.iter().zip(c).map(|(a, b)| a - b));
        u.extend(x.iter().zip(c).map(|(a, b)| b - a));
        u
    }

    /// `tanh(W_fus · u(x, c))`.
    pub fn fuse(&self, store: &ParamStore, x: &[f64], prev_code_vec: &[f64]) -> Result<Vec<f64>> {
        let e = self.cfg.encoder.output_dim();
        if x.len() != e || prev_code_vec.len() != e {
            return Err(Error::dims("fuse", format!("x {} / c {}", x.len(), prev_code_vec.len()), e));
        }
        let u = Self::fusion_input(x, prev_code_vec);
        Ok(store.value(self.fusion).matvec(&u).into_iter().map(f64::tanh).collect())
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState {
            lstm: LstmState::zeros(self.cfg.hidden),
            prev_code: self.cfg.stop_id(),
            step: 0,
        }
    }

    /// One LSTM transition on input `v`.
    pub fn lstm_step(&self, store: &ParamStore, state: &DecoderState, v: &[f64]) -> Result<DecoderState> {
        if v.len() != self.lstm.input_dim {
            return Err(Error::dims("lstm_step input", v.len(), self.lstm.input_dim));
        }
        let (lstm, _) = self.lstm.step(store, &state.lstm, v);
        Ok(DecoderState {
            lstm,
            prev_code: state.prev_code,
            step: state.step + 1,
        })
    }

    fn copy_codes<'t>(&self, prev_code: usize, table: &'t ComplicationTable) -> &'t [usize] {
        if self.cfg.copy && prev_code < self.cfg.num_codes {
            table.vocab(prev_code)
        } else {
            &[]
        }
    }

    /// Mixture distribution for hidden state `h` after `prev_code`.
    pub fn mixture_probability(
        &self,
        store: &ParamStore,
        h: &[f64],
        prev_code: usize,
        table: &ComplicationTable,
    ) -> (MixtureDistribution, MixtureCache) {
        let generate = store.value(self.generate).matvec(h);
        let copy_codes: Vec<usize> = self
            .copy_codes(prev_code, table)
            .iter()
            .copied()
            .filter(|&c| c < self.cfg.num_codes)
            .collect();
        let w_copy = store.value(self.copy);
        let mut copy_proj = Vec::with_capacity(copy_codes.len());
        let mut copy_q = Vec::with_capacity(copy_codes.len());
        let mut copy_scores = Vec::with_capacity(copy_codes.len());
        for &c in &copy_codes {
            let cp = self.project_code(store, c);
            let mut q = vec![0.0; self.cfg.hidden];
            w_copy.matvec_t_acc(&cp, &mut q);
            q.iter_mut().for_each(|v| *v = v.tanh());
            copy_scores.push(dot(&q, h));
            copy_proj.push(cp);
            copy_q.push(q);
        }
        let mixture = mix_scores(&generate, &copy_codes, &copy_scores);
        (
            mixture,
            MixtureCache {
                h: h.to_vec(),
                copy_codes,
                copy_proj,
                copy_q,
            },
        )
    }

    fn step(
        &self,
        store: &ParamStore,
        x: &[f64],
        state: &LstmState,
        prev_code: usize,
        table: &ComplicationTable,
    ) -> (LstmState, StepTrace) {
        let code_embed = store.value(self.code_embedding).row(prev_code).to_vec();
        let code_proj = store.value(self.code_projection).matvec(&code_embed);
        let fused_in = Self::fusion_input(x, &code_proj);
        let fused: Vec<f64> = store
            .value(self.fusion)
            .matvec(&fused_in)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let v: Vec<f64> = fused.iter().zip(&code_proj).map(|(o, c)| o * c).collect();
        let (next, lstm) = self.lstm.step(store, state, &v);
        let (mixture, head) = self.mixture_probability(store, &next.h, prev_code, table);
        (
            next,
            StepTrace {
                prev_code,
                chosen: usize::MAX,
                mixture,
                code_embed,
                code_proj,
                fused_in,
                fused,
                lstm,
                head,
            },
        )
    }

    /// Greedy choice with repetition masking: already emitted real codes and
    /// UNK are excluded; ties go to the lowest id.
    fn greedy(&self, probs: &[f64], emitted: &[usize]) -> usize {
        let unk = self.cfg.unk_id();
        let mut best = self.cfg.stop_id();
        let mut best_p = f64::NEG_INFINITY;
        for (c, &p) in probs.iter().enumerate() {
            if c == unk || (c < self.cfg.num_codes && emitted.contains(&c)) {
                continue;
            }
            if p > best_p {
                best_p = p;
                best = c;
            }
        }
        best
    }

    /// Runs the decoder from representation `x`. With `forced_inputs`, the
    /// previous-code input of step `t` is `forced_inputs[t]` instead of the
    /// greedy choice of step `t-1` (the step count is then fixed).
    pub fn unroll(
        &self,
        store: &ParamStore,
        x: &[f64],
        table: &ComplicationTable,
        plan: Unroll,
        forced_inputs: Option<&[usize]>,
    ) -> Vec<StepTrace> {
        let stop = self.cfg.stop_id();
        let mut state = LstmState::zeros(self.cfg.hidden);
        let mut prev = stop;
        let mut emitted: Vec<usize> = Vec::new();
        let mut steps = Vec::new();
        let n_forced = forced_inputs.map(|f| f.len());
        for t in 0..plan.max_len.max(1) {
            if let Some(f) = forced_inputs {
                if t >= f.len() {
                    break;
                }
                prev = f[t];
            }
            let (next, mut trace) = self.step(store, x, &state, prev, table);
            let choice = self.greedy(&trace.mixture.probs, &emitted);
            trace.chosen = choice;
            steps.push(trace);
            state = next;
            if choice < self.cfg.num_codes {
                emitted.push(choice);
            }
            prev = choice;
            if n_forced.is_none() && choice == stop && t + 1 >= plan.min_steps {
                break;
            }
        }
        steps
    }

    /// Encode and unroll.
    pub fn forward(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        table: &ComplicationTable,
        dropout: Dropout<'_>,
        plan: Unroll,
        forced_inputs: Option<&[usize]>,
    ) -> Result<GeneratorTrace> {
        let (x, cache) = self.encoder.encode(store, tokens, dropout)?;
        let steps = self.unroll(store, &x, table, plan, forced_inputs);
        Ok(GeneratorTrace {
            representation: x,
            steps,
            encoder: Some(cache),
        })
    }

    /// Greedy path from a precomputed representation.
    pub fn decode_path(&self, store: &ParamStore, x: &[f64], table: &ComplicationTable, max_len: usize) -> DecodedPath {
        let steps = self.unroll(store, x, table, Unroll::decode(max_len), None);
        let stop = self.cfg.stop_id();
        let codes: Vec<usize> = steps.iter().map(|s| s.chosen).collect();
        let valid_len = codes.iter().position(|&c| c == stop).unwrap_or(codes.len());
        DecodedPath {
            codes,
            distributions: steps.into_iter().map(|s| s.mixture).collect(),
            valid_len,
        }
    }

    /// Eval-mode encode then greedy decode.
    pub fn decode(&self, store: &ParamStore, tokens: &[usize], table: &ComplicationTable, max_len: usize) -> Result<DecodedPath> {
        let (x, _) = self.encoder.encode(store, tokens, Dropout::Off)?;
        Ok(self.decode_path(store, &x, table, max_len))
    }

    /// Weighted NLL of `targets` (indexed by step) under `trace`.
    pub fn targets_loss(trace: &GeneratorTrace, targets: &StepTargets) -> f64 {
        targets
            .iter()
            .zip(&trace.steps)
            .flat_map(|(ts, step)| ts.iter().map(move |&(c, w)| w * generator_step_loss(&step.mixture, c)))
            .sum()
    }

    /// Accumulates gradients of [`Generator::targets_loss`] into `store`,
    /// through the head, LSTM, fusion and encoder.
    pub fn backward(&self, store: &mut ParamStore, trace: &GeneratorTrace, targets: &StepTargets) {
        let last = match targets
            .iter()
            .take(trace.steps.len())
            .rposition(|t| t.iter().any(|&(_, w)| w != 0.0))
        {
            Some(l) => l,
            None => return,
        };
        let e = self.cfg.encoder.output_dim();
        let hidden = self.cfg.hidden;
        let mut dx = vec![0.0; e];
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];

        for t in (0..=last).rev() {
            let step = &trace.steps[t];
            let mut dh = dh_next.clone();
            if let Some(ts) = targets.get(t) {
                self.head_backward(store, step, ts, &mut dh);
            }
            let (dh_prev, dc_prev, dv) = self.lstm.backward(store, &step.lstm, &dh, &dc_next);
            dh_next = dh_prev;
            dc_next = dc_prev;

            // v = fused ⊙ code_proj
            let mut d_proj: Vec<f64> = dv.iter().zip(&step.fused).map(|(g, o)| g * o).collect();
            let d_act: Vec<f64> = dv
                .iter()
                .zip(&step.code_proj)
                .zip(&step.fused)
                .map(|((g, c), o)| g * c * (1.0 - o * o))
                .collect();
            store.grad_mut(self.fusion).add_outer(&d_act, &step.fused_in);
            let mut du = vec![0.0; 6 * e];
            store.value(self.fusion).matvec_t_acc(&d_act, &mut du);
            let x = &trace.representation;
            for k in 0..e {
                let (b0, b1, b2, b3, b4, b5) = (du[k], du[e + k], du[2 * e + k], du[3 * e + k], du[4 * e + k], du[5 * e + k]);
                dx[k] += b0 + b2 * step.code_proj[k] + b3 + b4 - b5;
                d_proj[k] += b1 + b2 * x[k] + b3 - b4 + b5;
            }
            self.code_backward(store, step.prev_code, &step.code_embed, &d_proj);
        }

        if let Some(cache) = &trace.encoder {
            self.encoder.backward(store, cache, &dx);
        }
    }

    /// Gradient of `Σ w·(−ln p_y)` w.r.t. the head's scores, then parameters.
    fn head_backward(&self, store: &mut ParamStore, step: &StepTrace, targets: &[(usize, f64)], dh: &mut [f64]) {
        let mix = &step.mixture;
        let k = mix.probs.len();
        let mut d_gen = vec![0.0; k];
        let head = &step.head;
        let mut d_copy = vec![0.0; head.copy_codes.len()];
        for &(y, w) in targets {
            let p = mix.probs[y];
            if w == 0.0 || p < PROB_FLOOR {
                continue;
            }
            axpy(w, &mix.generate_mass, &mut d_gen);
            d_gen[y] -= w * mix.generate_mass[y] / p;
            for (j, &c) in head.copy_codes.iter().enumerate() {
                d_copy[j] += w * mix.copy_mass[c];
                if c == y {
                    d_copy[j] -= w * mix.copy_mass[c] / p;
                }
            }
        }
        store.grad_mut(self.generate).add_outer(&d_gen, &head.h);
        store.value(self.generate).matvec_t_acc(&d_gen, dh);

        for (j, &c) in head.copy_codes.iter().enumerate() {
            let g = d_copy[j];
            if g == 0.0 {
                continue;
            }
            let q = &head.copy_q[j];
            axpy(g, q, dh);
            let d_pre: Vec<f64> = q.iter().zip(&head.h).map(|(qv, hv)| g * hv * (1.0 - qv * qv)).collect();
            store.grad_mut(self.copy).add_outer(&head.copy_proj[j], &d_pre);
            let d_cp = store.value(self.copy).matvec(&d_pre);
            let embed = store.value(self.code_embedding).row(c).to_vec();
            self.code_backward(store, c, &embed, &d_cp);
        }
    }

    /// Backprop from a projected code vector into projection and embedding.
    fn code_backward(&self, store: &mut ParamStore, code: usize, embed: &[f64], d_proj: &[f64]) {
        store.grad_mut(self.code_projection).add_outer(d_proj, embed);
        let mut d_embed = vec![0.0; embed.len()];
        store.value(self.code_projection).matvec_t_acc(d_proj, &mut d_embed);
        axpy(1.0, &d_embed, store.grad_mut(self.code_embedding).row_mut(code));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorSlot {
    CodeEmbedding,
    CodeProjection,
    Fusion,
    Generate,
    Copy,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, seeded_rng};
    use rand::Rng;

    pub(crate) fn tiny_config(copy: bool) -> GeneratorConfig {
        GeneratorConfig {
            encoder: EncoderConfig {
                vocab_size: 7,
                embed_dim: 3,
                kernel_sizes: vec![2, 3],
                filters: 2,
                dropout: 0.5,
            },
            num_codes: 4,
            code_dim: 3,
            hidden: 5,
            candidate: CandidateActivation::Relu,
            copy,
        }
    }

    fn tiny(copy: bool, seed: u64) -> (Generator, ParamStore) {
        let mut store = ParamStore::new();
        let g = Generator::init(tiny_config(copy), &mut store, &mut seeded_rng(seed, "init")).unwrap();
        (g, store)
    }

    fn sym_table() -> ComplicationTable {
        ComplicationTable::from_pairs(4, [(0, 1, 3.0), (0, 2, 2.5), (1, 3, 4.0)]).unwrap()
    }

    fn zero_all(store: &mut ParamStore, ids: &[SlotId]) {
        for &id in ids {
            store.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn fuse_identical_inputs_zero_difference_blocks() {
        let x = vec![0.3, -0.2, 0.5];
        let u = Generator::fusion_input(&x, &x);
        assert!(u[12..18].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_zero_inputs_gives_zero() {
        let (g, store) = tiny(true, 1);
        let e = g.config().encoder.output_dim();
        assert_eq!(g.fuse(&store, &vec![0.0; e], &vec![0.0; e]).unwrap(), vec![0.0; e]);
        assert!(g.fuse(&store, &[0.0], &vec![0.0; e]).is_err());
    }

    #[test]
    fn fuse_with_block_selector_is_tanh_of_sum() {
        let (g, mut store) = tiny(true, 1);
        let e = g.config().encoder.output_dim();
        let id = g.slot(GeneratorSlot::Fusion);
        let w = store.value_mut(id);
        w.fill(0.0);
        for k in 0..e {
            w.set(k, 3 * e + k, 1.0);
        }
        let mut rng = seeded_rng(2, "t");
        let x: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = g.fuse(&store, &x, &c).unwrap();
        for k in 0..e {
            assert!((out[k] - (x[k] + c[k]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_zero_weights_closed_form() {
        let (g, mut store) = tiny(true, 1);
        let ids: Vec<SlotId> = (0..4).flat_map(|k| [g.lstm().weight_slot(k), g.lstm().bias_slot(k)]).collect();
        zero_all(&mut store, &ids);
        let mut state = g.initial_state();
        state.lstm.c = vec![1.0, -2.0, 0.5, 0.0, 3.0];
        let next = g.lstm_step(&store, &state, &[0.7; 4]).unwrap();
        for k in 0..5 {
            let c = 0.5 * state.lstm.c[k];
            assert!((next.lstm.c[k] - c).abs() < 1e-15);
            assert!((next.lstm.h[k] - 0.5 * c.tanh()).abs() < 1e-15);
        }
        assert_eq!(next.step, 1);
    }

    #[test]
    fn lstm_saturated_forget_gate_drops_old_cell() {
        let (g, mut store) = tiny(true, 1);
        store.value_mut(g.lstm().bias_slot(0)).fill(-50.0);
        let mut state = g.initial_state();
        state.lstm.c = vec![5.0; 5];
        let (next, cache) = g.lstm().step(&store, &state.lstm, &[0.2, 0.1, -0.3, 0.4]);
        for k in 0..5 {
            assert!((next.c[k] - cache.i[k] * cache.g[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn lstm_matches_scalar_oracle() {
        let (g, store) = tiny(true, 9);
        let cell = g.lstm();
        let mut rng = seeded_rng(3, "t");
        let h0: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c0: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let inp: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (next, _) = cell.step(&store, &LstmState { h: h0.clone(), c: c0.clone() }, &inp);
        let z: Vec<f64> = h0.iter().chain(&inp).copied().collect();
        let gate = |k: usize, r: usize| -> f64 {
            let w = store.value(cell.weight_slot(k));
            let mut s = store.value(cell.bias_slot(k)).data()[r];
            for j in 0..z.len() {
                s += w.get(r, j) * z[j];
            }
            s
        };
        for r in 0..5 {
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let f = sig(gate(0, r));
            let i = sig(gate(1, r));
            let cand = gate(2, r).max(0.0);
            let o = sig(gate(3, r));
            let c = f * c0[r] + i * cand;
            assert!((next.c[r] - c).abs() < 1e-14);
            assert!((next.h[r] - o * c.tanh()).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_copy_vocabulary_is_plain_softmax() {
        let (g, store) = tiny(true, 4);
        let h = vec![0.3, -0.1, 0.2, 0.5, -0.4];
        let table = ComplicationTable::empty(4);
        let (mix, _) = g.mixture_probability(&store, &h, 0, &table);
        let soft = crate::numerics::softmax_stable(&store.value(g.slot(GeneratorSlot::Generate)).matvec(&h)).unwrap();
        for (a, b) in mix.probs.iter().zip(&soft) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(mix.copy_mass.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn zero_scores_counting_case() {
        let (g, store) = tiny(true, 4);
        let table = sym_table();
        // h = 0 makes every generate and copy score exactly zero.
        let (mix, _) = g.mixture_probability(&store, &[0.0; 5], 0, &table);
        // 6 ids (4 codes + STOP + UNK) here; V_0 = {1, 2}
        let z = 8.0;
        for c in 0..6 {
            let expected = if c == 1 || c == 2 { 2.0 / z } else { 1.0 / z };
            assert_eq!(mix.probs[c], expected);
        }
        let m = mix_scores(&[0.0; 5], &[1, 3], &[0.0, 0.0]);
        for c in 0..5 {
            let expected = if c == 1 || c == 3 { 2.0 / 7.0 } else { 1.0 / 7.0 };
            assert_eq!(m.probs[c], expected);
        }
        assert!((generator_step_loss(&m, 0) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn step_loss_examples() {
        let m = mix_scores(&[0.0, f64::NEG_INFINITY], &[], &[]);
        assert_eq!(generator_step_loss(&m, 0), 0.0);
        let m = MixtureDistribution {
            probs: vec![(-2f64).exp()],
            generate_mass: vec![0.0],
            copy_mass: vec![0.0],
            log_z: 0.0,
        };
        assert!((generator_step_loss(&m, 0) - 2.0).abs() < 1e-12);
        let m = mix_scores(&[0.0, -1e6], &[], &[]);
        assert!((generator_step_loss(&m, 1) - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn no_copy_config_never_puts_copy_mass() {
        let (g, store) = tiny(false, 4);
        let (mix, _) = g.mixture_probability(&store, &[0.1; 5], 0, &sym_table());
        assert!(mix.copy_mass.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn shared_shift_leaves_mixture_unchanged() {
        let a = mix_scores(&[0.3, -1.0, 2.0, 0.1], &[0, 2], &[1.5, -0.7]);
        let b = mix_scores(&[10.3, 9.0, 12.0, 10.1], &[0, 2], &[11.5, 9.3]);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_forced_stop() {
        let (g, mut store) = tiny(true, 4);
        let gen = g.slot(GeneratorSlot::Generate);
        store.value_mut(gen).fill(0.0);
        // h_t = o ⊙ tanh(C) is bounded; a huge STOP row with positive h wins
        let stop = g.config().stop_id();
        let ids: Vec<SlotId> = (0..4).flat_map(|k| [g.lstm().weight_slot(k), g.lstm().bias_slot(k)]).collect();
        zero_all(&mut store, &ids);
        store.value_mut(g.lstm().bias_slot(2)).fill(1.0);
        store.value_mut(gen).row_mut(stop).fill(100.0);
        let path = g.decode(&store, &[1, 2, 3], &ComplicationTable::empty(4), 8).unwrap();
        assert_eq!(path.codes, vec![stop]);
        assert_eq!(path.valid_len, 0);
        assert!(path.valid_codes().is_empty());
    }

    #[test]
    fn decode_truncates_at_max_len() {
        let (g, mut store) = tiny(true, 4);
        let gen = g.slot(GeneratorSlot::Generate);
        let ids: Vec<SlotId> = (0..4).flat_map(|k| [g.lstm().weight_slot(k), g.lstm().bias_slot(k)]).collect();
        zero_all(&mut store, &ids);
        store.value_mut(g.lstm().bias_slot(2)).fill(1.0);
        store.value_mut(gen).fill(0.0);
        store.value_mut(gen).row_mut(2).fill(100.0);
        let path = g.decode(&store, &[1, 2, 3], &ComplicationTable::empty(4), 1).unwrap();
        assert_eq!(path.codes, vec![2]);
        assert_eq!(path.valid_len, 1);
    }

    #[test]
    fn decode_never_repeats_and_stops() {
        for seed in 0..20 {
            let (g, store) = tiny(true, seed);
            let path = g.decode(&store, &[0, 1, 2, 3, 4], &sym_table(), 6).unwrap();
            let valid = path.valid_codes();
            let mut dedup = valid.to_vec();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), valid.len());
            assert!(path.codes.len() <= 6);
            assert!(path.codes.len() == path.valid_len || path.codes.len() == path.valid_len + 1);
            assert!(!valid.contains(&g.config().unk_id()));
        }
    }

    #[test]
    fn joint_gradient_check_three_tokens_four_codes() {
        for copy in [true, false] {
            let (g, mut store) = tiny(copy, 21);
            let table = sym_table();
            let tokens = [2, 5, 1];
            let plan = Unroll { min_steps: 3, max_len: 3 };
            let trace = g.forward(&store, &tokens, &table, Dropout::Off, plan, None).unwrap();
            let inputs = trace.inputs();
            let targets: StepTargets = vec![vec![(0, 1.0)], vec![(1, 1.0), (3, -0.4)], vec![(4, 0.7)]];
            g.backward(&mut store, &trace, &targets);
            let f = |st: &ParamStore| {
                let tr = g.forward(st, &tokens, &table, Dropout::Off, plan, Some(&inputs)).unwrap();
                Generator::targets_loss(&tr, &targets)
            };
            let r = finite_diff_check(f, &store, 1e-6, 400, 2);
            assert!(r.max_relative_error < 1e-4, "copy={copy}: {r:?}");
        }
    }
}
