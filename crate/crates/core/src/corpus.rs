//! EHR corpora: synthesis with planted complication pairs, top-k label
//! filtering, seeded splits, odds-ratio complication tables, and the
//! line-oriented file formats the CLI reads and writes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

/// One EHR: token ids plus its orderless gold code set (kept sorted ascending).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EhrDocument {
    pub tokens: Vec<usize>,
    #[serde(rename = "codes")]
    pub gold_codes: Vec<usize>,
}

impl EhrDocument {
    pub fn new(tokens: Vec<usize>, codes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let gold_codes: Vec<usize> = codes.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let doc = EhrDocument { tokens, gold_codes };
        doc.check_shape()?;
        Ok(doc)
    }

    fn check_shape(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Data("document has no tokens".into()));
        }
        if self.gold_codes.is_empty() {
            return Err(Error::Data("document has no gold codes".into()));
        }
        if self.gold_codes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("gold codes must be unique".into()));
        }
        Ok(())
    }

    pub fn validate(&self, vocab_size: usize, num_codes: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Dictionary(format!("token id {t} >= vocabulary size {vocab_size}")));
        }
        if let Some(&c) = self.gold_codes.iter().find(|&&c| c >= num_codes) {
            return Err(Error::Dictionary(format!("code id {c} >= code count {num_codes}")));
        }
        Ok(())
    }

    pub fn has_code(&self, code: usize) -> bool {
        self.gold_codes.binary_search(&code).is_ok()
    }
}

/// id ↔ label table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dictionary {
    labels: Vec<String>,
    lookup: BTreeMap<String, usize>,
}

impl Dictionary {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut lookup = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            if lookup.insert(l.clone(), i).is_some() {
                return Err(Error::Dictionary(format!("duplicate label `{l}`")));
            }
        }
        Ok(Dictionary { labels, lookup })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.lookup.get(label).copied()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for l in &self.labels {
            writeln!(w, "{l}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let labels = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Dictionary::new(labels)
    }
}

pub type TokenDictionary = Dictionary;

pub const STOP_LABEL: &str = "<STOP>";
pub const UNK_LABEL: &str = "<UNK>";

/// The code vocabulary: real codes `0..n`, then STOP (`n`) and UNK (`n + 1`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeDictionary {
    dict: Dictionary,
}

impl CodeDictionary {
    pub fn new(mut real_codes: Vec<String>) -> Result<Self> {
        if real_codes.iter().any(|c| c == STOP_LABEL || c == UNK_LABEL) {
            return Err(Error::Dictionary("reserved label used as a code".into()));
        }
        real_codes.push(STOP_LABEL.into());
        real_codes.push(UNK_LABEL.into());
        Ok(CodeDictionary {
            dict: Dictionary::new(real_codes)?,
        })
    }

    pub fn numbered(n: usize) -> Self {
        CodeDictionary::new((0..n).map(|i| format!("C{i:03}")).collect()).expect("distinct labels")
    }

    /// Number of real codes.
    pub fn num_codes(&self) -> usize {
        self.dict.len() - 2
    }

    /// Real codes plus STOP and UNK.
    pub fn output_size(&self) -> usize {
        self.dict.len()
    }

    pub fn stop_id(&self) -> usize {
        self.num_codes()
    }

    pub fn unk_id(&self) -> usize {
        self.num_codes() + 1
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.dict.label(id)
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.dict.id(label)
    }

    /// Writes the full table, STOP and UNK included.
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        self.dict.write(w)
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let d = Dictionary::read(r)?;
        let n = d.len();
        if n < 2 || d.label(n - 2) != Some(STOP_LABEL) || d.label(n - 1) != Some(UNK_LABEL) {
            return Err(Error::Dictionary("code dictionary must end with <STOP> and <UNK>".into()));
        }
        Ok(CodeDictionary { dict: d })
    }
}

/// Lowercases and strips punctuation, then splits on whitespace.
pub fn normalize_text(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Maps normalised plain text to token ids, adding unseen words to `dict`.
pub fn encode_plain_text(text: &str, dict: &mut Dictionary) -> Vec<usize> {
    normalize_text(text)
        .into_iter()
        .map(|w| match dict.id(&w) {
            Some(id) => id,
            None => {
                let id = dict.labels.len();
                dict.lookup.insert(w.clone(), id);
                dict.labels.push(w);
                id
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub anchor: usize,
    pub complication: usize,
    /// P(complication present | anchor present).
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_docs: usize,
    pub vocab_size: usize,
    pub num_codes: usize,
    pub top_k: usize,
    pub planted: Vec<PlantedPair>,
    /// Inclusive token-count range per document.
    pub doc_len: (usize, usize),
    /// Inclusive range for the number of independently drawn codes per document.
    pub base_codes: (usize, usize),
    /// Reserved topic words per code.
    pub topic_words: usize,
    /// Probability that a token is a topic word of one of the document's codes.
    pub topic_rate: f64,
    /// Relative topic weight of a code present only as a planted complication.
    pub complication_signal: f64,
    /// Exponent of the Zipf prior over base codes.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl CorpusConfig {
    /// A corpus of `num_docs` documents over `num_codes` codes with
    /// `min(5, num_codes / 2)` disjoint planted pairs at 0.9 co-occurrence.
    pub fn desk(num_docs: usize, num_codes: usize, seed: u64) -> Self {
        let pairs = (num_codes / 2).min(5);
        let half = num_codes / 2;
        let planted = (0..pairs)
            .map(|i| PlantedPair {
                anchor: i,
                complication: half + i,
                probability: 0.9,
            })
            .collect();
        let topic_words = 6;
        CorpusConfig {
            num_docs,
            vocab_size: num_codes * topic_words + 200,
            num_codes,
            top_k: num_codes.min(50),
            planted,
            doc_len: (20, 40),
            base_codes: (1, 2),
            topic_words,
            topic_rate: 0.5,
            complication_signal: 0.25,
            zipf_exponent: 0.8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_docs == 0 {
            return fail("num_docs must be positive");
        }
        if self.num_codes == 0 {
            return fail("num_codes must be positive");
        }
        if self.top_k == 0 || self.top_k > self.num_codes {
            return Err(Error::Config(format!(
                "top_k ({}) must be in 1..={} (num_codes)",
                self.top_k, self.num_codes
            )));
        }
        if self.doc_len.0 == 0 || self.doc_len.0 > self.doc_len.1 {
            return fail("doc_len range must be positive and ordered");
        }
        if self.base_codes.0 == 0 || self.base_codes.0 > self.base_codes.1 || self.base_codes.1 > self.num_codes {
            return fail("base_codes range must be positive, ordered and <= num_codes");
        }
        if self.topic_words == 0 || self.num_codes * self.topic_words >= self.vocab_size {
            return fail("vocab_size must exceed num_codes * topic_words (background words are needed)");
        }
        for p in [self.topic_rate, self.complication_signal] {
            if !(0.0..=1.0).contains(&p) {
                return fail("rates must lie in [0, 1]");
            }
        }
        if !(self.zipf_exponent >= 0.0) {
            return fail("zipf_exponent must be >= 0");
        }
        let mut seen = BTreeSet::new();
        for p in &self.planted {
            if !(0.0..=1.0).contains(&p.probability) {
                return fail("planted probabilities must lie in [0, 1]");
            }
            if p.anchor >= self.num_codes || p.complication >= self.num_codes || p.anchor == p.complication {
                return fail("planted pair codes must be distinct valid code ids");
            }
            if !seen.insert(p.anchor) || !seen.insert(p.complication) {
                return fail("planted pairs must use disjoint codes");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<EhrDocument>,
    pub codes: CodeDictionary,
    pub tokens: TokenDictionary,
}

/// Draws a corpus whose tokens come from code-conditioned topic words, with
/// planted pairs forced to co-occur at their configured probability.
pub fn generate_synthetic_corpus(cfg: &CorpusConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, "corpus");
    let n_topic = cfg.num_codes * cfg.topic_words;
    let n_background = cfg.vocab_size - n_topic;

    let zipf: Vec<f64> = (0..cfg.num_codes)
        .map(|c| 1.0 / ((c + 1) as f64).powf(cfg.zipf_exponent))
        .collect();

    let mut documents = Vec::with_capacity(cfg.num_docs);
    for _ in 0..cfg.num_docs {
        let k = rng.gen_range(cfg.base_codes.0..=cfg.base_codes.1);
        let mut base = BTreeSet::new();
        while base.len() < k {
            base.insert(weighted_index(&zipf, &mut rng));
        }

        // code -> topic weight
        let mut present: BTreeMap<usize, f64> = base.iter().map(|&c| (c, 1.0)).collect();
        for p in &cfg.planted {
            if present.contains_key(&p.anchor) {
                if rng.gen::<f64>() < p.probability {
                    present.entry(p.complication).or_insert(cfg.complication_signal);
                } else {
                    present.remove(&p.complication);
                }
            }
        }

        let codes: Vec<usize> = present.keys().copied().collect();
        let weights: Vec<f64> = present.values().copied().collect();
        let len = rng.gen_range(cfg.doc_len.0..=cfg.doc_len.1);
        let mut tokens = Vec::with_capacity(len);
        let total_weight: f64 = weights.iter().sum();
        for _ in 0..len {
            if total_weight > 0.0 && rng.gen::<f64>() < cfg.topic_rate {
                let c = codes[weighted_index(&weights, &mut rng)];
                tokens.push(c * cfg.topic_words + rng.gen_range(0..cfg.topic_words));
            } else {
                tokens.push(n_topic + rng.gen_range(0..n_background));
            }
        }
        documents.push(EhrDocument::new(tokens, codes)?);
    }

    let token_labels = (0..cfg.vocab_size)
        .map(|t| {
            if t < n_topic {
                format!("t{}_{}", t / cfg.topic_words, t % cfg.topic_words)
            } else {
                format!("w{}", t - n_topic)
            }
        })
        .collect();
    Ok(SyntheticCorpus {
        documents: filter_top_k(documents, cfg.top_k),
        codes: CodeDictionary::numbered(cfg.num_codes),
        tokens: Dictionary::new(token_labels)?,
    })
}

fn weighted_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// The `k` most frequent codes by document frequency; ties go to the lower id.
pub fn top_k_codes(documents: &[EhrDocument], k: usize) -> Vec<usize> {
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for d in documents {
        for &c in &d.gold_codes {
            *freq.entry(c).or_default() += 1;
        }
    }
    let mut ranked: Vec<(usize, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = ranked.into_iter().take(k).map(|(c, _)| c).collect();
    keep.sort_unstable();
    keep
}

/// Restricts gold sets to the `k` most frequent codes and drops documents
/// left without any label.
pub fn filter_top_k(documents: Vec<EhrDocument>, k: usize) -> Vec<EhrDocument> {
    let keep: BTreeSet<usize> = top_k_codes(&documents, k).into_iter().collect();
    documents
        .into_iter()
        .filter_map(|mut d| {
            d.gold_codes.retain(|c| keep.contains(c));
            (!d.gold_codes.is_empty()).then_some(d)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: usize,
    pub test: usize,
    pub validation: usize,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio {
            train: 4,
            test: 1,
            validation: 1,
        }
    }
}

/// Document indices of a train/test/validation partition.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Split {
    pub fn select<'a>(documents: &'a [EhrDocument], ids: &[usize]) -> Vec<&'a EhrDocument> {
        ids.iter().map(|&i| &documents[i]).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (name, ids) in [("train", &self.train), ("test", &self.test), ("validation", &self.validation)] {
            write!(w, "{name}")?;
            for i in ids {
                write!(w, " {i}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R, num_documents: usize) -> Result<Self> {
        let mut split = Split::default();
        let mut seen = BTreeSet::new();
        for line in r.lines() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(name) = parts.next() else { continue };
            let target = match name {
                "train" => &mut split.train,
                "test" => &mut split.test,
                "validation" => &mut split.validation,
                other => return Err(Error::Data(format!("unknown split `{other}`"))),
            };
            for p in parts {
                let i: usize = p.parse().map_err(|_| Error::Data(format!("bad split index `{p}`")))?;
                if i >= num_documents || !seen.insert(i) {
                    return Err(Error::Data(format!("split index {i} out of range or repeated")));
                }
                target.push(i);
            }
        }
        if seen.len() != num_documents {
            return Err(Error::Data("split manifest does not cover the corpus".into()));
        }
        Ok(split)
    }
}

/// Seeded shuffle then partition by `ratio`; the remainder goes to train.
pub fn split_dataset(num_documents: usize, ratio: SplitRatio, seed: u64) -> Result<Split> {
    let parts = ratio.train + ratio.test + ratio.validation;
    if ratio.train == 0 || ratio.test == 0 || ratio.validation == 0 {
        return Err(Error::Config("split ratio parts must be positive".into()));
    }
    if num_documents < parts {
        return Err(Error::Config(format!(
            "need at least {parts} documents to split, got {num_documents}"
        )));
    }
    let mut ids: Vec<usize> = (0..num_documents).collect();
    ids.shuffle(&mut seeded_rng(seed, "split"));
    let n_test = num_documents * ratio.test / parts;
    let n_val = num_documents * ratio.validation / parts;
    let validation = ids.split_off(num_documents - n_val);
    let test = ids.split_off(ids.len() - n_test);
    Ok(Split {
        train: ids,
        test,
        validation,
    })
}

/// Document-level 2×2 co-occurrence counts for a code pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Contingency {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl Contingency {
    /// `(n11·n00)/(n10·n01)`, with +0.5 added to every cell when any is zero.
    pub fn odds_ratio(&self) -> f64 {
        let cells = [self.n11, self.n10, self.n01, self.n00];
        let c = if cells.contains(&0) { 0.5 } else { 0.0 };
        let [a, b, d, e] = cells.map(|v| v as f64 + c);
        (a * e) / (b * d)
    }
}

pub const DEFAULT_OR_THRESHOLD: f64 = 2.0;
pub const DEFAULT_MIN_SUPPORT: u64 = 5;

/// Odds-ratio complication pairs and the per-code copy vocabularies derived
/// from them.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplicationTable {
    num_codes: usize,
    pub or_threshold: f64,
    pub min_support: u64,
    pairs: BTreeMap<(usize, usize), f64>,
    vocab: Vec<Vec<usize>>,
}

impl ComplicationTable {
    pub fn empty(num_codes: usize) -> Self {
        ComplicationTable {
            num_codes,
            or_threshold: DEFAULT_OR_THRESHOLD,
            min_support: DEFAULT_MIN_SUPPORT,
            pairs: BTreeMap::new(),
            vocab: vec![Vec::new(); num_codes],
        }
    }

    /// Table from explicit pairs; each pair is stored once with `a < b`.
    pub fn from_pairs(num_codes: usize, pairs: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut t = ComplicationTable::empty(num_codes);
        for (a, b, or) in pairs {
            if a == b || a >= num_codes || b >= num_codes {
                return Err(Error::Data(format!("invalid complication pair ({a}, {b})")));
            }
            t.pairs.insert((a.min(b), a.max(b)), or);
        }
        t.rebuild_vocab();
        Ok(t)
    }

    fn rebuild_vocab(&mut self) {
        self.vocab = vec![Vec::new(); self.num_codes];
        for &(a, b) in self.pairs.keys() {
            self.vocab[a].push(b);
            self.vocab[b].push(a);
        }
        for v in &mut self.vocab {
            v.sort_unstable();
        }
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    /// Copy vocabulary of `code`; empty for STOP, UNK and unknown ids.
    pub fn vocab(&self, code: usize) -> &[usize] {
        self.vocab.get(code).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.pairs.contains_key(&(a.min(b), a.max(b)))
    }

    pub fn odds_ratio(&self, a: usize, b: usize) -> Option<f64> {
        self.pairs.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.pairs.iter().map(|(&(a, b), &or)| (a, b, or))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Fraction of unordered real-code pairs that are complication pairs.
    pub fn pair_density(&self) -> f64 {
        let n = self.num_codes as f64;
        if self.num_codes < 2 {
            return 0.0;
        }
        self.pairs.len() as f64 / (n * (n - 1.0) / 2.0)
    }

    /// Same table with the pair set restricted to codes in `keep`.
    pub fn restricted_to(&self, keep: &BTreeSet<usize>) -> Self {
        let mut t = self.clone();
        t.pairs.retain(|(a, b), _| keep.contains(a) && keep.contains(b));
        t.rebuild_vocab();
        t
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# codes={} or_threshold={} min_support={}",
            self.num_codes, self.or_threshold, self.min_support
        )?;
        for (a, b, or) in self.pairs() {
            writeln!(w, "{a} {b} {or:?}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R, num_codes: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        let (mut tau, mut support) = (DEFAULT_OR_THRESHOLD, DEFAULT_MIN_SUPPORT);
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if let Some(header) = line.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("or_threshold", v)) => tau = v.parse().unwrap_or(tau),
                        Some(("min_support", v)) => support = v.parse().unwrap_or(support),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Data(format!("bad complication line `{line}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            let a = f[0].parse().map_err(|_| bad())?;
            let b = f[1].parse().map_err(|_| bad())?;
            let or = f[2].parse().map_err(|_| bad())?;
            pairs.push((a, b, or));
        }
        let mut t = ComplicationTable::from_pairs(num_codes, pairs)?;
        t.or_threshold = tau;
        t.min_support = support;
        Ok(t)
    }
}

/// 2×2 counts for every code pair `a < b` over `documents`.
pub fn contingency_tables<'a, I>(documents: I, num_codes: usize) -> BTreeMap<(usize, usize), Contingency>
where
    I: IntoIterator<Item = &'a EhrDocument>,
{
    let mut n = 0u64;
    let mut single = vec![0u64; num_codes];
    let mut joint = vec![0u64; num_codes * num_codes];
    for d in documents {
        n += 1;
        let codes: Vec<usize> = d.gold_codes.iter().copied().filter(|&c| c < num_codes).collect();
        for (i, &a) in codes.iter().enumerate() {
            single[a] += 1;
            for &b in &codes[i + 1..] {
                joint[a * num_codes + b] += 1;
            }
        }
    }
    let mut out = BTreeMap::new();
    for a in 0..num_codes {
        for b in a + 1..num_codes {
            let n11 = joint[a * num_codes + b];
            let n10 = single[a] - n11;
            let n01 = single[b] - n11;
            out.insert(
                (a, b),
                Contingency {
                    n11,
                    n10,
                    n01,
                    n00: n - n11 - n10 - n01,
                },
            );
        }
    }
    out
}

/// Keeps every pair with odds ratio ≥ `or_threshold` and joint support
/// ≥ `min_support`.
pub fn build_complication_table<'a, I>(
    train_documents: I,
    num_codes: usize,
    or_threshold: f64,
    min_support: u64,
) -> Result<ComplicationTable>
where
    I: IntoIterator<Item = &'a EhrDocument>,
{
    let tables = contingency_tables(train_documents, num_codes);
    if let Some(t) = tables.values().next() {
        if t.n11 + t.n10 + t.n01 + t.n00 == 0 {
            return Err(Error::Data("complication table needs a non-empty train split".into()));
        }
    }
    let pairs = tables.into_iter().filter_map(|((a, b), t)| {
        let or = t.odds_ratio();
        (t.n11 >= min_support && or >= or_threshold).then_some((a, b, or))
    });
    let mut table = ComplicationTable::from_pairs(num_codes, pairs)?;
    table.or_threshold = or_threshold;
    table.min_support = min_support;
    Ok(table)
}

pub fn write_corpus<W: Write>(documents: &[EhrDocument], mut w: W) -> Result<()> {
    for d in documents {
        serde_json::to_writer(&mut w, d).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<EhrDocument>> {
    let mut docs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: EhrDocument =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("corpus line {}: {e}", i + 1)))?;
        let d = EhrDocument::new(d.tokens, d.gold_codes).map_err(|e| Error::Data(format!("corpus line {}: {e}", i + 1)))?;
        docs.push(d);
    }
    Ok(docs)
}
