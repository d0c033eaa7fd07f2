//! Evaluation of decoded code sets: Jaccard, complication ratio, micro/macro
//! precision/recall/F1 and AUC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::ComplicationTable;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc: usize,
    pub pred: Vec<usize>,
    pub gold: Vec<usize>,
    /// Confidence per code; absent codes score 0.
    #[serde(default)]
    pub scores: BTreeMap<usize, f64>,
}

impl PredictionRecord {
    pub fn new(doc: usize, pred: Vec<usize>, gold: Vec<usize>, scores: BTreeMap<usize, f64>) -> Self {
        PredictionRecord {
            doc,
            pred: dedup(pred),
            gold: dedup(gold),
            scores,
        }
    }

    pub fn score(&self, code: usize) -> f64 {
        self.scores.get(&code).copied().unwrap_or(0.0)
    }
}

fn dedup(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

fn set(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

/// Mean of `|Y ∩ Ŷ| / |Y ∪ Ŷ|`; a record with both sets empty counts as 1.
pub fn jaccard(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Domain("jaccard of zero records".into()));
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            let (p, g) = (set(&r.pred), set(&r.gold));
            let union = p.union(&g).count();
            if union == 0 {
                1.0
            } else {
                p.intersection(&g).count() as f64 / union as f64
            }
        })
        .sum();
    Ok(total / records.len() as f64)
}

/// Fraction of predicted pairs that are complication pairs, averaged over
/// records with at least two predictions. `None` when no record qualifies.
pub fn complication_ratio(records: &[PredictionRecord], table: &ComplicationTable) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in records {
        let p: Vec<usize> = set(&r.pred).into_iter().collect();
        if p.len() < 2 {
            continue;
        }
        let mut hits = 0usize;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                hits += usize::from(table.contains(p[i], p[j]));
            }
        }
        sum += hits as f64 / (p.len() * (p.len() - 1) / 2) as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Expected complication ratio of `k` codes drawn uniformly without
/// replacement from `num_codes`: the table's pair density.
pub fn random_complication_rate(table: &ComplicationTable) -> f64 {
    table.pair_density()
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MicroMacro {
    pub micro: Prf,
    pub macro_: Prf,
}

/// Micro values pool TP/FP/FN over every (record, label) decision; macro
/// values average per-label P/R/F1 over labels seen in any gold or predicted
/// set.
pub fn micro_macro_prf(records: &[PredictionRecord]) -> MicroMacro {
    let mut per_label: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        let (p, g) = (set(&r.pred), set(&r.gold));
        for &c in p.union(&g) {
            let e = per_label.entry(c).or_default();
            match (p.contains(&c), g.contains(&c)) {
                (true, true) => e.0 += 1,
                (true, false) => e.1 += 1,
                (false, true) => e.2 += 1,
                (false, false) => {}
            }
        }
    }
    let (tp, fp, fn_) = per_label
        .values()
        .fold((0, 0, 0), |a, v| (a.0 + v.0, a.1 + v.1, a.2 + v.2));
    let micro = Prf::from_counts(tp, fp, fn_);
    let mut macro_ = Prf::default();
    if !per_label.is_empty() {
        let n = per_label.len() as f64;
        for &(tp, fp, fn_) in per_label.values() {
            let l = Prf::from_counts(tp, fp, fn_);
            macro_.precision += l.precision / n;
            macro_.recall += l.recall / n;
            macro_.f1 += l.f1 / n;
        }
    }
    MicroMacro { micro, macro_ }
}

/// Normalised Mann–Whitney U of `(score, relevant)` pairs, ties counted half.
/// `None` without at least one positive and one negative.
pub fn mann_whitney_auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * sorted[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Auc {
    pub micro: Option<f64>,
    pub macro_: Option<f64>,
}

/// AUC over the label universe `0..num_codes`.
pub fn auc(records: &[PredictionRecord], num_codes: usize) -> Auc {
    let mut pooled = Vec::with_capacity(records.len() * num_codes);
    let mut per_label = Vec::new();
    for c in 0..num_codes {
        let pairs: Vec<(f64, bool)> = records.iter().map(|r| (r.score(c), r.gold.contains(&c))).collect();
        if let Some(a) = mann_whitney_auc(&pairs) {
            per_label.push(a);
        }
        pooled.extend(pairs);
    }
    Auc {
        micro: mann_whitney_auc(&pooled),
        macro_: (!per_label.is_empty()).then(|| per_label.iter().sum::<f64>() / per_label.len() as f64),
    }
}

/// The ten reported columns.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub jaccard: f64,
    pub complication: Option<f64>,
    pub prf: MicroMacro,
    pub auc: Auc,
    /// Records entering the complication mean.
    pub complication_support: usize,
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "jaccard",
    "complication",
    "precision_micro",
    "precision_macro",
    "recall_micro",
    "recall_macro",
    "f1_micro",
    "f1_macro",
    "auc_micro",
    "auc_macro",
];

impl MetricReport {
    pub fn compute(records: &[PredictionRecord], table: &ComplicationTable, num_codes: usize) -> Result<Self> {
        Ok(MetricReport {
            jaccard: jaccard(records)?,
            complication: complication_ratio(records, table),
            prf: micro_macro_prf(records),
            auc: auc(records, num_codes),
            complication_support: records.iter().filter(|r| set(&r.pred).len() >= 2).count(),
        })
    }

    pub fn values(&self) -> [Option<f64>; 10] {
        let p = &self.prf;
        [
            Some(self.jaccard),
            self.complication,
            Some(p.micro.precision),
            Some(p.macro_.precision),
            Some(p.micro.recall),
            Some(p.macro_.recall),
            Some(p.micro.f1),
            Some(p.macro_.f1),
            self.auc.micro,
            self.auc.macro_,
        ]
    }

    /// Flat `key value` table; absent values print as `NA`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# complication averages the {} records with at least 2 predicted codes",
            self.complication_support
        );
        for (k, v) in REPORT_COLUMNS.iter().zip(self.values()) {
            match v {
                Some(v) => writeln!(out, "{k:<16} {v:.6}"),
                None => writeln!(out, "{k:<16} NA"),
            }
            .expect("writing to a String");
        }
        out
    }
}

/// Parses a [`MetricReport::to_table`] table back into `key → value`.
pub fn parse_report(text: &str) -> Result<BTreeMap<String, Option<f64>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(k), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Data(format!("report line {}: expected `key value`", i + 1)));
        };
        let v = if v == "NA" {
            None
        } else {
            Some(v.parse::<f64>().map_err(|e| Error::Data(format!("report line {}: {e}", i + 1)))?)
        };
        out.insert(k.to_string(), v);
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("prediction line {}: {e}", i + 1)))?;
        if rec.scores.values().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Data(format!("prediction line {}: score outside [0, 1]", i + 1)));
        }
        out.push(PredictionRecord::new(rec.doc, rec.pred, rec.gold, rec.scores));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn rec(pred: &[usize], gold: &[usize]) -> PredictionRecord {
        PredictionRecord::new(0, pred.to_vec(), gold.to_vec(), BTreeMap::new())
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[rec(&[1, 2], &[1, 2])]).unwrap(), 1.0);
        assert_eq!(jaccard(&[rec(&[1], &[2])]).unwrap(), 0.0);
        assert_eq!(jaccard(&[rec(&[0, 1], &[1, 2])]).unwrap(), 1.0 / 3.0);
        assert_eq!(jaccard(&[rec(&[], &[])]).unwrap(), 1.0);
        assert!(jaccard(&[]).is_err());
    }

    #[test]
    fn complication_examples() {
        let table = ComplicationTable::from_pairs(6, [(0, 3, 4.0)]).unwrap();
        assert_eq!(complication_ratio(&[rec(&[0, 3], &[])], &table), Some(1.0));
        assert_eq!(complication_ratio(&[rec(&[0, 1, 3], &[])], &table), Some(1.0 / 3.0));
        assert_eq!(complication_ratio(&[rec(&[0], &[]), rec(&[], &[])], &table), None);
        // single-prediction records are excluded, not averaged in as zero
        assert_eq!(complication_ratio(&[rec(&[0, 3], &[]), rec(&[1], &[])], &table), Some(1.0));
    }

    #[test]
    fn prf_examples() {
        let perfect = micro_macro_prf(&[rec(&[0, 1], &[0, 1]), rec(&[2], &[2])]);
        for v in [perfect.micro, perfect.macro_] {
            assert_eq!((v.precision, v.recall, v.f1), (1.0, 1.0, 1.0));
        }
        let empty = micro_macro_prf(&[rec(&[], &[0, 1]), rec(&[], &[2])]);
        for v in [empty.micro, empty.macro_] {
            assert_eq!((v.precision, v.recall, v.f1), (0.0, 0.0, 0.0));
        }
        // doc 1: pred {0,1} gold {0,2}; doc 2: pred {2} gold {1,2}
        // label 0: tp1; label 1: fp1 fn1; label 2: tp1 fn1
        let m = micro_macro_prf(&[rec(&[0, 1], &[0, 2]), rec(&[2], &[1, 2])]);
        assert_eq!(m.micro.precision, 2.0 / 3.0);
        assert_eq!(m.micro.recall, 2.0 / 4.0);
        assert!((m.macro_.precision - (1.0 + 0.0 + 1.0) / 3.0).abs() < 1e-15);
        assert!((m.macro_.recall - (1.0 + 0.0 + 0.5) / 3.0).abs() < 1e-15);
        assert!((m.macro_.f1 - (1.0 + 0.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    }

    fn pairwise_auc(pairs: &[(f64, bool)]) -> Option<f64> {
        let pos: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
        let neg: Vec<f64> = pairs.iter().filter(|p| !p.1).map(|p| p.0).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut credit = 0.0;
        for p in &pos {
            for n in &neg {
                credit += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        Some(credit / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(mann_whitney_auc(&[(0.9, true), (0.8, true), (0.1, false)]), Some(1.0));
        assert_eq!(mann_whitney_auc(&[(0.5, true), (0.5, false), (0.5, false)]), Some(0.5));
        assert_eq!(mann_whitney_auc(&[(0.5, true)]), None);
        let toy = [(0.3, true), (0.3, false), (0.7, true), (0.1, false), (0.7, false), (0.9, true)];
        assert_eq!(mann_whitney_auc(&toy), pairwise_auc(&toy));
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = seeded_rng(3, "auc");
        for _ in 0..200 {
            let n = rng.gen_range(2..=14);
            let pairs: Vec<(f64, bool)> = (0..n).map(|_| (rng.gen_range(0..5) as f64 / 4.0, rng.gen_bool(0.4))).collect();
            let (a, b) = (mann_whitney_auc(&pairs), pairwise_auc(&pairs));
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn report_has_ten_columns_and_round_trips() {
        let mut scores = BTreeMap::new();
        scores.insert(0, 0.9);
        let recs = vec![PredictionRecord::new(0, vec![0], vec![0], scores), rec(&[], &[1])];
        let table = ComplicationTable::empty(3);
        let report = MetricReport::compute(&recs, &table, 3).unwrap();
        let text = report.to_table();
        let parsed = parse_report(&text).unwrap();
        assert_eq!(parsed.len(), 10);
        assert_eq!(parsed.keys().cloned().collect::<BTreeSet<_>>(), REPORT_COLUMNS.iter().map(|s| s.to_string()).collect());
        assert_eq!(parsed["complication"], None);
        assert!(text.contains("complication     NA"));
    }

    #[test]
    fn prediction_file_round_trip() {
        let mut scores = BTreeMap::new();
        scores.insert(2, 0.25);
        let recs = vec![PredictionRecord::new(4, vec![2, 0], vec![1], scores)];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &recs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "{\"doc\":4,\"pred\":[0,2],\"gold\":[1],\"scores\":{\"2\":0.25}}\n");
        assert_eq!(read_predictions(&buf[..]).unwrap(), recs);
        assert!(matches!(read_predictions(&b"{\"doc\":1}\n"[..]), Err(Error::Data(_))));
    }

    fn arb_records() -> impl Strategy<Value = Vec<PredictionRecord>> {
        let codes = || proptest::collection::vec(0usize..6, 0..4);
        proptest::collection::vec((codes(), codes()), 1..8)
            .prop_map(|v| v.into_iter().enumerate().map(|(i, (p, g))| PredictionRecord::new(i, p, g, BTreeMap::new())).collect())
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval_and_f1_identity(recs in arb_records()) {
            let table = ComplicationTable::from_pairs(6, [(0, 3, 3.0), (1, 4, 3.0)]).unwrap();
            let j = jaccard(&recs).unwrap();
            prop_assert!((0.0..=1.0).contains(&j));
            if let Some(c) = complication_ratio(&recs, &table) {
                prop_assert!((0.0..=1.0).contains(&c));
            }
            let m = micro_macro_prf(&recs);
            for v in [m.micro.precision, m.micro.recall, m.micro.f1, m.macro_.precision, m.macro_.recall, m.macro_.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((m.micro.f1 - harmonic(m.micro.precision, m.micro.recall)).abs() <= 1e-12);
        }

        #[test]
        fn order_and_relabel_invariance(recs in arb_records(), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
            let table = ComplicationTable::from_pairs(6, [(0, 3, 3.0), (1, 4, 3.0)]).unwrap();
            let mut rev = recs.clone();
            rev.reverse();
            prop_assert!((jaccard(&recs).unwrap() - jaccard(&rev).unwrap()).abs() < 1e-12);
            let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
            let moved: Vec<PredictionRecord> = recs
                .iter()
                .map(|r| PredictionRecord::new(r.doc, relabel(&r.pred), relabel(&r.gold), BTreeMap::new()))
                .collect();
            let moved_table = ComplicationTable::from_pairs(6, [(perm[0], perm[3], 3.0), (perm[1], perm[4], 3.0)]).unwrap();
            prop_assert!((jaccard(&recs).unwrap() - jaccard(&moved).unwrap()).abs() < 1e-12);
            let (a, b) = (complication_ratio(&recs, &table), complication_ratio(&moved, &moved_table));
            prop_assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
