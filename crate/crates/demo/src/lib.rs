//! Browser bindings for three small views of the model: the generate/copy
//! mixture head, PLA alignment, and the odds-ratio complication table of a
//! synthetic corpus. Every binding takes plain text and returns JSON.

use crnnet::alignment::{fix_correct_predictions, pla_align, pla_loss};
use crnnet::corpus::{
    build_complication_table, contingency_tables, generate_synthetic_corpus, split_dataset, CorpusConfig, PlantedPair,
    Split, SplitRatio,
};
use crnnet::generator::mix_scores;
use crnnet::metrics::random_complication_rate;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect()
}

fn ids(text: &str) -> Result<Vec<usize>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format!("`{s}` is not a code id")))
        .collect()
}

/// Mixture of generate scores over every id and copy scores over `copy_codes`.
pub fn mixture_json(generate: &str, copy_codes: &str, copy: &str) -> Result<String, String> {
    let generate = numbers(generate)?;
    let codes = ids(copy_codes)?;
    let copy = numbers(copy)?;
    if generate.is_empty() {
        return Err("need at least one generate score".into());
    }
    if codes.len() != copy.len() {
        return Err(format!("{} copy codes but {} copy scores", codes.len(), copy.len()));
    }
    if let Some(c) = codes.iter().find(|&&c| c >= generate.len()) {
        return Err(format!("copy code {c} has no generate score"));
    }
    let m = mix_scores(&generate, &codes, &copy);
    let rows: Vec<Value> = (0..generate.len())
        .map(|i| json!({"id": i, "generate": m.generate_mass[i], "copy": m.copy_mass[i], "total": m.probs[i]}))
        .collect();
    Ok(json!({"rows": rows, "log_z": m.log_z, "sum": m.probs.iter().sum::<f64>()}).to_string())
}

/// PLA alignment of `gold` against step distributions (one row per line).
/// Rows are renormalised so any non-negative weights can be typed in.
pub fn align_json(probs: &str, greedy: &str, gold: &str) -> Result<String, String> {
    let rows: Vec<Vec<f64>> = probs
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(numbers)
        .collect::<Result<_, _>>()?;
    let width = rows.first().map_or(0, Vec::len);
    if width < 2 || rows.iter().any(|r| r.len() != width) {
        return Err("every row needs the same number (at least 2) of entries; the last one is STOP".into());
    }
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            if r.iter().any(|&v| v < 0.0) || !(s > 0.0) {
                Err("weights must be non-negative with a positive row sum".to_string())
            } else {
                Ok(r.iter().map(|v| v / s).collect())
            }
        })
        .collect::<Result<_, _>>()?;
    let stop = width - 1;
    let greedy = ids(greedy)?;
    let mut gold = ids(gold)?;
    gold.sort_unstable();
    gold.dedup();
    if greedy.len() != rows.len() {
        return Err(format!("{} greedy choices for {} steps", greedy.len(), rows.len()));
    }
    if let Some(c) = gold.iter().chain(&greedy).find(|&&c| c >= width) {
        return Err(format!("code {c} is outside the {width} columns"));
    }
    if gold.len() > rows.len() || gold.contains(&stop) {
        return Err("gold codes must be real codes and fit in the steps".into());
    }
    let view: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let pins = fix_correct_predictions(&greedy[..gold.len()], &gold);
    let t = pla_align(&view, &greedy, &gold, gold.len()).map_err(|e| e.to_string())?;
    let steps: Vec<Value> = (0..rows.len())
        .map(|s| {
            let target = t.assignment.get(s).copied().flatten().map(|j| gold[j]);
            json!({
                "step": s + 1,
                "greedy": greedy[s],
                "pinned": pins.get(s).copied().flatten().is_some(),
                "target": target,
                "stop": s == t.first_unassigned_step(),
            })
        })
        .collect();
    Ok(json!({"steps": steps, "loss": pla_loss(&view, &t, stop), "stop_id": stop}).to_string())
}

/// Synthesises a corpus and lists every code pair's odds ratio on its train
/// split, flagging those kept in the complication table.
pub fn corpus_table_json(
    docs: usize,
    codes: usize,
    pairs: usize,
    pair_prob: f64,
    or_threshold: f64,
    min_support: u64,
    seed: u64,
) -> Result<String, String> {
    if docs > 20_000 || codes > 60 {
        return Err("keep the demo corpus to at most 20000 documents and 60 codes".into());
    }
    let mut cfg = CorpusConfig::desk(docs, codes, seed);
    if 2 * pairs > codes {
        return Err(format!("{pairs} disjoint pairs need at least {} codes", 2 * pairs));
    }
    cfg.planted = (0..pairs)
        .map(|i| PlantedPair {
            anchor: i,
            complication: codes / 2 + i,
            probability: pair_prob,
        })
        .collect();
    let corpus = generate_synthetic_corpus(&cfg).map_err(|e| e.to_string())?;
    let split = split_dataset(corpus.documents.len(), SplitRatio::default(), seed).map_err(|e| e.to_string())?;
    let train = Split::select(&corpus.documents, &split.train);
    let table = build_complication_table(train.iter().copied(), codes, or_threshold, min_support)
        .map_err(|e| e.to_string())?;
    let planted: Vec<(usize, usize)> = cfg.planted.iter().map(|p| (p.anchor, p.complication)).collect();
    let mut rows: Vec<Value> = contingency_tables(train.iter().copied(), codes)
        .into_iter()
        .filter(|(_, t)| t.n11 > 0)
        .map(|((a, b), t)| {
            json!({
                "a": a,
                "b": b,
                "n11": t.n11,
                "odds_ratio": t.odds_ratio(),
                "kept": table.contains(a, b),
                "planted": planted.contains(&(a, b)),
            })
        })
        .collect();
    rows.sort_by(|x, y| y["odds_ratio"].as_f64().unwrap_or(0.0).total_cmp(&x["odds_ratio"].as_f64().unwrap_or(0.0)));
    Ok(json!({
        "documents": corpus.documents.len(),
        "train": split.train.len(),
        "kept": table.len(),
        "base_rate": random_complication_rate(&table),
        "pairs": rows,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn mixture(generate: &str, copy_codes: &str, copy: &str) -> Result<String, JsError> {
    mixture_json(generate, copy_codes, copy).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn align(probs: &str, greedy: &str, gold: &str) -> Result<String, JsError> {
    align_json(probs, greedy, gold).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn corpus_table(
    docs: usize,
    codes: usize,
    pairs: usize,
    pair_prob: f64,
    or_threshold: f64,
    min_support: u32,
    seed: u32,
) -> Result<String, JsError> {
    corpus_table_json(docs, codes, pairs, pair_prob, or_threshold, min_support.into(), seed.into())
        .map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn mixture_counting_case() {
        let v = parse(&mixture_json("0 0 0 0 0", "1, 3", "0 0").unwrap());
        assert_eq!(v["rows"][1]["total"], 2.0 / 7.0);
        assert_eq!(v["rows"][0]["total"], 1.0 / 7.0);
        assert_eq!(v["rows"][0]["copy"], 0.0);
        assert!(mixture_json("0 0", "5", "1").is_err());
        assert!(mixture_json("0 0", "1", "").is_err());
    }

    #[test]
    fn alignment_pins_and_stop() {
        // columns: codes 0..3, STOP last
        let probs = "0.7 0.1 0.1 0.1\n0.1 0.1 0.7 0.1\n0.1 0.1 0.1 0.7";
        let v = parse(&align_json(probs, "0 2 3", "0 1").unwrap());
        let steps = v["steps"].as_array().unwrap();
        assert_eq!(steps[0]["pinned"], true);
        assert_eq!(steps[0]["target"], 0);
        assert_eq!(steps[1]["target"], 1);
        assert_eq!(steps[2]["stop"], true);
        let want = -(0.7f64.ln() + 0.1f64.ln() + 0.7f64.ln());
        assert!((v["loss"].as_f64().unwrap() - want).abs() < 1e-12);
        assert!(align_json(probs, "0 2", "0").is_err());
        assert!(align_json("1 -1\n1 1", "0 0", "0").is_err());
    }

    #[test]
    fn corpus_table_flags_planted_pairs() {
        let v = parse(&corpus_table_json(600, 10, 2, 0.9, 2.0, 5, 3).unwrap());
        let planted: Vec<&Value> = v["pairs"].as_array().unwrap().iter().filter(|p| p["planted"] == true).collect();
        assert_eq!(planted.len(), 2);
        assert!(planted.iter().all(|p| p["kept"] == true));
        assert!(corpus_table_json(100, 4, 3, 0.9, 2.0, 5, 1).is_err());
    }
}
